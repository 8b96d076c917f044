"""The three-part model: image autoencoder, text encoder, conditional U-Net.

The autoencoder (4x downsampling, KL-regularized, 4 latent channels) and the
hash-based text encoder are frozen after initialization/pretraining; only the
denoiser trains.  A ModelBundle ties the three together with the freeze
flags, the latent scale, and checkpoint (de)serialization.

Checkpoint layout: a directory holding header.json (architecture config,
freeze flags, latent scale, seed, step, and the shape table) plus one flat
little-endian float32 .bin file per named parameter.
"""

import dataclasses
import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Tensor
from .nn.autograd import concat, sigmoid, silu

DOWNSAMPLE_FACTOR = 4
CHECKPOINT_FORMAT = 1


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite; carries diagnostics."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    latent_channels: int = 4
    vae_base: int = 32
    unet_base: int = 32
    text_dim: int = 64
    text_tokens: int = 16
    text_vocab: int = 1024
    temb_dim: int = 64
    groups: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % DOWNSAMPLE_FACTOR:
            raise ModelError(
                f"image_size {self.image_size} not divisible by "
                f"{DOWNSAMPLE_FACTOR}")
        if self.temb_dim % 2:
            raise ModelError("temb_dim must be even")
        for name in ("latent_channels", "vae_base", "unet_base", "text_dim",
                     "text_tokens", "text_vocab", "groups"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def latent_size(self):
        return self.image_size // DOWNSAMPLE_FACTOR


class VAEBlock(nn.Module):
    """Residual double conv without timestep conditioning."""

    def __init__(self, cin, cout, rng, groups, dtype):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin, dtype)
        self.conv1 = nn.Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout, dtype)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.skip = nn.Conv2d(cin, cout, 1, rng, pad=0, dtype=dtype) \
            if cin != cout else None

    def __call__(self, x):
        h = self.conv1(nn.silu(self.norm1(x)))
        h = self.conv2(nn.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Autoencoder(nn.Module):
    """Convolutional VAE with two stride-2 stages (4x downsampling)."""

    def __init__(self, cfg, rng):
        super().__init__()
        b, zc, g, dt = cfg.vae_base, cfg.latent_channels, cfg.groups, \
            cfg.np_dtype
        # encoder: H -> H/2 -> H/4
        self.enc_in = nn.Conv2d(3, b, 3, rng, stride=2, pad=1, dtype=dt)
        self.enc_block1 = VAEBlock(b, b, rng, g, dt)
        self.enc_down = nn.Conv2d(b, 2 * b, 3, rng, stride=2, pad=1, dtype=dt)
        self.enc_block2 = VAEBlock(2 * b, 2 * b, rng, g, dt)
        self.enc_norm = nn.GroupNorm(min(g, 2 * b), 2 * b, dt)
        self.enc_out = nn.Conv2d(2 * b, 2 * zc, 3, rng, dtype=dt)
        # decoder mirrors it
        self.dec_in = nn.Conv2d(zc, 2 * b, 3, rng, dtype=dt)
        self.dec_block1 = VAEBlock(2 * b, 2 * b, rng, g, dt)
        self.dec_up1 = nn.Upsample(2 * b, b, rng, dtype=dt)
        self.dec_block2 = VAEBlock(b, b, rng, g, dt)
        self.dec_up2 = nn.Upsample(b, b, rng, dtype=dt)
        self.dec_norm = nn.GroupNorm(min(g, b), b, dt)
        self.dec_out = nn.Conv2d(b, 3, 3, rng, dtype=dt)

    def encode(self, x):
        """x: (B, 3, H, W) in [-1, 1] -> (mean, logvar), each (B, zc, H/4, W/4)."""
        h = self.enc_block1(self.enc_in(x))
        h = self.enc_block2(self.enc_down(h))
        moments = self.enc_out(nn.silu(self.enc_norm(h)))
        zc = moments.shape[1] // 2
        return moments[:, :zc], moments[:, zc:]

    def decode(self, z):
        """z: (B, zc, h, w) -> image (B, 3, H, W) in [0, 1] (sigmoid-squashed)."""
        h = self.dec_block1(self.dec_in(z))
        h = self.dec_block2(self.dec_up1(h))
        h = self.dec_up2(h)
        return sigmoid(self.dec_out(nn.silu(self.dec_norm(h))))


class HashTextEncoder:
    """Frozen tokenizer-free text encoder.

    Lowercased whitespace tokens are hashed (blake2b) into a seeded random
    embedding table; sequences are truncated/padded to a fixed length with a
    reserved pad row.  Deterministic by construction, never trained.
    """

    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.seed, 0x7E47])))
        # last row is the pad embedding
        self.table = rng.standard_normal(
            (cfg.text_vocab + 1, cfg.text_dim)).astype(cfg.np_dtype)

    @property
    def pad_index(self):
        return self.cfg.text_vocab

    def token_ids(self, prompt):
        tokens = str(prompt).lower().split()
        if not tokens:
            raise ModelError("empty prompt")
        ids = []
        for tok in tokens[:self.cfg.text_tokens]:
            digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8)
            ids.append(int.from_bytes(digest.digest(), "little")
                       % self.cfg.text_vocab)
        while len(ids) < self.cfg.text_tokens:
            ids.append(self.pad_index)
        return np.asarray(ids, dtype=np.int64)

    def encode(self, prompt):
        """prompt -> (text_tokens, text_dim) embedding array."""
        return self.table[self.token_ids(prompt)]

    def encode_batch(self, prompts):
        return np.stack([self.encode(p) for p in prompts])

    def state_dict(self):
        return {"table": self.table}

    def load_state_dict(self, state):
        arr = np.asarray(state["table"], dtype=self.cfg.np_dtype)
        if arr.shape != self.table.shape:
            raise ModelError(f"text table shape {arr.shape} != "
                             f"{self.table.shape}")
        self.table = arr.copy()


class CondUNet(nn.Module):
    """Conditional denoiser over [z_noisy || z_cond] (8 input channels).

    Two resolution levels (widths unet_base, 2*unet_base), sinusoidal
    timestep embedding injected in every ResBlock, single-head
    cross-attention to the text embedding at the bottleneck.  The final conv
    is zero-initialized so an untrained model predicts zero noise.

    The learned null-text embedding used by conditioning dropout lives here
    (``null_text``) so the text encoder itself stays frozen.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        b, zc, g, dt = cfg.unet_base, cfg.latent_channels, cfg.groups, \
            cfg.np_dtype
        td = cfg.temb_dim
        self.temb_lin1 = nn.Linear(td, td, rng, dtype=dt)
        self.temb_lin2 = nn.Linear(td, td, rng, dtype=dt)
        self.conv_in = nn.Conv2d(2 * zc, b, 3, rng, dtype=dt)
        self.down_block = nn.ResBlock(b, b, td, rng, groups=g, dtype=dt)
        self.downsample = nn.Downsample(b, 2 * b, rng, dtype=dt)
        self.mid_block1 = nn.ResBlock(2 * b, 2 * b, td, rng, groups=g, dtype=dt)
        self.attn = nn.CrossAttention(2 * b, cfg.text_dim, rng, dtype=dt)
        self.mid_block2 = nn.ResBlock(2 * b, 2 * b, td, rng, groups=g, dtype=dt)
        self.upsample = nn.Upsample(2 * b, b, rng, dtype=dt)
        self.up_block = nn.ResBlock(2 * b, b, td, rng, groups=g, dtype=dt)
        self.norm_out = nn.GroupNorm(min(g, b), b, dt)
        self.conv_out = nn.Conv2d(b, zc, 3, rng, dtype=dt, init_scale=0.0)
        self.null_text = Tensor.param(
            rng.standard_normal(cfg.text_dim).astype(dt))

    def null_context(self, batch):
        """The learned null embedding tiled to (batch, tokens, dim)."""
        row = self.null_text.reshape(1, 1, self.cfg.text_dim)
        tiled = concat([row] * self.cfg.text_tokens, axis=1)
        return concat([tiled] * batch, axis=0) if batch > 1 else tiled

    def __call__(self, z_noisy, z_cond, t, text):
        zs = self.cfg.latent_size
        if z_noisy.shape != z_cond.shape:
            raise ModelError(f"latent shape mismatch: {z_noisy.shape} vs "
                             f"{z_cond.shape}")
        if z_noisy.shape[1:] != (self.cfg.latent_channels, zs, zs):
            raise ModelError(f"bad latent shape {z_noisy.shape}, expected "
                             f"(B, {self.cfg.latent_channels}, {zs}, {zs})")
        t = np.atleast_1d(np.asarray(t))
        if t.shape != (z_noisy.shape[0],):
            raise ModelError(f"timesteps shape {t.shape} != batch "
                             f"({z_noisy.shape[0]},)")
        if (t < 0).any():
            raise ModelError("negative timestep")
        temb = nn.timestep_embedding(t, self.cfg.temb_dim,
                                     dtype=self.cfg.np_dtype)
        temb = self.temb_lin2(silu(self.temb_lin1(temb)))
        x = concat([z_noisy, z_cond], axis=1)
        h0 = self.conv_in(x)
        h1 = self.down_block(h0, temb)
        h2 = self.downsample(h1)
        m = self.mid_block1(h2, temb)
        m = self.attn(m, text)
        m = self.mid_block2(m, temb)
        u = self.upsample(m)
        u = concat([u, h1], axis=1)
        u = self.up_block(u, temb)
        return self.conv_out(silu(self.norm_out(u)))


FREEZE_DEFAULT = {"autoencoder": True, "text_encoder": True, "denoiser": False}


@dataclass
class ModelBundle:
    config: ModelConfig
    autoencoder: Autoencoder
    text_encoder: HashTextEncoder
    denoiser: CondUNet
    latent_scale: float = 1.0
    freeze_flags: dict = field(default_factory=lambda: dict(FREEZE_DEFAULT))
    seed: int = 0
    step: int = 0

    # -- numpy-facing inference helpers ---------------------------------
    def _to_model_input(self, images):
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ModelError(f"expected (N, H, W, 3) images, got {arr.shape}")
        if arr.shape[1] % DOWNSAMPLE_FACTOR or arr.shape[2] % DOWNSAMPLE_FACTOR:
            raise ModelError(
                f"image dims {arr.shape[1]}x{arr.shape[2]} not divisible "
                f"by {DOWNSAMPLE_FACTOR}")
        x = (arr * 2.0 - 1.0).transpose(0, 3, 1, 2)
        return x.astype(self.config.np_dtype), single

    def encode_image(self, images):
        """Pixel image(s) [0,1] -> scaled posterior-mean latent(s)."""
        x, single = self._to_model_input(images)
        mean, _ = self.autoencoder.encode(Tensor(x))
        z = mean.data * self.config.np_dtype.type(self.latent_scale)
        return z[0] if single else z

    def decode_latent(self, z):
        """Scaled latent(s) -> pixel image(s) in [0,1], shape (H, W, 3)."""
        z = np.asarray(z, dtype=self.config.np_dtype)
        single = z.ndim == 3
        if single:
            z = z[None]
        zs = self.config.latent_size
        if z.shape[1:] != (self.config.latent_channels, zs, zs):
            raise ModelError(f"bad latent shape {z.shape}")
        out = self.autoencoder.decode(
            Tensor(z / self.config.np_dtype.type(self.latent_scale)))
        img = np.clip(out.data.transpose(0, 2, 3, 1).astype(np.float64), 0, 1)
        return img[0] if single else img

    def encode_text(self, prompt):
        return self.text_encoder.encode(prompt)

    def denoise_predict(self, z_noisy, z_cond, t, text):
        """Functional (no-grad) denoiser evaluation on numpy arrays."""
        dt = self.config.np_dtype
        out = self.denoiser(
            Tensor(np.asarray(z_noisy, dtype=dt)),
            Tensor(np.asarray(z_cond, dtype=dt)),
            t,
            Tensor(np.asarray(text, dtype=dt)))
        return out.data

    def component_states(self):
        return {
            "autoencoder": self.autoencoder.state_dict(),
            "text_encoder": self.text_encoder.state_dict(),
            "denoiser": self.denoiser.state_dict(),
        }


def new_bundle(config, seed):
    """Construct a fresh bundle; all init draws derive from `seed`."""
    ss = np.random.SeedSequence(int(seed))
    ae_ss, _txt_ss, unet_ss = ss.spawn(3)
    autoencoder = Autoencoder(config, np.random.Generator(np.random.PCG64(ae_ss)))
    text_encoder = HashTextEncoder(config, seed)
    denoiser = CondUNet(config, np.random.Generator(np.random.PCG64(unet_ss)))
    return ModelBundle(config=config, autoencoder=autoencoder,
                       text_encoder=text_encoder, denoiser=denoiser,
                       seed=int(seed))


# -- autoencoder pretraining -------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 2e-3
    kl_weight: float = 1e-4
    eval_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ModelError("steps, batch_size, eval_every must be positive")
        if self.learning_rate <= 0 or self.kl_weight < 0:
            raise ModelError("bad learning_rate/kl_weight")


def _recon_mse(ae, x01, batch=16):
    """Posterior-mean reconstruction MSE in pixel space, no sampling."""
    total, n = 0.0, 0
    for lo in range(0, x01.shape[0], batch):
        xb = x01[lo:lo + batch]
        mean, _ = ae.encode(Tensor(xb * 2.0 - 1.0))
        recon = ae.decode(mean).data
        total += float(((recon - xb) ** 2).sum())
        n += xb.size
    return total / n


def pretrain_autoencoder(images, config, pretrain_cfg=None, seed=0):
    """Train the VAE on (N, H, W, 3) images in [0,1]; N >= 32 required.

    Returns (autoencoder, report) where report records the loss history,
    eval checkpoints, final train/val reconstruction MSE, and the latent
    scale estimated from the training latents.
    """
    cfg = pretrain_cfg or PretrainConfig()
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ModelError(f"expected (N, H, W, 3) images, got {arr.shape}")
    if arr.shape[0] < 32:
        raise ModelError(f"need >= 32 images to pretrain, got {arr.shape[0]}")
    dt = config.np_dtype
    x01 = arr.transpose(0, 3, 1, 2).astype(dt)
    n_val = max(2, arr.shape[0] // 8)
    x_train, x_val = x01[:-n_val], x01[-n_val:]

    ss = np.random.SeedSequence([int(seed), 0xAE])
    init_ss, batch_ss, noise_ss = ss.spawn(3)
    ae = Autoencoder(config, np.random.Generator(np.random.PCG64(init_ss)))
    batch_rng = np.random.Generator(np.random.PCG64(batch_ss))
    noise_rng = np.random.Generator(np.random.PCG64(noise_ss))
    opt = nn.Adam(ae.parameters(), lr=cfg.learning_rate)

    history, checkpoints = [], []
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, x_train.shape[0], size=cfg.batch_size)
        xb = x_train[idx]
        x = Tensor(xb * 2.0 - 1.0)
        mean, logvar = ae.encode(x)
        eps = noise_rng.standard_normal(mean.shape).astype(dt)
        z = mean + (logvar * 0.5).exp() * eps
        recon = ae.decode(z)
        rec_loss = ((recon - Tensor(xb)) * (recon - Tensor(xb))).mean()
        kl = (mean * mean + logvar.exp() - logvar - 1.0).mean() * 0.5
        loss = rec_loss + cfg.kl_weight * kl
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise DivergenceError(
                f"autoencoder loss non-finite at step {step}", step, lval)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step, lval))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            checkpoints.append((step, _recon_mse(ae, x_train),
                                _recon_mse(ae, x_val)))

    # latent scale: unit-variance training latents
    means = []
    for lo in range(0, x_train.shape[0], 16):
        m, _ = ae.encode(Tensor(x_train[lo:lo + 16] * 2.0 - 1.0))
        means.append(m.data)
    latent_std = float(np.concatenate(means).std())
    report = {
        "loss_history": history,
        "eval_checkpoints": checkpoints,
        "final_train_mse": checkpoints[-1][1],
        "final_val_mse": checkpoints[-1][2],
        "latent_std": latent_std,
        "latent_scale": 1.0 / latent_std if latent_std > 0 else 1.0,
        "n_train": int(x_train.shape[0]),
        "n_val": int(n_val),
    }
    return ae, report


# -- checkpoints -------------------------------------------------------------

def _param_filename(component, name):
    return f"{component}.{name}.bin"


def save_bundle(ckpt_dir, bundle):
    """Write the bundle to `ckpt_dir` (atomic: temp dir then rename)."""
    ckpt_dir = str(ckpt_dir)
    tmp = ckpt_dir + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    shapes = {}
    for component, state in bundle.component_states().items():
        shapes[component] = {}
        for name, data in state.items():
            if not np.isfinite(data).all():
                raise ModelError(f"non-finite parameter {component}.{name}")
            shapes[component][name] = list(data.shape)
            with open(os.path.join(tmp, _param_filename(component, name)),
                      "wb") as fh:
                fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(bundle.config),
        "freeze_flags": bundle.freeze_flags,
        "latent_scale": bundle.latent_scale,
        "seed": bundle.seed,
        "step": bundle.step,
        "params": shapes,
    }
    with open(os.path.join(tmp, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    if os.path.exists(ckpt_dir):
        shutil.rmtree(ckpt_dir)
    os.replace(tmp, ckpt_dir)


def load_bundle(ckpt_dir):
    """Load a checkpoint directory; verifies shapes and finiteness."""
    header_path = os.path.join(str(ckpt_dir), "header.json")
    with open(header_path) as fh:
        header = json.load(fh)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unsupported checkpoint format {header.get('format')}")
    config = ModelConfig(**header["config"])
    bundle = new_bundle(config, header["seed"])
    bundle.latent_scale = float(header["latent_scale"])
    bundle.freeze_flags = dict(header["freeze_flags"])
    bundle.step = int(header["step"])
    for component, shapes in header["params"].items():
        state = {}
        for name, shape in shapes.items():
            path = os.path.join(str(ckpt_dir),
                                _param_filename(component, name))
            raw = np.fromfile(path, dtype="<f4")
            expected = int(np.prod(shape)) if shape else 1
            if raw.size != expected:
                raise ModelError(f"{component}.{name}: file has {raw.size} "
                                 f"values, header says {expected}")
            arr = raw.reshape(shape).astype(config.np_dtype)
            if not np.isfinite(arr).all():
                raise ModelError(f"non-finite values in {component}.{name}")
            state[name] = arr
        targets = {"autoencoder": bundle.autoencoder,
                   "text_encoder": bundle.text_encoder,
                   "denoiser": bundle.denoiser}
        if component not in targets:
            raise ModelError(f"unknown checkpoint component {component!r}")
        targets[component].load_state_dict(state)
    return bundle
