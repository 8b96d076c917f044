"""Fine-tuning loop: freeze policy, Adam on the denoiser only, dual-loss
logging, periodic validation sampling, and early/middle/late probe snapshots.

Determinism contract: a run is a pure function of (bundle, manifest, config,
guidance).  The training RNG draws, per step and in this order: batch
indices, per-item prompt indices, then whatever `training_loss` consumes
(timesteps, noise, dropout uniforms).  Wall-clock timings are logged to a
separate file so the value logs can be compared byte-for-byte across runs.

Prompts are drawn per batch element per step from the first `n_prompts`
bundled paraphrases (the manifest records the build-time assignment; the
trainer re-draws so prompt diversity is a pure training knob).
"""

import csv
import dataclasses
import hashlib
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import colorspace
from . import data as data_mod
from . import metrics as metrics_mod
from .diffusion import GuidanceConfig, make_schedule, sample, training_loss
from .model import DivergenceError, save_bundle
from .nn import Adam


class TrainerError(ValueError):
    pass


STAGES = ("early", "middle", "late")

TRAIN_LOG_NAME = "train_log.csv"
VAL_LOG_NAME = "val_log.csv"
TIMINGS_NAME = "timings.csv"
PROBE_GRID_NAME = "probe_grid.png"

# Learning rate used by the full-scale fine-tuning recipe, and the
# desk-scale multiplier applied to it: a compact denoiser training from
# scratch on tens of images needs base * multiplier to move at all.
BASE_LEARNING_RATE = 5e-6
LR_MULTIPLIER = 100.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = BASE_LEARNING_RATE * LR_MULTIPLIER
    batch_size: int = 4
    n_prompts: int = 30
    max_steps: int = 50
    val_every: int = 10
    snapshot_steps: tuple = (10, 25, 50)
    seed: int = 0
    sample_steps: int = 10

    def __post_init__(self):
        object.__setattr__(self, "snapshot_steps",
                           tuple(int(s) for s in self.snapshot_steps))
        for name in ("learning_rate", "batch_size", "n_prompts", "max_steps",
                     "val_every", "sample_steps"):
            if getattr(self, name) <= 0:
                raise TrainerError(f"{name} must be positive, "
                                   f"got {getattr(self, name)}")
        if self.seed < 0:
            raise TrainerError(f"seed must be non-negative, got {self.seed}")
        ss = self.snapshot_steps
        if len(ss) != 3:
            raise TrainerError(f"need exactly 3 snapshot steps, got {ss}")
        if not (0 < ss[0] < ss[1] < ss[2] <= self.max_steps):
            raise TrainerError(
                f"snapshot steps must be strictly increasing and <= "
                f"max_steps={self.max_steps}, got {ss}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ValEntry:
    step: int
    lab_mse: float
    psnr_db: float
    ssim: float
    mae: float


@dataclass
class RunLog:
    train: list = field(default_factory=list)    # (step, loss)
    val: list = field(default_factory=list)      # ValEntry
    timings: list = field(default_factory=list)  # (step, seconds)

    def check(self):
        """Raise TrainerError on any violated log invariant.

        Validation PSNR may be +inf (identical images); every other logged
        value must be finite and step indices strictly increasing.
        """
        for seq, name in ((self.train, "train"), (self.val, "val")):
            steps = [e[0] if name == "train" else e.step for e in seq]
            if any(b <= a for a, b in zip(steps, steps[1:])):
                raise TrainerError(f"{name} log steps not increasing")
        for step, loss in self.train:
            if not math.isfinite(loss):
                raise TrainerError(f"non-finite train loss at step {step}")
        for e in self.val:
            for key in ("lab_mse", "ssim", "mae"):
                if not math.isfinite(getattr(e, key)):
                    raise TrainerError(
                        f"non-finite val {key} at step {e.step}")

    def write(self, out_dir):
        with open(os.path.join(out_dir, TRAIN_LOG_NAME), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "train_loss"))
            for step, loss in self.train:
                w.writerow((step, metrics_mod.format_metric(loss)))
        with open(os.path.join(out_dir, VAL_LOG_NAME), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "lab_mse", "psnr_db", "ssim", "mae"))
            for e in self.val:
                w.writerow((e.step,) + tuple(
                    metrics_mod.format_metric(getattr(e, k))
                    for k in ("lab_mse", "psnr_db", "ssim", "mae")))
        # Timings are machine-dependent; kept out of the deterministic logs.
        with open(os.path.join(out_dir, TIMINGS_NAME), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "seconds"))
            for step, sec in self.timings:
                w.writerow((step, f"{sec:.6f}"))


def read_run_log(out_dir):
    log = RunLog()
    with open(os.path.join(out_dir, TRAIN_LOG_NAME), newline="") as fh:
        for rec in csv.DictReader(fh):
            log.train.append((int(rec["step"]), float(rec["train_loss"])))
    with open(os.path.join(out_dir, VAL_LOG_NAME), newline="") as fh:
        for rec in csv.DictReader(fh):
            log.val.append(ValEntry(
                step=int(rec["step"]), lab_mse=float(rec["lab_mse"]),
                psnr_db=float(rec["psnr_db"]), ssim=float(rec["ssim"]),
                mae=float(rec["mae"])))
    timings_path = os.path.join(out_dir, TIMINGS_NAME)
    if os.path.exists(timings_path):
        with open(timings_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                log.timings.append((int(rec["step"]),
                                    float(rec["seconds"])))
    return log


def _frozen_digests(bundle):
    out = {}
    for component, state in bundle.component_states().items():
        if component == "denoiser":
            continue
        for name, arr in state.items():
            out[f"{component}.{name}"] = hashlib.sha256(
                np.ascontiguousarray(arr).tobytes()).hexdigest()
    return out


def validate(bundle, manifest, sched, guidance=None, steps=10, seed=0):
    """Sample every val image with the base prompt and score it.

    Per-image sampler seeds are `seed + index` so the report is a pure
    function of (bundle, manifest, sched, guidance, steps, seed).
    Returns (rows, MetricsReport) like metrics.evaluate_arrays.
    """
    val = manifest.split_samples("val")
    if not val:
        raise TrainerError("validation split is empty")
    inputs, targets, prompts = data_mod.load_arrays(manifest, "val")
    pairs, names = [], []
    for i, s in enumerate(val):
        out = sample(bundle, sched, inputs[i], prompts[i],
                     guidance=guidance, steps=steps, seed=seed + i)
        pairs.append((out, targets[i]))
        names.append(os.path.basename(s.target))
    return metrics_mod.evaluate_arrays(pairs, names)


@dataclass(frozen=True)
class ProbePanel:
    stage: str
    step: int
    image: np.ndarray


def snapshot_probe(bundle, sched, probe_input, prompt, stage, step,
                   guidance=None, steps=10, seed=0):
    """Colorize the fixed probe input at a training stage."""
    out = sample(bundle, sched, probe_input, prompt,
                 guidance=guidance, steps=steps, seed=seed)
    return ProbePanel(stage=str(stage), step=int(step), image=out)


def _labeled_panel(img, label, header=14):
    """uint8 (H, W, 3) panel with a text strip above the image."""
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    panel = Image.new("RGB", (w, h + header), (24, 24, 24))
    panel.paste(Image.fromarray(data, mode="RGB"), (0, header))
    draw = ImageDraw.Draw(panel)
    draw.text((2, 1), label, fill=(235, 235, 235))
    return np.asarray(panel)


def render_probe_grid(probe_input, probe_target, panels, path=None):
    """Compose [input | stage panels... | target] into one labeled strip.

    Returns the grid as a uint8 array; writes a PNG when `path` is given.
    """
    cols = [_labeled_panel(probe_input, "input")]
    for p in panels:
        cols.append(_labeled_panel(p.image, f"{p.stage}@{p.step}"))
    cols.append(_labeled_panel(probe_target, "target"))
    sep = np.full((cols[0].shape[0], 2, 3), 24, dtype=np.uint8)
    parts = []
    for i, c in enumerate(cols):
        if i:
            parts.append(sep)
        parts.append(c)
    grid = np.concatenate(parts, axis=1)
    if path is not None:
        Image.fromarray(grid, mode="RGB").save(path)
    return grid


def finetune(bundle, manifest, cfg, out_dir, sched=None, guidance=None):
    """Run the fine-tuning loop; returns (bundle, RunLog, checkpoints).

    Writes under out_dir: checkpoints/{init,early,middle,late,final}/,
    train_log.csv, val_log.csv, timings.csv, and probe_grid.png.  Validation
    runs at every multiple of val_every plus after the final step (skipped
    if it already ran there), so the val log holds
    floor(max_steps / val_every) + (1 if max_steps % val_every else 0)
    entries.  A non-finite loss aborts with DivergenceError after flushing
    the logs; the newest saved checkpoint is left intact.
    """
    sched = sched if sched is not None else make_schedule()
    guidance = guidance if guidance is not None else GuidanceConfig()
    violations = data_mod.validate_manifest(manifest)
    if violations:
        raise TrainerError(
            f"manifest has {len(violations)} violations; first: "
            f"{violations[0]}")
    if not bundle.freeze_flags.get("autoencoder", False):
        raise TrainerError("autoencoder must be frozen before fine-tuning")

    os.makedirs(out_dir, exist_ok=True)
    ckpt_root = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_root, exist_ok=True)

    inputs, targets, _ = data_mod.load_arrays(manifest, "train")
    z0_all = bundle.encode_image(targets)
    z_cond_all = bundle.encode_image(inputs)
    n_train = z0_all.shape[0]
    pool = data_mod.expand_prompts(n=cfg.n_prompts)
    prompt_pool = pool.train_prompts

    val_samples = manifest.split_samples("val")
    if not val_samples:
        raise TrainerError("validation split is empty")
    probe = val_samples[0]
    probe_input = colorspace.load_image(os.path.join(manifest.root,
                                                     probe.input))
    probe_target = colorspace.load_image(os.path.join(manifest.root,
                                                      probe.target))

    frozen_before = _frozen_digests(bundle)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg.seed, 0x7141])))
    opt = Adam(bundle.denoiser.parameters(), lr=cfg.learning_rate)
    log = RunLog()
    checkpoints = {}
    panels = []
    stage_at = dict(zip(cfg.snapshot_steps, STAGES))

    def save(stage, step):
        bundle.step = step
        path = os.path.join(ckpt_root, stage)
        save_bundle(path, bundle)
        checkpoints[stage] = path

    def run_validation(step):
        rows, report = validate(bundle, manifest, sched, guidance=guidance,
                                steps=cfg.sample_steps, seed=cfg.seed)
        log.val.append(ValEntry(step=step, lab_mse=report.lab_mse,
                                psnr_db=report.psnr_db, ssim=report.ssim,
                                mae=report.mae))

    save("init", 0)
    for step in range(1, cfg.max_steps + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, n_train, size=cfg.batch_size)
        p_idx = rng.integers(0, len(prompt_pool), size=cfg.batch_size)
        prompts = [prompt_pool[j] for j in p_idx]
        try:
            loss, _ = training_loss(bundle, sched, z0_all[idx],
                                    z_cond_all[idx], prompts, guidance, rng)
        except DivergenceError as exc:
            log.write(out_dir)
            raise DivergenceError(f"aborted at step {step}: {exc}",
                                  step=step, loss=exc.loss) from exc
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.train.append((step, float(loss.data)))
        log.timings.append((step, time.perf_counter() - t0))

        if step in stage_at:
            stage = stage_at[step]
            save(stage, step)
            panels.append(snapshot_probe(
                bundle, sched, probe_input, pool.base_prompt, stage, step,
                guidance=guidance, steps=cfg.sample_steps, seed=cfg.seed))
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            if not log.val or log.val[-1].step != step:
                run_validation(step)

    save("final", cfg.max_steps)
    frozen_after = _frozen_digests(bundle)
    if frozen_after != frozen_before:
        changed = sorted(k for k in frozen_before
                         if frozen_before[k] != frozen_after.get(k))
        raise TrainerError(f"frozen parameters changed: {changed}")

    log.check()
    log.write(out_dir)
    render_probe_grid(probe_input, probe_target, panels,
                      path=os.path.join(out_dir, PROBE_GRID_NAME))
    return bundle, log, checkpoints
