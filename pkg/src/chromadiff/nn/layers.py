"""Neural-network building blocks on top of the autograd Tensor.

Modules register parameters/submodules through attribute assignment, and
expose dotted named_parameters() for checkpointing and freeze accounting.
Constructors draw their initial weights from an explicit numpy Generator so
model construction is a pure function of the seed.
"""

import math

import numpy as np

from .autograd import (Tensor, concat, conv2d, group_norm, matmul, silu,
                       softmax, upsample_nearest2x)

__all__ = [
    "Module", "Conv2d", "Linear", "GroupNorm", "ResBlock", "CrossAttention",
    "Downsample", "Upsample", "timestep_embedding",
]


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} "
                             f"unexpected={sorted(extra)}")
        for name, p in mine.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, bias=True,
                 dtype=np.float32, init_scale=1.0):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = init_scale * math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor.param(
            (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype))
        self.bias = Tensor.param(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, dtype=np.float32,
                 init_scale=1.0):
        super().__init__()
        std = init_scale * math.sqrt(1.0 / cin)
        self.weight = Tensor.param(
            (rng.standard_normal((cin, cout)) * std).astype(dtype))
        self.bias = Tensor.param(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor.param(np.ones(channels, dtype=dtype))
        self.beta = Tensor.param(np.zeros(channels, dtype=dtype))

    def __call__(self, x):
        return group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class ResBlock(Module):
    """Two 3x3 convs with group norms, SiLU, timestep injection, residual."""

    def __init__(self, cin, cout, temb_dim, rng, groups=8, dtype=np.float32):
        super().__init__()
        self.norm1 = GroupNorm(min(groups, cin), cin, dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.temb_proj = Linear(temb_dim, cout, rng, dtype=dtype)
        self.norm2 = GroupNorm(min(groups, cout), cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng, pad=0, dtype=dtype) \
            if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(silu(self.norm1(x)))
        t = self.temb_proj(silu(temb))
        h = h + t.reshape(t.shape[0], t.shape[1], 1, 1)
        h = self.conv2(silu(self.norm2(h)))
        res = x if self.skip is None else self.skip(x)
        return h + res


class CrossAttention(Module):
    """Single-head cross attention from spatial positions to context tokens."""

    def __init__(self, channels, ctx_dim, rng, dtype=np.float32):
        super().__init__()
        self.scale = 1.0 / math.sqrt(channels)
        self.norm = GroupNorm(min(8, channels), channels, dtype)
        self.to_q = Linear(channels, channels, rng, bias=False, dtype=dtype)
        self.to_k = Linear(ctx_dim, channels, rng, bias=False, dtype=dtype)
        self.to_v = Linear(ctx_dim, channels, rng, bias=False, dtype=dtype)
        self.to_out = Linear(channels, channels, rng, dtype=dtype)

    def __call__(self, x, ctx):
        B, C, H, W = x.shape
        seq = self.norm(x).reshape(B, C, H * W).transpose((0, 2, 1))
        q = self.to_q(seq)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        attn = softmax(matmul(q, k.transpose((0, 2, 1))) * self.scale, axis=-1)
        out = self.to_out(matmul(attn, v))
        out = out.transpose((0, 2, 1)).reshape(B, C, H, W)
        return out + x


class Downsample(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=2, pad=1, dtype=dtype)

    def __call__(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, dtype=dtype)

    def __call__(self, x):
        return self.conv(upsample_nearest2x(x))


def timestep_embedding(t, dim, dtype=np.float32, max_period=10000.0):
    """Sinusoidal embedding of integer timesteps t (shape (B,)) -> (B, dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    return Tensor(emb.astype(dtype))
