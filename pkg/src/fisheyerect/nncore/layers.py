"""Parameterized layers and the module container.

Parameters are discovered by attribute order, so the dot-separated path of
each parameter (``encoder.layers.3.attn.qkv.weight``) is stable and matches
between any two instances built from the same config.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

ModuleParams = Dict[str, Tensor]

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        for path, tensor in out.items():
            tensor.name = path
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_params(self, params, strict: bool = True):
        """Copy arrays from a name -> array/Tensor mapping into this module's parameters."""
        own = self.named_parameters()
        missing = [k for k in own if k not in params]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, value in params.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.shape != own[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} does not match {own[name].shape}")
            own[name].data = arr.astype(own[name].dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((3, 3, c_in, c_out)) if zero else trunc_normal(rng, (3, 3, c_in, c_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the token axis of ``(..., N, D)``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        b, n, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q = ops.take(qkv, 0, axis=0)
        k = ops.take(qkv, 1, axis=0)
        v = ops.take(qkv, 2, axis=0)
        scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = ops.softmax(scores, axis=-1)
        out = (attn @ v).permute(0, 2, 1, 3).reshape(b, n, d)
        out = self.proj(out)
        return out.reshape(n, d) if squeeze else out


def multi_head_self_attention(x: Tensor, heads: int, rng: np.random.Generator | None = None,
                              layer: MultiHeadSelfAttention | None = None) -> Tensor:
    """Functional form; builds a freshly initialized layer unless one is given."""
    if layer is None:
        layer = MultiHeadSelfAttention(x.shape[-1], heads, rng or np.random.default_rng(0))
    return layer(x)


class EncoderLayer(Module):
    """Pre-norm transformer block: attention and a 4x GELU MLP, each residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))
