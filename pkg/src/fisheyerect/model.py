"""Patch transformer with pretext heads (pretraining) and flow/mask heads (rectification)."""

from __future__ import annotations

import dataclasses
import re
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dataset import build_position_map
from .geometry import normalized_grid
from .nncore import ops
from .nncore.layers import Conv3x3, EncoderLayer, LayerNorm, Linear, Module
from .nncore.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    dim: int = 256
    depth: int = 10
    transfer_depth: int = 8
    heads: int = 8
    head_hidden: int | None = None
    sigma: float = 0.5
    tau: float = 0.07

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} must divide image size {self.image_size}")
        if not 0 <= self.transfer_depth < self.depth:
            raise ValueError(f"transfer depth {self.transfer_depth} must be in [0, {self.depth})")
        if not 0 < self.sigma < 1:
            raise ValueError(f"sigma {self.sigma} outside (0, 1)")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration for CPU-scale experiments."""
        base = dict(image_size=64, patch_size=8, dim=64, depth=4, transfer_depth=3, heads=4)
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_classes(self) -> int:
        return build_position_map(self.image_size, self.image_size, self.patch_size).num_classes

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- building blocks -------------------------------------------------------

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, N, P*P*C)`` raster-ordered flattened patches."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


@lru_cache(maxsize=16)
def sincos_embedding(n: int, d: int) -> np.ndarray:
    """Sine-cosine positional table indexed by sequence position."""
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.image_size = cfg.image_size
        self.proj = Linear(cfg.patch_size ** 2 * 3, cfg.dim, rng)
        # start as if pixels were centered on 0.5 while keeping E_o = bias for a black image
        self.proj.bias.data = (-0.5 * self.proj.weight.data.sum(axis=0)).astype(self.proj.bias.dtype)

    def forward(self, images) -> Tensor:
        images = np.asarray(getattr(images, "data", images))
        single = images.ndim == 3
        if single:
            images = images[None]
        if images.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError(f"expected images of shape ({self.image_size}, {self.image_size}, 3), "
                             f"got {images.shape[1:]}")
        x = Tensor(patchify(images, self.patch_size))
        e = self.proj(x)
        return e.reshape(e.shape[1:]) if single else e


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.layers = [EncoderLayer(cfg.dim, cfg.heads, rng) for _ in range(cfg.depth)]

    def forward(self, e_o: Tensor, perm=None, positional: bool = True) -> Tensor:
        single = e_o.ndim == 2
        if single:
            e_o = e_o.reshape(1, *e_o.shape)
        b, n, d = e_o.shape
        x = e_o
        if perm is not None:
            perm = np.asarray(getattr(perm, "perm", perm), dtype=np.int64)
            if perm.ndim == 1:
                perm = np.broadcast_to(perm, (b, perm.size))
            if perm.shape != (b, n):
                raise ShapeError(f"permutation shape {perm.shape} does not match {b} x {n} tokens")
            x = ops.take_along(x, perm[:, :, None], axis=1)
        if positional:
            x = x + sincos_embedding(n, d)
        for layer in self.layers:
            x = layer(x)
        return x.reshape(n, d) if single else x


class PositionHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.proj = Linear(dim, num_classes, rng)

    def forward(self, e_r: Tensor) -> Tensor:
        return self.proj(self.norm(e_r))


def contrastive_features(e_r: Tensor) -> Tensor:
    return ops.l2_normalize(e_r, axis=-1)


TENT_FLOOR = 0.01


@lru_cache(maxsize=16)
def _neighbor_index(h: int, w: int) -> np.ndarray:
    # flat index of the 3x3 edge-replicated neighborhood, row-major over (dy, dx)
    i = np.arange(h)[:, None, None]
    j = np.arange(w)[None, :, None]
    dy = np.repeat([-1, 0, 1], 3)[None, None, :]
    dx = np.tile([-1, 0, 1], 3)[None, None, :]
    ii = np.clip(i + dy, 0, h - 1)
    jj = np.clip(j + dx, 0, w - 1)
    return (ii * w + jj).reshape(-1)


def convex_upsample(coarse, weights, p: int, check: bool = True) -> Tensor:
    """Upsample ``(B, h, w, c)`` by ``p`` using per-pixel convex 3x3 weights.

    ``weights`` has shape ``(B, h, w, p*p*9)`` laid out as ``(p, p, 9)``; every
    9-group must already sum to one.
    """
    coarse = coarse if isinstance(coarse, Tensor) else Tensor(coarse)
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    single = coarse.ndim == 3
    if single:
        coarse = coarse.reshape(1, *coarse.shape)
        weights = weights.reshape(1, *weights.shape)
    b, h, w, c = coarse.shape
    if weights.shape != (b, h, w, p * p * 9):
        raise ShapeError(f"weights shape {weights.shape} does not match coarse {coarse.shape} at p={p}")
    if check:
        sums = weights.data.reshape(b, h, w, p * p, 9).sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise ValueError("convex weights do not sum to 1 over each 3x3 group")
    nb = ops.take(coarse.reshape(b, h * w, c), _neighbor_index(h, w), axis=1)
    nb = nb.reshape(b, h, w, 1, 9, c)
    wt = weights.reshape(b, h, w, p * p, 9, 1)
    fine = (nb * wt).sum(axis=4)
    fine = fine.reshape(b, h, w, p, p, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h * p, w * p, c)
    return fine.reshape(h * p, w * p, c) if single else fine


def bilinear_logits(p: int, floor: float = TENT_FLOOR) -> np.ndarray:
    """Logits whose 9-way softmax is (nearly) bilinear interpolation, laid out ``(p, p, 9)``.

    ``floor`` keeps every neighbor weight nonzero so it stays trainable.
    """
    s = (np.arange(p) + 0.5) / p - 0.5
    tent = np.stack([np.maximum(0.0, -s), 1.0 - np.abs(s), np.maximum(0.0, s)], axis=1)
    w = np.einsum("ia,jb->ijab", tent, tent).reshape(p, p, 9)
    with np.errstate(divide="ignore"):  # floor=0 gives -inf, i.e. an exact zero weight
        return np.log(w + floor).reshape(-1)


class _UpsampleHead(Module):
    """Two parallel conv-gelu-conv branches: a coarse field and its upsampling weights."""

    def __init__(self, cfg: ModelConfig, channels: int, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.grid = cfg.grid
        self.field1 = Conv3x3(cfg.dim, cfg.hidden, rng)
        self.field2 = Conv3x3(cfg.hidden, channels, rng, zero=True)
        self.weight1 = Conv3x3(cfg.dim, cfg.hidden, rng)
        self.weight2 = Conv3x3(cfg.hidden, cfg.patch_size ** 2 * 9, rng, zero=True)
        # zero kernels plus this bias: a fresh head upsamples its coarse field bilinearly
        self.weight2.bias.data = bilinear_logits(cfg.patch_size).astype(self.weight2.bias.dtype)

    def coarse_and_weights(self, e_r: Tensor) -> tuple[Tensor, Tensor]:
        b = e_r.shape[0]
        g = self.grid
        x = e_r.reshape(b, g, g, e_r.shape[-1])
        field = self.field2(ops.gelu(self.field1(x)))
        logits = self.weight2(ops.gelu(self.weight1(x)))
        p2 = self.patch_size ** 2
        wts = ops.softmax(logits.reshape(b, g, g, p2, 9), axis=-1).reshape(b, g, g, p2 * 9)
        return field, wts


class FlowHead(_UpsampleHead):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, 2, rng)

    def forward(self, e_r: Tensor) -> Tensor:
        """Full-resolution absolute flow ``(B, H, W, 2)`` in normalized coordinates."""
        disp, wts = self.coarse_and_weights(e_r)
        coarse = disp + normalized_grid(self.grid, self.grid)
        return convex_upsample(coarse, wts, self.patch_size, check=False)


class BoundaryHead(_UpsampleHead):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, 1, rng)

    def forward(self, e_r: Tensor) -> Tensor:
        """Foreground confidence ``(B, H, W, 1)`` in ``[0, 1]``."""
        logit, wts = self.coarse_and_weights(e_r)
        return convex_upsample(ops.sigmoid(logit), wts, self.patch_size, check=False)


def binarize(confidence, sigma: float = 0.5) -> np.ndarray:
    m = np.asarray(getattr(confidence, "data", confidence))
    return (m >= sigma).astype(np.uint8)


# -- networks --------------------------------------------------------------

class PretrainNet(Module):
    """Patch embedding + encoder + position head, used with shuffled tokens."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.pos_head = PositionHead(cfg.dim, cfg.num_classes, rng)

    def forward(self, images, perm=None, positional: bool = True):
        """Returns ``(E_r, position logits, unit contrastive features)``."""
        e_r = self.encoder(self.patch_embed(images), perm, positional)
        return e_r, self.pos_head(e_r), contrastive_features(e_r)


class RectifyNet(Module):
    """Patch embedding + encoder + flow head + boundary head, unshuffled tokens."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.encoder = Encoder(cfg, rng)
        self.fpm = FlowHead(cfg, rng)
        self.brm = BoundaryHead(cfg, rng)

    def forward(self, images):
        """Returns ``(flow (B, H, W, 2), confidence (B, H, W, 1))``."""
        images = np.asarray(getattr(images, "data", images))
        single = images.ndim == 3
        if single:
            images = images[None]
        e_r = self.encoder(self.patch_embed(images))
        flow, conf = self.fpm(e_r), self.brm(e_r)
        if single:
            return flow.reshape(flow.shape[1:]), conf.reshape(conf.shape[1:])
        return flow, conf


_TRANSFER_LAYER = re.compile(r"^encoder\.layers\.(\d+)\.")


def transfer_weights(pretrained, fresh, n_f: int, depth: int | None = None) -> "OrderedDict[str, np.ndarray]":
    """Initialize a rectification parameter set from a pretrained one.

    Copies the patch embedding and encoder layers ``0 .. n_f - 1``; everything
    else keeps its fresh value.  Pretext-head parameters are dropped.
    """
    if depth is None:
        layer_ids = [int(m.group(1)) for k in fresh if (m := _TRANSFER_LAYER.match(k))]
        depth = max(layer_ids) + 1 if layer_ids else 0
    if not 0 <= n_f < max(depth, 1):
        raise ValueError(f"n_f={n_f} must be in [0, {depth})")
    out = OrderedDict()
    for name, value in fresh.items():
        arr = np.asarray(getattr(value, "data", value))
        m = _TRANSFER_LAYER.match(name)
        copy = name.startswith("patch_embed.") or (m is not None and int(m.group(1)) < n_f)
        if copy:
            if name not in pretrained:
                raise KeyError(f"pretrained checkpoint lacks parameter {name}")
            src = np.asarray(getattr(pretrained[name], "data", pretrained[name]))
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: pretrained shape {src.shape} does not match {arr.shape}")
            out[name] = src.copy()
        else:
            out[name] = arr.copy()
    return out
