"""Radial fisheye model, its numerical inverse, and backward warping.

All coordinates are normalized with the origin at the image center and the
half-width equal to one: pixel ``(u, v)`` of an ``H x W`` image sits at
``x = 2 (u + 0.5) / W - 1`` and ``y = 2 (v + 0.5) / H - 1``.  The largest
in-image radius is therefore ``sqrt(2)``.

The distortion model maps a radius ``r_d`` measured in the distorted image to
the radius ``r_c`` of the same point in the distortion-free image::

    r_c = k1 r_d + k2 r_d^3 + k3 r_d^5 + k4 r_d^7
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_RADIUS = float(np.sqrt(2.0))
MONOTONE_GRID = 512
BISECT_ITERS = 80
BISECT_TOL = 1e-9
FLOW_SENTINEL = -2.0


class NotInvertible(ValueError):
    """Raised when a rectified radius has no preimage in ``[0, sqrt(2)]``."""


class InvalidParams(ValueError):
    pass


def _poly(k: np.ndarray, r):
    r2 = r * r
    return r * (k[0] + r2 * (k[1] + r2 * (k[2] + r2 * k[3])))


def _dpoly(k: np.ndarray, r):
    r2 = r * r
    return k[0] + r2 * (3 * k[1] + r2 * (5 * k[2] + r2 * 7 * k[3]))


def is_monotone(k, n: int = MONOTONE_GRID) -> bool:
    """True when ``d r_c / d r_d > 0`` on an ``n``-point grid over ``[0, sqrt(2)]``."""
    k = np.asarray(k, dtype=np.float64)
    r = np.linspace(0.0, MAX_RADIUS, n)
    return bool(np.all(_dpoly(k, r) > 0))


@dataclass(frozen=True)
class DistortionParams:
    """The four polynomial coefficients ``k1..k4``.

    Construction rejects coefficient sets whose radial map is not strictly
    increasing on ``[0, sqrt(2)]``.
    """

    k: tuple[float, float, float, float]
    r_c_max: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = tuple(float(v) for v in self.k)
        if len(k) != 4:
            raise InvalidParams(f"expected 4 coefficients, got {len(k)}")
        if not all(np.isfinite(k)):
            raise InvalidParams(f"non-finite coefficients {k}")
        if not is_monotone(k):
            raise InvalidParams(f"radial map not strictly increasing on [0, sqrt(2)] for k={k}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "r_c_max", float(_poly(np.array(k), MAX_RADIUS)))

    @classmethod
    def identity(cls) -> "DistortionParams":
        return cls((1.0, 0.0, 0.0, 0.0))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.k, dtype=np.float64)


def radial_forward(params: DistortionParams, r_d):
    """Rectified radius for distorted radius ``r_d`` (scalar or array)."""
    out = _poly(params.array, np.asarray(r_d, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def radial_inverse_array(params: DistortionParams, r_c) -> np.ndarray:
    """Vectorized bisection inverse; NaN where ``r_c`` exceeds ``radial_forward(sqrt(2))``."""
    k = params.array
    r_c = np.asarray(r_c, dtype=np.float64)
    lo = np.zeros_like(r_c)
    hi = np.full_like(r_c, MAX_RADIUS)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        below = _poly(k, mid) < r_c
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    r_d = 0.5 * (lo + hi)
    bad = (r_c > params.r_c_max) | (r_c < 0) | ~np.isfinite(r_c)
    return np.where(bad, np.nan, r_d)


def radial_inverse(params: DistortionParams, r_c: float) -> float:
    """Distorted radius whose forward image is ``r_c``.

    Raises
    ------
    NotInvertible
        If ``r_c`` lies beyond the image of ``[0, sqrt(2)]``.
    """
    if r_c > params.r_c_max or r_c < 0:
        raise NotInvertible(f"r_c={r_c} outside [0, {params.r_c_max}]")
    r_d = float(radial_inverse_array(params, r_c))
    assert abs(radial_forward(params, r_d) - r_c) <= BISECT_TOL
    return r_d


def normalized_grid(h: int, w: int) -> np.ndarray:
    """``(h, w, 2)`` array of normalized ``(x, y)`` pixel-center coordinates."""
    x = (2.0 * (np.arange(w) + 0.5) / w) - 1.0
    y = (2.0 * (np.arange(h) + 0.5) / h) - 1.0
    gx, gy = np.meshgrid(x, y)
    return np.stack([gx, gy], axis=-1)


def bilinear_sample(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W, C) at normalized ``coords`` (..., 2).

    Coordinates outside ``[-1, 1]^2`` return zeros.  Inside, the half-pixel
    margin beyond the outermost pixel centers is edge-clamped.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    x = coords[..., 0]
    y = coords[..., 1]
    inside = (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
    px = np.clip((x + 1.0) * w / 2.0 - 0.5, 0, w - 1)
    py = np.clip((y + 1.0) * h / 2.0 - 0.5, 0, h - 1)
    px = np.where(inside, px, 0.0)
    py = np.where(inside, py, 0.0)
    x0 = np.minimum(np.floor(px).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(py).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (px - x0)[..., None]
    ay = (py - y0)[..., None]
    img = image.astype(np.float64, copy=False)
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    out = top * (1 - ay) + bot * ay
    return out * inside[..., None]


def distort_image(source: np.ndarray, params: DistortionParams) -> np.ndarray:
    """Synthesize the fisheye view of a distortion-free ``source`` (H, W, 3) in [0, 1]."""
    h, w = source.shape[:2]
    grid = normalized_grid(h, w)
    r_d = np.hypot(grid[..., 0], grid[..., 1])
    r_c = radial_forward(params, r_d)
    scale = np.divide(r_c, r_d, out=np.full_like(r_d, params.k[0]), where=r_d > 0)
    return bilinear_sample(source, grid * scale[..., None])


def gt_flow_and_mask(params: DistortionParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth backward flow ``(h, w, 2)`` and validity mask ``(h, w)``.

    For each rectified pixel the flow holds the normalized coordinate of its
    preimage in the distorted image.  Pixels without a preimage inside
    ``[-1, 1]^2`` get mask 0 and the sentinel ``(-2, -2)``.
    """
    if h < 16 or w < 16:
        raise ValueError(f"flow size must be at least 16x16, got {h}x{w}")
    grid = normalized_grid(h, w)
    r_c = np.hypot(grid[..., 0], grid[..., 1])
    r_d = radial_inverse_array(params, r_c)
    ok = np.isfinite(r_d)
    safe = np.where(ok, r_d, 0.0)
    scale = np.divide(safe, r_c, out=np.full_like(r_c, 1.0 / params.k[0]), where=r_c > 0)
    src = grid * scale[..., None]
    ok &= np.all(np.abs(src) <= 1.0, axis=-1)
    flow = np.where(ok[..., None], src, FLOW_SENTINEL)
    return flow, ok.astype(np.uint8)


def warp(image: np.ndarray, flow: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Backward warp: ``out(u, v) = image(flow(u, v))``, zeroed where ``mask`` is 0."""
    flow = np.asarray(flow, dtype=np.float64)
    out = bilinear_sample(image, flow)
    if mask is not None:
        m = np.asarray(mask).reshape(flow.shape[:2])
        out = out * (m > 0)[..., None]
    return out
