"""Synthetic fisheye dataset: parameter sampling, position maps, shuffles, on-disk format."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import tensorio
from .geometry import DistortionParams, distort_image, gt_flow_and_mask, is_monotone

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_REJECTIONS = 1000


class DatasetError(Exception):
    pass


class DatasetIOError(DatasetError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


@dataclass(frozen=True)
class ParamRanges:
    k1: tuple[float, float] = (0.7, 1.0)
    k2: tuple[float, float] = (-0.20, 0.05)
    k3: tuple[float, float] = (-0.02, 0.02)
    k4: tuple[float, float] = (-0.005, 0.005)

    def bounds(self):
        return np.array([self.k1, self.k2, self.k3, self.k4], dtype=np.float64)


def sample_params(rng_seed: int, ranges: ParamRanges = ParamRanges()) -> DistortionParams:
    """Draw ``k1..k4`` uniformly from ``ranges``, redrawing until the map is monotone."""
    rng = np.random.default_rng(rng_seed)
    lo, hi = ranges.bounds().T
    for _ in range(MAX_REJECTIONS):
        k = rng.uniform(lo, hi)
        if is_monotone(k):
            return DistortionParams(tuple(k))
    raise DatasetError(f"no monotone parameters after {MAX_REJECTIONS} draws; check ranges {ranges}")


# -- position maps ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PositionMap:
    """Per-patch distortion-class labels on the ``grid_h x grid_w`` patch grid."""

    labels: np.ndarray
    num_classes: int

    def __eq__(self, other):
        if not isinstance(other, PositionMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)

    __hash__ = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.labels.shape

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


def _offset_ranks(n: int) -> np.ndarray:
    # cell i sits at offset i - (n - 1) / 2 from the grid center; floor(|offset|) ranks it
    return np.floor(np.abs(np.arange(n) - (n - 1) / 2.0)).astype(np.int64)


def build_position_map(h: int, w: int, p: int) -> PositionMap:
    """Label every patch by the unordered pair of its row/column offset ranks.

    On a square grid with ``m = h / (2 p)`` ranks per axis this gives
    ``m (m + 1) / 2`` classes, ordered by increasing squared rank radius.
    """
    if p <= 0 or h % p or w % p:
        raise ValueError(f"patch size {p} must divide image size {h}x{w}")
    gh, gw = h // p, w // p
    if gh % 2 or gw % 2:
        raise ValueError(f"patch grid {gh}x{gw} must be even-sided")
    ry = _offset_ranks(gh)[:, None]
    rx = _offset_ranks(gw)[None, :]
    a = np.minimum(ry, rx)
    b = np.maximum(ry, rx)
    pairs = sorted({(int(i), int(j)) for i, j in zip(a.ravel(), b.ravel())},
                   key=lambda t: (t[0] ** 2 + t[1] ** 2, t[0]))
    index = {pair: c for c, pair in enumerate(pairs)}
    labels = np.vectorize(lambda i, j: index[(int(i), int(j))])(a, b).astype(np.int64)
    return PositionMap(labels, len(pairs))


# -- shuffles --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ShufflePermutation:
    """Bijection on ``[0, n)``; ``apply`` reorders so that ``out[i] = seq[perm[i]]``."""

    perm: np.ndarray
    seed: int | None = None
    inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        n = perm.size
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("perm is not a bijection on [0, n)")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(n)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "inverse", inv)

    def __len__(self):
        return self.perm.size

    def __eq__(self, other):
        if not isinstance(other, ShufflePermutation):
            return NotImplemented
        return np.array_equal(self.perm, other.perm)

    __hash__ = None

    def apply(self, seq):
        return np.asarray(seq)[self.perm]

    def unapply(self, seq):
        return np.asarray(seq)[self.inverse]


def make_shuffle(n: int, seed: int) -> ShufflePermutation:
    if n < 2:
        raise ValueError("shuffle needs n >= 2")
    rng = np.random.default_rng(seed)
    return ShufflePermutation(rng.permutation(n), seed)


# -- sources ---------------------------------------------------------------

def smooth_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited test image: color gradient plus a few low-frequency gratings."""
    h = w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (x + 0.5) / w
    y = (y + 0.5) / h
    base = rng.uniform(0.2, 0.8, size=3)
    gx, gy = rng.uniform(-0.3, 0.3, size=(2, 3))
    img = base + gx * (x[..., None] - 0.5) + gy * (y[..., None] - 0.5)
    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.08, 0.2, size=3)
        wave = np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
        img = img + amp * wave[..., None]
    return np.clip(img, 0.0, 1.0)


def pattern_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Soft-edged rotated checkerboard over a color gradient.

    Straight edges and a regular cell size make the local geometric
    deformation visible, which the smooth images lack.
    """
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    period = rng.uniform(0.1, 0.22) * size
    theta = rng.uniform(0, np.pi / 2)
    u = (x * np.cos(theta) + y * np.sin(theta)) / period + rng.uniform(0, 1)
    v = (-x * np.sin(theta) + y * np.cos(theta)) / period + rng.uniform(0, 1)
    edge = 0.6 * size / 64 / period  # roughly one-pixel transition
    check = np.tanh(np.sin(np.pi * u) / edge) * np.tanh(np.sin(np.pi * v) / edge)
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    ramp = rng.uniform(-0.15, 0.15, size=3) * ((x / size - 0.5) + (y / size - 0.5))[..., None]
    img = 0.5 * (c0 + c1) + 0.5 * (c1 - c0) * check[..., None] + ramp
    return np.clip(img, 0.0, 1.0)


SOURCE_KINDS = {"smooth": smooth_image, "pattern": pattern_image}


def synthetic_sources(n: int, size: int, seed: int, kind: str = "smooth") -> list[tuple[str, np.ndarray]]:
    """Generated stand-ins for a photo collection (``kind``: smooth or pattern)."""
    make = SOURCE_KINDS[kind]
    rng = np.random.default_rng(seed)
    return [(f"{kind}-{seed}-{i:05d}", make(size, rng)) for i in range(n)]


def load_image(path, size: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetIOError(path, exc) from exc


def save_image(path, image: np.ndarray) -> None:
    try:
        Image.fromarray(to_u8(image)).save(path)
    except OSError as exc:
        raise DatasetIOError(path, exc) from exc


def load_sources(directory, size: int) -> list[tuple[str, np.ndarray]]:
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not paths:
        raise DatasetIOError(directory, "no source images")
    return [(p.stem, load_image(p, size)) for p in paths]


def split_sources(sources: Sequence, eval_fraction: float, seed: int = 0):
    """Disjoint (train, eval) split of a source collection."""
    idx = np.random.default_rng(seed).permutation(len(sources))
    n_eval = int(round(eval_fraction * len(sources)))
    ev = sorted(idx[:n_eval])
    tr = sorted(idx[n_eval:])
    return [sources[i] for i in tr], [sources[i] for i in ev]


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


# -- records ---------------------------------------------------------------

@dataclass
class SampleRecord:
    distorted: np.ndarray   # (H, W, 3) float in [0, 1]
    flow_gt: np.ndarray     # (H, W, 2) normalized source coordinates
    mask_gt: np.ndarray     # (H, W) uint8
    params: DistortionParams
    source_id: str
    source: np.ndarray | None = None  # distortion-free reference (H, W, 3)


def make_record(source: np.ndarray, params: DistortionParams, source_id: str) -> SampleRecord:
    # quantize through u8 so in-memory records equal what the on-disk format stores
    source = to_u8(source) / 255.0
    h, w = source.shape[:2]
    distorted = to_u8(distort_image(source, params)) / 255.0
    flow, mask = gt_flow_and_mask(params, h, w)
    return SampleRecord(distorted, flow.astype(np.float32), mask, params, source_id, source)


def synthesize_dataset(sources: Sequence[tuple[str, np.ndarray]], count: int, seed: int, out_dir,
                       image_size: int = 256, patch_size: int = 16,
                       ranges: ParamRanges = ParamRanges()) -> dict:
    """Write ``count`` records plus ``manifest.json`` to ``out_dir``; returns the manifest."""
    if not sources:
        raise DatasetError("no sources")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(out_dir, exc) from exc
    seeds = np.random.SeedSequence(seed).generate_state(count)
    records = []
    for i in range(count):
        src_id, src = sources[i % len(sources)]
        if src.shape[:2] != (image_size, image_size):
            src = np.asarray(Image.fromarray(to_u8(src)).resize((image_size, image_size), Image.BILINEAR)) / 255.0
        params = sample_params(int(seeds[i]), ranges)
        rec = make_record(src, params, src_id)
        rid = f"{i:06d}"
        files = {
            "distorted": f"{rid}_distorted.sfir",
            "flow": f"{rid}_flow.sfir",
            "mask": f"{rid}_mask.sfir",
            "source": f"{rid}_source.sfir",
        }
        arrays = {
            "distorted": to_u8(rec.distorted),
            "flow": rec.flow_gt,
            "mask": rec.mask_gt[..., None],
            "source": to_u8(rec.source),
        }
        for key, name in files.items():
            path = out_dir / name
            try:
                tensorio.save(path, arrays[key])
            except OSError as exc:
                raise DatasetIOError(path, exc) from exc
        records.append({"id": rid, "files": files, "params": list(params.k), "source_id": src_id})
    manifest = {
        "version": FORMAT_VERSION,
        "count": count,
        "image_size": image_size,
        "patch_size": patch_size,
        "seed": seed,
        "records": records,
    }
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(path, exc) from exc
    log.info("wrote %d records to %s", count, out_dir)
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIOError(path, exc) from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def load_record(directory, entry: dict) -> SampleRecord:
    directory = Path(directory)
    arrays = {}
    for key, name in entry["files"].items():
        path = directory / name
        try:
            arrays[key] = tensorio.load(path)
        except (OSError, tensorio.TensorFormatError) as exc:
            raise DatasetIOError(path, exc) from exc
    source = arrays.get("source")
    return SampleRecord(
        distorted=arrays["distorted"] / 255.0,
        flow_gt=arrays["flow"],
        mask_gt=arrays["mask"][..., 0],
        params=DistortionParams(tuple(entry["params"])),
        source_id=entry.get("source_id", ""),
        source=None if source is None else source / 255.0,
    )


def load_dataset(directory) -> tuple[dict, list[SampleRecord]]:
    manifest = read_manifest(directory)
    return manifest, [load_record(directory, e) for e in manifest["records"]]


def iter_records(directory) -> Iterable[SampleRecord]:
    manifest = read_manifest(directory)
    for entry in manifest["records"]:
        yield load_record(directory, entry)
