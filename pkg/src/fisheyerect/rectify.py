"""Arbitrary-resolution rectification with a trained network.

The network always runs at its fixed training resolution.  Because flows are
stored in normalized coordinates, the predicted flow and confidence can be
bilinearly resized to the input's own resolution and used to warp the
original full-resolution image.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import bilinear_sample, normalized_grid, warp
from .model import ModelConfig, RectifyNet, binarize
from .nncore import load_checkpoint, load_config
from .nncore.tensor import no_grad

MIN_SIZE = 64


def load_model(checkpoint) -> RectifyNet:
    """Build a :class:`RectifyNet` from a checkpoint directory (config read alongside)."""
    config = load_config(checkpoint) or {}
    model_cfg = config.get("train", {}).get("model") or config.get("model")
    cfg = ModelConfig.from_dict(model_cfg) if model_cfg else ModelConfig()
    net = RectifyNet(cfg)
    net.load_params(load_checkpoint(checkpoint))
    return net


def resize_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear (antialiased when shrinking) resize of a float image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (h, w):
        return image
    chans = [np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F")
                        .resize((w, h), Image.BILINEAR)) for c in range(image.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def resize_field(field: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resample a per-pixel field at the pixel centers of an ``h x w`` grid."""
    if field.shape[:2] == (h, w):
        return np.asarray(field, dtype=np.float64)
    return bilinear_sample(field, normalized_grid(h, w))


def predict(net: RectifyNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flow ``(S, S, 2)`` and confidence ``(S, S, 1)`` at the network resolution."""
    s = net.cfg.image_size
    small = resize_image(image, s, s)
    with no_grad():
        flow, conf = net(small)
    return flow.data.astype(np.float64), conf.data.astype(np.float64)


def rectify(image: np.ndarray, net: RectifyNet, sigma: float | None = None,
            timings: dict | None = None, return_parts: bool = False):
    """Rectify an ``H x W x 3`` image of any size (``H, W >= 64``)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"image {h}x{w} smaller than {MIN_SIZE}x{MIN_SIZE}")
    sigma = net.cfg.sigma if sigma is None else sigma
    t0 = time.perf_counter()
    flow, conf = predict(net, image)
    t1 = time.perf_counter()
    flow = resize_field(flow, h, w)
    mask = binarize(resize_field(conf, h, w)[..., 0], sigma)
    out = warp(image, flow, mask)
    t2 = time.perf_counter()
    if timings is not None:
        timings["model"] = t1 - t0
        timings["warp"] = t2 - t1
    if return_parts:
        return out, flow, mask
    return out


def rectify_file(path, checkpoint, out_path) -> Path:
    from .dataset import load_image, save_image
    net = load_model(checkpoint)
    image = load_image(path)
    save_image(out_path, rectify(image, net))
    return Path(out_path)
