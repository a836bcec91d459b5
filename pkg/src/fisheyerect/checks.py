"""Built-in consistency checks: Table-of-classes counts, radial round trip, gradients.

Used by ``fisheyerect selfcheck`` and the acceptance tests.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .dataset import build_position_map, sample_params
from .geometry import MAX_RADIUS, radial_forward, radial_inverse_array
from .losses import contrastive_loss, flow_loss, mask_loss, position_loss
from .model import (BoundaryHead, Encoder, FlowHead, ModelConfig, PatchEmbed, PositionHead,
                    convex_upsample)
from .nncore import ops
from .nncore.gradcheck import check_gradients
from .nncore.layers import EncoderLayer, MultiHeadSelfAttention
from .nncore.tensor import Tensor, float64_mode

EXPECTED_CLASSES = {8: 136, 16: 36, 32: 10, 64: 3}
GRAD_TOL = 1e-4
ROUND_TRIP_TOL = 1e-6


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


def class_counts(size: int = 256) -> dict[int, int]:
    return {p: build_position_map(size, size, p).num_classes for p in EXPECTED_CLASSES}


def check_class_counts() -> CheckResult:
    got = class_counts()
    return CheckResult("position-map classes", got == EXPECTED_CLASSES, str(got))


def round_trip_error(n_params: int = 1000, n_radii: int = 64, seed: int = 0) -> float:
    r = np.linspace(0.0, MAX_RADIUS, n_radii)
    worst = 0.0
    for i in range(n_params):
        params = sample_params(seed * 1_000_003 + i)
        back = radial_inverse_array(params, radial_forward(params, r))
        worst = max(worst, float(np.max(np.abs(back - r))))
    return worst


def check_round_trip(n_params: int = 1000) -> CheckResult:
    err = round_trip_error(n_params)
    return CheckResult("radial round trip", err <= ROUND_TRIP_TOL, f"max error {err:.2e}")


# -- gradient suite --------------------------------------------------------

def _tiny_cfg() -> ModelConfig:
    return ModelConfig(image_size=8, patch_size=2, dim=8, depth=2, transfer_depth=1, heads=2)


def gradient_cases() -> dict[str, Callable]:
    """Name -> builder returning ``(fn, inputs, params)`` for :func:`check_gradients`."""
    cases: dict[str, Callable] = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("matmul")
    def _(rng):
        return ops.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))], []

    @case("add")
    def _(rng):
        return ops.add, [rng.standard_normal((3, 4)), rng.standard_normal((4,))], []

    @case("mul")
    def _(rng):
        return ops.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))], []

    @case("div")
    def _(rng):
        return ops.div, [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))], []

    @case("softmax")
    def _(rng):
        return (lambda a: ops.softmax(a, axis=-1)), [rng.standard_normal((3, 5))], []

    @case("log_softmax")
    def _(rng):
        return (lambda a: ops.log_softmax(a, axis=0)), [rng.standard_normal((4, 3))], []

    @case("logsumexp_masked")
    def _(rng):
        where = rng.random((4, 5)) < 0.6
        where[:, 0] = True
        return (lambda a: ops.logsumexp(a, axis=-1, where=where)), [rng.standard_normal((4, 5))], []

    @case("layer_norm")
    def _(rng):
        gain = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
        bias = Tensor(rng.standard_normal(6), requires_grad=True)
        return (lambda a: ops.layer_norm(a, gain, bias)), [rng.standard_normal((3, 6))], [gain, bias]

    @case("gelu")
    def _(rng):
        return ops.gelu, [rng.standard_normal((4, 5)) * 2], []

    @case("sigmoid")
    def _(rng):
        return ops.sigmoid, [rng.standard_normal((4, 5)) * 2], []

    @case("conv2d")
    def _(rng):
        w = Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        return (lambda a: ops.conv2d(a, w, b)), [rng.standard_normal((2, 4, 5, 2))], [w, b]

    @case("linear")
    def _(rng):
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        return (lambda a: ops.linear(a, w, b)), [rng.standard_normal((2, 5, 4))], [w, b]

    @case("reshape_permute")
    def _(rng):
        return (lambda a: a.reshape(3, 2, 4).permute(2, 0, 1)), [rng.standard_normal((6, 4))], []

    @case("take")
    def _(rng):
        idx = np.array([[0, 2], [2, 1], [3, 3]])
        return (lambda a: ops.take(a, idx, axis=1)), [rng.standard_normal((2, 4, 3))], []

    @case("take_along")
    def _(rng):
        idx = np.stack([rng.permutation(5) for _ in range(2)])[:, :, None]
        return (lambda a: ops.take_along(a, idx, axis=1)), [rng.standard_normal((2, 5, 3))], []

    @case("sum_mean")
    def _(rng):
        return (lambda a: ops.sum(a, axis=1, keepdims=True) * ops.mean(a, axis=(0, 2)).reshape(1, 3, 1)
                ), [rng.standard_normal((2, 3, 4))], []

    @case("log_exp_sqrt")
    def _(rng):
        return (lambda a: ops.log(a) + ops.exp(a) * ops.sqrt(a)), [rng.uniform(0.5, 2.0, (3, 4))], []

    @case("abs_clamp")
    def _(rng):
        x = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
        # values stay away from the kinks at 0 and the clamp bounds at +-1.5
        return (lambda a: ops.abs(a) + ops.clamp(a, -1.5, 1.5)), [x], []

    @case("l2_normalize")
    def _(rng):
        return (lambda a: ops.l2_normalize(a)), [rng.standard_normal((4, 5))], []

    @case("concat")
    def _(rng):
        return (lambda a, b: ops.concat([a, b], axis=1)), [rng.standard_normal((2, 3)),
                                                          rng.standard_normal((2, 2))], []

    # composite layers
    @case("multi_head_self_attention")
    def _(rng):
        layer = MultiHeadSelfAttention(8, 2, rng)
        return layer, [rng.standard_normal((2, 5, 8))], layer.parameters()

    @case("encoder_layer")
    def _(rng):
        layer = EncoderLayer(8, 2, rng)
        return layer, [rng.standard_normal((5, 8))], layer.parameters()

    @case("encoder_with_shuffle")
    def _(rng):
        enc = Encoder(_tiny_cfg(), rng)
        perm = rng.permutation(16)
        return (lambda a: enc(a, perm)), [rng.standard_normal((16, 8))], enc.parameters()

    @case("patch_embed")
    def _(rng):
        pe = PatchEmbed(_tiny_cfg(), rng)
        img = rng.random((8, 8, 3))
        return (lambda: pe(img)), [], pe.parameters()

    @case("position_head")
    def _(rng):
        head = PositionHead(8, 6, rng)
        return head, [rng.standard_normal((5, 8))], head.parameters()

    @case("convex_upsample")
    def _(rng):
        def fn(coarse, logits):
            w = ops.softmax(logits.reshape(1, 3, 3, 4, 9), axis=-1).reshape(1, 3, 3, 36)
            return convex_upsample(coarse, w, 2, check=False)
        return fn, [rng.standard_normal((1, 3, 3, 2)), rng.standard_normal((1, 3, 3, 36))], []

    @case("flow_head")
    def _(rng):
        head = FlowHead(_tiny_cfg(), rng)
        for p in head.parameters():  # leave the zero init so every branch carries gradient
            p.data = rng.standard_normal(p.shape) * 0.3
        return head, [rng.standard_normal((1, 16, 8))], head.parameters()

    @case("boundary_head")
    def _(rng):
        head = BoundaryHead(_tiny_cfg(), rng)
        for p in head.parameters():
            p.data = rng.standard_normal(p.shape) * 0.3
        return head, [rng.standard_normal((1, 16, 8))], head.parameters()

    # losses
    @case("contrastive_loss")
    def _(rng):
        labels = np.array([0, 0, 1, 1, 2, 2, 2, 0])
        return (lambda a: contrastive_loss(ops.l2_normalize(a), labels, 0.5)), [rng.standard_normal((8, 4))], []

    @case("position_loss")
    def _(rng):
        labels = rng.integers(0, 4, size=(2, 5))
        return (lambda a: position_loss(a, labels)), [rng.standard_normal((2, 5, 4))], []

    @case("flow_loss")
    def _(rng):
        gt = rng.uniform(-1, 1, (6, 6, 2))
        mask = (rng.random((6, 6)) < 0.7).astype(np.uint8)
        offset = rng.uniform(0.05, 0.3, gt.shape) * rng.choice([-1, 1], gt.shape)
        return (lambda a: flow_loss(a, gt, mask)), [gt + offset], []

    @case("mask_loss")
    def _(rng):
        m = (rng.random((6, 6)) < 0.5).astype(np.uint8)
        return (lambda a: mask_loss(a, m)), [rng.uniform(0.05, 0.95, (6, 6, 1))], []

    return cases


def gradient_error(name: str, seed: int = 0) -> float:
    builder = gradient_cases()[name]
    with float64_mode():
        rng = np.random.default_rng(seed)
        fn, inputs, params = builder(rng)
        return check_gradients(fn, inputs, params=params)


def check_gradient_suite(names=None) -> list[CheckResult]:
    out = []
    for name in names or gradient_cases():
        err = gradient_error(name)
        out.append(CheckResult(f"grad {name}", err <= GRAD_TOL, f"rel error {err:.2e}"))
    return out


def run_all(quick: bool = False) -> list[CheckResult]:
    results = [check_class_counts(), check_round_trip(100 if quick else 1000)]
    results += check_gradient_suite()
    return results
