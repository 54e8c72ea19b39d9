"""Finite-difference checks of every differentiable operation on small random inputs.

Each case turns an op's output into a scalar with fixed random weights and
compares tape gradients against central differences for all of its inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from voxfuse.core.functional import cross_entropy, lovasz_softmax, sigmoid, softmax
from voxfuse.core.gradcheck import check_gradients
from voxfuse.core.nn import Conv3d
from voxfuse.core.tensor import Tensor, matmul
from voxfuse.daga import daga_loss
from voxfuse.fusion import (
    GatingHead,
    fuse_addition,
    fuse_concat,
    fuse_conv3d,
    fuse_weathfusion,
    gate_weights,
)
from voxfuse.metrics import OccupancyLabels, total_loss
from voxfuse.semantic import GatedCrossAttention, LoRAAdapter
from voxfuse.voxel import CameraModel, GridSpec, VoxelGrid, lss_splat, vertical_gradient

H = 1e-5
TOLERANCE = 1e-4
SMALL = GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0), z_range=(-1.0, 1.0), nx=3, ny=3, nz=4)


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = rng.standard_normal(out.shape)
    return lambda t: (t * weights).sum()


def _check(op: Callable[[], Tensor], params, rng) -> float:
    scalarize = _project(op(), rng)
    return check_gradients(lambda: scalarize(op()), params, H)


def _grid(features: Tensor, channels: int) -> VoxelGrid:
    return VoxelGrid(SMALL.with_channels(channels), features)


def case_softmax(rng):
    x = _param(rng, 4, 5)
    return _check(lambda: softmax(x, axis=1), [x], rng)


def case_sigmoid(rng):
    x = _param(rng, 3, 4, scale=3.0)
    return _check(lambda: sigmoid(x), [x], rng)


def case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    return _check(lambda: matmul(a, b), [a, b], rng)


def case_cross_entropy(rng):
    x = _param(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    labels[0] = 255
    return _check(lambda: cross_entropy(x, labels), [x], rng)


def case_lovasz_softmax(rng):
    x = _param(rng, 6, 3, scale=2.0)
    labels = rng.integers(0, 3, size=6)
    return check_gradients(lambda: lovasz_softmax(softmax(x, axis=1), labels, classes="all"), [x], H)


def case_lss_splat(rng):
    cam = CameraModel.looking_down(3.0, 4, 4, 2.0, [2.25, 3.0, 3.75])
    feats = _param(rng, 2, 4, 4)
    raw = rng.random((3, 4, 4))
    probs = Tensor(0.9 * raw / raw.sum(axis=0), requires_grad=True)
    spec = SMALL.with_channels(2)
    return _check(lambda: lss_splat(feats, probs, cam, spec).features, [feats, probs], rng)


def case_vertical_gradient(rng):
    v = _param(rng, 2, 3, 3, 4)
    return _check(lambda: vertical_gradient(v), [v], rng)


def case_gated_cross_attention(rng):
    lora = LoRAAdapter(6, 6, rank=2, rng=rng)
    lora.B.data[...] = rng.standard_normal(lora.B.shape)
    module = GatedCrossAttention(2, 6, key_dim=3, lora=lora, rng=rng)
    v = _param(rng, 2, 3, 3, 4)
    keys, vals = _param(rng, 3, 6), _param(rng, 3, 6)
    params = [v, keys, vals, *module.parameters()]
    return _check(lambda: module(_grid(v, 2), keys, vals).features, params, rng)


def case_gate_weights(rng):
    head = GatingHead(6, rng=rng)
    emb = _param(rng, 6)
    return _check(lambda: gate_weights(emb, head).values, [emb, *head.parameters()], rng)


def _branches(rng, c_cam=2, c_pts=2):
    return _param(rng, c_cam, 3, 3, 4), _param(rng, c_pts, 3, 3, 4)


def case_fuse_addition(rng):
    a, b = _branches(rng)
    return _check(lambda: fuse_addition(_grid(a, 2), _grid(b, 2)).features, [a, b], rng)


def case_fuse_concat(rng):
    a, b = _branches(rng, 2, 3)
    return _check(lambda: fuse_concat(_grid(a, 2), _grid(b, 3)).features, [a, b], rng)


def case_fuse_conv3d(rng):
    a, b = _branches(rng)
    conv = Conv3d(4, 2, rng=rng)
    return _check(lambda: fuse_conv3d(_grid(a, 2), _grid(b, 2), conv).features,
                  [a, b, *conv.parameters()], rng)


def case_fuse_weathfusion(rng):
    a, b = _branches(rng)
    head = GatingHead(6, rng=rng)
    emb = _param(rng, 6)

    def op():
        return fuse_weathfusion(_grid(a, 2), _grid(b, 2), gate_weights(emb, head)).features

    return _check(op, [a, b, emb, *head.parameters()], rng)


def case_daga_loss(rng):
    a, b = _branches(rng)
    return check_gradients(lambda: daga_loss(_grid(a, 2), _grid(b, 2)), [a, b], H)


def case_total_loss(rng):
    logits = _param(rng, 3, 3, 3, 4)
    labels = OccupancyLabels(rng.integers(0, 3, size=(3, 3, 4)), 3)
    a, b = _branches(rng)
    return check_gradients(
        lambda: total_loss(logits, labels, _grid(a, 2), _grid(b, 2)).total, [logits, a, b], H)


CASES: dict[str, Callable] = {
    "softmax": case_softmax,
    "sigmoid": case_sigmoid,
    "matmul": case_matmul,
    "cross_entropy": case_cross_entropy,
    "lovasz_softmax": case_lovasz_softmax,
    "lss_splat": case_lss_splat,
    "vertical_gradient": case_vertical_gradient,
    "gated_cross_attention": case_gated_cross_attention,
    "gate_weights": case_gate_weights,
    "fuse_addition": case_fuse_addition,
    "fuse_concat": case_fuse_concat,
    "fuse_conv3d": case_fuse_conv3d,
    "fuse_weathfusion": case_fuse_weathfusion,
    "daga_loss": case_daga_loss,
    "total_loss": case_total_loss,
}


def run_case(name: str, seed: int) -> float:
    return CASES[name](np.random.default_rng([seed, 4242]))


def run_suite(seeds: int = 20, names=None) -> dict[str, float]:
    """Worst relative error per op over ``seeds`` random draws."""
    names = list(CASES) if names is None else names
    return {n: max(run_case(n, s) for s in range(seeds)) for n in names}
