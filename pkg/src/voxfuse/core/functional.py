"""Activations and losses built on :mod:`voxfuse.core.tensor`."""

from __future__ import annotations

import numpy as np

from voxfuse.core.tensor import Tensor, as_tensor
from voxfuse.errors import ContractError, DegenerateBatchError, InvalidValueError, ShapeError

L2_EPS = 1e-12


def _check_finite(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        raise InvalidValueError(f"{op}: NaN in input")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return Tensor._make(out, (x,), lambda g: (g * sigmoid(Tensor(d)).data,))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def l2_normalize(x, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """``x / max(||x||, eps)``; a zero vector maps to the zero vector."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe
    active = norm > eps

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * radial) / safe, g / safe),)

    return Tensor._make(out, (x,), backward)


def l2_norm(x, axis: int = 0) -> Tensor:
    """Euclidean norm along ``axis``; the (sub)gradient at a zero vector is taken as zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis))
    safe = np.where(norm > 0, norm, 1.0)

    def backward(g):
        scale = np.where(norm > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return Tensor._make(norm, (x,), backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a - b
    return (diff * diff).mean()


def l1(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1")
    return (a - b).abs().mean()


def cross_entropy(logits: Tensor, labels, ignore_index: int | None = 255) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.shape}")
    _check_finite(logits, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index if ignore_index is not None else np.ones_like(labels, bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("cross_entropy: every entry is ignored")
    lab = labels[valid]
    n_cls = logits.shape[1]
    if lab.min() < 0 or lab.max() >= n_cls:
        raise ContractError(f"labels outside [0, {n_cls})")

    z = logits.data[valid]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n_valid)
    nll = log_norm - shifted[rows, lab]
    out = np.asarray(nll.mean())

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, lab] -= 1.0
        full = np.zeros_like(logits.data)
        full[valid] = probs * (g / n_valid)
        return (full,)

    return Tensor._make(out, (logits,), backward)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-loss increments along a sorted ground-truth indicator."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_class_set(labels: np.ndarray, n_cls: int, classes: str = "present") -> list[int]:
    if classes == "present":
        return [c for c in range(n_cls) if np.any(labels == c)]
    if classes == "all":
        return list(range(n_cls))
    raise ValueError(f"unknown Lovasz class set {classes!r}")


def lovasz_softmax(
    probs: Tensor,
    labels,
    classes: str = "present",
    ignore_index: int | None = None,
    tol: float = 1e-6,
) -> Tensor:
    """Lovasz-softmax loss on N x C class probabilities.

    The per-class error vector is sorted once; the resulting Lovasz weights are
    constants of the backward pass, so the loss is piecewise linear in ``probs``.
    ``classes`` is ``"present"`` (classes appearing in ``labels``) or ``"all"``.
    """
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise ShapeError(f"lovasz_softmax expects N x C probabilities, got {probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs probs {probs.shape}")
    if ignore_index is not None:
        keep = labels != ignore_index
        if not keep.all():
            probs = probs[np.nonzero(keep)[0]]
            labels = labels[keep]
    if labels.size == 0:
        raise DegenerateBatchError("lovasz_softmax: every entry is ignored")
    p = probs.data
    if np.isnan(p).any():
        raise InvalidValueError("lovasz_softmax: NaN in input")
    if (p < -tol).any() or np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise ContractError("lovasz_softmax: probability rows must be nonnegative and sum to 1")

    n_cls = p.shape[1]
    selected = lovasz_class_set(labels, n_cls, classes)
    fg = (labels[:, None] == np.arange(n_cls)[None, :]).astype(np.float64)
    weights = np.zeros_like(p)
    for c in selected:
        err = np.abs(fg[:, c] - p[:, c])
        perm = np.argsort(-err, kind="stable")
        weights[perm, c] = lovasz_grad(fg[perm, c])
    # |fg - p| written linearly so the kink at p == fg never enters the gradient
    errors = probs * (1.0 - 2.0 * fg) + fg
    return (errors * weights).sum() * (1.0 / len(selected))
