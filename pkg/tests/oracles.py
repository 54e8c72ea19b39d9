"""Slow, loop-based reference implementations used only by the tests.

They are written from the definitions (set functions, per-voxel sums) and
share no code with the library.
"""

import math

import numpy as np


def jaccard_set_loss(mistakes: frozenset, foreground: frozenset) -> float:
    union = foreground | mistakes
    return len(mistakes) / len(union) if union else 0.0


def lovasz_extension_threshold(errors, foreground: frozenset) -> float:
    """Integral over t in [0, inf) of the Jaccard loss of ``{i : e_i > t}``."""
    levels = sorted(set([0.0] + [float(e) for e in errors]))
    total = 0.0
    for lo, hi in zip(levels[:-1], levels[1:]):
        active = frozenset(i for i, e in enumerate(errors) if e > lo)
        total += (hi - lo) * jaccard_set_loss(active, foreground)
    return total


def lovasz_softmax_oracle(probs: np.ndarray, labels: np.ndarray, classes="present") -> float:
    n, k = probs.shape
    if classes == "present":
        chosen = sorted({int(c) for c in labels})
    else:
        chosen = list(range(k))
    losses = []
    for c in chosen:
        fg = frozenset(i for i in range(n) if labels[i] == c)
        errors = [abs((1.0 if labels[i] == c else 0.0) - probs[i, c]) for i in range(n)]
        losses.append(lovasz_extension_threshold(errors, fg))
    return sum(losses) / len(losses)


def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def daga_oracle(cam: np.ndarray, pts: np.ndarray, beta=1.0, lam=0.1) -> float:
    """Per-voxel intensities, z-slice MSEs with depth weights, and the z-difference L1 term."""
    c, nx, ny, nz = cam.shape

    def inten(v, x, y, z):
        return _sig(math.sqrt(sum(v[ch, x, y, z] ** 2 for ch in range(c))))

    ic = [[[inten(cam, x, y, z) for z in range(nz)] for y in range(ny)] for x in range(nx)]
    ip = [[[inten(pts, x, y, z) for z in range(nz)] for y in range(ny)] for x in range(nx)]
    depth = 0.0
    for d in range(nz):
        sq = sum((ic[x][y][d] - ip[x][y][d]) ** 2 for x in range(nx) for y in range(ny))
        depth += (1.0 / (1.0 + beta * d / nz)) * sq / (nx * ny)
    depth /= nz
    sharp = 0.0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz - 1):
                gc = ic[x][y][z + 1] - ic[x][y][z]
                gp = ip[x][y][z + 1] - ip[x][y][z]
                sharp += abs(gc - gp)
    sharp /= nx * ny * (nz - 1)
    return depth + lam * sharp


def attention_oracle(voxels, tokens, wq, bq, wk, bk, wv, bv, wg, bg, lora=None):
    """Gated residual cross-attention evaluated voxel by voxel with explicit sums.

    ``voxels`` is a list of C-vectors, ``tokens`` a list of E-vectors.
    ``lora`` is ``(W, A, B, scale)`` applied to each token before projection.
    """

    def affine(w, b, x):
        return [sum(w[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(w))]

    def adapt(t):
        if lora is None:
            return list(t)
        w, a, bmat, scale = lora
        low = [sum(a[r][j] * t[j] for j in range(len(t))) for r in range(len(a))]
        return [sum(w[i][j] * t[j] for j in range(len(t)))
                + scale * sum(bmat[i][r] * low[r] for r in range(len(low)))
                for i in range(len(w))]

    adapted = [adapt(t) for t in tokens]
    keys = [affine(wk, bk, t) for t in adapted]
    vals = [affine(wv, bv, t) for t in adapted]
    dk = len(wq)
    out = []
    for v in voxels:
        q = affine(wq, bq, v)
        scores = [sum(q[i] * k[i] for i in range(dk)) / math.sqrt(dk) for k in keys]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        z = sum(ex)
        weights = [e / z for e in ex]
        gate = _sig(affine(wg, bg, v)[0])
        mixed = [sum(weights[j] * vals[j][ch] for j in range(len(vals))) for ch in range(len(v))]
        out.append([gate * mixed[ch] + v[ch] for ch in range(len(v))])
    return out
