"""Numpy implementation of the hot training kernels.

This is the fallback backend; clif._kernels._core is the compiled twin with
identical signatures. Elementwise kernels evaluate the same per-element
expressions in the same order as the compiled versions, so the two backends
agree bitwise on everything except the summation order inside reductions
(squared_distance, softmax_xent losses), which agree to ~1e-12 relative.
"""

import numpy as np

BACKEND = "python"

CLAMP_LOGP = -50.0  # lower bound on target log-probability inside softmax_xent


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One in-place Adam update with bias correction.

    A parameter whose gradient is entirely zero keeps its value (its moments
    still decay); this makes optimizer steps a no-op for parameters that a
    loss graph never touched.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    if not np.any(grad):
        return
    step = lr / (1.0 - beta1 ** t)
    denom = np.sqrt(v / (1.0 - beta2 ** t)) + eps
    param -= step * m / denom


def tanh_grad(out, g):
    """Backward of tanh from its forward output: g * (1 - out^2)."""
    return g * (1.0 - out * out)


def relu_grad(x, g):
    """Backward of relu from its forward input; derivative at 0 is 0."""
    return np.where(x > 0.0, g, 0.0)


def squared_distance(a, b):
    """Sum of squared differences between two equal-length vectors."""
    d = a - b
    return float(np.dot(d, d))


def squared_distance_grad(a, b, gout):
    """Gradient of squared_distance w.r.t. a (negate for b)."""
    return (2.0 * gout) * (a - b)


def softmax_xent(scores, targets):
    """Stabilized softmax cross-entropy over rows, averaged.

    scores: (B, C) float64, targets: (B,) int64. Returns
    (mean_loss, probs, clamped) where probs is the (B, C) softmax and
    clamped marks rows whose target log-probability hit CLAMP_LOGP (their
    gradient is defined as zero).
    """
    shifted = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    sums = exps.sum(axis=1)
    probs = exps / sums[:, None]
    rows = np.arange(scores.shape[0])
    logp = shifted[rows, targets] - np.log(sums)
    clamped = logp < CLAMP_LOGP
    losses = np.where(clamped, -CLAMP_LOGP, -logp)
    return float(losses.mean()), probs, clamped
