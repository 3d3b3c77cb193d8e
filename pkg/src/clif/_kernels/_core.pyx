# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of pykernels: fused single-pass loops over float64 buffers."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

BACKEND = "compiled"

CLAMP_LOGP = -50.0

cdef double _CLAMP = -50.0


def adam_update(param, grad, m, v, long t, double lr,
                double beta1, double beta2, double eps):
    """One in-place Adam update with bias correction (see pykernels)."""
    cdef double[::1] p_ = param.ravel()
    cdef const double[::1] g_ = grad.ravel()
    cdef double[::1] m_ = m.ravel()
    cdef double[::1] v_ = v.ravel()
    cdef Py_ssize_t i, n = p_.shape[0]
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef bint any_grad = False
    for i in range(n):
        m_[i] = beta1 * m_[i] + c1 * g_[i]
        v_[i] = beta2 * v_[i] + (c2 * g_[i]) * g_[i]
        if g_[i] != 0.0:
            any_grad = True
    if not any_grad:
        return
    cdef double step = lr / (1.0 - beta1 ** t)
    cdef double vcorr = 1.0 - beta2 ** t
    for i in range(n):
        p_[i] -= step * m_[i] / (sqrt(v_[i] / vcorr) + eps)


def tanh_grad(out, g):
    cdef const double[::1] y_ = out.ravel()
    cdef const double[::1] g_ = g.ravel()
    res = np.empty_like(g)
    cdef double[::1] r_ = res.ravel()
    cdef Py_ssize_t i, n = y_.shape[0]
    for i in range(n):
        r_[i] = g_[i] * (1.0 - y_[i] * y_[i])
    return res


def relu_grad(x, g):
    cdef const double[::1] x_ = x.ravel()
    cdef const double[::1] g_ = g.ravel()
    res = np.empty_like(g)
    cdef double[::1] r_ = res.ravel()
    cdef Py_ssize_t i, n = x_.shape[0]
    for i in range(n):
        r_[i] = g_[i] if x_[i] > 0.0 else 0.0
    return res


def squared_distance(a, b):
    cdef const double[::1] a_ = a.ravel()
    cdef const double[::1] b_ = b.ravel()
    cdef Py_ssize_t i, n = a_.shape[0]
    cdef double acc = 0.0, d
    for i in range(n):
        d = a_[i] - b_[i]
        acc += d * d
    return acc


def squared_distance_grad(a, b, double gout):
    cdef const double[::1] a_ = a.ravel()
    cdef const double[::1] b_ = b.ravel()
    res = np.empty_like(a)
    cdef double[::1] r_ = res.ravel()
    cdef Py_ssize_t i, n = a_.shape[0]
    cdef double s = 2.0 * gout
    for i in range(n):
        r_[i] = s * (a_[i] - b_[i])
    return res


def softmax_xent(scores, targets):
    cdef const double[:, ::1] s_ = scores
    cdef const long[::1] t_ = targets
    cdef Py_ssize_t b, c, B = s_.shape[0], C = s_.shape[1]
    probs = np.empty((B, C), dtype=np.float64)
    clamped = np.zeros(B, dtype=bool)
    cdef double[:, ::1] p_ = probs
    cdef cnp.uint8_t[::1] cl_ = clamped.view(np.uint8)
    cdef double mx, tot, logp, loss_sum = 0.0
    for b in range(B):
        mx = s_[b, 0]
        for c in range(1, C):
            if s_[b, c] > mx:
                mx = s_[b, c]
        tot = 0.0
        for c in range(C):
            p_[b, c] = exp(s_[b, c] - mx)
            tot += p_[b, c]
        for c in range(C):
            p_[b, c] /= tot
        logp = (s_[b, t_[b]] - mx) - log(tot)
        if logp < _CLAMP:
            cl_[b] = 1
            loss_sum += -_CLAMP
        else:
            loss_sum += -logp
    return loss_sum / B, probs, clamped
