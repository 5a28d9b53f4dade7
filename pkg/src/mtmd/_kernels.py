"""Fused numba loops for the memory-bound hot spots of training."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
    for k in range(pf.size):
        gk = gf[k]
        mk = b1 * mf[k] + (1.0 - b1) * gk
        vk = b2 * vf[k] + (1.0 - b2) * (gk * gk)
        mf[k] = mk
        vf[k] = vk
        pf[k] -= lr * (mk / bc1) / (math.sqrt(vk / bc2) + eps)
        gf[k] = 0.0


@njit(cache=True)
def layer_norm_forward(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        inv[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[0, j] + beta[0, j]
    return y, xhat, inv


@njit(cache=True)
def layer_norm_backward(g, xhat, inv, gamma):
    n, d = g.shape
    gx = np.empty_like(g)
    ggamma = np.zeros((1, d))
    gbeta = np.zeros((1, d))
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gg = gamma[0, j] * g[i, j]
            s1 += gg
            s2 += gg * xhat[i, j]
            ggamma[0, j] += g[i, j] * xhat[i, j]
            gbeta[0, j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = inv[i] * (gamma[0, j] * g[i, j] - s1 - xhat[i, j] * s2)
    return gx, ggamma, gbeta
