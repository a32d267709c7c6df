"""Compiled loops for the memory-bound channels-last primitives."""
import numba as nb
import numpy as np


@nb.njit(cache=True)
def bn_train_forward(x2, gamma, beta, eps, xhat, y):
    m, c = x2.shape
    s = np.zeros(c)
    ss = np.zeros(c)
    for i in range(m):
        for k in range(c):
            v = x2[i, k]
            s[k] += v
            ss[k] += v * v
    mu = s / m
    var = np.maximum(ss / m - mu * mu, 0.0)
    inv = 1.0 / np.sqrt(var + eps)
    mu_t = mu.astype(x2.dtype)
    inv_t = inv.astype(x2.dtype)
    for i in range(m):
        for k in range(c):
            h = (x2[i, k] - mu_t[k]) * inv_t[k]
            xhat[i, k] = h
            y[i, k] = h * gamma[k] + beta[k]
    return mu, var, inv


@nb.njit(cache=True)
def bn_train_backward(g2, xhat, gamma, inv, gx):
    m, c = g2.shape
    gg = np.zeros(c)
    gxh = np.zeros(c)
    for i in range(m):
        for k in range(c):
            gg[k] += g2[i, k]
            gxh[k] += g2[i, k] * xhat[i, k]
    coef = (gamma * inv / m).astype(g2.dtype)
    gg_t = gg.astype(g2.dtype)
    gxh_t = gxh.astype(g2.dtype)
    for i in range(m):
        for k in range(c):
            gx[i, k] = coef[k] * (m * g2[i, k] - gg_t[k] - xhat[i, k] * gxh_t[k])
    return gg, gxh


@nb.njit(cache=True)
def pool2_forward(x, out, idx):
    n, h, w, c = x.shape
    for a in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for k in range(c):
                    best = x[a, 2 * i, 2 * j, k]
                    bi = 0
                    v = x[a, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[a, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[a, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 3
                    out[a, i, j, k] = best
                    idx[a, i, j, k] = bi


@nb.njit(cache=True)
def pool2_backward(g, idx, gx):
    n, ho, wo, c = g.shape
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for k in range(c):
                    b = idx[a, i, j, k]
                    gx[a, 2 * i + b // 2, 2 * j + b % 2, k] = g[a, i, j, k]
