"""Gauss-Legendre tables and product-integration rules for log-singular kernels."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre


@lru_cache(maxsize=None)
def gauss(n: int):
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    x, w = legendre.leggauss(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def bary_weights(x):
    """Barycentric weights for Lagrange interpolation at the nodes x."""
    x = np.asarray(x, dtype=float)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / np.prod(diff, axis=1)
    return w / np.max(np.abs(w))


def lagrange_matrix(x, y):
    """Matrix E with E[q, k] = l_k(y_q) for the Lagrange basis on nodes x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    wb = bary_weights(x)
    d = y[:, None] - x[None, :]
    exact = d == 0.0
    d[exact] = 1.0
    c = wb[None, :] / d
    E = c / c.sum(axis=1, keepdims=True)
    rows = np.any(exact, axis=1)
    E[rows] = exact[rows].astype(float)
    return E


@lru_cache(maxsize=None)
def _graded_unit(n: int, levels: int):
    """Nodes/weights on (0, 1] graded dyadically toward 0."""
    g, wg = gauss(n)
    xs, ws = [], []
    for k in range(levels):
        a, b = 2.0 ** -(k + 1), 2.0**-k
        xs.append(a + 0.5 * (b - a) * (g + 1.0))
        ws.append(0.5 * (b - a) * wg)
    return np.concatenate(xs), np.concatenate(ws)


@lru_cache(maxsize=None)
def log_self_matrix(p: int):
    """Product weights for the self panel.

    Returns L with L[i, k] = int_{-1}^{1} log|v - u_i| l_k(v) dv, where u_i are the
    p Gauss nodes and l_k the Lagrange basis on them.
    """
    u, _ = gauss(p)
    s, ws = _graded_unit(24, 55)
    L = np.empty((p, p))
    for i, a in enumerate(u):
        # split at the singularity: [a, 1] and [-1, a]
        right = a + (1.0 - a) * s
        left = a - (a + 1.0) * s
        vr = (1.0 - a) * ws
        vl = (a + 1.0) * ws
        v = np.concatenate([right, left])
        w = np.concatenate([vr, vl])
        logd = np.concatenate([np.log((1.0 - a) * s), np.log((a + 1.0) * s)])
        L[i] = (w * logd) @ lagrange_matrix(u, v)
    L.flags.writeable = False
    return L


@lru_cache(maxsize=None)
def remainder_rule(p: int, q: int = 32):
    """q-point Gauss rule on [-1, 1] with its interpolation matrix from p Gauss nodes."""
    u, _ = gauss(p)
    v, w = gauss(q)
    E = lagrange_matrix(u, v)
    E.flags.writeable = False
    return v, w, E


@lru_cache(maxsize=None)
def endpoint_graded_rule(p: int, side: int, levels: int = 16, n: int = 16):
    """Rule on [-1, 1] refined dyadically toward the endpoint ``side`` (+1 or -1).

    Used for a source panel adjacent to the target panel, where the kernel is
    nearly singular at the shared endpoint.  Returns nodes, weights and the
    interpolation matrix from the panel's p Gauss nodes.
    """
    s, ws = _graded_unit(n, levels)
    # the final cell [0, 2^-levels] is covered by one plain cell
    g, wg = gauss(n)
    tail = 2.0**-levels
    s = np.concatenate([s, 0.5 * tail * (g + 1.0)])
    ws = np.concatenate([ws, 0.5 * tail * wg])
    # s is the distance from the endpoint in units of half the panel
    v = side * (1.0 - 2.0 * s)
    w = 2.0 * ws
    u, _ = gauss(p)
    E = lagrange_matrix(u, v)
    for a in (v, w, E):
        a.flags.writeable = False
    return v, w, E


@lru_cache(maxsize=None)
def upsampled_rule(p: int, parts: int = 8, n: int = 16):
    """Composite rule: ``parts`` equal subintervals of n Gauss nodes each."""
    g, wg = gauss(n)
    edges = np.linspace(-1.0, 1.0, parts + 1)
    h = np.diff(edges)
    v = (edges[:-1, None] + 0.5 * h[:, None] * (g[None, :] + 1.0)).ravel()
    w = (0.5 * h[:, None] * wg[None, :]).ravel()
    u, _ = gauss(p)
    E = lagrange_matrix(u, v)
    for a in (v, w, E):
        a.flags.writeable = False
    return v, w, E


def kress_log_weights(N: int):
    """Trigonometric product weights for the periodic log kernel.

    Returns the first row r of the circulant matrix with
    sum_j r[i - j] f(t_j) = int_0^{2 pi} log(4 sin^2((s - t)/2)) f(t) dt
    for trigonometric polynomials f of degree < N/2 at equispaced t_j.
    """
    if N % 2:
        raise ValueError("N must be even")
    n = N // 2
    k = np.arange(N)
    ang = 2.0 * np.pi * k / N
    m = np.arange(1, n)
    r = -(2.0 * np.pi / n) * (np.cos(np.outer(ang, m)) / m).sum(axis=1)
    r -= (np.pi / n**2) * np.cos(n * ang)
    return r
