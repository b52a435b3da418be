"""Dense Nystrom matrices for K, K* and S, and the S-energy Gram matrix."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .mesh import Mesh
from .quadrature import endpoint_graded_rule, gauss, kress_log_weights, log_self_matrix, remainder_rule, upsampled_rule

TWO_PI = 2.0 * math.pi

# Source panels closer than this many panel lengths get the upsampled rule.
NEAR_FACTOR = 1.0


class AssemblyError(RuntimeError):
    pass


class IndefiniteError(np.linalg.LinAlgError):
    """S failed to be positive definite on mean-zero densities."""


@dataclass
class DenseOperator:
    matrix: np.ndarray
    mesh: Mesh
    kind: str  # "K", "K*" or "S"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise AssemblyError(f"non-finite entries in {self.kind} on {self.mesh.identity}")

    @property
    def n(self):
        return self.matrix.shape[0]

    def apply(self, f):
        return self.matrix @ f

    def to_binary(self, path):
        """Row-major float64 matrix preceded by two little-endian uint64 dimensions."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", *self.matrix.shape))
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @staticmethod
    def read_binary(path):
        with open(path, "rb") as fh:
            rows, cols = struct.unpack("<QQ", fh.read(16))
            return np.frombuffer(fh.read(), dtype="<f8").reshape(rows, cols).copy()

    def to_csv(self, path, max_n=512):
        if self.n > max_n:
            raise ValueError(f"CSV export limited to N <= {max_n}")
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def _pair_geometry(mesh: Mesh):
    x = mesh.points
    dx = x[:, None, 0] - x[None, :, 0]
    dy = x[:, None, 1] - x[None, :, 1]
    r2 = dx * dx + dy * dy
    np.fill_diagonal(r2, 1.0)
    off = r2 != 1.0
    off |= ~np.eye(mesh.n, dtype=bool)
    if np.any(r2[~np.eye(mesh.n, dtype=bool)] == 0.0):
        raise AssemblyError("two distinct nodes coincide")
    return dx, dy, r2


def _double_layer(mesh: Mesh, adjoint: bool):
    dx, dy, r2 = _pair_geometry(mesh)
    n = mesh.normals
    if adjoint:
        num = dx * n[:, None, 0] + dy * n[:, None, 1]
        A = num / r2 / TWO_PI
    else:
        num = dx * n[None, :, 0] + dy * n[None, :, 1]
        A = -num / r2 / TWO_PI
    A *= mesh.weights[None, :]
    np.fill_diagonal(A, mesh.curvature * mesh.weights / (2.0 * TWO_PI))
    return A


def assemble_k_star(mesh: Mesh) -> DenseOperator:
    """Nystrom matrix of the adjoint double-layer operator K*."""
    return DenseOperator(_double_layer(mesh, True), mesh, "K*", {"rule": "nystrom"})


def assemble_k(mesh: Mesh) -> DenseOperator:
    """Nystrom matrix of the double-layer operator K."""
    return DenseOperator(_double_layer(mesh, False), mesh, "K", {"rule": "nystrom"})


def assemble_s(mesh: Mesh, beta: float = 1.0) -> DenseOperator:
    """Single-layer matrix with kernel -(1/2 pi) log(beta |x - y|)."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if mesh.kind == "uniform":
        A = _s_uniform(mesh, beta)
        rule = "kress"
    else:
        A = _s_panels(mesh, beta)
        rule = "panel-product"
    return DenseOperator(A, mesh, "S", {"beta": beta, "rule": rule})


def _s_uniform(mesh: Mesh, beta):
    N = mesh.n
    L = mesh.curve.total_length
    dx, dy, r2 = _pair_geometry(mesh)
    dt = mesh.t[:, None] - mesh.t[None, :]
    sin2 = 4.0 * np.sin(math.pi * dt) ** 2
    np.fill_diagonal(sin2, 1.0)
    H = 0.5 * np.log(r2 / sin2)
    np.fill_diagonal(H, math.log(L / TWO_PI))
    r = kress_log_weights(N)
    idx = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
    # ds = (L / 2 pi) d(angle); log|x - y| = (1/2) log(4 sin^2) + H
    inner = 0.5 * r[idx] + (TWO_PI / N) * (H + math.log(beta))
    return -(L / TWO_PI) * inner / TWO_PI


def _panel_source(mesh: Mesh, panel, v):
    """Exact geometry of a source panel at reference nodes v in [-1, 1]."""
    piece = mesh.curve.pieces[panel.piece]
    half = 0.5 * (panel.u1 - panel.u0)
    y, d1, _ = piece.eval(panel.u0 + half * (v + 1.0))
    return y, np.linalg.norm(d1, axis=1) * half


def _s_panels(mesh: Mesh, beta):
    x, w = mesh.points, mesh.weights
    dx, dy, r2 = _pair_geometry(mesh)
    A = 0.5 * np.log(r2) * w[None, :]
    panels = mesh.panels
    npan = len(panels)
    lengths = np.array([p.length for p in panels])
    for ip, P in enumerate(panels):
        I = slice(P.start, P.start + P.order)
        xt = x[I]
        # self panel: product rule for log|v - v_i| plus a smooth remainder
        u, _ = gauss(P.order)
        _, sp_nodes = _panel_source(mesh, P, u)
        Lm = log_self_matrix(P.order)
        vq, wq, Eq = remainder_rule(P.order)
        y, spq = _panel_source(mesh, P, vq)
        dist = np.linalg.norm(xt[:, None, :] - y[None, :, :], axis=2)
        rem = np.log(dist / np.abs(vq[None, :] - u[:, None]))
        A[I, I] = Lm * sp_nodes[None, :] + (rem * (wq * spq)[None, :]) @ Eq
        # neighbours: graded toward the shared endpoint
        prev, nxt = (ip - 1) % npan, (ip + 1) % npan
        for jq, side in ((prev, 1), (nxt, -1)):
            if jq == ip:
                continue
            Q = panels[jq]
            J = slice(Q.start, Q.start + Q.order)
            v, wv, E = endpoint_graded_rule(Q.order, side)
            y, spv = _panel_source(mesh, Q, v)
            d = np.linalg.norm(xt[:, None, :] - y[None, :, :], axis=2)
            A[I, J] = (np.log(d) * (wv * spv)[None, :]) @ E
        # other panels that come close (e.g. across a corner)
        near = np.min(np.sqrt(r2[I]), axis=0)
        for jq in range(npan):
            if jq in (ip, prev, nxt):
                continue
            Q = panels[jq]
            J = slice(Q.start, Q.start + Q.order)
            if np.min(near[J]) >= NEAR_FACTOR * lengths[jq]:
                continue
            v, wv, E = upsampled_rule(Q.order)
            y, spv = _panel_source(mesh, Q, v)
            d = np.linalg.norm(xt[:, None, :] - y[None, :, :], axis=2)
            A[I, J] = (np.log(d) * (wv * spv)[None, :]) @ E
    A += math.log(beta) * w[None, :]
    return -A / TWO_PI


# --------------------------------------------------------------------------
# energy inner product
# --------------------------------------------------------------------------


def mean_zero_basis(q):
    """Orthonormal basis (columns) of the complement of the unit vector q."""
    q = np.asarray(q)
    n = q.size
    # Householder reflector mapping q to a multiple of e_0
    v = q.astype(complex if np.iscomplexobj(q) else float).copy()
    alpha = -np.exp(1j * np.angle(v[0])) if np.iscomplexobj(v) else (-1.0 if v[0] >= 0 else 1.0)
    v[0] -= alpha
    v /= np.linalg.norm(v)
    H = np.eye(n, dtype=v.dtype) - 2.0 * np.outer(v, v.conj())
    return H[:, 1:]


@dataclass
class SGram:
    """Energy Gram matrix G = sym(W S) and its factorization on mean-zero densities.

    ``cholesky`` is the lower factor of Z^T G_hat Z, where G_hat = W^{-1/2} G W^{-1/2}
    and Z spans the vectors sqrt(w)-orthogonal to sqrt(w) (mean-zero densities in
    L2-scaled coordinates).
    """

    gram: np.ndarray
    cholesky: np.ndarray
    S: DenseOperator
    Z: np.ndarray
    full_definite: bool
    min_pivot: float
    warnings: list = field(default_factory=list)

    @property
    def weights(self):
        return self.S.mesh.weights

    @property
    def scaled(self):
        s = 1.0 / np.sqrt(self.weights)
        return self.gram * s[:, None] * s[None, :]

    def inner(self, f, g):
        return np.vdot(g, self.gram @ f) if np.iscomplexobj(f) or np.iscomplexobj(g) else float(g @ (self.gram @ f))

    def norm(self, f):
        return math.sqrt(max(np.real(np.vdot(f, self.gram @ f)), 0.0))


def sym(A):
    return 0.5 * (A + A.T.conj())


def build_s_gram(S: DenseOperator) -> SGram:
    """Form G = sym(W S) and factor it on the mean-zero subspace."""
    if S.kind != "S":
        raise ValueError("build_s_gram expects the single-layer operator")
    w = S.mesh.weights
    G = sym(w[:, None] * S.matrix)
    sw = np.sqrt(w)
    Gh = G / sw[:, None] / sw[None, :]
    Z = mean_zero_basis(sw / np.linalg.norm(sw))
    B = sym(Z.T @ Gh @ Z)
    try:
        Lc = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(B)
        raise IndefiniteError(
            f"S is not positive on mean-zero densities (min eigenvalue {ev[0]:.3e}) on {S.mesh.identity}"
        ) from None
    notes = []
    try:
        np.linalg.cholesky(Gh)
        full = True
    except np.linalg.LinAlgError:
        full = False
        msg = "S Gram matrix is not positive definite on the full space; the constant direction is handled by deflation (beta-dependent)"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return SGram(G, Lc, S, Z, full, float(np.min(np.diag(Lc)) ** 2), notes)


def gauss_row_sums(K: DenseOperator):
    """Row sums of K (equal to 1/2 by the Gauss identity)."""
    return K.matrix.sum(axis=1)


def plemelj_residual(K: DenseOperator, Kstar: DenseOperator, S: DenseOperator) -> float:
    """||K S - S K*||_F / ||S||_F in the L2-weighted sense."""
    if not (K.mesh is Kstar.mesh is S.mesh):
        raise ValueError("operators live on different meshes")
    if (K.kind, Kstar.kind, S.kind) != ("K", "K*", "S"):
        raise ValueError("expected operators of kinds K, K*, S")
    sw = np.sqrt(S.mesh.weights)

    def hat(A):
        return A * sw[:, None] / sw[None, :]

    Kh, Ksh, Sh = hat(K.matrix), hat(Kstar.matrix), hat(S.matrix)
    return float(np.linalg.norm(Kh @ Sh - Sh @ Ksh) / np.linalg.norm(Sh))


def self_adjointness_residual(Kstar: DenseOperator, G: SGram) -> float:
    A = G.gram @ Kstar.matrix
    return float(np.linalg.norm(A - A.T) / np.linalg.norm(A))


def weighted_norm(A: DenseOperator) -> float:
    """Spectral norm of the operator on L2(ds)."""
    sw = np.sqrt(A.mesh.weights)
    return float(sla.svdvals(A.matrix * sw[:, None] / sw[None, :])[0])
