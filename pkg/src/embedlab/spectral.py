"""Energy-space eigenproblems for K*, symmetry blocks, essential-spectrum
predictions, embedded-eigenvalue detection and cutoff quasimodes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .curves import ParametrizedCurve, ReflectionSymmetry
from .mesh import Mesh, MeshError, rotation_permutation
from .operators import DenseOperator, IndefiniteError, SGram, mean_zero_basis, sym

# Below this the block is taken to contain no constant direction.
CONST_TOL = 1e-12


class SpectralError(ValueError):
    pass


@dataclass
class SpectralResult:
    """Eigenpairs of K* on mean-zero densities, S-orthonormal.

    The lambda = 1/2 pair (equilibrium density) is kept apart in ``half``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # nodal values, one column per eigenvalue
    parity: np.ndarray  # "even", "odd" or "none" per eigenpair
    s_norms: np.ndarray
    mesh_id: str
    half: tuple | None = None  # (eigenvalue, nodal density with unit integral)
    symmetric_residual: float = 0.0
    block: str = "full"

    @property
    def deflated_half(self):
        return self.half

    def all_eigenvalues(self):
        vals = self.eigenvalues
        if self.half is not None:
            vals = np.append(vals, self.half[0])
        return np.sort(vals)

    def select(self, parity):
        m = self.parity == parity
        return self.eigenvalues[m]

    def to_csv_rows(self, stability=None):
        rows = []
        for k, lam in enumerate(self.eigenvalues):
            st = "" if stability is None else repr(float(stability[k]))
            rows.append([k, repr(float(lam)), str(self.parity[k]), repr(float(self.s_norms[k])), st])
        return rows


def _hat(Kstar: DenseOperator, G: SGram):
    sw = np.sqrt(Kstar.mesh.weights)
    Kh = Kstar.matrix * sw[:, None] / sw[None, :]
    Gh = G.gram / sw[:, None] / sw[None, :]
    return Kh, Gh, sw


def _block_solve(Kh, Gh, sw, Q=None, vectors=True, restricted=None):
    """Galerkin eigenproblem of K* in the S inner product on span(Q) (mean-zero part).

    Works in L2-scaled coordinates.  With B = Z^H G Z = L L^H the generalized
    problem is reduced to the Hermitian matrix L^H C L^{-H} + a b^H, which is
    similar to the projected operator and avoids multiplying by G.
    ``restricted`` may supply (Q^H Kh Q, Q^H Gh Q, Q^H q) computed more cheaply.
    """
    q = sw / np.linalg.norm(sw)
    if restricted is not None:
        Kq, Gq, qq = restricted
    elif Q is None:
        Kq, Gq, qq = Kh, Gh, q
    else:
        QH = Q.conj().T
        Kq, Gq, qq = QH @ Kh @ Q, QH @ Gh @ Q, QH @ q
    constrained = np.linalg.norm(qq) > CONST_TOL
    if constrained:
        qq = qq / np.linalg.norm(qq)
        Z = mean_zero_basis(qq)
        ZH = Z.conj().T
        B = sym(ZH @ Gq @ Z)
        C = ZH @ Kq @ Z
    else:
        Z = None
        B = sym(Gq)
        C = Kq
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise IndefiniteError("S is not positive on the mean-zero part of this block") from None
    # M = L^H C L^{-H}
    M = sla.solve_triangular(L, (L.conj().T @ C).conj().T, lower=True).conj().T
    if constrained:
        a = sla.solve_triangular(L, ZH @ (Gq @ qq), lower=True)
        b = sla.solve_triangular(L, ZH @ (Kq.conj().T @ qq), lower=True)
        M = M + np.outer(a, b.conj())
    asym = float(np.linalg.norm(M - M.conj().T) / max(np.linalg.norm(M), 1e-300))
    M = sym(M)
    if not vectors:
        return np.linalg.eigvalsh(M), None, asym
    lam, Y = np.linalg.eigh(M)
    X = sla.solve_triangular(L.conj().T, Y, lower=False)
    if Z is not None:
        X = Z @ X
    if Q is not None:
        X = Q @ X
    F = X / sw[:, None]
    return lam, F, asym


def half_pair(Kstar: DenseOperator, S: DenseOperator):
    """Equilibrium density phi0 (S phi0 constant, integral 1) and its Rayleigh value."""
    w = S.mesh.weights
    n = w.size
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = S.matrix
    A[:n, n] = -1.0
    A[n, :n] = w
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.solve(A, rhs)
    phi0 = sol[:n]
    lam = float(w @ (Kstar.matrix @ phi0))
    return lam, phi0


def _finish(lam, F, G, parity, mesh, half, asym, block):
    s = np.array([G.norm(F[:, k]) for k in range(F.shape[1])]) if F is not None else np.ones(lam.size)
    order = np.argsort(lam, kind="stable")
    return SpectralResult(
        eigenvalues=lam[order],
        eigenvectors=None if F is None else F[:, order],
        parity=np.asarray(parity)[order],
        s_norms=s[order],
        mesh_id=mesh.identity,
        half=half,
        symmetric_residual=asym,
        block=block,
    )


def solve_s_symmetric(Kstar: DenseOperator, G: SGram, vectors: bool = True) -> SpectralResult:
    """All eigenpairs of K* on the full mesh space (mean-zero part plus the 1/2 pair)."""
    if Kstar.kind != "K*" or Kstar.mesh is not G.S.mesh:
        raise SpectralError("expected K* and a Gram matrix on the same mesh")
    Kh, Gh, sw = _hat(Kstar, G)
    lam, F, asym = _block_solve(Kh, Gh, sw, None, vectors)
    half = half_pair(Kstar, G.S)
    return _finish(lam, F, G, ["none"] * lam.size, Kstar.mesh, half, asym, "full")


# --------------------------------------------------------------------------
# symmetry blocks
# --------------------------------------------------------------------------


@dataclass
class ParityProjectors:
    """Mirror permutation with its even/odd projectors and block bases."""

    perm: np.ndarray

    def __post_init__(self):
        idx = np.arange(self.perm.size)
        self.lo = idx[self.perm > idx]
        self.hi = self.perm[self.lo]
        self.fixed = idx[self.perm == idx]

    @property
    def R(self):
        n = self.perm.size
        R = np.zeros((n, n))
        R[np.arange(n), self.perm] = 1.0
        return R

    @property
    def P_e(self):
        return 0.5 * (np.eye(self.perm.size) + self.R)

    @property
    def P_o(self):
        return 0.5 * (np.eye(self.perm.size) - self.R)

    def basis(self, parity):
        """Orthonormal basis of a block (columns (e_i +- e_Ri)/sqrt 2, fixed points e_i)."""
        n = self.perm.size
        r2 = 1.0 / math.sqrt(2.0)
        k = np.arange(self.lo.size)
        if parity == "even":
            Q = np.zeros((n, self.lo.size + self.fixed.size))
            Q[self.lo, k] = r2
            Q[self.hi, k] = r2
            Q[self.fixed, self.lo.size + np.arange(self.fixed.size)] = 1.0
        elif parity == "odd":
            Q = np.zeros((n, self.lo.size))
            Q[self.lo, k] = r2
            Q[self.hi, k] = -r2
        else:
            raise SpectralError(f"unknown parity {parity!r}")
        return Q

    @property
    def Q_e(self):
        return self.basis("even")

    @property
    def Q_o(self):
        return self.basis("odd")

    def restrict(self, A, parity):
        """Q^T A Q by index arithmetic (no dense products)."""
        lo, hi, fx = self.lo, self.hi, self.fixed
        s = 1.0 if parity == "even" else -1.0
        core = 0.5 * (A[np.ix_(lo, lo)] + s * A[np.ix_(lo, hi)] + s * A[np.ix_(hi, lo)] + A[np.ix_(hi, hi)])
        if parity == "odd" or fx.size == 0:
            return core
        r2 = 1.0 / math.sqrt(2.0)
        top = np.hstack([core, r2 * (A[np.ix_(lo, fx)] + A[np.ix_(hi, fx)])])
        bot = np.hstack([r2 * (A[np.ix_(fx, lo)] + A[np.ix_(fx, hi)]), A[np.ix_(fx, fx)]])
        return np.vstack([top, bot])

    def restrict_vector(self, v, parity):
        r2 = 1.0 / math.sqrt(2.0)
        s = 1.0 if parity == "even" else -1.0
        core = r2 * (v[self.lo] + s * v[self.hi])
        if parity == "odd":
            return core
        return np.concatenate([core, v[self.fixed]])

    def block_operator(self, A, parity):
        return self.restrict(A, parity)


def parity_projectors(mesh: Mesh, sym_: ReflectionSymmetry | str) -> ParityProjectors:
    """P_e = (I + R)/2 and P_o = (I - R)/2 for the mirror permutation R."""
    return ParityProjectors(np.asarray(mesh.pairing(sym_)))


def parity_cross_block(Kstar: DenseOperator, pp: ParityProjectors) -> float:
    """||P_e K* P_o|| / ||K*|| (Frobenius)."""
    A = Kstar.matrix
    p = pp.perm
    # P_e A P_o = (A + RA - AR - RAR) / 4 with R the mirror permutation
    C = 0.25 * (A + A[p] - A[:, p] - A[p][:, p])
    return float(np.linalg.norm(C) / np.linalg.norm(A))


def solve_parity(Kstar: DenseOperator, G: SGram, sym_: ReflectionSymmetry | str, vectors: bool = True) -> SpectralResult:
    """Eigenpairs of K* split into even and odd blocks about a mirror line."""
    mesh = Kstar.mesh
    pp = parity_projectors(mesh, sym_)
    Kh, Gh, sw = _hat(Kstar, G)
    lams, Fs, labels, asyms = [], [], [], []
    q = sw / np.linalg.norm(sw)
    for name in ("even", "odd"):
        Q = pp.basis(name)
        if Q.shape[1] == 0:
            continue
        blocks = (pp.restrict(Kh, name), pp.restrict(Gh, name), pp.restrict_vector(q, name))
        lam, F, asym = _block_solve(Kh, Gh, sw, Q, vectors, restricted=blocks)
        lams.append(lam)
        Fs.append(F)
        labels += [name] * lam.size
        asyms.append(asym)
    lam = np.concatenate(lams)
    F = np.concatenate(Fs, axis=1) if vectors else None
    half = half_pair(Kstar, G.S)
    return _finish(lam, F, G, labels, mesh, half, max(asyms), "parity")


def cyclic_projectors(mesh: Mesh, r: int, center=(0.0, 0.0)):
    """Fourier projectors P_k = (1/r) sum_j exp(-2 pi i j k / r) R^j, k = 0..r-1."""
    perm = rotation_permutation(mesh, r, center)
    n = mesh.n
    Rm = np.zeros((n, n))
    Rm[perm, np.arange(n)] = 1.0  # (R f)_{perm(i)} = f_i
    powers = [np.eye(n)]
    for _ in range(1, r):
        powers.append(Rm @ powers[-1])
    out = []
    for k in range(r):
        P = sum(np.exp(-2j * math.pi * j * k / r) * powers[j] for j in range(r)) / r
        out.append(P if r > 1 else P.real)
    return out


def _range_basis(P, tol=1e-10):
    U, s, _ = np.linalg.svd(P)
    return U[:, s > tol]


def solve_cyclic(Kstar: DenseOperator, G: SGram, r: int, center=(0.0, 0.0)):
    """Eigenvalues of K* in each of the r rotation blocks."""
    projs = cyclic_projectors(Kstar.mesh, r, center)
    Kh, Gh, sw = _hat(Kstar, G)
    out = []
    for k, P in enumerate(projs):
        Q = _range_basis(P)
        lam, _, _ = _block_solve(Kh, Gh, sw, Q, vectors=False)
        out.append(np.sort(lam.real))
    return out


# --------------------------------------------------------------------------
# essential spectrum
# --------------------------------------------------------------------------


def _merge(intervals):
    iv = sorted((float(a), float(b)) for a, b in intervals)
    out = []
    for a, b in iv:
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


@dataclass
class CornerPrediction:
    t_corner: float
    theta: float
    orientation: str
    b: float
    on_line: bool | None
    even: tuple | None
    odd: tuple | None


@dataclass
class EssentialSpectrumPrediction:
    corners: list
    full: list
    even: list | None = None
    odd: list | None = None
    symmetry: str | None = None
    eta: float | None = None

    def intervals(self, parity):
        if parity in ("none", "full", None):
            return self.full
        if parity == "even":
            return self.even
        if parity == "odd":
            return self.odd
        raise SpectralError(f"unknown parity {parity!r}")

    def opposite(self, parity):
        return self.intervals("odd" if parity == "even" else "even")

    @staticmethod
    def signed_distance(lam, intervals):
        """Positive outside the union (distance to it), negative inside (depth)."""
        if not intervals:
            return math.inf
        d = math.inf
        for a, b in intervals:
            if a <= lam <= b:
                return -min(lam - a, b - lam)
            d = min(d, a - lam if lam < a else lam - b)
        return d

    def as_dict(self):
        return {
            "symmetry": self.symmetry,
            "eta": self.eta,
            "full": self.full,
            "even": self.even,
            "odd": self.odd,
            "corners": [c.__dict__ for c in self.corners],
        }


def predict_essential_spectrum(curve: ParametrizedCurve, sym_: ReflectionSymmetry | str | None = None) -> EssentialSpectrumPrediction:
    """Essential-spectrum intervals from the corner angles, split by parity if a mirror is given."""
    if isinstance(sym_, str):
        sym_ = curve.symmetry(sym_)
    scale = curve.total_length
    rows, full, even, odd = [], [], [], []
    for c in curve.corners:
        b = c.b
        full.append((-b, b))
        e = o = None
        on = None
        if sym_ is not None:
            x = curve.position(c.t_corner)[0]
            on = bool(sym_.distance_to_line(x)[()] < 1e-9 * scale)
            if on:
                pos, neg = (0.0, b), (-b, 0.0)
                e, o = (pos, neg) if c.orientation == "outward" else (neg, pos)
            else:
                e = o = (-b, b)
            even.append(e)
            odd.append(o)
        rows.append(CornerPrediction(c.t_corner, c.theta, c.orientation, b, on, e, o))
    eta = None
    inward_off = [r for r in rows if r.orientation == "inward" and r.on_line is False]
    if inward_off:
        eta = 0.125 - min(r.b for r in inward_off)
    return EssentialSpectrumPrediction(
        rows,
        _merge(full),
        _merge(even) if sym_ is not None else None,
        _merge(odd) if sym_ is not None else None,
        None if sym_ is None else sym_.name,
        eta,
    )


# --------------------------------------------------------------------------
# embedded eigenvalues
# --------------------------------------------------------------------------


@dataclass
class Candidate:
    eigenvalue: float
    parity: str
    stability: float
    own_distance: float  # signed distance to own-parity prediction
    host_distance: float  # signed distance to opposite-parity prediction
    host_interval: tuple | None
    verdict: str  # embedded | isolated | unstable


@dataclass
class EmbeddedEigenvalueReport:
    candidates: list
    n_essential: dict = field(default_factory=dict)  # per parity: eigenvalues inside own intervals
    tol_stability: float = 0.0
    tol_margin: float = 0.0

    def embedded(self, parity=None):
        return [c for c in self.candidates if c.verdict == "embedded" and (parity is None or c.parity == parity)]

    def stable(self):
        return [c for c in self.candidates if c.verdict in ("embedded", "isolated")]


def _stability(finest: SpectralResult, previous: SpectralResult):
    st = np.empty(finest.eigenvalues.size)
    for p in np.unique(finest.parity):
        prev = np.sort(previous.eigenvalues[previous.parity == p])
        mask = finest.parity == p
        lam = finest.eigenvalues[mask]
        if prev.size == 0:
            st[mask] = math.inf
            continue
        k = np.clip(np.searchsorted(prev, lam), 1, prev.size - 1) if prev.size > 1 else np.zeros(lam.size, int)
        d = np.abs(lam - prev[k])
        if prev.size > 1:
            d = np.minimum(d, np.abs(lam - prev[k - 1]))
        st[mask] = d
    return st


def detect_embedded(
    results: list,
    pred: EssentialSpectrumPrediction,
    tol_stability: float | None = None,
    tol_margin: float = 0.01,
    min_abs: float | None = None,
) -> EmbeddedEigenvalueReport:
    """Classify finest-level eigenvalues against the parity-resolved prediction.

    stability is the distance to the nearest same-parity eigenvalue on the
    previous refinement level.  Eigenvalues inside (or within ``tol_margin`` of)
    their own-parity interval are counted as essential-spectrum approximants.
    The rest are embedded (stable, inside the opposite-parity interval by more
    than the margin), isolated (stable, otherwise) or unstable.
    """
    if len(results) < 2:
        raise SpectralError("need at least two refinement levels")
    finest, prev = results[-1], results[-2]
    for r in (finest, prev):
        if np.any(r.parity == "none"):
            raise SpectralError("parity labels missing; run a parity-resolved solve")
    if pred.even is None:
        raise SpectralError("prediction is not parity resolved")
    if tol_stability is None:
        widths = [b - a for a, b in pred.full]
        tol_stability = 1e-3 * (max(widths) if widths else 1.0)
    if min_abs is None:
        min_abs = tol_margin
    st = _stability(finest, prev)
    cands = []
    n_ess = {"even": 0, "odd": 0}
    for lam, p, s in zip(finest.eigenvalues, finest.parity, st):
        own = pred.signed_distance(lam, pred.intervals(p))
        if own <= tol_margin:
            n_ess[str(p)] += 1
            continue
        if abs(lam) < min_abs:
            continue
        host_ivs = pred.opposite(p)
        host = pred.signed_distance(lam, host_ivs)
        host_iv = next(((a, b) for a, b in host_ivs if a <= lam <= b), None)
        if s >= tol_stability:
            verdict = "unstable"
        elif host < -tol_margin:
            verdict = "embedded"
        else:
            verdict = "isolated"
        cands.append(Candidate(float(lam), str(p), float(s), float(own), float(host), host_iv, verdict))
    return EmbeddedEigenvalueReport(cands, n_ess, float(tol_stability), float(tol_margin))


def coverage_fraction(eigenvalues, interval, resolution=0.01, n_grid=2001):
    """Fraction of grid points of the interval lying within ``resolution`` of an eigenvalue."""
    a, b = interval
    grid = np.linspace(a, b, n_grid)
    lam = np.sort(np.asarray(eigenvalues))
    if lam.size == 0:
        return 0.0
    k = np.clip(np.searchsorted(lam, grid), 1, max(lam.size - 1, 1))
    d = np.abs(grid - lam[np.minimum(k, lam.size - 1)])
    if lam.size > 1:
        d = np.minimum(d, np.abs(grid - lam[k - 1]))
    return float(np.mean(d <= resolution))


# --------------------------------------------------------------------------
# quasimodes
# --------------------------------------------------------------------------


@dataclass
class Quasimode:
    psi: np.ndarray  # nodal vector on the perturbed mesh
    a: float
    chi: np.ndarray  # cutoff values on the shared nodes
    on_A: np.ndarray  # mask of A' nodes (shared index range)
    on_J: np.ndarray
    len_J: float


def build_cutoff_quasimode(
    phi,
    base_mesh: Mesh,
    gamma_mesh: Mesh,
    a_prime: tuple,
    n_shared: int,
    symmetric_J: bool = False,
    sym_: ReflectionSymmetry | None = None,
) -> Quasimode:
    """psi = chi phi with chi = 1 on A' minus J, a on J, 0 elsewhere.

    ``phi`` is a nodal vector on ``base_mesh``; the first ``n_shared`` nodes of
    both meshes are the same points (the common arc), and ``a_prime`` is the
    parameter interval (in ``base_mesh.t``) of A' inside it.  J has the length of
    the base curve outside A' and is centred where |phi| peaks on A' (split in
    two mirror halves when ``symmetric_J``).
    """
    phi = np.asarray(phi, dtype=float)
    if not np.array_equal(base_mesh.points[:n_shared], gamma_mesh.points[:n_shared]):
        raise SpectralError("the shared nodes of the two meshes differ")
    t = base_mesh.t[:n_shared]
    w = base_mesh.weights[:n_shared]
    lo, hi = a_prime
    on_A = (t >= lo) & (t <= hi)
    if not np.any(on_A):
        raise SpectralError("A' contains no nodes")
    L0 = base_mesh.curve.total_length
    len_J = L0 - (hi - lo) * L0
    ph = phi[:n_shared]
    on_J = np.zeros(n_shared, dtype=bool)
    iA = np.nonzero(on_A)[0]
    centres = [t[iA[np.argmax(np.abs(ph[iA]))]]]
    half_len = 0.5 * len_J / L0
    if symmetric_J:
        if sym_ is None:
            raise SpectralError("symmetric J needs the mirror symmetry")
        centres.append(float(sym_.involution(centres[0])))
        half_len *= 0.5
    for c in centres:
        on_J |= np.abs(t - c) <= half_len
    on_J &= on_A
    if not np.any(on_J):
        raise SpectralError("J contains no nodes")
    if np.min(np.abs(ph[on_J])) <= 0.5 * np.max(np.abs(ph[on_A])) and not symmetric_J:
        raise SpectralError("|phi| drops below half its maximum on J")
    rest = on_A & ~on_J
    s_rest = float(w[rest] @ ph[rest])
    s_J = float(w[on_J] @ ph[on_J])
    scale = float(w[on_A] @ np.abs(ph[on_A]))
    if abs(s_J) <= 1e-12 * scale:
        if abs(s_rest) > 1e-12 * scale:
            raise SpectralError("phi integrates to zero over J; cannot enforce mean zero")
        a = 1.0
    else:
        a = -s_rest / s_J
    if not abs(a) < 2.0:
        raise SpectralError(f"cutoff level a = {a:.3g} violates |a| < 2; move or resize J")
    chi = np.where(on_J, a, np.where(on_A, 1.0, 0.0))
    psi = np.zeros(gamma_mesh.n)
    psi[:n_shared] = chi * ph
    return Quasimode(psi, float(a), chi, on_A, on_J, float(len_J))


def quasimode_residual(Kstar: DenseOperator, G: SGram, lam: float, psi, basis=None) -> float:
    """||(K* - lam) psi||_S / ||psi||_S with the residual projected to mean zero.

    With ``basis`` (orthonormal columns in L2-scaled coordinates, e.g. a parity
    block) the residual is computed inside that block.
    """
    psi = np.asarray(psi, dtype=float)
    w = Kstar.mesh.weights
    nrm = G.norm(psi)
    if nrm == 0.0:
        raise SpectralError("psi has zero S-norm")
    r = Kstar.matrix @ psi - lam * psi
    if basis is not None:
        sw = np.sqrt(w)
        r = basis @ (basis.T @ (sw * r)) / sw
    r = r - (w @ r) / w.sum()
    return G.norm(r) / nrm
