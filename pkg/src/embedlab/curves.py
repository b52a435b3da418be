"""Closed planar curves built from smooth pieces, with tagged corners and mirror symmetries.

A curve is an ordered list of pieces traversed counterclockwise.  Each piece is
smooth on its own parameter ``u`` in [0, 1]; corners can only sit at junctions.
The global parameter ``t`` in [0, 1) is proportional to arclength.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre

# Junction turning angles below this are treated as smooth joins.
CORNER_TOL = 1e-8

_GL_X, _GL_W = legendre.leggauss(20)


class CurveError(ValueError):
    """Invalid curve construction."""


def _rot90(v):
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


# --------------------------------------------------------------------------
# pieces
# --------------------------------------------------------------------------


class Piece:
    """Smooth arc x(u), u in [0, 1].

    Subclasses implement ``eval(u)`` returning position, first and second
    u-derivatives as (n, 2) arrays.
    """

    n_sub = 32

    def eval(self, u):
        raise NotImplementedError

    def position(self, u):
        return self.eval(np.atleast_1d(np.asarray(u, dtype=float)))[0]

    def speed(self, u):
        return np.linalg.norm(self.eval(np.atleast_1d(u))[1], axis=-1)

    @cached_property
    def _table(self):
        edges = np.linspace(0.0, 1.0, self.n_sub + 1)
        h = np.diff(edges)
        u = edges[:-1, None] + 0.5 * h[:, None] * (_GL_X[None, :] + 1.0)
        sp = self.speed(u.ravel()).reshape(u.shape)
        seg = 0.5 * h * (sp @ _GL_W)
        return edges, np.concatenate([[0.0], np.cumsum(seg)])

    @cached_property
    def length(self) -> float:
        return float(self._table[1][-1])

    def arclength(self, u):
        """Arclength from u=0 to u."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        edges, cum = self._table
        k = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, self.n_sub - 1)
        a = edges[k]
        half = 0.5 * (u - a)
        nodes = a[:, None] + half[:, None] * (_GL_X[None, :] + 1.0)
        sp = self.speed(nodes.ravel()).reshape(nodes.shape)
        return cum[k] + half * (sp @ _GL_W)

    def param_at(self, sigma):
        """Invert the arclength map by safeguarded Newton iteration."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        edges, cum = self._table
        u = np.interp(sigma, cum, edges)
        for _ in range(30):
            r = self.arclength(u) - sigma
            du = r / self.speed(u)
            u = np.clip(u - du, 0.0, 1.0)
            if np.max(np.abs(du)) < 1e-16:
                break
        return u

    def frame(self, u):
        """Unit tangent, arclength first and second derivatives at u."""
        x, d1, d2 = self.eval(np.atleast_1d(u))
        sp = np.linalg.norm(d1, axis=-1)
        tan = d1 / sp[:, None]
        acc = (d2 - np.sum(d2 * tan, axis=-1)[:, None] * tan) / sp[:, None] ** 2
        return x, tan, acc


class CircleArc(Piece):
    """Arc of the circle |x - center| = radius from angle a0 to a1 (a1 < a0 runs clockwise)."""

    def __init__(self, center, radius, a0, a1):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.a0, self.a1 = float(a0), float(a1)

    def eval(self, u):
        u = np.asarray(u, dtype=float)
        da = self.a1 - self.a0
        a = self.a0 + u * da
        c, s = np.cos(a), np.sin(a)
        r = self.radius
        x = self.center + r * np.stack([c, s], axis=-1)
        d1 = r * da * np.stack([-s, c], axis=-1)
        d2 = -r * da**2 * np.stack([c, s], axis=-1)
        return x, d1, d2

    @cached_property
    def length(self):
        return abs(self.a1 - self.a0) * self.radius

    def arclength(self, u):
        return np.atleast_1d(np.asarray(u, dtype=float)) * self.length

    def param_at(self, sigma):
        return np.atleast_1d(np.asarray(sigma, dtype=float)) / self.length


class EllipseArc(Piece):
    """Confocal-ellipse arc x = (R cos w cosh rho, R sin w sinh rho), w from w0 to w1."""

    n_sub = 64

    def __init__(self, R, rho0, w0, w1):
        self.R, self.rho0 = float(R), float(rho0)
        self.w0, self.w1 = float(w0), float(w1)

    def eval(self, u):
        u = np.asarray(u, dtype=float)
        dw = self.w1 - self.w0
        w = self.w0 + u * dw
        a = self.R * math.cosh(self.rho0)
        b = self.R * math.sinh(self.rho0)
        c, s = np.cos(w), np.sin(w)
        x = np.stack([a * c, b * s], axis=-1)
        d1 = dw * np.stack([-a * s, b * c], axis=-1)
        d2 = -(dw**2) * np.stack([a * c, b * s], axis=-1)
        return x, d1, d2


class LineSegment(Piece):
    def __init__(self, p0, p1):
        self.p0 = np.asarray(p0, dtype=float)
        self.p1 = np.asarray(p1, dtype=float)

    def eval(self, u):
        u = np.asarray(u, dtype=float)
        d = self.p1 - self.p0
        x = self.p0 + u[..., None] * d
        return x, np.broadcast_to(d, x.shape).copy(), np.zeros_like(x)

    @cached_property
    def length(self):
        return float(np.linalg.norm(self.p1 - self.p0))

    def arclength(self, u):
        return np.atleast_1d(np.asarray(u, dtype=float)) * self.length

    def param_at(self, sigma):
        return np.atleast_1d(np.asarray(sigma, dtype=float)) / self.length


class QuinticHermite(Piece):
    """Vector quintic matching value, first and second derivative at both ends."""

    def __init__(self, p0, v0, a0, p1, v1, a1):
        cols = [np.asarray(c, dtype=float) for c in (p0, v0, a0, a1, v1, p1)]
        # monomial coefficients of the six Hermite basis polynomials
        basis = np.array(
            [
                [1, 0, 0, -10, 15, -6],
                [0, 1, 0, -6, 8, -3],
                [0, 0, 0.5, -1.5, 1.5, -0.5],
                [0, 0, 0, 0.5, -1.0, 0.5],
                [0, 0, 0, -4, 7, -3],
                [0, 0, 0, 10, -15, 6],
            ]
        )
        self.coef = basis.T @ np.stack(cols)  # (6, 2), increasing powers

    def eval(self, u):
        u = np.asarray(u, dtype=float)
        c = self.coef
        c1 = c[1:] * np.arange(1, 6)[:, None]
        c2 = c1[1:] * np.arange(1, 5)[:, None]
        x = np.stack([np.polynomial.polynomial.polyval(u, c[:, j]) for j in range(2)], -1)
        d1 = np.stack([np.polynomial.polynomial.polyval(u, c1[:, j]) for j in range(2)], -1)
        d2 = np.stack([np.polynomial.polynomial.polyval(u, c2[:, j]) for j in range(2)], -1)
        return x, d1, d2


class SubPiece(Piece):
    """Restriction of a piece to [ua, ub], reparametrized to [0, 1]."""

    def __init__(self, piece, ua, ub):
        self.piece, self.ua, self.ub = piece, float(ua), float(ub)
        self.n_sub = piece.n_sub

    def eval(self, u):
        h = self.ub - self.ua
        x, d1, d2 = self.piece.eval(self.ua + np.asarray(u, dtype=float) * h)
        return x, d1 * h, d2 * h * h


class Mirrored(Piece):
    """Mirror image of a piece across a line, traversed in reverse."""

    def __init__(self, piece, point, direction):
        self.piece = piece
        self.point = np.asarray(point, dtype=float)
        d = np.asarray(direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        self.n_sub = piece.n_sub

    def _reflect_vec(self, v):
        d = self.direction
        return 2.0 * np.sum(v * d, axis=-1)[..., None] * d - v

    def eval(self, u):
        x, d1, d2 = self.piece.eval(1.0 - np.asarray(u, dtype=float))
        x = self.point + self._reflect_vec(x - self.point)
        return x, -self._reflect_vec(d1), self._reflect_vec(d2)

    @cached_property
    def length(self):
        return self.piece.length


# --------------------------------------------------------------------------
# curve-level types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CornerTag:
    t_corner: float
    theta: float  # half exterior angle
    junction: int = 0  # index of the piece that starts at the corner

    def __post_init__(self):
        if not 0.0 < self.theta < math.pi:
            raise CurveError(f"half exterior angle {self.theta} outside (0, pi)")
        if abs(self.theta - math.pi / 2) < CORNER_TOL:
            raise CurveError("theta = pi/2 is a smooth point, not a corner")

    @property
    def orientation(self) -> str:
        return "outward" if self.theta > math.pi / 2 else "inward"

    @property
    def b(self) -> float:
        """Half-width of the corner's essential-spectrum interval."""
        return abs(0.5 - self.theta / math.pi)


@dataclass(frozen=True)
class ReflectionSymmetry:
    """Mirror symmetry about the line through ``point`` along ``direction``.

    ``t_fixed`` is a parameter whose image lies on the line; the involution is
    t -> 2 t_fixed - t (mod 1).
    """

    point: tuple
    direction: tuple
    t_fixed: float
    name: str = "L"

    @property
    def unit(self):
        d = np.asarray(self.direction, dtype=float)
        return d / np.linalg.norm(d)

    def involution(self, t):
        return np.mod(2.0 * self.t_fixed - np.asarray(t, dtype=float), 1.0)

    def reflect(self, x):
        p = np.asarray(self.point, dtype=float)
        d = self.unit
        v = np.asarray(x, dtype=float) - p
        return p + 2.0 * np.sum(v * d, axis=-1)[..., None] * d - v

    def reflect_vector(self, v):
        d = self.unit
        v = np.asarray(v, dtype=float)
        return 2.0 * np.sum(v * d, axis=-1)[..., None] * d - v

    def distance_to_line(self, x):
        v = np.asarray(x, dtype=float) - np.asarray(self.point, dtype=float)
        return np.abs(_cross(self.unit, v))


class ParametrizedCurve:
    """Closed counterclockwise curve made of smooth pieces.

    Corners are detected from the one-sided tangents at piece junctions.
    """

    def __init__(self, pieces, symmetries=(), name="curve"):
        self.pieces = list(pieces)
        self.symmetries = list(symmetries)
        self.name = name
        lengths = np.array([p.length for p in self.pieces])
        self.piece_lengths = lengths
        self.total_length = float(lengths.sum())
        self.piece_starts = np.concatenate([[0.0], np.cumsum(lengths)])[:-1] / self.total_length
        self._check_closed()
        self.corners = self._detect_corners()

    def _check_closed(self):
        scale = self.total_length
        for i, p in enumerate(self.pieces):
            nxt = self.pieces[(i + 1) % len(self.pieces)]
            gap = np.linalg.norm(p.position(1.0)[0] - nxt.position(0.0)[0])
            if gap > 1e-10 * scale:
                raise CurveError(f"pieces {i} and {i + 1} do not connect (gap {gap:.3e})")

    def junction_turn(self, i) -> float:
        """Signed turning angle entering piece i from piece i-1."""
        prev = self.pieces[i - 1]
        _, t_in, _ = prev.frame(1.0)
        _, t_out, _ = self.pieces[i].frame(0.0)
        return float(np.arctan2(_cross(t_in, t_out), np.sum(t_in * t_out))[0])

    def _detect_corners(self):
        corners = []
        for i in range(len(self.pieces)):
            turn = self.junction_turn(i)
            if abs(turn) > CORNER_TOL:
                corners.append(CornerTag(float(self.piece_starts[i]), 0.5 * (math.pi + turn), i))
        return corners

    # -- evaluation ---------------------------------------------------------

    def locate(self, t):
        """Map global t to (piece index, local arclength)."""
        t = np.mod(np.atleast_1d(np.asarray(t, dtype=float)), 1.0)
        k = np.clip(np.searchsorted(self.piece_starts, t, side="right") - 1, 0, len(self.pieces) - 1)
        s = (t - self.piece_starts[k]) * self.total_length
        return k, np.clip(s, 0.0, self.piece_lengths[k])

    def evaluate(self, t):
        """Position, unit tangent, outward normal and curvature at global t."""
        k, s = self.locate(t)
        n = k.size
        x = np.empty((n, 2))
        tan = np.empty((n, 2))
        kap = np.empty(n)
        for j in np.unique(k):
            m = k == j
            piece = self.pieces[j]
            u = piece.param_at(s[m])
            xx, d1, d2 = piece.eval(u)
            sp = np.linalg.norm(d1, axis=-1)
            x[m] = xx
            tan[m] = d1 / sp[:, None]
            kap[m] = _cross(d1, d2) / sp**3
        normal = -_rot90(tan)
        return x, tan, normal, kap

    def position(self, t):
        return self.evaluate(t)[0]

    def tangent(self, t):
        return self.evaluate(t)[1]

    def outward_normal(self, t):
        return self.evaluate(t)[2]

    def curvature(self, t):
        return self.evaluate(t)[3]

    def param_of_point(self, x0, n_sample=4096) -> float:
        """Global parameter of the curve point nearest to x0."""
        x0 = np.asarray(x0, dtype=float)
        ts = (np.arange(n_sample) + 0.5) / n_sample
        d = np.linalg.norm(self.position(ts) - x0, axis=1)
        j = int(np.argmin(d))
        from scipy.optimize import minimize_scalar

        h = 1.0 / n_sample
        res = minimize_scalar(
            lambda t: float(np.sum((self.position(t)[0] - x0) ** 2)),
            bounds=(ts[j] - 2 * h, ts[j] + 2 * h),
            method="bounded",
            options={"xatol": 1e-14},
        )
        return float(np.mod(res.x, 1.0))

    # -- diagnostics ---------------------------------------------------------

    def total_turning(self) -> float:
        """Integrated curvature plus corner turning angles; 2 pi for a Jordan curve."""
        total = 0.0
        for p in self.pieces:
            edges = np.linspace(0.0, 1.0, p.n_sub + 1)
            for a, b in zip(edges[:-1], edges[1:]):
                u = a + 0.5 * (b - a) * (_GL_X + 1.0)
                _, d1, d2 = p.eval(u)
                sp2 = np.sum(d1 * d1, axis=-1)
                total += 0.5 * (b - a) * float(np.sum(_GL_W * _cross(d1, d2) / sp2))
        total += sum(self.junction_turn(c.junction) for c in self.corners)
        return total

    def is_simple(self, n=2048) -> bool:
        """Pairwise segment-intersection test on an n-point polygon."""
        x = self.position(np.arange(n) / n)
        a, b = x, np.roll(x, -1, axis=0)
        d = b - a
        for i in range(n):
            j = np.arange(i + 2, n)
            if i == 0:
                j = j[j != n - 1]
            if j.size == 0:
                continue
            p, r = a[i], d[i]
            q, s = a[j], d[j]
            rxs = _cross(r[None, :], s)
            qp = q - p
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = _cross(qp, s) / rxs
                uu = _cross(qp, r[None, :]) / rxs
            hit = (np.abs(rxs) > 0) & (tt >= 0) & (tt <= 1) & (uu >= 0) & (uu <= 1)
            if np.any(hit):
                return False
        return True

    def corner_exterior_angle(self, corner: CornerTag) -> float:
        return math.pi + self.junction_turn(corner.junction)

    def sample(self, n):
        t = np.arange(n) / n
        x, _, normal, kap = self.evaluate(t)
        return t, x, normal, kap

    def to_csv(self, path, n=512):
        t, x, normal, kap = self.sample(n)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "nx", "ny", "kappa"])
            for row in zip(t, x[:, 0], x[:, 1], normal[:, 0], normal[:, 1], kap):
                w.writerow([repr(float(v)) for v in row])

    def symmetry(self, name=None) -> ReflectionSymmetry:
        if not self.symmetries:
            raise CurveError(f"{self.name} has no reflection symmetry")
        if name is None:
            return self.symmetries[0]
        for s in self.symmetries:
            if s.name == name:
                return s
        raise CurveError(f"{self.name} has no symmetry named {name!r}")

    def check_symmetry(self, sym: ReflectionSymmetry, n=257) -> float:
        """Max distance between sampled points' mirror images and the curve."""
        t = np.arange(n) / n
        x = self.position(t)
        y = self.position(sym.involution(t))
        return float(np.max(np.linalg.norm(sym.reflect(x) - y, axis=1)))


# --------------------------------------------------------------------------
# constructors
# --------------------------------------------------------------------------


def make_circle(radius: float, center=(0.0, 0.0)) -> ParametrizedCurve:
    if not radius > 0:
        raise CurveError("radius must be positive")
    c = tuple(float(v) for v in center)
    piece = CircleArc(c, radius, 0.0, 2.0 * math.pi)
    syms = [
        ReflectionSymmetry(c, (1.0, 0.0), 0.0, "x-axis"),
        ReflectionSymmetry(c, (0.0, 1.0), 0.25, "y-axis"),
    ]
    return ParametrizedCurve([piece], syms, name=f"circle(R={radius:g})")


def make_ellipse(R: float, rho0: float, start_angle: float = 0.0) -> ParametrizedCurve:
    """Ellipse with foci (+-R, 0) and elliptic radius rho0.

    ``start_angle`` is the elliptic angle of the point t = 0; it must be a
    multiple of pi/2 so that the attached symmetries have simple fixed points.
    """
    if not R > 0:
        raise CurveError("focal distance R must be positive")
    if not rho0 > 0:
        raise CurveError("rho0 <= 0 degenerates to a segment")
    q = start_angle / (math.pi / 2)
    if abs(q - round(q)) > 1e-12:
        raise CurveError("start_angle must be a multiple of pi/2")
    q = int(round(q)) % 4
    piece = EllipseArc(R, rho0, start_angle, start_angle + 2.0 * math.pi)
    # arclength fraction of w = 0 (major-axis point) measured from the start
    t_major = (-0.25 * q) % 1.0
    syms = [
        ReflectionSymmetry((0.0, 0.0), (1.0, 0.0), t_major, "major"),
        ReflectionSymmetry((0.0, 0.0), (0.0, 1.0), (t_major + 0.25) % 1.0, "minor"),
    ]
    return ParametrizedCurve([piece], syms, name=f"ellipse(R={R:g},rho0={rho0:.6g})")


def make_lens(theta: float, chord: float = 2.0) -> ParametrizedCurve:
    """Boundary of two equal intersecting disks with tips at (+-chord/2, 0).

    Outward corners (intersection) for theta > pi/2, inward (union) for theta < pi/2.
    """
    if not 0.0 < theta < math.pi:
        raise CurveError("theta must lie in (0, pi)")
    if abs(theta - math.pi / 2) < 1e-12:
        raise CurveError("theta = pi/2 gives a circle, no corner")
    if not chord > 0:
        raise CurveError("chord must be positive")
    r = chord / (2.0 * math.sin(theta))
    cy = r * math.cos(theta)
    a0 = math.atan2(-cy, chord / 2.0)
    upper = CircleArc((0.0, cy), r, a0, math.pi - a0)
    lower = Mirrored(upper, (0.0, 0.0), (1.0, 0.0))
    syms = [
        ReflectionSymmetry((0.0, 0.0), (1.0, 0.0), 0.0, "tips"),
        ReflectionSymmetry((0.0, 0.0), (0.0, 1.0), 0.25, "bisector"),
    ]
    return ParametrizedCurve([upper, lower], syms, name=f"lens(theta={theta:.6g})")


def make_hkl_curve(
    R: float = 1.0,
    rho0: float = math.atanh(3.0 / 7.0),
    half_angle: float = 0.15,
    tip_theta: float = 3.0 * math.pi / 4.0,
) -> ParametrizedCurve:
    """Ellipse with a straight-sided outward wedge attached over the minor-axis top.

    The wedge meets the ellipse at w = pi/2 -+ half_angle without smoothing, which
    creates two inward corners mirrored about the minor axis.
    """
    if not 0 < half_angle < math.pi / 4:
        raise CurveError("half_angle must lie in (0, pi/4)")
    if not math.pi / 2 < tip_theta < math.pi:
        raise CurveError("the attached tip must be an outward corner")
    w_right = math.pi / 2 - half_angle
    w_left = math.pi / 2 + half_angle
    arc = EllipseArc(R, rho0, w_left, w_right + 2.0 * math.pi)
    p_right = arc.position(1.0)[0]
    p_left = arc.position(0.0)[0]
    half_interior = math.pi - tip_theta  # half of the interior tip angle
    tip = np.array([0.0, p_right[1] + p_right[0] / math.tan(half_interior)])
    right_side = LineSegment(p_right, tip)
    left_side = Mirrored(right_side, (0.0, 0.0), (0.0, 1.0))
    pieces = [arc, right_side, left_side]
    curve = ParametrizedCurve(pieces, name="hkl-perturbed-ellipse")
    t_tip = float(curve.piece_starts[2])
    curve.symmetries = [ReflectionSymmetry((0.0, 0.0), (0.0, 1.0), t_tip, "minor")]
    return curve


# --------------------------------------------------------------------------
# type-T perturbations
# --------------------------------------------------------------------------


@dataclass
class TypeTPerturbation:
    base: ParametrizedCurve  # reparametrized so that base(0) = x0
    x0: np.ndarray
    delta: float
    theta: float
    t1: float
    s1: float
    t2: float
    s2: float
    delta_prime: float
    replacement: list  # pieces of D in traversal order
    curve: ParametrizedCurve  # the realized curve, starting with the kept arc A
    base_split: ParametrizedCurve  # the base curve as [A, B...] pieces
    symmetric: bool
    lipschitz_bound: float
    base_shift: float = 0.0  # base-curve parameter of x0 before reparametrization

    @property
    def kept_arc(self):
        return self.curve.pieces[0]

    @property
    def corner(self) -> CornerTag:
        return self.curve.corners[0]

    def replacement_length(self) -> float:
        return float(sum(p.length for p in self.replacement))


def _restart(curve: ParametrizedCurve, t0: float) -> ParametrizedCurve:
    """Same point set, parametrized to start at global parameter t0."""
    if abs(t0) < 1e-15:
        return curve
    if len(curve.pieces) == 1:
        p = curve.pieces[0]
        u0 = float(p.param_at(t0 * curve.total_length)[0])
        if isinstance(p, (EllipseArc, CircleArc)):
            if isinstance(p, EllipseArc):
                dw = p.w1 - p.w0
                q = EllipseArc(p.R, p.rho0, p.w0 + u0 * dw, p.w1 + u0 * dw)
            else:
                da = p.a1 - p.a0
                q = CircleArc(p.center, p.radius, p.a0 + u0 * da, p.a1 + u0 * da)
            syms = [
                ReflectionSymmetry(s.point, s.direction, (s.t_fixed - t0) % 1.0, s.name)
                for s in curve.symmetries
            ]
            return ParametrizedCurve([q], syms, name=curve.name)
    raise CurveError("restarting is supported for single-piece circles and ellipses")


def make_type_t_perturbation(
    base: ParametrizedCurve,
    x0,
    delta: float,
    theta: float,
    t2: float,
    s2: float,
    delta_prime: float | None = None,
    *,
    symmetry: ReflectionSymmetry | None = None,
    lipschitz_bound: float = 10.0,
    tip_height: float | None = None,
) -> TypeTPerturbation:
    """Replace the arc of ``base`` inside the disk |x - x0| <= delta by a cornered arc.

    The replacement consists of two circular arcs meeting at a tip with half
    exterior angle ``theta`` (a lens corner of chord 2 delta'), joined to the
    base curve by quintic Hermite connectors that match position, tangent and
    curvature.  Parameters t2, s2 refer to the base parametrized from x0.
    """
    if base.corners:
        raise CurveError("base curve must be smooth")
    if not 0.0 < theta < math.pi or abs(theta - math.pi / 2) < 1e-9:
        raise CurveError("theta must lie in (0, pi) and differ from pi/2")
    if delta_prime is None:
        delta_prime = 0.4 * delta
    if not 0.0 < delta_prime < delta:
        raise CurveError("need 0 < delta' < delta")

    x0 = np.asarray(x0, dtype=float)
    t0 = base.param_of_point(x0)
    on_curve = np.linalg.norm(base.position(t0)[0] - x0)
    if on_curve > 1e-9 * base.total_length:
        raise CurveError(f"x0 is not on the base curve (distance {on_curve:.3e})")
    if symmetry is None:
        for s in base.symmetries:
            if s.distance_to_line(x0)[()] < 1e-12 * base.total_length:
                symmetry = s
                break
    elif symmetry.distance_to_line(x0)[()] > 1e-12 * base.total_length:
        raise CurveError("x0 must lie on the symmetry line")
    g0 = _restart(base, t0)
    x0 = g0.position(0.0)[0]
    if symmetry is not None:
        symmetry = next(s for s in g0.symmetries if s.name == symmetry.name)

    # -- B = disk intersect base must be the single arc [0,t1] u [s1,1]
    L0 = g0.total_length
    n = 8192
    ts = np.arange(n + 1) / n
    inside = np.linalg.norm(g0.position(ts) - x0, axis=1) <= delta
    from scipy.optimize import brentq

    def excess(t):
        return float(np.linalg.norm(g0.position(t)[0] - x0)) - delta

    first_out = int(np.argmin(inside))
    last_out = n - int(np.argmin(inside[::-1]))
    if first_out == 0 or np.all(inside):
        raise CurveError("delta too large: the disk swallows the base curve")
    if not np.all(~inside[first_out : last_out + 1]):
        raise CurveError("disk meets the base curve in a disconnected set")
    t1 = brentq(excess, ts[first_out - 1], ts[first_out], xtol=1e-15)
    s1 = brentq(excess, ts[last_out], ts[last_out + 1], xtol=1e-15)
    if symmetry is not None:
        s1 = 1.0 - t1  # exact mirror parameters
    if not 0 < t1 < t2 < s2 < s1 < 1:
        raise CurveError(f"need 0 < t1 < t2 < s2 < s1 < 1, got t1={t1:.6g} t2={t2} s2={s2} s1={s1:.6g}")

    # -- local frame: e2 outward normal at x0, e1 = -tangent (right-handed)
    _, tan0, nor0, _ = g0.evaluate(0.0)
    e2 = nor0[0]
    e1 = -tan0[0]
    if tip_height is None:
        tip_height = 0.35 * delta * abs(1.0 / math.tan(theta))
    sign = 1.0 if theta > math.pi / 2 else -1.0
    tip = x0 + sign * tip_height * e2
    if np.linalg.norm(tip - x0) >= delta:
        raise CurveError("tip falls outside the disk")

    # left corner arc leaves the tip heading toward the -e1 side
    d_left = -math.sin(theta) * e1 + math.cos(theta) * e2
    rho_c = delta_prime / math.sin(theta)
    centre = tip + rho_c * _rot90(d_left)
    a0 = math.atan2(*(tip - centre)[::-1])
    arc_len = 0.8 * delta_prime
    arc_left = CircleArc(centre, rho_c, a0, a0 + arc_len / rho_c)

    piece0 = g0.pieces[0]
    u_t1 = float(piece0.param_at(t1 * L0)[0])
    u_s1 = float(piece0.param_at(s1 * L0)[0])

    def hermite_between(pa, ua, pb, ub):
        xa, ta, aa = pa.frame(ua)
        xb, tb, ab = pb.frame(ub)
        lam = float(np.linalg.norm(xb[0] - xa[0]))
        return QuinticHermite(xa[0], lam * ta[0], lam**2 * aa[0], xb[0], lam * tb[0], lam**2 * ab[0])

    conn_left = hermite_between(arc_left, 1.0, piece0, u_t1)
    if symmetry is not None:
        line_pt, line_dir = x0, e2
        arc_right = Mirrored(arc_left, line_pt, line_dir)
        conn_right = Mirrored(conn_left, line_pt, line_dir)
    else:
        # mirror the corner about its own bisector; connector built directly
        arc_right = Mirrored(arc_left, tip, e2)
        conn_right = hermite_between(piece0, u_s1, arc_right, 0.0)

    kept = SubPiece(piece0, u_t1, u_s1)
    replacement = [conn_right, arc_right, arc_left, conn_left]
    b_pieces = [SubPiece(piece0, u_s1, 1.0), SubPiece(piece0, 0.0, u_t1)]

    _validate_replacement(replacement, x0, delta, e1, e2, lipschitz_bound)

    syms = []
    split_syms = []
    if symmetry is not None:
        tmp = ParametrizedCurve([kept] + replacement, name="type-T")
        t_tip = float(tmp.piece_starts[3])
        syms = [ReflectionSymmetry(tuple(x0), tuple(e2), t_tip, symmetry.name)]
        tmp0 = ParametrizedCurve([kept] + b_pieces, name="base-split")
        split_syms = [ReflectionSymmetry(tuple(x0), tuple(e2), float(tmp0.piece_starts[2]), symmetry.name)]
    curve = ParametrizedCurve([kept] + replacement, syms, name=f"type-T(theta={theta:.6g},delta={delta:.4g})")
    split = ParametrizedCurve([kept] + b_pieces, split_syms, name="base-split")
    if len(curve.corners) != 1:
        raise CurveError(f"construction produced {len(curve.corners)} corners")
    return TypeTPerturbation(
        base=g0,
        x0=x0,
        delta=float(delta),
        theta=float(theta),
        t1=float(t1),
        s1=float(s1),
        t2=float(t2),
        s2=float(s2),
        delta_prime=float(delta_prime),
        replacement=replacement,
        curve=curve,
        base_split=split,
        symmetric=symmetry is not None,
        lipschitz_bound=float(lipschitz_bound),
        base_shift=float(t0),
    )


def _validate_replacement(pieces, x0, delta, e1, e2, M):
    """D must stay inside the disk, be a graph over the e1 axis, and have slope below M."""
    u = np.linspace(0.0, 1.0, 401)
    last = len(pieces) - 1
    for k, p in enumerate(pieces):
        x, d1, _ = p.eval(u)
        r = np.linalg.norm(x - x0, axis=1)
        # the outer connector endpoints lie on the circle itself
        inner = r[1:] if k == 0 else (r[:-1] if k == last else r)
        if np.any(inner >= delta * (1 + 1e-12)):
            raise CurveError("replacement arc leaves the disk")
        dxi = d1 @ e1
        if np.any(dxi >= 0):
            raise CurveError("replacement arc is not a graph over the tangent line")
        slope = float(np.max(np.abs((d1 @ e2) / dxi)))
        if slope >= M:
            raise CurveError(f"slope {slope:.3g} exceeds Lipschitz bound {M}")


def perturbation_metrics(p: TypeTPerturbation, n_sample: int = 2000) -> dict:
    """Length of D, distance from A' to D and the ratio sqrt(len D)/dist."""
    from scipy.optimize import minimize
    from scipy.spatial import cKDTree

    len_d = p.replacement_length()
    g0 = p.base
    ta = np.linspace(p.t2, p.s2, n_sample)
    xa = g0.position(ta)
    d_pieces = p.replacement
    ud = np.linspace(0.0, 1.0, n_sample // len(d_pieces) + 1)
    xd_list, idx = [], []
    for k, piece in enumerate(d_pieces):
        xd_list.append(piece.position(ud))
        idx += [(k, float(u)) for u in ud]
    xd = np.concatenate(xd_list)
    dist, j = cKDTree(xd).query(xa)
    i = int(np.argmin(dist))
    k, u0 = idx[int(j[i])]

    def f(z):
        ta_, u_ = z
        return float(np.linalg.norm(g0.position(ta_)[0] - d_pieces[k].position(u_)[0]))

    res = minimize(
        f,
        x0=[ta[i], u0],
        bounds=[(p.t2, p.s2), (0.0, 1.0)],
        method="L-BFGS-B",
        options={"ftol": 1e-15, "gtol": 1e-12},
    )
    dist_ad = min(float(dist[i]), float(res.fun))
    return {"len_D": len_d, "dist_Aprime_D": dist_ad, "ratio": math.sqrt(len_d) / dist_ad}
