"""Quadrature meshes: equispaced trapezoid meshes and corner-graded Gauss panels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .curves import ParametrizedCurve, ReflectionSymmetry
from .quadrature import gauss

# Mirror partners farther apart than this (relative to curve length) are rejected.
PAIR_TOL = 1e-9


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class GradingSpec:
    """Geometric grading toward corners.

    ratio : panel shrink factor toward the tip.
    depth : number of graded panels on each side of each corner.
    order : Gauss nodes per panel.
    h : base panel length; defaults to total_length / 48.
    """

    ratio: float = 0.5
    depth: int = 20
    order: int = 16
    h: float | None = None

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise MeshError("grading ratio must lie in (0, 1)")
        if self.depth < 1:
            raise MeshError("grading depth must be >= 1")
        if self.order < 4:
            raise MeshError("panel order must be >= 4")
        if self.h is not None and not self.h > 0:
            raise MeshError("base panel length must be positive")


@dataclass(frozen=True)
class Panel:
    piece: int
    u0: float  # piece parameter range
    u1: float
    start: int  # first node index
    order: int
    level: int  # 0 for smooth panels, k >= 1 counting toward a corner
    length: float


@dataclass
class Mesh:
    curve: ParametrizedCurve
    kind: str  # "uniform" or "panels"
    t: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    curvature: np.ndarray
    weights: np.ndarray
    panels: list = field(default_factory=list)
    pairings: dict = field(default_factory=dict)  # symmetry name -> permutation
    N_uniform: int | None = None
    spec: GradingSpec | None = None

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def mirror_pairing(self):
        if not self.pairings:
            return None
        return next(iter(self.pairings.values()))

    def pairing(self, sym: ReflectionSymmetry | str):
        name = sym if isinstance(sym, str) else sym.name
        try:
            return self.pairings[name]
        except KeyError:
            raise MeshError(f"mesh has no mirror pairing for symmetry {name!r}") from None

    @property
    def identity(self) -> str:
        if self.kind == "uniform":
            return f"{self.curve.name}/uniform/N={self.n}"
        s = self.spec
        return f"{self.curve.name}/panels/m={s.depth},p={s.order},h={s.h:.6g},N={self.n}"

    def panel_ids(self):
        ids = np.zeros(self.n, dtype=int)
        levels = np.zeros(self.n, dtype=int)
        for k, p in enumerate(self.panels):
            ids[p.start : p.start + p.order] = k
            levels[p.start : p.start + p.order] = p.level
        return ids, levels

    def to_csv(self, path):
        ids, levels = self.panel_ids()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "w", "panel_id", "level"])
            for i in range(self.n):
                w.writerow(
                    [repr(float(self.t[i])), repr(float(self.points[i, 0])), repr(float(self.points[i, 1])),
                     repr(float(self.weights[i])), int(ids[i]), int(levels[i])]
                )

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


# --------------------------------------------------------------------------


def build_uniform_mesh(curve: ParametrizedCurve, N: int, pair: bool = True) -> Mesh:
    """N nodes equispaced in arclength with equal weights."""
    if curve.corners:
        raise MeshError("curve has corners; use a graded panel mesh")
    if N < 4 or N % 2:
        raise MeshError("N must be an even integer >= 4")
    t = np.arange(N) / N
    x, _, normal, kap = curve.evaluate(t)
    w = np.full(N, curve.total_length / N)
    mesh = Mesh(curve, "uniform", t, x, normal, kap, w, N_uniform=N)
    if pair:
        _attach_pairings(mesh)
    return mesh


def _piece_breaks(length, h, m, ratio, corner_start, corner_end):
    """Arclength breakpoints on one piece and the grading level of each panel."""
    zone = h
    if corner_start and corner_end:
        zone = min(zone, 0.5 * length)
    elif corner_start or corner_end:
        zone = min(zone, length)
    start_pts, end_pts = [0.0], [length]
    start_lv, end_lv = [], []
    if corner_start:
        d = zone * ratio ** np.arange(m - 1, -1, -1)  # tip outward
        start_pts = [0.0] + list(d)
        start_lv = list(range(m, 0, -1))
    if corner_end:
        d = length - zone * ratio ** np.arange(0, m)
        end_pts = list(d) + [length]
        end_lv = list(range(1, m + 1))
    a, b = start_pts[-1], end_pts[0]
    rem = b - a
    mid, mid_lv = [], []
    if rem > 1e-12 * length:
        k = max(1, math.ceil(rem / h - 1e-9))
        mid = list(a + rem * np.arange(1, k) / k)
        mid_lv = [0] * k
    # a zero-length smooth remainder leaves a duplicate breakpoint
    pts = np.array(start_pts + mid + end_pts)
    keep = np.concatenate([[True], np.diff(pts) > 0])
    pts = pts[keep]
    levels = start_lv + mid_lv + end_lv
    if len(levels) != pts.size - 1:
        raise MeshError("internal panel layout error")
    return pts, levels


def build_panel_mesh(curve: ParametrizedCurve, spec: GradingSpec, pair: bool = True) -> Mesh:
    """Composite Gauss-Legendre panels, geometrically graded toward each corner.

    Panel endpoints are placed in arclength; nodes are Gauss points in each
    piece's own parameter, so the geometry is evaluated exactly.  Corner tips
    are always panel endpoints and never nodes.
    """
    h = spec.h if spec.h is not None else curve.total_length / 48.0
    spec = replace(spec, h=h)
    m, p = spec.depth, spec.order
    smallest = h * spec.ratio ** (m - 1)
    if smallest < 1e-14 * curve.total_length:
        raise MeshError(
            f"grading depth {m} with ratio {spec.ratio} gives panels of length {smallest:.3e}, below the resolvable scale"
        )
    corner_at = {c.junction for c in curve.corners}
    g, wg = gauss(p)
    ts, xs, ns, ks, ws, panels = [], [], [], [], [], []
    start = 0
    npieces = len(curve.pieces)
    for j, piece in enumerate(curve.pieces):
        length = piece.length
        pts, levels = _piece_breaks(
            length, h, m, spec.ratio, j in corner_at, ((j + 1) % npieces) in corner_at
        )
        ub = piece.param_at(pts)
        ub[0], ub[-1] = 0.0, 1.0
        u0, u1 = ub[:-1], ub[1:]
        half = 0.5 * (u1 - u0)
        u = (u0[:, None] + half[:, None] * (g[None, :] + 1.0)).ravel()
        x, d1, d2 = piece.eval(u)
        sp = np.linalg.norm(d1, axis=1)
        tan = d1 / sp[:, None]
        w = (half[:, None] * wg[None, :]).ravel() * sp
        ts.append(curve.piece_starts[j] + piece.arclength(u) / curve.total_length)
        xs.append(x)
        ns.append(np.stack([tan[:, 1], -tan[:, 0]], axis=1))
        ks.append((d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / sp**3)
        ws.append(w)
        for k in range(u0.size):
            panels.append(Panel(j, float(u0[k]), float(u1[k]), start, p, int(levels[k]), float(pts[k + 1] - pts[k])))
            start += p
    mesh = Mesh(
        curve,
        "panels",
        np.concatenate(ts),
        np.concatenate(xs),
        np.concatenate(ns),
        np.concatenate(ks),
        np.concatenate(ws),
        panels=panels,
        spec=spec,
    )
    if np.any(mesh.weights <= 0):
        raise MeshError("non-positive quadrature weight")
    if pair:
        _attach_pairings(mesh)
    return mesh


def build_graded_mesh(curve: ParametrizedCurve, spec: GradingSpec, pair: bool = True) -> Mesh:
    """Panel mesh for a curve with at least one corner."""
    if not curve.corners:
        raise MeshError("curve has no corners; use build_uniform_mesh or build_panel_mesh")
    return build_panel_mesh(curve, spec, pair)


def refine(mesh: Mesh) -> Mesh:
    """Uniform: double N.  Panels: depth + 4 and half the base panel length."""
    pair = bool(mesh.pairings)
    if mesh.kind == "uniform":
        return build_uniform_mesh(mesh.curve, 2 * mesh.n, pair)
    s = mesh.spec
    return build_panel_mesh(mesh.curve, replace(s, depth=s.depth + 4, h=0.5 * s.h), pair)


# --------------------------------------------------------------------------
# symmetry pairings
# --------------------------------------------------------------------------


def _match(points, images, scale):
    dist, idx = cKDTree(points).query(images)
    if np.max(dist) > PAIR_TOL * scale:
        return None
    return idx


def _attach_pairings(mesh: Mesh):
    """Pair nodes with their mirror images and make each orbit exactly symmetric.

    Every node orbit under the group generated by the reflections is rebuilt
    from one representative, so all pairings hold exactly at once.
    """
    syms = []
    for sym in mesh.curve.symmetries:
        perm = _match(mesh.points, sym.reflect(mesh.points), mesh.curve.total_length)
        if perm is None or np.any(perm[perm] != np.arange(mesh.n)):
            continue
        syms.append((sym, perm))
        mesh.pairings[sym.name] = perm
    if not syms:
        return
    done = np.zeros(mesh.n, dtype=bool)
    for rep in range(mesh.n):
        if done[rep]:
            continue
        done[rep] = True
        stack = [rep]
        while stack:
            k = stack.pop()
            for sym, perm in syms:
                j = perm[k]
                if done[j]:
                    continue
                done[j] = True
                mesh.points[j] = sym.reflect(mesh.points[k])
                mesh.normals[j] = sym.reflect_vector(mesh.normals[k])
                mesh.curvature[j] = mesh.curvature[k]
                mesh.weights[j] = mesh.weights[k]
                mesh.t[j] = sym.involution(mesh.t[k])
                stack.append(j)


def rotation_permutation(mesh: Mesh, r: int, center=(0.0, 0.0)):
    """Node permutation induced by rotation through 2 pi / r about ``center``."""
    if r < 1:
        raise MeshError("rotation order must be >= 1")
    if r == 1:
        return np.arange(mesh.n)
    c = np.asarray(center, dtype=float)
    a = 2.0 * math.pi / r
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    images = (mesh.points - c) @ rot.T + c
    perm = _match(mesh.points, images, mesh.curve.total_length)
    if perm is None or np.unique(perm).size != mesh.n:
        raise MeshError(f"node set is not invariant under rotation by 2pi/{r}")
    return perm
