"""Scenario execution: mesh ladders, analyses, verdicts and artifacts."""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..curves import ParametrizedCurve, make_ellipse, perturbation_metrics
from ..mesh import GradingSpec, build_graded_mesh, build_panel_mesh, build_uniform_mesh, refine
from ..operators import (
    assemble_k,
    assemble_k_star,
    assemble_s,
    build_s_gram,
    gauss_row_sums,
    plemelj_residual,
)
from ..spectral import (
    EssentialSpectrumPrediction,
    build_cutoff_quasimode,
    coverage_fraction,
    detect_embedded,
    parity_cross_block,
    parity_projectors,
    predict_essential_spectrum,
    quasimode_residual,
    solve_parity,
    solve_s_symmetric,
)
from .config import Scenario, build_curve, build_type_t, mesh_ladder, number

OUTPUT_ENV = "EMBEDLAB_OUTPUT"

# Eigenvectors are only kept on meshes up to this size.
VECTOR_LIMIT = 1500


class ScenarioError(RuntimeError):
    pass


@dataclass
class Level:
    mesh: object
    Kstar: object
    S: object
    G: object
    result: object
    K: object = None
    seconds: float = 0.0

    def summary(self):
        r = self.result
        out = {
            "mesh": self.mesh.identity,
            "n": int(self.mesh.n),
            "half": r.half[0],
            "n_even": int(np.sum(r.parity == "even")),
            "n_odd": int(np.sum(r.parity == "odd")),
            "min": float(r.eigenvalues.min()),
            "max": float(r.eigenvalues.max()),
            "seconds": round(self.seconds, 3),
        }
        return out


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str

    def as_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


@dataclass
class RunReport:
    scenario: Scenario
    levels: list
    analyses: dict
    verdicts: list
    wall_clock: float
    version: str = __version__
    config_hash: str = ""
    output_dir: str | None = None
    artifacts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def as_dict(self):
        return {
            "scenario": self.scenario.raw,
            "levels": [lv.summary() if isinstance(lv, Level) else lv for lv in self.levels],
            "analyses": self.analyses,
            "verdicts": [v.as_dict() for v in self.verdicts],
            "passed": self.passed,
            "wall_clock_seconds": round(self.wall_clock, 3),
            "version": self.version,
            "config_hash": self.config_hash,
        }

    def summary_text(self):
        lines = [f"scenario {self.scenario.name}: {'PASS' if self.passed else 'FAIL'} ({self.wall_clock:.1f} s)"]
        for v in self.verdicts:
            lines.append(f"  [{'pass' if v.passed else 'FAIL'}] {v.name}: {v.detail}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def build_meshes(curve: ParametrizedCurve, mesh_spec: dict):
    meshes = []
    for entry in mesh_ladder(mesh_spec):
        if entry[0] == "uniform":
            meshes.append(build_uniform_mesh(curve, entry[1]))
            continue
        _, spec, steps = entry
        m = build_graded_mesh(curve, spec) if curve.corners else build_panel_mesh(curve, spec)
        for _ in range(steps):
            m = refine(m)
        meshes.append(m)
    return meshes


def solve_level(mesh, symmetry=None, with_k=False, vectors=None) -> Level:
    t0 = time.perf_counter()
    Ks = assemble_k_star(mesh)
    S = assemble_s(mesh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        G = build_s_gram(S)
    if vectors is None:
        vectors = mesh.n <= VECTOR_LIMIT
    if symmetry is not None:
        res = solve_parity(Ks, G, symmetry, vectors=vectors)
    else:
        res = solve_s_symmetric(Ks, G, vectors=vectors)
    K = assemble_k(mesh) if with_k else None
    return Level(mesh, Ks, S, G, res, K, time.perf_counter() - t0)


def alpha_values(rho0, n_max):
    return [0.5 * math.exp(-2.0 * n * rho0) for n in range(1, n_max + 1)]


def expected_parity(line, n, sign):
    """Parity of the cos/sin eigenfunctions of the ellipse about an axis."""
    if line == "major":
        return "even" if sign > 0 else "odd"
    odd_n = n % 2 == 1
    if sign > 0:
        return "odd" if odd_n else "even"
    return "even" if odd_n else "odd"


def alpha_table(result, rho0, n_max, line):
    rows = []
    lam = result.eigenvalues
    for n, a in enumerate(alpha_values(rho0, n_max), start=1):
        row = {"n": n, "alpha": a}
        for sign, tag in ((1, "plus"), (-1, "minus")):
            k = int(np.argmin(np.abs(lam - sign * a)))
            row[f"{tag}_value"] = float(lam[k])
            row[f"{tag}_error"] = float(abs(lam[k] - sign * a))
            row[f"{tag}_parity"] = str(result.parity[k])
            row[f"{tag}_expected_parity"] = expected_parity(line, n, sign) if line else "none"
        rows.append(row)
    return rows


def gauss_defect(level: Level):
    """Row-sum defect of K: max-norm on uniform meshes, weighted L2 on panels."""
    K = level.K if level.K is not None else assemble_k(level.mesh)
    d = gauss_row_sums(K) - 0.5
    if level.mesh.kind == "uniform":
        return float(np.max(np.abs(d)))
    w = level.mesh.weights
    return float(math.sqrt(w @ d**2 / w.sum()))


def kernel_bound_ratio(level: Level):
    """max over off-diagonal entries of 2 pi |K*(x,y)| |x - y| (at most 1)."""
    m = level.mesh
    x = m.points
    r = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    kern = np.abs(level.Kstar.matrix) / m.weights[None, :]
    np.fill_diagonal(kern, 0.0)
    return float(np.max(2.0 * math.pi * kern * r))


def swap_defect(result, lam_floor=1e-3, n_max=10):
    """For the largest |lambda|, check -lambda appears with the opposite parity."""
    lam, par = result.eigenvalues, result.parity
    idx = [k for k in np.argsort(-np.abs(lam)) if abs(lam[k]) > lam_floor][:n_max]
    worst = 0.0
    for k in idx:
        opp = "odd" if par[k] == "even" else "even"
        other = lam[par == opp]
        worst = max(worst, float(np.min(np.abs(other + lam[k]))))
    return worst


# --------------------------------------------------------------------------
# analyses
# --------------------------------------------------------------------------


def _invariants(levels, curve, scenario, tol):
    out, verdicts = {}, []
    for lv in levels:
        tag = lv.mesh.identity
        r = lv.result
        rows = {}
        rows["gauss_defect"] = gauss_defect(lv)
        vals = r.all_eigenvalues()
        rows["max_eigenvalue"] = float(vals.max())
        rows["min_eigenvalue"] = float(vals.min())
        rows["n_near_half"] = int(np.sum(np.abs(vals - 0.5) < tol["half"]))
        rows["s_min_pivot"] = lv.G.min_pivot
        rows["kernel_bound_ratio"] = kernel_bound_ratio(lv)
        if scenario.symmetry is not None:
            pp = parity_projectors(lv.mesh, scenario.symmetry)
            rows["cross_block"] = parity_cross_block(lv.Kstar, pp)
        if r.eigenvectors is not None:
            F = r.eigenvectors
            rows["s_orthonormality"] = float(np.max(np.abs(F.T @ lv.G.gram @ F - np.eye(F.shape[1]))))
        out[tag] = rows
    fin = out[levels[-1].mesh.identity]
    gtol = tol["gauss"]
    verdicts.append(Verdict("gauss_identity", fin["gauss_defect"] < gtol, f"K row-sum defect {fin['gauss_defect']:.2e} < {gtol:g}"))
    ok = fin["max_eigenvalue"] <= 0.5 + tol["half"] and fin["min_eigenvalue"] > -0.5 - tol["inclusion"] and fin["n_near_half"] == 1
    verdicts.append(
        Verdict("spectral_inclusion", ok, f"spectrum in [{fin['min_eigenvalue']:.6f}, {fin['max_eigenvalue']:.10f}], {fin['n_near_half']} eigenvalue(s) at 1/2")
    )
    verdicts.append(Verdict("s_positivity", fin["s_min_pivot"] > 0, f"min Cholesky pivot {fin['s_min_pivot']:.3e} on mean-zero densities"))
    verdicts.append(Verdict("kernel_bound", fin["kernel_bound_ratio"] <= 1.0 + 1e-12, f"max 2pi|K*||x-y| = {fin['kernel_bound_ratio']:.6f}"))
    if "cross_block" in fin:
        verdicts.append(Verdict("parity_cross_block", fin["cross_block"] < tol["cross_block"], f"{fin['cross_block']:.2e}"))
    if "s_orthonormality" in fin:
        verdicts.append(Verdict("s_orthonormality", fin["s_orthonormality"] < 1e-10, f"{fin['s_orthonormality']:.2e}"))
    if scenario.symmetry is not None and not curve.corners and scenario.curve.get("kind") == "ellipse":
        d = swap_defect(levels[-1].result)
        out["swap_defect"] = d
        verdicts.append(Verdict("parity_swap", d < tol["swap"], f"max |lambda + lambda'| over opposite parity {d:.2e}"))
    return out, verdicts


def _spectrum(levels, scenario, tol):
    out, verdicts = {}, []
    r = levels[-1].result
    half = r.half[0]
    out["half"] = half
    verdicts.append(Verdict("half_eigenvalue", abs(half - 0.5) < tol["half"], f"|lambda_half - 1/2| = {abs(half - 0.5):.2e}"))
    exp = scenario.expect
    if exp.get("zero_spectrum"):
        mx = float(np.max(np.abs(r.eigenvalues)))
        out["max_abs_other"] = mx
        verdicts.append(Verdict("zero_spectrum", mx < tol["zero"], f"max |lambda| off the 1/2 pair = {mx:.2e}"))
    if "alpha_table" in exp:
        spec = exp["alpha_table"]
        rho0 = number(scenario.curve["rho0"], "curve.rho0")
        table = alpha_table(r, rho0, int(spec.get("n_max", 5)), scenario.symmetry)
        out["alpha_table"] = table
        err = max(max(row["plus_error"], row["minus_error"]) for row in table)
        verdicts.append(Verdict("alpha_values", err < tol["alpha"], f"max |computed - alpha_n| = {err:.2e}"))
        if scenario.symmetry:
            ok = all(row["plus_parity"] == row["plus_expected_parity"] and row["minus_parity"] == row["minus_expected_parity"] for row in table)
            verdicts.append(Verdict("alpha_parity", ok, f"parity labels about the {scenario.symmetry} axis"))
    return out, verdicts


def _plemelj(levels, scenario, tol):
    res = []
    for lv in levels:
        K = lv.K if lv.K is not None else assemble_k(lv.mesh)
        res.append(plemelj_residual(K, lv.Kstar, lv.S))
    out = {"residuals": res, "meshes": [lv.mesh.identity for lv in levels]}
    verdicts = [Verdict("plemelj", res[-1] < tol["plemelj"], f"||KS - SK*||/||S|| = {res[-1]:.2e} < {tol['plemelj']:g}")]
    if scenario.expect.get("plemelj_monotone"):
        mono = all(b < a for a, b in zip(res, res[1:]))
        verdicts.append(Verdict("plemelj_monotone", mono, " > ".join(f"{v:.2e}" for v in res)))
    return out, verdicts


def _lens_fill(levels, pred, scenario, tol):
    out, verdicts = {}, []
    b = max(c.b for c in pred.corners)
    res = tol["coverage_resolution"]
    cov = {"even": [], "odd": []}
    for lv in levels:
        for p in ("even", "odd"):
            iv = pred.intervals(p)[0]
            cov[p].append(coverage_fraction(lv.result.select(p), iv, res))
    out["coverage"] = cov
    for p in ("even", "odd"):
        mono = all(y >= x for x, y in zip(cov[p], cov[p][1:]))
        verdicts.append(Verdict(f"coverage_{p}", mono, "non-decreasing: " + ", ".join(f"{c:.4f}" for c in cov[p])))
    r = levels[-1].result
    hi, lo = float(r.select("even").max()), float(r.select("odd").min())
    out["extremes"] = {"even_max": hi, "odd_min": lo, "b": b}
    rel = max(abs(hi - b), abs(lo + b)) / b
    verdicts.append(Verdict("extremes", rel < tol["extreme_rel"], f"even max {hi:.5f}, odd min {lo:.5f} vs +-{b:.5f} (rel {rel:.3f})"))
    return out, verdicts


def _embedded(levels, pred, scenario, tol):
    rep = detect_embedded([lv.result for lv in levels], pred, tol["stability"], tol["margin"])
    out = {
        "tol_stability": rep.tol_stability,
        "tol_margin": rep.tol_margin,
        "n_essential": rep.n_essential,
        "candidates": [c.__dict__ for c in rep.candidates],
    }
    verdicts = []
    loc = tol["location"]
    for want in scenario.expect.get("embedded", []):
        p, near = want["parity"], number(want["near"], "expect.embedded.near")
        hits = [c for c in rep.embedded(p) if abs(c.eigenvalue - near) <= loc]
        detail = ", ".join(f"{c.eigenvalue:.6f} (stab {c.stability:.1e})" for c in hits) or "none"
        verdicts.append(Verdict(f"embedded_{p}_{near:+g}", len(hits) == 1, f"exactly one {p} embedded eigenvalue within {loc} of {near}: {detail}"))
    for near in scenario.expect.get("absent_near", []):
        near = number(near)
        hits = [c for c in rep.stable() if abs(c.eigenvalue - near) <= loc]
        verdicts.append(Verdict(f"absent_{near:+g}", not hits, f"stable eigenvalues within {loc} of {near}: {[round(c.eigenvalue, 6) for c in hits]}"))
    if scenario.expect.get("no_stable_outside"):
        st = rep.stable()
        verdicts.append(Verdict("no_stable_outside", not st, f"stable eigenvalues outside own-parity intervals: {[round(c.eigenvalue, 5) for c in st]}"))
    return out, verdicts, rep


# --------------------------------------------------------------------------
# quasimode ladder
# --------------------------------------------------------------------------


def quasimode_ladder(qm: dict, tol) -> tuple:
    """Cutoff quasimode residuals for a delta-halving ladder of type-T perturbations."""
    base, _ = build_curve(qm["base"])
    theta = number(qm["theta"], "quasimode.theta")
    lam_t = number(qm.get("lam", 0.2), "quasimode.lam")
    deltas = [number(d, "quasimode.deltas") for d in qm["deltas"]]
    entry = mesh_ladder(qm.get("mesh", {"kind": "panels", "depth": 16, "h": 0.1}), "quasimode.mesh")[0]
    spec = entry[1]
    dp = qm.get("delta_prime")
    rows = []
    for d in deltas:
        tp = build_type_t(base, theta, d, None if dp is None else number(dp) * d)
        mb = build_panel_mesh(tp.base_split, spec)
        mg = build_graded_mesh(tp.curve, spec)
        n_shared = sum(p.order for p in mb.panels if p.piece == 0)
        # the split base keeps only the mirror line through the corner
        line = qm.get("line", tp.base_split.symmetries[0].name if tp.symmetric else None)
        lb = solve_level(mb, line, vectors=True)
        k = int(np.argmin(np.abs(lb.result.eigenvalues - lam_t)))
        phi = lb.result.eigenvectors[:, k]
        a_prime = (tp.t2 - tp.t1, tp.s2 - tp.t1)
        sym_ = tp.base_split.symmetries[0] if tp.symmetric else None
        q = build_cutoff_quasimode(phi, mb, mg, a_prime, n_shared, symmetric_J=sym_ is not None, sym_=sym_)
        Ks = assemble_k_star(mg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            G = build_s_gram(assemble_s(mg))
        eps = quasimode_residual(Ks, G, lam_t, q.psi)
        met = perturbation_metrics(tp)
        rows.append(
            {
                "delta": d,
                "n": int(mg.n),
                "base_eigenvalue": float(lb.result.eigenvalues[k]),
                "base_parity": str(lb.result.parity[k]),
                "a": q.a,
                "eps": eps,
                "resolvent_lower_bound": 1.0 / eps,
                "psi_s_norm_ratio": G.norm(q.psi) / lb.G.norm(phi),
                "len_D": met["len_D"],
                "dist_Aprime_D": met["dist_Aprime_D"],
                "ratio": met["ratio"],
            }
        )
    slack = number(qm.get("slack", 0.05))
    eps_max = number(qm.get("eps_max", 0.05))
    eps = [r["eps"] for r in rows]
    mono = all(b <= a * (1.0 + slack) for a, b in zip(eps, eps[1:]))
    verdicts = [
        Verdict("quasimode_monotone", mono, " -> ".join(f"{e:.3e}" for e in eps) + f" (slack {slack:.0%})"),
        Verdict("quasimode_final", eps[-1] < eps_max, f"eps {eps[-1]:.3e} < {eps_max}; resolvent bound {1 / eps[-1]:.1f}"),
    ]
    return {"rows": rows, "lam": lam_t, "theta": theta}, verdicts


# --------------------------------------------------------------------------
# theorem scenario
# --------------------------------------------------------------------------


def scenario_theorem_a(th: dict, tol) -> tuple:
    """Build a delta-ladder of type-T perturbations until the target eigenvalues are embedded.

    For an outward corner on the mirror line the targets are the j_max largest
    positive odd and j_max largest negative even eigenvalues of the base curve;
    an inward corner swaps the parities.
    """
    bspec = dict(th["base"])
    line = th.get("line", "minor")
    orient = th.get("orientation", "outward")
    if orient not in ("outward", "inward"):
        raise ScenarioError("theorem.orientation must be outward or inward")
    if bspec["kind"] != "ellipse":
        raise ScenarioError("theorem scenarios use an ellipse base")
    # start the parametrization on the chosen mirror line
    bspec["start_angle"] = math.pi / 2 if line == "minor" else 0.0
    base, _ = build_curve(bspec)
    j_max = int(th.get("j_max", 1))
    base_lv = solve_level(build_uniform_mesh(base, 256), line, vectors=True)
    lam, par = base_lv.result.eigenvalues, base_lv.result.parity
    pos_p, neg_p = ("odd", "even") if orient == "outward" else ("even", "odd")
    pos = sorted(lam[(par == pos_p) & (lam > 1e-6)], reverse=True)[:j_max]
    neg = sorted(lam[(par == neg_p) & (lam < -1e-6)])[:j_max]
    if len(pos) < j_max or len(neg) < j_max:
        raise ScenarioError("base curve has too few eigenvalues of the required parity")
    targets = [(float(v), pos_p) for v in pos] + [(float(v), neg_p) for v in neg]
    margin = tol["margin"]
    b = number(th.get("b", 0.3), "theorem.b")
    need = max(abs(v) for v, _ in targets) + 2 * margin
    if b <= need:
        b = min(0.49, need)
    theta = math.pi * (0.5 + b) if orient == "outward" else math.pi * (0.5 - b)
    # location window: half the gap to the nearest other base eigenvalue of the same parity
    windows = []
    for v, p in targets:
        same = lam[(par == p) & (np.abs(lam - v) > 1e-9)]
        gap = float(np.min(np.abs(same - v))) if same.size else 1.0
        windows.append(min(tol["location"], 0.5 * gap))
    delta = number(th.get("delta0", 0.2), "theorem.delta0")
    delta_min = number(th.get("delta_min", 0.025), "theorem.delta_min")
    max_steps = int(th.get("max_steps", 4))
    mesh_spec = th.get("mesh", {"kind": "graded", "depth": 16, "h": 0.1, "levels": 2})
    ladder, confirmed = [], False
    pred = None
    steps = 0
    while delta >= delta_min and steps < max_steps:
        steps += 1
        tp = build_type_t(base, theta, delta)
        pred = predict_essential_spectrum(tp.curve, line)
        levels = [solve_level(m, line) for m in build_meshes(tp.curve, mesh_spec)]
        rep = detect_embedded([lv.result for lv in levels], pred, tol["stability"], margin)
        found = []
        for (v, p), win in zip(targets, windows):
            hits = [c for c in rep.embedded(p) if abs(c.eigenvalue - v) <= win]
            found.append(hits[0].eigenvalue if len(hits) == 1 else None)
        # quasimode residual of each target on this perturbation
        eps = _target_residuals(tp, targets, line, mesh_spec, levels[-1])
        row = {
            "delta": delta,
            "n": int(levels[-1].mesh.n),
            "found": found,
            "eps": eps,
            "n_embedded": len(rep.embedded()),
        }
        ladder.append(row)
        if all(f is not None for f in found):
            confirmed = True
            break
        delta *= 0.5
    out = {
        "orientation": orient,
        "line": line,
        "b": b,
        "theta": theta,
        "targets": [{"eigenvalue": v, "parity": p, "window": w} for (v, p), w in zip(targets, windows)],
        "prediction": None if pred is None else {"even": pred.even, "odd": pred.odd},
        "ladder": ladder,
        "confirmed": confirmed,
    }
    detail = f"{orient} corner theta={theta / math.pi:.4f}pi, b={b:.3f}; "
    detail += f"confirmed at delta={ladder[-1]['delta']:.4g}" if confirmed else "not confirmed before delta underflow"
    return out, [Verdict("theorem_embedded", confirmed, detail)]


def _target_residuals(tp, targets, line, mesh_spec, gamma_level):
    entry = mesh_ladder(mesh_spec)[-1]
    spec = entry[1]
    mb = build_panel_mesh(tp.base_split, spec)
    for _ in range(entry[2]):
        mb = refine(mb)
    mg = gamma_level.mesh
    n_shared = sum(p.order for p in mb.panels if p.piece == 0)
    if not np.array_equal(mb.points[:n_shared], mg.points[:n_shared]):
        return [None] * len(targets)
    lb = solve_level(mb, line, vectors=True)
    sym_ = tp.base_split.symmetries[0]
    out = []
    for v, p in targets:
        mask = lb.result.parity == p
        idx = np.nonzero(mask)[0]
        k = idx[np.argmin(np.abs(lb.result.eigenvalues[idx] - v))]
        phi = lb.result.eigenvectors[:, k]
        try:
            q = build_cutoff_quasimode(phi, mb, mg, (tp.t2 - tp.t1, tp.s2 - tp.t1), n_shared, True, sym_)
            out.append(quasimode_residual(gamma_level.Kstar, gamma_level.G, v, q.psi))
        except ValueError:
            out.append(None)
    return out


# --------------------------------------------------------------------------
# convergence
# --------------------------------------------------------------------------


def _observable(name, level: Level, scenario):
    r = level.result
    if name in ("half", "lambda_max"):
        return r.half[0], 0.5
    if name == "plemelj":
        K = level.K if level.K is not None else assemble_k(level.mesh)
        return plemelj_residual(K, level.Kstar, level.S), 0.0
    if name.startswith("alpha"):
        n = int(name[5:] or 1)
        rho0 = number(scenario.curve.get("rho0", "nan"), "curve.rho0")
        a = 0.5 * math.exp(-2 * n * rho0)
        return float(r.eigenvalues[np.argmin(np.abs(r.eigenvalues - a))]), a
    if name.startswith("eigenvalue:"):
        x = float(name.split(":", 1)[1])
        return float(r.eigenvalues[np.argmin(np.abs(r.eigenvalues - x))]), None
    raise ScenarioError(f"observable {name!r} is not defined (use half, lambda_max, plemelj, alphaN or eigenvalue:<x>)")


def convergence_study(scenario: Scenario, observable: str, levels=None):
    """Per-level values, successive differences and an empirical order estimate."""
    if levels is None:
        curve, _ = build_curve(scenario.curve)
        meshes = build_meshes(curve, scenario.mesh)
        if len(meshes) < 3:
            raise ScenarioError("a convergence study needs at least three mesh levels")
        levels = [solve_level(m, scenario.symmetry, vectors=False) for m in meshes]
    if observable.startswith("alpha") and "rho0" not in scenario.curve:
        raise ScenarioError(f"observable {observable!r} needs an ellipse curve")
    rows = []
    prev = None
    for lv in levels:
        v, exact = _observable(observable, lv, scenario)
        row = {"mesh": lv.mesh.identity, "n": int(lv.mesh.n), "value": v, "error": None if exact is None else abs(v - exact), "diff": None, "order": None}
        if prev is not None:
            row["diff"] = abs(v - prev["value"])
            ref_now = row["error"] if exact is not None else row["diff"]
            ref_prev = prev["error"] if exact is not None else prev["diff"]
            if ref_now and ref_prev:
                row["order"] = math.log2(ref_prev / ref_now)
        rows.append(row)
        prev = row
    return rows


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def output_dir(scenario: Scenario, override=None) -> Path:
    root = override or os.environ.get(OUTPUT_ENV) or scenario.outputs.get("dir") or "embedlab-output"
    return Path(root) / scenario.name


def run(scenario: Scenario, out_dir=None, write=True) -> RunReport:
    t_start = time.perf_counter()
    tol = scenario.tolerances
    analyses, verdicts, levels = {}, [], []
    odir = output_dir(scenario, out_dir) if write else None
    curve = None
    pred = None
    rep = None
    try:
        if scenario.curve:
            curve, tp = build_curve(scenario.curve)
            meshes = build_meshes(curve, scenario.mesh)
            need_k = bool({"plemelj", "invariants"} & set(scenario.analyses))
            for m in meshes:
                levels.append(solve_level(m, scenario.symmetry, with_k=need_k))
            if tp is not None:
                analyses["perturbation"] = perturbation_metrics(tp)
            if "spectrum" in scenario.analyses or "parity" in scenario.analyses:
                analyses["spectrum"], v = _spectrum(levels, scenario, tol)
                verdicts += v
            if {"essential_prediction", "embedded"} & set(scenario.analyses):
                pred = predict_essential_spectrum(curve, scenario.symmetry)
                analyses["essential_prediction"] = pred.as_dict()
                if scenario.expect.get("lens_fill"):
                    analyses["lens_fill"], v = _lens_fill(levels, pred, scenario, tol)
                    verdicts += v
            if "embedded" in scenario.analyses:
                analyses["embedded"], v, rep = _embedded(levels, pred, scenario, tol)
                verdicts += v
            if "plemelj" in scenario.analyses:
                analyses["plemelj"], v = _plemelj(levels, scenario, tol)
                verdicts += v
            if "invariants" in scenario.analyses:
                analyses["invariants"], v = _invariants(levels, curve, scenario, tol)
                verdicts += v
            if "convergence" in scenario.analyses:
                obs = scenario.convergence["observable"]
                analyses["convergence"] = {"observable": obs, "rows": convergence_study(scenario, obs, levels)}
        if "quasimode" in scenario.analyses:
            analyses["quasimode"], v = quasimode_ladder(scenario.quasimode, tol)
            verdicts += v
        if "theorem" in scenario.analyses:
            analyses["theorem"], v = scenario_theorem_a(scenario.theorem, tol)
            verdicts += v
    except Exception as exc:
        report = RunReport(scenario, levels, analyses, verdicts + [Verdict("run", False, f"{type(exc).__name__}: {exc}")], time.perf_counter() - t_start, config_hash=scenario.config_hash)
        if write:
            _write(report, odir, levels, rep)
        raise ScenarioError(f"scenario {scenario.name!r} failed: {exc}") from exc
    report = RunReport(scenario, levels, analyses, verdicts, time.perf_counter() - t_start, config_hash=scenario.config_hash)
    if write:
        _write(report, odir, levels, rep)
    return report


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _write(report: RunReport, odir: Path, levels, rep):
    odir.mkdir(parents=True, exist_ok=True)
    report.output_dir = str(odir)
    with open(odir / "report.json", "w") as fh:
        json.dump(_jsonable(report.as_dict()), fh, indent=2, sort_keys=True)
    report.artifacts["report.json"] = str(odir / "report.json")
    if levels:
        fin = levels[-1]
        stab = None
        if len(levels) >= 2 and np.all(fin.result.parity != "none"):
            from ..spectral import _stability

            stab = _stability(fin.result, levels[-2].result)
        with open(odir / "spectrum.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "eigenvalue", "parity", "s_norm", "stability"])
            w.writerows(fin.result.to_csv_rows(stab))
        fin.mesh.to_csv(odir / "mesh.csv")
        report.artifacts["spectrum.csv"] = str(odir / "spectrum.csv")
        report.artifacts["mesh.csv"] = str(odir / "mesh.csv")
    if rep is not None:
        with open(odir / "embedded.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eigenvalue", "parity", "stability", "own_distance", "host_distance", "verdict"])
            for c in rep.candidates:
                w.writerow([repr(c.eigenvalue), c.parity, repr(c.stability), repr(c.own_distance), repr(c.host_distance), c.verdict])
        report.artifacts["embedded.csv"] = str(odir / "embedded.csv")
    with open(odir / "summary.txt", "w") as fh:
        fh.write(report.summary_text() + "\n")
