"""Scenario documents: TOML parsing, schema checks and object construction."""

from __future__ import annotations

import ast
import hashlib
import json
import math
import operator
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ..curves import make_circle, make_ellipse, make_hkl_curve, make_lens, make_type_t_perturbation
from ..mesh import GradingSpec

SCHEMA_VERSION = 1

ANALYSES = {"spectrum", "parity", "essential_prediction", "embedded", "plemelj", "invariants", "quasimode", "convergence", "theorem"}


class ConfigError(ValueError):
    pass


# -- numeric expressions -----------------------------------------------------

_FUNCS = {"atanh": math.atanh, "tanh": math.tanh, "sqrt": math.sqrt, "exp": math.exp, "log": math.log}
_NAMES = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv, ast.Pow: operator.pow}


def number(value, where="value") -> float:
    """Accept a number or a small arithmetic expression such as "3*pi/4"."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a number or expression, got {value!r}")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Name) and node.id in _NAMES:
            return _NAMES[node.id]
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and len(node.args) == 1:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ConfigError(f"{where}: unsupported expression {value!r}")

    try:
        tree = ast.parse(value, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{where}: cannot parse {value!r}") from exc
    return float(ev(tree))


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


# -- curves ------------------------------------------------------------------

_CURVE_KEYS = {
    "circle": {"kind", "radius"},
    "ellipse": {"kind", "R", "rho0", "start_angle"},
    "lens": {"kind", "theta", "chord"},
    "hkl": {"kind", "R", "rho0", "half_angle", "tip_theta"},
    "type-t": {"kind", "base", "theta", "delta", "delta_prime", "t2", "lipschitz_bound"},
}


def check_curve_spec(spec, where="curve"):
    kind = spec.get("kind") if isinstance(spec, dict) else None
    if kind not in _CURVE_KEYS:
        raise ConfigError(f"{where}.kind must be one of {sorted(_CURVE_KEYS)}")
    _check_keys(spec, _CURVE_KEYS[kind], where)
    if kind == "type-t":
        if "base" not in spec:
            raise ConfigError(f"{where}.base is required for type-t curves")
        check_curve_spec(spec["base"], where + ".base")
        if spec["base"]["kind"] not in ("circle", "ellipse"):
            raise ConfigError(f"{where}.base must be a circle or an ellipse")


def build_curve(spec):
    """Return (curve, perturbation-or-None)."""
    check_curve_spec(spec)
    kind = spec["kind"]
    g = lambda k, d=None: number(spec[k], f"curve.{k}") if k in spec else d  # noqa: E731
    if kind == "circle":
        return make_circle(g("radius", 1.0)), None
    if kind == "ellipse":
        return make_ellipse(g("R", 1.0), g("rho0"), g("start_angle", 0.0)), None
    if kind == "lens":
        return make_lens(g("theta"), g("chord", 2.0)), None
    if kind == "hkl":
        kw = {k: g(k) for k in ("R", "rho0", "half_angle", "tip_theta") if k in spec}
        return make_hkl_curve(**kw), None
    base, _ = build_curve(spec["base"])
    tp = build_type_t(base, g("theta"), g("delta"), g("delta_prime"), g("t2"), g("lipschitz_bound", 10.0))
    return tp.curve, tp


def build_type_t(base, theta, delta, delta_prime=None, t2=None, lipschitz_bound=10.0):
    """Type-T perturbation at base(0); A' ends sit 2 delta (arclength) from x0 by default."""
    if t2 is None:
        t2 = 2.0 * delta / base.total_length
    x0 = base.position(0.0)[0]
    return make_type_t_perturbation(
        base, x0, delta, theta, t2, 1.0 - t2, delta_prime, lipschitz_bound=lipschitz_bound
    )


# -- meshes ------------------------------------------------------------------

_MESH_KEYS = {"kind", "N", "ratio", "order", "depth", "h", "levels"}


def mesh_ladder(spec, where="mesh"):
    """List of ("uniform", N) or ("panels", GradingSpec, refine_steps) entries."""
    _check_keys(spec, _MESH_KEYS, where)
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        Ns = spec.get("N")
        if Ns is None:
            raise ConfigError(f"{where}.N is required for uniform meshes")
        Ns = [Ns] if isinstance(Ns, int) else list(Ns)
        if not all(isinstance(n, int) and not isinstance(n, bool) for n in Ns):
            raise ConfigError(f"{where}.N must be integers")
        return [("uniform", n) for n in Ns]
    if kind in ("graded", "panels"):
        ratio = number(spec.get("ratio", 0.5), f"{where}.ratio")
        order = int(spec.get("order", 16))
        h = number(spec["h"], f"{where}.h") if "h" in spec else None
        depth = spec.get("depth", 20)
        if isinstance(depth, list):
            if "levels" in spec:
                raise ConfigError(f"{where}: give either a depth list or levels, not both")
            return [("panels", GradingSpec(ratio, int(d), order, h), 0) for d in depth]
        levels = int(spec.get("levels", 1))
        return [("panels", GradingSpec(ratio, int(depth), order, h), k) for k in range(levels)]
    raise ConfigError(f"{where}.kind must be uniform, graded or panels")


# -- scenario ----------------------------------------------------------------

_TOP_KEYS = {"schema", "name", "description", "curve", "symmetry", "mesh", "analyses", "tolerances", "expect", "quasimode", "theorem", "convergence", "outputs"}
_TOL_KEYS = {"stability", "margin", "location", "half", "inclusion", "plemelj", "alpha", "zero", "coverage_resolution", "extreme_rel", "cross_block", "gauss", "swap"}
_EXPECT_KEYS = {"zero_spectrum", "alpha_table", "embedded", "absent_near", "plemelj_monotone", "lens_fill", "no_stable_outside"}
_QM_KEYS = {"base", "theta", "deltas", "lam", "mesh", "eps_max", "slack", "line", "delta_prime"}
_TH_KEYS = {"base", "line", "j_max", "b", "orientation", "delta0", "delta_min", "mesh", "max_steps"}
_CONV_KEYS = {"observable"}

DEFAULT_TOL = {
    "stability": 1e-3,
    "margin": 0.01,
    "location": 0.02,
    "half": 1e-8,
    "inclusion": 1e-6,
    "plemelj": 1e-3,
    "alpha": 1e-8,
    "zero": 1e-10,
    "coverage_resolution": 0.01,
    "extreme_rel": 0.05,
    "cross_block": 1e-10,
    "gauss": 1e-6,
    "swap": 1e-8,
}


@dataclass
class Scenario:
    name: str
    description: str
    curve: dict
    symmetry: str | None
    mesh: dict
    analyses: list
    tolerances: dict
    expect: dict = field(default_factory=dict)
    quasimode: dict | None = None
    theorem: dict | None = None
    convergence: dict | None = None
    outputs: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def parse_scenario(doc: dict, where="scenario") -> Scenario:
    _check_keys(doc, _TOP_KEYS, where)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{where}: schema must be {SCHEMA_VERSION}")
    for key in ("name", "analyses"):
        if key not in doc:
            raise ConfigError(f"{where}: missing required key {key!r}")
    analyses = list(doc["analyses"])
    bad = sorted(set(analyses) - ANALYSES)
    if bad:
        raise ConfigError(f"{where}: unknown analyses {bad}")
    tol = dict(DEFAULT_TOL)
    if "tolerances" in doc:
        _check_keys(doc["tolerances"], _TOL_KEYS, "tolerances")
        tol.update({k: number(v, f"tolerances.{k}") for k, v in doc["tolerances"].items()})
    expect = doc.get("expect", {})
    _check_keys(expect, _EXPECT_KEYS, "expect")
    qm = doc.get("quasimode")
    th = doc.get("theorem")
    conv = doc.get("convergence")
    if qm is not None:
        _check_keys(qm, _QM_KEYS, "quasimode")
        check_curve_spec(qm.get("base", {}), "quasimode.base")
        mesh_ladder(qm.get("mesh", {"kind": "panels"}), "quasimode.mesh")
    if th is not None:
        _check_keys(th, _TH_KEYS, "theorem")
        check_curve_spec(th.get("base", {}), "theorem.base")
        mesh_ladder(th.get("mesh", {"kind": "graded"}), "theorem.mesh")
    if conv is not None:
        _check_keys(conv, _CONV_KEYS, "convergence")
    needs_curve = bool(set(analyses) - {"quasimode", "theorem"})
    if needs_curve:
        if "curve" not in doc or "mesh" not in doc:
            raise ConfigError(f"{where}: analyses {analyses} need [curve] and [mesh]")
        check_curve_spec(doc["curve"])
        mesh_ladder(doc["mesh"])
    sym = doc.get("symmetry")
    if sym is not None and not isinstance(sym, str):
        raise ConfigError("symmetry must be the name of a mirror line")
    if {"parity", "embedded"} & set(analyses) and sym is None:
        raise ConfigError("parity and embedded analyses need a symmetry line")
    if "embedded" in analyses and len(mesh_ladder(doc["mesh"])) < 2:
        raise ConfigError("embedded analysis needs at least two mesh levels")
    if "quasimode" in analyses and qm is None:
        raise ConfigError("quasimode analysis needs a [quasimode] table")
    if "theorem" in analyses and th is None:
        raise ConfigError("theorem analysis needs a [theorem] table")
    if "convergence" in analyses and (conv is None or "curve" not in doc):
        raise ConfigError("convergence analysis needs a [convergence] table and a curve")
    outputs = doc.get("outputs", {})
    _check_keys(outputs, {"dir"}, "outputs")
    return Scenario(
        name=str(doc["name"]),
        description=str(doc.get("description", "")),
        curve=doc.get("curve", {}),
        symmetry=sym,
        mesh=doc.get("mesh", {}),
        analyses=analyses,
        tolerances=tol,
        expect=expect,
        quasimode=qm,
        theorem=th,
        convergence=conv,
        outputs=outputs,
        raw=doc,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_scenario(doc, str(path))


def scenario_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def bundled_scenarios() -> dict:
    return {p.stem: p for p in sorted(scenario_dir().glob("*.toml"))}


def resolve(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    found = bundled_scenarios().get(str(name_or_path))
    if found is None:
        raise ConfigError(f"no scenario file or bundled scenario named {name_or_path!r}")
    return found
