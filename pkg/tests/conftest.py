import math
import warnings

import pytest

from embedlab import (
    GradingSpec,
    assemble_k,
    assemble_k_star,
    assemble_s,
    build_graded_mesh,
    build_s_gram,
    build_uniform_mesh,
    make_circle,
    make_ellipse,
    make_hkl_curve,
    make_lens,
    refine,
)
from embedlab.lab.config import DEFAULT_TOL, load_scenario, resolve
from embedlab.lab.runner import quasimode_ladder, solve_level

RHO0 = math.atanh(3.0 / 7.0)


class Ops:
    """Mesh with K, K*, S and the Gram matrix."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.Kstar = assemble_k_star(mesh)
        self.K = assemble_k(mesh)
        self.S = assemble_s(mesh)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.G = build_s_gram(self.S)


@pytest.fixture(scope="session")
def ellipse():
    return make_ellipse(1.0, RHO0)


@pytest.fixture(scope="session")
def ellipse_ops(ellipse):
    return Ops(build_uniform_mesh(ellipse, 128))


@pytest.fixture(scope="session")
def circle_ops():
    return Ops(build_uniform_mesh(make_circle(1.0), 64))


@pytest.fixture(scope="session")
def lens_ops():
    return Ops(build_graded_mesh(make_lens(3 * math.pi / 4), GradingSpec(depth=10)))


@pytest.fixture(scope="session")
def lens_levels():
    """Parity-resolved lens solves at grading depths 10, 20, 30."""
    curve = make_lens(3 * math.pi / 4)
    return [
        solve_level(build_graded_mesh(curve, GradingSpec(depth=m, order=16)), "tips", with_k=True, vectors=False)
        for m in (10, 20, 30)
    ]


@pytest.fixture(scope="session")
def hkl_levels():
    """Parity-resolved solves on the attached-wedge ellipse at depth 16 and its refinement."""
    curve = make_hkl_curve()
    coarse = build_graded_mesh(curve, GradingSpec(depth=16))
    return [solve_level(m, "minor", with_k=True, vectors=False) for m in (coarse, refine(coarse))]


@pytest.fixture(scope="session")
def quasimode_report():
    """Cutoff-quasimode residuals on the bundled delta-halving ladder."""
    scen = load_scenario(resolve("quasimode-ladder"))
    return quasimode_ladder(scen.quasimode, dict(DEFAULT_TOL))


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE = {}


def record(number, title, ok, detail):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k}. {title}: {detail}")
