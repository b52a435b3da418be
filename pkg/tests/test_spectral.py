import math

import numpy as np
import pytest
from conftest import Ops

from embedlab import (
    GradingSpec,
    assemble_k_star,
    build_cutoff_quasimode,
    build_graded_mesh,
    build_uniform_mesh,
    cyclic_projectors,
    detect_embedded,
    make_circle,
    make_ellipse,
    make_hkl_curve,
    make_lens,
    make_type_t_perturbation,
    parity_projectors,
    predict_essential_spectrum,
    quasimode_residual,
    solve_parity,
    solve_s_symmetric,
)
from embedlab.mesh import MeshError
from embedlab.spectral import (
    SpectralError,
    SpectralResult,
    coverage_fraction,
    parity_cross_block,
    solve_cyclic,
)

RHO0 = math.atanh(3.0 / 7.0)
ALPHA = [0.5 * math.exp(-2 * n * RHO0) for n in range(1, 6)]


def _minor_parity(n, sign):
    # cos-type (positive) eigenfunctions alternate even/odd with n about the minor axis
    if sign > 0:
        return "odd" if n % 2 else "even"
    return "even" if n % 2 else "odd"


# -- full solve -----------------------------------------------------------------


def test_circle_spectrum(circle_ops):
    r = solve_s_symmetric(circle_ops.Kstar, circle_ops.G)
    assert abs(r.half[0] - 0.5) < 1e-12
    assert np.max(np.abs(r.eigenvalues)) < 1e-10
    assert r.eigenvalues.size == circle_ops.mesh.n - 1


def test_ellipse_closed_form(ellipse_ops):
    r = solve_s_symmetric(ellipse_ops.Kstar, ellipse_ops.G)
    assert ALPHA[0] == pytest.approx(0.2, abs=1e-15) and ALPHA[1] == pytest.approx(0.08, abs=1e-15)
    for a in ALPHA:
        for s in (1, -1):
            assert np.min(np.abs(r.eigenvalues - s * a)) < 1e-8


def test_ellipse_plus_minus_symmetry(ellipse_ops):
    lam = solve_s_symmetric(ellipse_ops.Kstar, ellipse_ops.G).eigenvalues
    big = np.sort(lam[np.abs(lam) > 1e-6])
    assert np.allclose(big, -big[::-1], atol=1e-8)


def test_s_orthonormal_eigenvectors(ellipse_ops, lens_ops):
    for ops in (ellipse_ops, lens_ops):
        r = solve_s_symmetric(ops.Kstar, ops.G)
        F = r.eigenvectors
        assert np.max(np.abs(F.T @ ops.G.gram @ F - np.eye(F.shape[1]))) < 1e-10
        assert np.allclose(r.s_norms, 1.0, atol=1e-10)


def test_eigenpairs_solve_k_star(ellipse_ops):
    # exact eigenpairs of the raw matrix where the discrete operator is self-adjoint
    r = solve_s_symmetric(ellipse_ops.Kstar, ellipse_ops.G)
    F = r.eigenvectors
    res = ellipse_ops.Kstar.matrix @ F - F * r.eigenvalues[None, :]
    w = ellipse_ops.mesh.weights
    res -= (w @ res)[None, :] / w.sum()
    assert np.max(np.sqrt(np.sum(res * (ellipse_ops.G.gram @ res), axis=0))) < 1e-8


def test_half_pair(ellipse_ops):
    r = solve_s_symmetric(ellipse_ops.Kstar, ellipse_ops.G)
    lam, phi0 = r.half
    assert abs(lam - 0.5) < 1e-12
    assert ellipse_ops.mesh.integrate(phi0) == pytest.approx(1.0, rel=1e-12)
    v = ellipse_ops.S.apply(phi0)
    assert np.ptp(v) < 1e-12  # single-layer potential constant on the curve


def test_spectral_inclusion(lens_levels):
    for lv in lens_levels[1:]:
        lam = lv.result.all_eigenvalues()
        assert lam.max() <= 0.5 + 1e-8
        assert lam.min() > -0.5 - 1e-6
        assert np.sum(np.abs(lam - 0.5) < 1e-8) == 1


def test_l2_norms_bounded_under_refinement(ellipse):
    norms = []
    for N in (128, 256):
        m = build_uniform_mesh(ellipse, N)
        ops = Ops(m)
        r = solve_parity(ops.Kstar, ops.G, "major")
        row = []
        for a in ALPHA[:3]:
            for s in (1, -1):
                k = int(np.argmin(np.abs(r.eigenvalues - s * a)))
                f = r.eigenvectors[:, k]
                row.append(math.sqrt(m.integrate(f * f)))
        norms.append(row)
    ratio = np.array(norms[1]) / np.array(norms[0])
    assert np.all((ratio > 0.9) & (ratio < 1.1))


# -- parity ----------------------------------------------------------------------------


def test_projector_algebra(ellipse_ops):
    pp = parity_projectors(ellipse_ops.mesh, "major")
    Pe, Po = pp.P_e, pp.P_o
    n = ellipse_ops.mesh.n
    assert np.array_equal(Pe + Po, np.eye(n))
    assert np.array_equal(Pe @ Po, np.zeros((n, n)))
    assert np.array_equal(Pe @ Pe, Pe)
    W = np.diag(ellipse_ops.mesh.weights)
    assert np.array_equal(W @ Pe, (W @ Pe).T)  # orthogonal in the weighted inner product


def test_restrict_matches_dense_product(lens_ops):
    pp = parity_projectors(lens_ops.mesh, "bisector")
    A = lens_ops.Kstar.matrix
    for p in ("even", "odd"):
        Q = pp.basis(p)
        assert np.allclose(pp.restrict(A, p), Q.T @ A @ Q, atol=1e-13)
        v = np.arange(lens_ops.mesh.n, dtype=float)
        assert np.allclose(pp.restrict_vector(v, p), Q.T @ v)
    with pytest.raises(SpectralError):
        pp.basis("sideways")


def test_parity_requires_pairing():
    m = build_uniform_mesh(make_ellipse(1.0, RHO0), 32, pair=False)
    with pytest.raises(MeshError):
        parity_projectors(m, "major")


@pytest.mark.parametrize(
    "curve,sym",
    [(make_lens(3 * math.pi / 4), "tips"), (make_lens(math.pi / 4), "bisector"), (make_hkl_curve(), "minor")],
    ids=["lens-tips", "lens-inward-bisector", "hkl"],
)
def test_cross_block_vanishes(curve, sym):
    m = build_graded_mesh(curve, GradingSpec(depth=12))
    Ks = assemble_k_star(m)
    assert parity_cross_block(Ks, parity_projectors(m, sym)) < 1e-10


@pytest.mark.parametrize("line", ["major", "minor"])
def test_ellipse_parity_labels(ellipse_ops, line):
    r = solve_parity(ellipse_ops.Kstar, ellipse_ops.G, line)
    for n, a in enumerate(ALPHA, start=1):
        for s in (1, -1):
            k = int(np.argmin(np.abs(r.eigenvalues - s * a)))
            assert abs(r.eigenvalues[k] - s * a) < 1e-8
            expected = ("even" if s > 0 else "odd") if line == "major" else _minor_parity(n, s)
            assert r.parity[k] == expected


def test_parity_swap(ellipse_ops):
    r = solve_parity(ellipse_ops.Kstar, ellipse_ops.G, "major")
    lam, par = r.eigenvalues, r.parity
    for k in np.nonzero(lam > 1e-3)[0]:
        opp = "odd" if par[k] == "even" else "even"
        assert np.min(np.abs(lam[par == opp] + lam[k])) < 1e-8


def test_parity_solve_matches_full(lens_ops):
    full = solve_s_symmetric(lens_ops.Kstar, lens_ops.G, vectors=False)
    split = solve_parity(lens_ops.Kstar, lens_ops.G, "tips", vectors=False)
    assert np.allclose(np.sort(split.eigenvalues), full.eigenvalues, atol=1e-10)
    assert abs(split.half[0] - full.half[0]) < 1e-12


# -- cyclic symmetry ---------------------------------------------------------------------


def test_cyclic_trivial_group(ellipse_ops):
    (P,) = cyclic_projectors(ellipse_ops.mesh, 1)
    assert np.array_equal(P, np.eye(ellipse_ops.mesh.n))


def test_cyclic_blocks_on_circle(circle_ops):
    blocks = solve_cyclic(circle_ops.Kstar, circle_ops.G, 4)
    assert sum(b.size for b in blocks) == circle_ops.mesh.n - 1
    assert max(np.max(np.abs(b)) for b in blocks) < 1e-10
    P = cyclic_projectors(circle_ops.mesh, 4)
    assert np.allclose(sum(P), np.eye(circle_ops.mesh.n), atol=1e-14)


def test_cyclic_commutes_with_parity(lens_ops):
    mesh = lens_ops.mesh
    Pe = parity_projectors(mesh, "tips").P_e
    for P in cyclic_projectors(mesh, 2):
        assert np.max(np.abs(P @ Pe - Pe @ P)) < 1e-12


def test_cyclic_block_spectrum_union(lens_ops):
    blocks = solve_cyclic(lens_ops.Kstar, lens_ops.G, 2)
    full = solve_s_symmetric(lens_ops.Kstar, lens_ops.G, vectors=False).eigenvalues
    assert np.allclose(np.sort(np.concatenate(blocks)), full, atol=1e-9)


def test_cyclic_rejects_non_invariant_mesh():
    m = build_graded_mesh(make_hkl_curve(), GradingSpec(depth=4))
    with pytest.raises(MeshError):
        cyclic_projectors(m, 2)


# -- predictions -----------------------------------------------------------------------


def test_prediction_outward_lens():
    p = predict_essential_spectrum(make_lens(3 * math.pi / 4), "tips")
    assert p.full == [(-0.25, 0.25)]
    assert p.even == [(0.0, 0.25)]
    assert p.odd == [(-0.25, 0.0)]


def test_prediction_inward_lens():
    p = predict_essential_spectrum(make_lens(math.pi / 4), "tips")
    assert p.even == [(-0.25, 0.0)]
    assert p.odd == [(0.0, 0.25)]


def test_prediction_off_line_corners():
    # about the bisector, both lens tips are a mirror pair off the line
    p = predict_essential_spectrum(make_lens(3 * math.pi / 4), "bisector")
    assert p.even == p.odd == [(-0.25, 0.25)]


def test_prediction_smooth_curve_is_empty():
    p = predict_essential_spectrum(make_ellipse(1.0, RHO0), "major")
    assert p.full == [] and p.even == [] and p.odd == []
    assert predict_essential_spectrum(make_circle(1.0)).even is None


def test_prediction_hkl_eta():
    p = predict_essential_spectrum(make_hkl_curve(), "minor")
    assert 0 < p.eta < 0.125
    b_in = 0.125 - p.eta
    assert p.even[0] == pytest.approx((-b_in, 0.25), abs=1e-15)
    assert p.odd[0] == pytest.approx((-0.25, b_in), abs=1e-15)


def test_prediction_type_t_corner():
    base = make_ellipse(1.0, RHO0, start_angle=math.pi / 2)
    L = base.total_length
    tp = make_type_t_perturbation(base, base.position(0.0)[0], 0.2, 0.8 * math.pi, 0.8 / L, 1 - 0.8 / L)
    p = predict_essential_spectrum(tp.curve, "minor")
    assert p.corners[0].b == pytest.approx(0.3, abs=1e-9)
    assert p.even[0] == pytest.approx((0.0, 0.3), abs=1e-9)
    assert p.odd[0] == pytest.approx((-0.3, 0.0), abs=1e-9)


# -- embedded-eigenvalue detection ---------------------------------------------------


def _fake(eigs, mesh_id="m"):
    lam = np.array([e for e, _ in eigs])
    par = np.array([p for _, p in eigs])
    return SpectralResult(lam, None, par, np.ones(lam.size), mesh_id)


def test_detector_classification():
    pred = predict_essential_spectrum(make_lens(3 * math.pi / 4), "tips")
    coarse = _fake([(0.1, "even"), (0.2, "odd"), (0.4, "odd"), (-0.35, "even"), (0.15, "odd")])
    fine = _fake([(0.1001, "even"), (0.2, "odd"), (0.4, "odd"), (-0.35, "even"), (0.17, "odd")])
    rep = detect_embedded([coarse, fine], pred, tol_stability=1e-3, tol_margin=0.01)
    verdict = {round(c.eigenvalue, 4): (c.parity, c.verdict) for c in rep.candidates}
    assert verdict[0.2] == ("odd", "embedded")
    assert verdict[0.4] == ("odd", "isolated")
    assert verdict[-0.35] == ("even", "isolated")
    assert verdict[0.17] == ("odd", "unstable")
    assert 0.1001 not in verdict  # inside its own-parity interval
    assert rep.n_essential["even"] == 1
    assert [c.eigenvalue for c in rep.embedded()] == [0.2]


def test_detector_default_stability_scale():
    pred = predict_essential_spectrum(make_lens(3 * math.pi / 4), "tips")
    r = _fake([(0.2, "odd")])
    rep = detect_embedded([r, r], pred)
    assert rep.tol_stability == pytest.approx(1e-3 * 0.5)


def test_detector_errors():
    pred = predict_essential_spectrum(make_lens(3 * math.pi / 4), "tips")
    r = _fake([(0.2, "odd")])
    with pytest.raises(SpectralError):
        detect_embedded([r], pred)
    with pytest.raises(SpectralError):
        detect_embedded([_fake([(0.2, "none")]), _fake([(0.2, "none")])], pred)
    with pytest.raises(SpectralError):
        detect_embedded([r, r], predict_essential_spectrum(make_lens(3 * math.pi / 4)))


def test_smooth_ellipse_has_no_embedded(ellipse):
    res = []
    for N in (64, 128):
        ops = Ops(build_uniform_mesh(ellipse, N))
        res.append(solve_parity(ops.Kstar, ops.G, "major", vectors=False))
    rep = detect_embedded(res, predict_essential_spectrum(ellipse, "major"))
    assert rep.embedded() == []


def test_coverage_fraction():
    assert coverage_fraction([], (0, 1)) == 0.0
    assert coverage_fraction(np.linspace(0, 1, 41), (0, 1), 0.02) == 1.0
    assert coverage_fraction(np.linspace(0, 0.5, 41), (0, 1), 0.02) < 0.52
    assert coverage_fraction([0.0], (0, 1), 0.01, n_grid=101) == pytest.approx(2 / 101)


# -- quasimodes -----------------------------------------------------------------------


def test_residual_of_exact_eigenvector(ellipse):
    ellipse_ops = Ops(build_uniform_mesh(ellipse, 256))
    r = solve_s_symmetric(ellipse_ops.Kstar, ellipse_ops.G)
    k = int(np.argmin(np.abs(r.eigenvalues - 0.2)))
    eps = quasimode_residual(ellipse_ops.Kstar, ellipse_ops.G, r.eigenvalues[k], r.eigenvectors[:, k])
    assert eps < 1e-10
    with pytest.raises(SpectralError):
        quasimode_residual(ellipse_ops.Kstar, ellipse_ops.G, 0.2, np.zeros(ellipse_ops.mesh.n))


def test_parity_restricted_residual(ellipse_ops):
    r = solve_parity(ellipse_ops.Kstar, ellipse_ops.G, "major")
    pp = parity_projectors(ellipse_ops.mesh, "major")
    k = int(np.argmin(np.abs(r.eigenvalues - 0.2)))
    f = r.eigenvectors[:, k]
    psi = f * (1 + 0.3 * np.cos(2 * math.pi * ellipse_ops.mesh.t))  # even, not an eigenvector
    psi -= ellipse_ops.mesh.integrate(psi) / ellipse_ops.mesh.weights.sum()
    full = quasimode_residual(ellipse_ops.Kstar, ellipse_ops.G, 0.2, psi)
    block = quasimode_residual(ellipse_ops.Kstar, ellipse_ops.G, 0.2, psi, basis=pp.basis(r.parity[k]))
    assert full > 1e-3
    assert abs(full - block) < 1e-12


def _cutoff_setup(ellipse_ops):
    r = solve_parity(ellipse_ops.Kstar, ellipse_ops.G, "major")
    k = int(np.argmin(np.abs(r.eigenvalues - 0.2)))
    return r.eigenvectors[:, k]


def test_cutoff_quasimode_transplant_and_mean_zero(ellipse_ops):
    mesh = ellipse_ops.mesh
    phi = _cutoff_setup(ellipse_ops)
    q = build_cutoff_quasimode(phi, mesh, mesh, (0.05, 0.95), mesh.n)
    assert abs(mesh.integrate(q.psi)) < 1e-13 * mesh.integrate(np.abs(phi))
    assert abs(q.a) < 2
    on = q.on_A
    assert np.array_equal(q.psi[on], q.chi[on] * phi[on])
    assert np.all(q.psi[~on] == 0)


def test_cutoff_quasimode_a_zero():
    # phi integrates to zero on A' minus J  =>  a = 0
    mesh = build_uniform_mesh(make_circle(1.0), 64)
    t, w = mesh.t, mesh.weights
    phi = np.where(t < 0.2, 1.0 + 0.1 * np.cos(2 * math.pi * (t - 0.1) / 0.4), 0.1 * np.sin(7 * t))
    first = build_cutoff_quasimode(phi, mesh, mesh, (0.0, 0.8), mesh.n)
    rest = first.on_A & ~first.on_J
    phi[rest] -= (w[rest] @ phi[rest]) / w[rest].sum()
    q = build_cutoff_quasimode(phi, mesh, mesh, (0.0, 0.8), mesh.n)
    assert np.array_equal(q.on_J, first.on_J)
    assert abs(q.a) < 1e-12


def test_cutoff_quasimode_rejects_large_a():
    mesh = build_uniform_mesh(make_circle(1.0), 64)
    t = mesh.t
    phi = np.where(t < 0.5, 1.0, -0.1)
    phi[np.abs(t - 0.25) < 0.05] = 3.0
    with pytest.raises(SpectralError, match="a ="):
        build_cutoff_quasimode(phi, mesh, mesh, (0.0, 0.99), mesh.n)


def test_quasimode_s_norm_ratio(quasimode_report):
    rows = quasimode_report[0]["rows"]
    assert all(r["psi_s_norm_ratio"] > 0.5 for r in rows)
    assert all(abs(r["a"]) < 2 for r in rows)
