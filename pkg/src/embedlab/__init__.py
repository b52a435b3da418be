"""Spectral laboratory for the Neumann-Poincare operator on planar curves with corners."""

__version__ = "0.1.0"

from .curves import (  # noqa: E402
    CornerTag,
    CurveError,
    ParametrizedCurve,
    ReflectionSymmetry,
    TypeTPerturbation,
    make_circle,
    make_ellipse,
    make_hkl_curve,
    make_lens,
    make_type_t_perturbation,
    perturbation_metrics,
)
from .mesh import GradingSpec, Mesh, MeshError, build_graded_mesh, build_panel_mesh, build_uniform_mesh, refine  # noqa: E402
from .operators import (  # noqa: E402
    DenseOperator,
    IndefiniteError,
    SGram,
    assemble_k,
    assemble_k_star,
    assemble_s,
    build_s_gram,
    plemelj_residual,
)
from .spectral import (  # noqa: E402
    EmbeddedEigenvalueReport,
    EssentialSpectrumPrediction,
    SpectralResult,
    build_cutoff_quasimode,
    cyclic_projectors,
    detect_embedded,
    parity_projectors,
    predict_essential_spectrum,
    quasimode_residual,
    solve_parity,
    solve_s_symmetric,
)
