"""Interactive-effects estimation for short balanced panels.

Provides the two-way fixed effects estimator, a projection-based
interactive-effects estimator that stays consistent with few periods and
arbitrary error correlation, a large-T factor comparator, robust sandwich
inference, a test of TWFE consistency, and a seeded simulation harness.
"""

__version__ = "0.1.0"

from .api import LsFactorEstimator, PieEstimator, TwfeEstimator, check_panel_arrays
from .estimators import (
    FactorLoadings,
    FitOptions,
    PieEstimate,
    TwfeEstimate,
    beta_step,
    generalized_within,
    lambda_step,
    ls_factor_fit,
    nls_objective,
    pie_fit,
    subspace_angle,
    theta_recover,
    top_eigenpairs,
    twfe_fit,
)
from .exceptions import (
    AllColumnsPruned,
    ConfigInvalid,
    DegenerateSpectrumWarning,
    DimensionMismatch,
    NormalizationSingular,
    NotIdentified,
    PanelFormatError,
    PanelModelError,
    SingularContrastCov,
    SingularDesign,
    SingularGram,
    SingularH,
    SingularProjection,
)
from .inference import (
    SandwichCovariance,
    ScoreMatrixSet,
    SpecTestResult,
    attach_vcov,
    build_scores,
    chi_square_sf,
    consistency_test,
    hausman_test,
    joint_vcov,
    pie_vcov,
)
from .montecarlo import (
    Dgp1Config,
    Dgp2Config,
    McSummary,
    PopulationMoments,
    analytic_twfe_bias,
    gen_model1,
    gen_model2,
    model1_population_moments,
    rejection_curve,
    run_replications,
)
from .panel import (
    DemeanedPanel,
    IdentificationReport,
    PanelDataset,
    cross_section_demean,
    identification_check,
    read_panel_csv,
    two_way_within,
    write_panel_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
