"""Distribution-guided rank scores and least-squares correlation estimation
from partially observed rankings."""

__version__ = "0.1.0"

from .distributions import DistributionSpec, parse_dist
from .errors import (
    ConvergenceWarning,
    DegenerateDensityError,
    DegenerateDesignError,
    DomainError,
    DRankError,
    InsufficientTableError,
    NumericalWarning,
    PanelRefusedError,
    ProvenanceError,
    QuadratureError,
    RankDeficiencyError,
)
from .scores import (
    ScoreTable,
    build_score_table,
    cov_os,
    identity_scores,
    mos_approx,
    mos_exact,
    mos_exact_variance,
    mos_mc,
    quantile,
)
from .estimator import (
    Estimate,
    RankedSample,
    VarianceComponents,
    asymptotic_variance,
    fit_lse,
    fit_modified,
    fit_multiple,
    test_rho_zero,
    variance_components,
)
from .diagnostics import (
    intercept_check,
    residual_report,
    residual_variance_theoretical,
    residuals,
    rss,
    select_score,
)
from .simulation import SimConfig, SimReport, gen_dataset, run_study, verify_optimality
from .panel import (
    CombinedTest,
    PanelSeries,
    combined_statistic,
    fit_day_iterative,
    hac_variance,
    panel_test,
    preprocess_residualize,
    synthetic_panel,
)
