"""Knockoff-based variable selection with per-family-error-rate control for
latent-regression IRT models whose mixed-type predictors contain missing
values."""

from ._rng import derive_seed, rng_from
from .copula import (
    ContinuousMargin,
    CopulaParams,
    DiscreteMargin,
    FitConfig,
    fit_copula,
    load_params,
    log_density_complete,
    marginal_dummy_cov,
    project_feasible,
    save_params,
    thresholds_from_u,
    u_from_thresholds,
)
from .data import (
    Item,
    ItemBank,
    MixedDataset,
    ResponseData,
    VariableMeta,
    empirical_mixed_correlation,
    load_item_bank,
    load_predictors,
    load_responses,
    summarize_missingness,
)
from .errors import (
    ConfigError,
    DataError,
    FitDivergenceError,
    LatknockError,
    NumericalError,
    RankDeficiencyError,
)
from .knockoff import (
    DerandomizedResult,
    KnockoffRunConfig,
    SDiag,
    SelectionResult,
    WStats,
    baseline_threshold,
    conditional_knockoff_gaussian,
    derandomized_select,
    joint_cov,
    knockoff_stats,
    s_equicorrelated,
    s_mvr,
    sample_knockoffs,
    swap_columns,
)
from .latreg import (
    EmConfig,
    JointState,
    KnockoffSet,
    RegressionParams,
    bootstrap_se,
    design_row,
    fit_latent_regression,
    gibbs_sweep_joint,
    mstep_ols,
)
from .measurement import (
    ThetaPosteriorSpec,
    log_measurement_likelihood,
    prob_2pl,
    prob_gpcm,
    sample_theta,
    simulate_responses,
)
from .simstudy import (
    StudyConfig,
    build_sigma_blocks,
    desk_preset,
    filter_pfer_oracle,
    generate_study,
    paper_preset,
    run_study,
)

__version__ = "0.1.0"
