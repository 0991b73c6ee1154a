"""Approximate MPC for switched-mode power converters.

Offline: sample the long-horizon optimal cost over a state box and fit a
quadratic surrogate value function.  Online: evaluate a short-horizon policy
against that surrogate, with precomputed quadratic/affine fast paths for
switched-affine models.
"""

from .converters import (
    BoostBuild,
    BoostParams,
    InverterBuild,
    InverterParams,
    build_boost,
    build_energy_prior,
    build_inverter,
)
from .dynamics import (
    AffineMode,
    GuardedMode,
    StageCost,
    SwitchedModel,
    SwitchingCost,
    discretize_affine,
    matrix_exponential,
    simulate,
    step,
    trajectory_cost,
)
from .errors import AmpcError, BudgetError, ConfigError, ModelError, NumericError
from .fitting import (
    EnergyPrior,
    FitReport,
    QuadraticValueFunction,
    SampleBox,
    ValueSample,
    draw_samples,
    fit_quadratic,
    load_vf,
    sample_values,
    save_vf,
)
from .policy import (
    AmpcPolicy,
    ClosedLoopResult,
    FcsMpcPolicy,
    OneStepForm,
    PolicyConfig,
    SequenceForm,
    build_one_step,
    closed_loop,
    decide_general,
    decide_precomputed,
    greedy_policy,
    precompute_quadratic_forms,
    update_one_step_offset,
)
from .solver import (
    OcpInstance,
    OcpSolution,
    solve_bnb,
    solve_exhaustive,
    value_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AffineMode", "AmpcError", "AmpcPolicy", "BoostBuild", "BoostParams",
    "BudgetError", "ClosedLoopResult", "ConfigError", "EnergyPrior",
    "FcsMpcPolicy", "FitReport", "GuardedMode", "InverterBuild",
    "InverterParams", "ModelError", "NumericError", "OcpInstance",
    "OcpSolution", "OneStepForm", "PolicyConfig", "QuadraticValueFunction",
    "SampleBox", "SequenceForm", "StageCost", "SwitchedModel",
    "SwitchingCost", "ValueSample", "build_boost", "build_energy_prior",
    "build_inverter", "build_one_step", "closed_loop", "decide_general",
    "decide_precomputed", "discretize_affine", "draw_samples",
    "fit_quadratic", "greedy_policy", "load_vf", "matrix_exponential",
    "precompute_quadratic_forms", "sample_values", "save_vf", "simulate",
    "solve_bnb", "solve_exhaustive", "step", "trajectory_cost",
    "update_one_step_offset", "value_sample",
]
