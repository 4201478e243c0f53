"""probsafe: long-horizon safe probabilities and myopic stochastic safe control.

Estimate forward-invariance / forward-convergence probabilities of a
control-affine SDE by Monte Carlo or by marching a convection-diffusion
equation, then synthesise controllers that keep those probabilities above a
tolerance, and benchmark them against stochastic barrier baselines.
"""

from .dynamics import (
    AugmentedState,
    BarrierSpec,
    ControlAffineSystem,
    HorizonMode,
    HorizonSpec,
    IntegrationBlowupError,
    MarginSpec,
    Trajectory,
    affine_barrier,
    augmented_dynamics,
    euler_maruyama_step,
    f_phi,
    linear_1d,
    simulate,
)
from .safety_prob import (
    MCEstimate,
    ProbabilityType,
    best_margin,
    first_entry_time,
    first_exit_time,
    mc_field,
    mc_probability,
    worst_margin,
)
from .cde_field import (
    AxisSpec,
    CflError,
    GridSpec,
    SafeProbabilityField,
    SchemeFailureError,
    field_gradient,
    field_hessian,
    field_value,
    generator_value,
    smooth_mc_field,
    solve_cde,
)
from .controllers import (
    AdditivePolicy,
    CVaRPolicy,
    ConstrainedOptPolicy,
    NominalPolicy,
    PrSBCPolicy,
    SafetyCertParams,
    StepOutcome,
    StoCBFPolicy,
    SwitchingPolicy,
    WorstCaseEqualityPolicy,
    check_safety_condition,
)

__version__ = "0.1.0"
