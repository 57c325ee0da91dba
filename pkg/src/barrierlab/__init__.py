"""Monte Carlo laboratory for the safety of stochastic control barrier functions."""

__version__ = "0.1.0"

from .barrier import (
    AlphaFn,
    BarrierController,
    BarrierDomainError,
    BarrierSpec,
    ControllerSpec,
    ReciprocalSpec,
    ball_barrier,
    ito_push,
    linear_barrier,
    make_controller,
    min_norm_control,
    modified_zcbf_margin,
    rcbf_margin,
    reciprocal_drift,
    zcbf_margin,
)
from .feller import (
    FellerClassification,
    RatioSpec,
    classify_boundary,
    scale_function_closed_form,
    scale_function_numeric,
    scale_limits,
    speed_function_numeric,
    upper_incomplete_gamma,
)
from .models import brownian, frozen, h_process, halfline, single_integrator
from .montecarlo import (
    EnsembleConfig,
    ExitEstimate,
    estimate_exit_probability,
    estimate_local_time,
    stopping_time_sequence,
    validate_b_tilde_bound,
    wilson_interval,
)
from .sde import IntegratorConfig, PathSample, SdeModel, em_step, simulate_path, simulate_paths
