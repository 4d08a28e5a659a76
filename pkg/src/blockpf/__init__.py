"""Block particle filtering and iterated likelihood maximization for
coupled partially observed Markov processes with shared and unit-specific
parameters, with a stochastic measles metapopulation model as the
reference workload and exact small-model oracles for validation."""

from .core import Model, PanelData, TimeGrid, simulate_panel, stream
from .filtering import FilterError, FilterResult, Swarm, block_log_weights, bpf_run, resample_block
from .oracle import FiniteSpatHMM, HmmModel, exact_loglik, plain_pf_loglik
from .params import (
    BlockPartition,
    ParameterLayout,
    ParameterMatrix,
    ParamSpec,
    collapse,
    expand_shared,
    from_estimation_scale,
    load_params,
    make_block_partition,
    save_params,
    theta_from_estimation,
    theta_to_estimation,
    to_estimation_scale,
)
from .search import (
    IbpfConfig,
    IbpfResult,
    SigmaSchedule,
    ar_correct,
    build_sigma_schedule,
    cooling_factor,
    ibpf_run,
    perturb,
)

__version__ = "0.1.0"

__all__ = [
    "Model",
    "PanelData",
    "TimeGrid",
    "simulate_panel",
    "stream",
    "FilterError",
    "FilterResult",
    "Swarm",
    "block_log_weights",
    "bpf_run",
    "resample_block",
    "FiniteSpatHMM",
    "HmmModel",
    "exact_loglik",
    "plain_pf_loglik",
    "BlockPartition",
    "ParameterLayout",
    "ParameterMatrix",
    "ParamSpec",
    "collapse",
    "expand_shared",
    "from_estimation_scale",
    "load_params",
    "make_block_partition",
    "save_params",
    "theta_from_estimation",
    "theta_to_estimation",
    "to_estimation_scale",
    "IbpfConfig",
    "IbpfResult",
    "SigmaSchedule",
    "ar_correct",
    "build_sigma_schedule",
    "cooling_factor",
    "ibpf_run",
    "perturb",
]
