"""Mixed-criticality scheduling simulator with a DQN budget-tuning agent."""

__version__ = "0.1.0"

from .model import (
    AgentTaskSpec,
    BudgetConfiguration,
    CriticalityLevel,
    InvariantError,
    ParseError,
    Runnable,
    Task,
    TaskSet,
    WeibullParams,
    deserialize_taskset,
    ms,
    seconds,
    serialize_taskset,
    us,
    utilization,
)
from .analysis import (
    AnalysisResult,
    CeilingTables,
    amc_rtb_test,
    assign_priorities,
    audsley_assign,
    precompute_ceilings,
    response_time_lo,
    response_time_star,
    validate_configuration,
)
from .workload import GeneratorConfig, default_profile, generate_taskset
from .engine import Metrics, SimResult, UnschedulableError, simulate
from .agent import DqnAgentHook, Hyperparameters
