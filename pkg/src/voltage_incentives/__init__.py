"""Incentive-based reactive power procurement between a TSO and several DSOs.

The TSO posts voltage references; each DSO picks its reactive demand to
maximize its incentive payment minus a quadratic cost. The package contains
the grid model (AC power flow and its linearization), the DSO game with
online equilibrium and sensitivity learning, the TSO hypergradient update,
the closed loop that couples them, and reference oracles for testing.
"""
from .codesign import (
    Disturbance,
    IncentiveCodesign,
    ScenarioTrace,
    apply_disturbance,
    build_game_model,
    run_codesign,
)
from .dso import (
    DsoProfile,
    GameConditioning,
    GameIterate,
    NashEquilibriumSeeker,
    check_conditioning,
    incentive_payment,
    inner_step,
    projection_derivative,
    pseudo_gradient_i,
    run_inner_loop,
    sensitivity_step,
)
from .exceptions import (
    InnerLoopStall,
    NonConvergence,
    OracleNoConvergence,
    ParseError,
    PlantInfeasible,
    SignConventionViolation,
    SingularJacobian,
    ValidationError,
)
from .grid import (
    GridModel,
    LinearSensitivities,
    PowerFlowSolution,
    build_five_bus,
    linearize,
    linearized_voltage,
    solve_ac_power_flow,
)
from .oracles import OracleReport, closed_form_ne, fd_hypergradient, verify_ne
from .scenario import ScenarioConfig, bundled_scenario, dump_scenario, load_scenario, write_trace
from .tso import (
    HypergradientReport,
    IncentiveState,
    Schedule,
    augmented_objective,
    hypergradient,
    penalty,
    penalty_gradient,
    update_incentive,
)

__version__ = "0.1.0"
