"""Safe switching controllers for hybrid systems via neural barrier-value functions."""

__version__ = "0.1.0"

from .barriers import (
    AffineControlConstraint,
    BarrierFunction,
    CbvfBarrier,
    InfeasibleFilterError,
    SwitchingController,
    barrier_constraint,
    qp_filter,
    switching_sets,
)
from .dynamics import (
    AccModeParams,
    ControlAffineDynamics,
    SingleTrackParams,
    acc_dynamics,
    eval_flow,
    single_track_dynamics,
)
from .hybrid import (
    GuardCondition,
    HybridSystem,
    HybridTrajectory,
    Mode,
    TransitionGraph,
    is_acyclic,
    refinement_order,
    transition_pairs,
    unfold,
    validate_system,
)
from .network import (
    CbvfNetwork,
    EvalBundle,
    Normalization,
    forward,
    forward_with_input_grads,
    init_weights,
    load_weights,
    save_weights,
)
from .oracle import (
    Grid,
    GridBarrier,
    GridValueFunction,
    score_network,
    solve_cbvf,
    viability_kernel,
)
from .sim import SimConfig, execute_hybrid, integrate_step, safety_check
from .training import SamplingDomain, TrainingConfig, refine_all, sample_dataset, train
