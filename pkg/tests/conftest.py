import numpy as np
import pytest

from safeswitch.dynamics import AccModeParams, acc_dynamics, acc_reduced_dynamics
from safeswitch.barriers import acc_braking_barrier
from safeswitch.hybrid import GuardCondition, HybridSystem, Mode


ROCK = AccModeParams(f1=0.5, f2=25.0, f3=1.25, c=0.5)
DRY = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3)
ICE = AccModeParams(f1=0.1, f2=5.0, f3=0.25, c=0.1)


@pytest.fixture
def acc_params():
    return {"rock": ROCK, "dry": DRY, "ice": ICE}


@pytest.fixture
def acc_system(acc_params):
    """Three-mode cruise-control chain with position guards at 50 and 100 m."""
    modes = (Mode(0, "rock"), Mode(1, "dry"), Mode(2, "ice"))
    dynamics = {
        0: acc_dynamics(acc_params["rock"]),
        1: acc_dynamics(acc_params["dry"]),
        2: acc_dynamics(acc_params["ice"]),
    }
    guards = {
        (0, 1): GuardCondition(level=lambda X: np.asarray(X)[..., 0] - 50.0),
        (1, 2): GuardCondition(level=lambda X: np.asarray(X)[..., 0] - 100.0),
    }
    return HybridSystem(
        modes=modes,
        dynamics=dynamics,
        guards=guards,
        initial=(0, np.array([0.0, 16.0, 100.0])),
    )


@pytest.fixture
def acc_barriers(acc_params):
    return {
        0: acc_braking_barrier(acc_params["rock"]),
        1: acc_braking_barrier(acc_params["dry"]),
        2: acc_braking_barrier(acc_params["ice"]),
    }
