"""Control-affine dynamics for the shipped benchmarks.

Each model exposes a drift field f(x) and input matrix g(x) so that
``xdot = f(x) + g(x) u`` with ``u`` confined to a per-channel box.  All
evaluation functions are vectorized over leading axes: ``drift`` maps
``(..., n) -> (..., n)`` and ``input_matrix`` maps ``(..., n) -> (..., n, m)``.
The grid solver and the dataset sampler rely on this batching.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ControlAffineDynamics",
    "AccModeParams",
    "SingleTrackParams",
    "acc_dynamics",
    "acc_reduced_dynamics",
    "single_track_dynamics",
    "double_integrator_dynamics",
    "eval_flow",
]


@dataclass(frozen=True)
class ControlAffineDynamics:
    """Control-affine vector field with a box-constrained input.

    ``saturation`` is an optional hook applied to the control before the
    affine evaluation; it models actuator limit stops (e.g. steering rate
    forced to zero at the steering stop).  It is the identity inside the
    operating region, so the affine structure is exact wherever the
    refinement machinery evaluates the Hamiltonian.
    """

    state_dim: int
    control_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    u_min: np.ndarray
    u_max: np.ndarray
    name: str = ""
    saturation: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float))
        if self.u_min.shape != (self.control_dim,) or self.u_max.shape != (self.control_dim,):
            raise ValueError("control box shape does not match control_dim")

    @property
    def control_box(self) -> np.ndarray:
        """Per-channel [min, max] as an (m, 2) array."""
        return np.stack([self.u_min, self.u_max], axis=1)

    def clip_control(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)


def eval_flow(dyn: ControlAffineDynamics, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Evaluate ``f(x) + g(x) u`` with the control clipped to the box.

    Controls outside the box are clipped with a warning rather than
    rejected; dimension mismatches are errors.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != dyn.state_dim:
        raise ValueError(f"state dim {x.shape[-1]} != {dyn.state_dim}")
    if u.shape[-1] != dyn.control_dim:
        raise ValueError(f"control dim {u.shape[-1]} != {dyn.control_dim}")
    if np.any(u < dyn.u_min - 1e-12) or np.any(u > dyn.u_max + 1e-12):
        warnings.warn("control outside admissible box; clipping", stacklevel=2)
        u = dyn.clip_control(u)
    if dyn.saturation is not None:
        u = dyn.saturation(x, u)
    f = dyn.drift(x)
    g = dyn.input_matrix(x)
    return f + np.einsum("...nm,...m->...n", g, u)


# ---------------------------------------------------------------------------
# Adaptive cruise control on a multi-friction road
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccModeParams:
    """One road mode of the cruise-control benchmark.

    Rolling resistance is the quadratic ``F_r(v) = f1 + f2 v + f3 v**2``
    and the wheel-force bound is ``|u| <= c * m * grav`` (friction-limited
    traction, so low-friction roads both brake and accelerate weakly).
    """

    f1: float
    f2: float
    f3: float
    c: float
    m: float = 1650.0
    grav: float = 9.81
    v0: float = 14.0
    t_headway: float = 1.8

    def __post_init__(self):
        if self.m <= 0 or self.c <= 0 or self.t_headway <= 0:
            raise ValueError("AccModeParams requires m > 0, c > 0, t_headway > 0")

    def rolling_resistance(self, v: np.ndarray) -> np.ndarray:
        return self.f1 + self.f2 * v + self.f3 * v * v

    @property
    def u_bound(self) -> float:
        return self.c * self.m * self.grav


def acc_dynamics(p: AccModeParams) -> ControlAffineDynamics:
    """Cruise-control dynamics, state (position, ego velocity, headway).

    position' = v, velocity' = (u - F_r(v)) / m, headway' = v0 - v.
    """

    def drift(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x[..., 1]
        out = np.empty_like(x)
        out[..., 0] = v
        out[..., 1] = -p.rolling_resistance(v) / p.m
        out[..., 2] = p.v0 - v
        return out

    def input_matrix(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (3, 1))
        g[..., 1, 0] = 1.0 / p.m
        return g

    return ControlAffineDynamics(
        state_dim=3,
        control_dim=1,
        drift=drift,
        input_matrix=input_matrix,
        u_min=np.array([-p.u_bound]),
        u_max=np.array([p.u_bound]),
        name="acc",
    )


def acc_reduced_dynamics(p: AccModeParams) -> ControlAffineDynamics:
    """Position-free cruise-control dynamics, state (velocity, headway).

    Used for on-guard refinement studies where the position coordinate is
    frozen at the switching surface.
    """

    def drift(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x[..., 0]
        out = np.empty_like(x)
        out[..., 0] = -p.rolling_resistance(v) / p.m
        out[..., 1] = p.v0 - v
        return out

    def input_matrix(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 0, 0] = 1.0 / p.m
        return g

    return ControlAffineDynamics(
        state_dim=2,
        control_dim=1,
        drift=drift,
        input_matrix=input_matrix,
        u_min=np.array([-p.u_bound]),
        u_max=np.array([p.u_bound]),
        name="acc_reduced",
    )


# ---------------------------------------------------------------------------
# Single-track (dynamic bicycle) vehicle model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SingleTrackParams:
    """Single-track model with linear tire stiffness and load transfer.

    State: (s_x, s_y, steering angle, speed, yaw, yaw rate, slip angle);
    controls: (steering rate, longitudinal acceleration).  Defaults are the
    common 1:10-scale racing car parameter set.  ``eta`` is the per-zone
    brake coefficient consumed by the wall barrier construction (see
    barriers module); it does not enter the ODE.
    """

    mu: float = 1.0489
    eta: float = 50.0
    lf: float = 0.15875
    lr: float = 0.17145
    h_cg: float = 0.074
    m: float = 3.74
    I_z: float = 0.04712
    C_Sf: float = 4.718
    C_Sr: float = 5.4562
    grav: float = 9.81
    steer_min: float = -0.4189
    steer_max: float = 0.4189
    steer_rate_max: float = 3.2
    accel_max: float = 9.51
    v_min: float = -5.0
    v_max: float = 20.0
    v_low: float = 0.5          # below this speed the kinematic fallback is used
    tau_relax: float = 0.2      # relaxation time for yaw rate / slip in the fallback

    def __post_init__(self):
        if min(self.lf, self.lr, self.h_cg, self.m, self.I_z) <= 0:
            raise ValueError("lengths, mass and inertia must be positive")
        if self.mu <= 0:
            raise ValueError("friction coefficient must be positive")

    @property
    def lwb(self) -> float:
        return self.lf + self.lr


def _single_track_saturation(p: SingleTrackParams):
    """Limit-stop gating: zero the command that pushes past a state limit."""

    def saturate(x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.array(u, dtype=float, copy=True)
        delta, v = x[..., 2], x[..., 3]
        u0, u1 = u[..., 0], u[..., 1]
        block0 = ((delta >= p.steer_max) & (u0 > 0)) | ((delta <= p.steer_min) & (u0 < 0))
        block1 = ((v >= p.v_max) & (u1 > 0)) | ((v <= p.v_min) & (u1 < 0))
        u[..., 0] = np.where(block0, 0.0, u0)
        u[..., 1] = np.where(block1, 0.0, u1)
        return u

    return saturate


def single_track_dynamics(p: SingleTrackParams) -> ControlAffineDynamics:
    """Seven-state single-track model with tire slip.

    The slip terms divide by the speed; below ``p.v_low`` the drift blends
    to a kinematic single-track relaxation (yaw rate and slip angle track
    their kinematic values with time constant ``tau_relax``), which keeps the
    ODE well posed through near-standstill states.
    """
    g = p.grav
    mu, m, I_z = p.mu, p.m, p.I_z
    lf, lr, lwb, h = p.lf, p.lr, p.lwb, p.h_cg
    Csf, Csr = p.C_Sf, p.C_Sr

    def drift(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        delta = x[..., 2]
        v = x[..., 3]
        psi = x[..., 4]
        psid = x[..., 5]
        beta = x[..., 6]

        low = np.abs(v) < p.v_low
        v_div = np.where(low, p.v_low, v)

        out = np.empty_like(x)
        out[..., 0] = v * np.cos(psi + beta)
        out[..., 1] = v * np.sin(psi + beta)
        out[..., 2] = 0.0
        out[..., 3] = 0.0
        out[..., 4] = psid

        # Dynamic branch: zero-input part of the slip equations.
        yaw_acc = (mu * m / (I_z * lwb)) * (
            lf * Csf * g * lr * delta
            + (lr * Csr * g * lf - lf * Csf * g * lr) * beta
            - (lf**2 * Csf * g * lr + lr**2 * Csr * g * lf) * psid / v_div
        )
        slip_rate = (mu / (v_div * lwb)) * (
            Csf * g * lr * delta
            - (Csr * g * lf + Csf * g * lr) * beta
            + (Csr * g * lf * lr - Csf * g * lr * lf) * psid / v_div
        ) - psid

        # Kinematic fallback: relax yaw rate and slip toward their
        # kinematic single-track values.
        beta_kin = np.arctan(np.tan(delta) * lr / lwb)
        psid_kin = v * np.cos(beta_kin) * np.tan(delta) / lwb
        yaw_acc_kin = (psid_kin - psid) / p.tau_relax
        slip_rate_kin = (beta_kin - beta) / p.tau_relax

        out[..., 5] = np.where(low, yaw_acc_kin, yaw_acc)
        out[..., 6] = np.where(low, slip_rate_kin, slip_rate)
        return out

    def input_matrix(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        delta = x[..., 2]
        v = x[..., 3]
        psid = x[..., 5]
        beta = x[..., 6]

        low = np.abs(v) < p.v_low
        v_div = np.where(low, p.v_low, v)

        gmat = np.zeros(x.shape[:-1] + (7, 2))
        gmat[..., 2, 0] = 1.0
        gmat[..., 3, 1] = 1.0
        # Load-transfer coupling of longitudinal acceleration into the slip
        # equations (linear in the acceleration command).
        g6 = (mu * m / (I_z * lwb)) * (
            -lf * Csf * h * delta
            + (lr * Csr * h + lf * Csf * h) * beta
            + (lf**2 * Csf * h - lr**2 * Csr * h) * psid / v_div
        )
        g7 = (mu / (v_div * lwb)) * (
            -Csf * h * delta
            + (Csf * h - Csr * h) * beta
            + (Csr * h * lr + Csf * h * lf) * psid / v_div
        )
        gmat[..., 5, 1] = np.where(low, 0.0, g6)
        gmat[..., 6, 1] = np.where(low, 0.0, g7)
        return gmat

    return ControlAffineDynamics(
        state_dim=7,
        control_dim=2,
        drift=drift,
        input_matrix=input_matrix,
        u_min=np.array([-p.steer_rate_max, -p.accel_max]),
        u_max=np.array([p.steer_rate_max, p.accel_max]),
        name="single_track",
        saturation=_single_track_saturation(p),
    )


# ---------------------------------------------------------------------------
# Double integrator (analytic test benchmark)
# ---------------------------------------------------------------------------

def double_integrator_dynamics(accel_bound: float = 1.0) -> ControlAffineDynamics:
    """position' = v, velocity' = u with |u| <= accel_bound.

    The viability kernel of {position <= p_max} has the closed-form boundary
    v = sqrt(2 a (p_max - position)), which makes this the analytic anchor
    for the grid solver.
    """

    def drift(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., 0] = x[..., 1]
        return out

    def input_matrix(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0
        return g

    return ControlAffineDynamics(
        state_dim=2,
        control_dim=1,
        drift=drift,
        input_matrix=input_matrix,
        u_min=np.array([-accel_bound]),
        u_max=np.array([accel_bound]),
        name="double_integrator",
    )
