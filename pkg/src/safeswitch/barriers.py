"""Barrier functions, the QP safety filter, and switching-set machinery.

A barrier function h certifies the safe set {h >= 0}; the filter projects a
reference control onto the half-space of controls that keep h decaying no
faster than its class-K rate, intersected with the actuator box.  Switching
sets partition the guard states of a mode transition into those that remain
safe after the jump and those that do not; the latter feed the refinement
as an extra constraint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .dynamics import ControlAffineDynamics
from .hybrid import GuardCondition, HybridSystem
from .network import CbvfNetwork, forward_with_input_grads

log = logging.getLogger(__name__)

__all__ = [
    "BarrierFunction",
    "AffineControlConstraint",
    "SwitchingSets",
    "InfeasibleFilterError",
    "barrier_constraint",
    "qp_filter",
    "switching_sets",
    "unsafe_switching_level",
    "refined_constraint_level",
    "hamiltonian_optimal_control",
    "CbvfBarrier",
    "SwitchingController",
    "acc_constraint_field",
    "acc_braking_barrier",
    "global_min_barrier",
    "ring_wall_constraint",
    "ring_wall_barrier",
]


@dataclass(frozen=True)
class BarrierFunction:
    """Differentiable scalar field h with its gradient and class-K rate.

    ``value`` maps (..., n) -> (...,), ``gradient`` maps (..., n) -> (..., n).
    The class-K function is linear, alpha(h) = alpha_rate * h.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    alpha_rate: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.alpha_rate <= 0:
            raise ValueError("alpha_rate must be positive")


@dataclass(frozen=True)
class AffineControlConstraint:
    """Half-space in control space: a . u >= b."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        if not np.all(np.isfinite(self.a)) or not np.isfinite(self.b):
            raise ValueError("constraint coefficients must be finite")

    def satisfied(self, u: np.ndarray, tol: float = 0.0) -> bool:
        return float(self.a @ np.asarray(u, dtype=float)) >= self.b - tol


class InfeasibleFilterError(RuntimeError):
    """No control in the box satisfies the barrier constraint.

    ``margin`` is the violation b - max_box(a . u); the caller decides on a
    fallback action.
    """

    def __init__(self, margin: float):
        super().__init__(f"barrier constraint infeasible by {margin:.6g}")
        self.margin = margin


def barrier_constraint(
    h: BarrierFunction, dyn: ControlAffineDynamics, x: np.ndarray
) -> AffineControlConstraint:
    """The safe-control half-space at x: grad h . (f + g u) >= -alpha(h)."""
    x = np.asarray(x, dtype=float)
    grad = h.gradient(x)
    val = float(h.value(x))
    return _constraint_from_parts(val, grad, h.alpha_rate, dyn, x)


def _constraint_from_parts(
    val: float,
    grad: np.ndarray,
    alpha_rate: float,
    dyn: ControlAffineDynamics,
    x: np.ndarray,
) -> AffineControlConstraint:
    f = dyn.drift(x)
    g = dyn.input_matrix(x)
    a = grad @ g
    b = -alpha_rate * val - float(grad @ f)
    return AffineControlConstraint(a=a, b=b)


def qp_filter(
    con: AffineControlConstraint, box: np.ndarray, u_ref: np.ndarray
) -> np.ndarray:
    """Minimally invasive projection onto {u in box : a . u >= b}.

    Solved exactly: a feasible reference is returned unchanged; otherwise
    the optimum is either the box projection of the reference (constraint
    inactive) or the point clip(u_ref + lambda a) on the hyperplane
    a . u = b, with lambda found by breakpoint enumeration of the monotone
    piecewise-linear map lambda -> a . clip(u_ref + lambda a).
    """
    a = con.a
    b = con.b
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    u_ref = np.asarray(u_ref, dtype=float)
    if u_ref.shape != a.shape:
        raise ValueError(f"reference control shape {u_ref.shape} != {a.shape}")

    best = float(np.sum(np.where(a > 0, a * hi, a * lo)))
    if best < b:
        raise InfeasibleFilterError(margin=b - best)

    in_box = bool(np.all(u_ref >= lo) and np.all(u_ref <= hi))
    if in_box and float(a @ u_ref) >= b:
        return u_ref.copy()

    u_box = np.clip(u_ref, lo, hi)
    if float(a @ u_box) >= b:
        return u_box

    # Constraint is active at the optimum.  phi(lam) = a . clip(u_ref + lam a)
    # is non-decreasing piecewise linear with breakpoints where a coordinate
    # hits a box face; walk segments until phi crosses b.
    nz = a != 0.0
    bps: list[float] = []
    for j in np.flatnonzero(nz):
        for bound in (lo[j], hi[j]):
            lam = (bound - u_ref[j]) / a[j]
            if lam > 0:
                bps.append(lam)
    bps = sorted(set(bps))

    def phi(lam: float) -> float:
        return float(a @ np.clip(u_ref + lam * a, lo, hi))

    lam_lo = 0.0
    val_lo = phi(0.0)
    for bp in bps + [None]:
        if bp is None:
            lam_hi, val_hi = lam_lo + 1.0, val_lo  # flat tail; handled below
        else:
            lam_hi, val_hi = bp, phi(bp)
        if val_hi >= b:
            # Crossing in (lam_lo, lam_hi]: linear interpolation is exact up
            # to roundoff; nudge lambda upward until the constraint holds
            # exactly, which also makes re-projection a fixed point.
            slope = (val_hi - val_lo) / (lam_hi - lam_lo)
            lam = lam_lo if slope == 0 else lam_lo + (b - val_lo) / slope
            bump = np.finfo(float).eps * max(abs(lam), 1.0)
            out = np.clip(u_ref + lam * a, lo, hi)
            for _ in range(64):
                if float(a @ out) >= b:
                    break
                lam += bump
                bump *= 2.0
                out = np.clip(u_ref + lam * a, lo, hi)
            return out
        lam_lo, val_lo = lam_hi, val_hi
    # Unreachable: feasibility was checked against the box maximum.
    raise InfeasibleFilterError(margin=b - best)


def hamiltonian_optimal_control(
    grad: np.ndarray, dyn: ControlAffineDynamics, x: np.ndarray
) -> np.ndarray:
    """Box vertex maximizing grad . g(x) u, the steepest barrier-raising input."""
    g = dyn.input_matrix(np.asarray(x, dtype=float))
    a = np.asarray(grad, dtype=float) @ g
    return np.where(a >= 0, dyn.u_max, dyn.u_min)


# ---------------------------------------------------------------------------
# Switching sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwitchingSets:
    """Partition of the guard states of one transition by post-switch safety.

    ``unsafe_level`` is a continuous level function whose non-positive set
    over-approximates the unsafe switching set (off-guard states receive a
    positive guard margin, so only guard states can be flagged).
    """

    safe_member: Callable[[np.ndarray], np.ndarray]
    unsafe_member: Callable[[np.ndarray], np.ndarray]
    unsafe_level: Callable[[np.ndarray], np.ndarray]


def unsafe_switching_level(
    guard: GuardCondition, h_target: Callable[[np.ndarray], np.ndarray]
) -> Callable[[np.ndarray], np.ndarray]:
    """Level function for the unsafe switching set of one edge.

    max(-guard margin, h_target): negative exactly on guard states whose
    post-switch barrier is negative.
    """

    def level(x: np.ndarray) -> np.ndarray:
        return np.maximum(-guard.margin(x), h_target(x))

    return level


def switching_sets(
    guard: GuardCondition, h_q: BarrierFunction, h_qp: BarrierFunction
) -> SwitchingSets:
    """Safe / unsafe switching sets for the transition guarded by ``guard``.

    Safe: on the guard, safe in the departing mode, safe in the arriving
    mode.  Unsafe: on the guard and safe in the departing mode, but unsafe
    after the jump.
    """

    def safe_member(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (guard.margin(x) >= 0) & (h_q.value(x) >= 0) & (h_qp.value(x) >= 0)

    def unsafe_member(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (guard.margin(x) >= 0) & (h_q.value(x) >= 0) & (h_qp.value(x) < 0)

    return SwitchingSets(
        safe_member=safe_member,
        unsafe_member=unsafe_member,
        unsafe_level=unsafe_switching_level(guard, h_qp.value),
    )


def refined_constraint_level(
    ell: Callable[[np.ndarray], np.ndarray],
    ell_unsafe: Callable[[np.ndarray], np.ndarray],
) -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise minimum of a constraint level and an unsafe-set level."""

    def level(x: np.ndarray) -> np.ndarray:
        return np.minimum(ell(x), ell_unsafe(x))

    return level


# ---------------------------------------------------------------------------
# Time-parameterized barriers and the switching controller
# ---------------------------------------------------------------------------

class CbvfBarrier:
    """Neural barrier-value function used as a time-parameterized barrier.

    ``margin`` shifts the zero level: the filter treats {B >= margin} as the
    safe set, absorbing small learning errors near the boundary.
    """

    def __init__(
        self,
        net: CbvfNetwork,
        horizon: float,
        alpha_rate: float = 1.0,
        margin: float = 0.0,
        name: str = "",
    ):
        self.net = net
        self.horizon = float(horizon)
        self.alpha_rate = float(alpha_rate)
        self.margin = float(margin)
        self.name = name

    def value_and_gradient(self, x: np.ndarray, t: float) -> tuple[float, np.ndarray]:
        bundle = forward_with_input_grads(self.net, np.asarray(x, dtype=float), t)
        return float(bundle.value) - self.margin, np.asarray(bundle.grad_x, dtype=float)

    def value(self, x: np.ndarray, t: float) -> np.ndarray:
        from .network import forward

        return forward(self.net, x, t) - self.margin


def _evaluate_barrier(
    barrier, x: np.ndarray, t_remaining: float
) -> tuple[float, np.ndarray, float]:
    """(value, spatial gradient, alpha rate) for static or timed barriers."""
    if isinstance(barrier, BarrierFunction):
        return float(barrier.value(x)), np.asarray(barrier.gradient(x)), barrier.alpha_rate
    val, grad = barrier.value_and_gradient(x, t_remaining)
    return val, grad, barrier.alpha_rate


class SwitchingController:
    """Mode-indexed CBF-QP filter around a reference controller.

    At mode q the reference control is projected onto the safe control set
    of that mode's barrier under that mode's actuator box.  Time-varying
    barriers are evaluated at the remaining refinement horizon,
    clamp(T - elapsed time in mode, 0, T), so a freshly entered mode uses
    the full-horizon safe set and relaxes toward the boundary function as
    it dwells.  On filter infeasibility the steepest barrier-raising vertex
    is applied and the step is flagged.
    """

    def __init__(
        self,
        system: HybridSystem,
        barriers: Mapping[int, object],
        reference: Callable[[int, np.ndarray, float], np.ndarray],
        control_box_override: np.ndarray | None = None,
    ):
        self.system = system
        self.barriers = dict(barriers)
        self.reference = reference
        # A common-barrier controller restricts every mode to one shared box
        # (the barrier must be valid under it in all modes).
        self.box_override = (
            np.asarray(control_box_override, dtype=float)
            if control_box_override is not None
            else None
        )
        self.reset()

    def reset(self) -> None:
        self._mode: int | None = None
        self._entry_time = 0.0
        self.last_info: dict = {}
        ref_reset = getattr(self.reference, "reset", None)
        if callable(ref_reset):
            ref_reset()

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        if q != self._mode:
            self._mode = q
            self._entry_time = t
        dyn = self.system.dynamics[q]
        ref = self.reference
        u_ref = np.asarray(
            ref.control(q, x, t) if hasattr(ref, "control") else ref(q, x, t),
            dtype=float,
        )
        barrier = self.barriers.get(q)
        if barrier is None:
            self.last_info = {"barrier": float("nan"), "fallback": False}
            return dyn.clip_control(u_ref)

        horizon = getattr(barrier, "horizon", 0.0)
        t_rem = float(np.clip(horizon - (t - self._entry_time), 0.0, horizon))
        val, grad, alpha = _evaluate_barrier(barrier, x, t_rem)
        con = _constraint_from_parts(val, grad, alpha, dyn, x)
        box = dyn.control_box if self.box_override is None else self.box_override
        try:
            u = qp_filter(con, box, u_ref)
            fallback = False
        except InfeasibleFilterError:
            u = np.where(con.a >= 0, box[:, 1], box[:, 0])
            fallback = True
        self.last_info = {"barrier": val, "fallback": fallback}
        return u


# ---------------------------------------------------------------------------
# Barrier library for the shipped scenarios
# ---------------------------------------------------------------------------

def acc_constraint_field(t_headway: float, reduced: bool = False) -> BarrierFunction:
    """Headway constraint: distance minus look-ahead distance."""
    vi, di = (0, 1) if reduced else (1, 2)
    dim = 2 if reduced else 3

    def value(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., di] - t_headway * x[..., vi]

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (dim,))
        g[..., vi] = -t_headway
        g[..., di] = 1.0
        return g

    return BarrierFunction(value=value, gradient=gradient, name="headway")


def acc_braking_barrier(p, alpha_rate: float = 1.0, reduced: bool = False) -> BarrierFunction:
    """Headway constraint tightened by the friction-limited braking margin.

    h = d - T_h v - max(v - v0, 0)^2 / (2 c grav).  Under full braking the
    margin term shrinks at least as fast as the gap closes, so {h >= 0} is
    control invariant for the mode regardless of the class-K rate.
    """
    a_brake = p.c * p.grav
    vi, di = (0, 1) if reduced else (1, 2)
    dim = 2 if reduced else 3

    def value(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x[..., vi]
        excess = np.maximum(v - p.v0, 0.0)
        return x[..., di] - p.t_headway * v - excess * excess / (2.0 * a_brake)

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x[..., vi]
        excess = np.maximum(v - p.v0, 0.0)
        g = np.zeros(x.shape[:-1] + (dim,))
        g[..., vi] = -p.t_headway - excess / a_brake
        g[..., di] = 1.0
        return g

    return BarrierFunction(
        value=value, gradient=gradient, alpha_rate=alpha_rate, name="acc_braking"
    )


def global_min_barrier(
    barriers: list[BarrierFunction], alpha_rate: float = 1.0
) -> BarrierFunction:
    """Pointwise minimum of per-mode barriers: one common conservative barrier.

    The gradient follows the active (minimizing) branch; ties pick the first
    barrier in the list.
    """
    if not barriers:
        raise ValueError("need at least one barrier")

    def value(x: np.ndarray) -> np.ndarray:
        vals = np.stack([b.value(x) for b in barriers], axis=0)
        return np.min(vals, axis=0)

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        vals = np.stack([b.value(x) for b in barriers], axis=0)
        grads = np.stack([b.gradient(x) for b in barriers], axis=0)
        idx = np.argmin(vals, axis=0)
        return np.take_along_axis(grads, idx[None, ..., None], axis=0)[0]

    return BarrierFunction(
        value=value, gradient=gradient, alpha_rate=alpha_rate, name="global_min"
    )


def ring_wall_constraint(r_inner: float, r_outer: float) -> BarrierFunction:
    """Distance to the nearest wall of an annular track (positive inside)."""

    def value(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        return np.minimum(r_outer - r, r - r_inner)

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.maximum(np.hypot(x[..., 0], x[..., 1]), 1e-9)
        outer_active = (r_outer - r) <= (r - r_inner)
        sign = np.where(outer_active, -1.0, 1.0)
        g = np.zeros_like(x)
        g[..., 0] = sign * x[..., 0] / r
        g[..., 1] = sign * x[..., 1] / r
        return g

    return BarrierFunction(value=value, gradient=gradient, name="ring_walls")


def ring_wall_barrier(
    r_inner: float,
    r_outer: float,
    mu: float,
    eta: float,
    grav: float = 9.81,
    brake_fraction: float = 0.5,
    alpha_rate: float | None = None,
) -> BarrierFunction:
    """Wall barrier for the annular track, tightened by a braking margin.

    h = wall distance - max(radial closing speed, 0)^2 / (2 a_eff) with
    a_eff = brake_fraction * mu * grav, the fraction of the friction budget
    reserved for killing the wall-normal velocity.  The per-zone brake
    coefficient eta sets the class-K rate (clamped to a range that is
    meaningful at the simulation step).

    State layout is the single-track model's
    (s_x, s_y, steer, v, yaw, yaw rate, slip).
    """
    a_eff = brake_fraction * mu * grav
    rate = float(np.clip(eta, 0.05, 10.0)) if alpha_rate is None else alpha_rate

    def _geometry(x: np.ndarray):
        x = np.asarray(x, dtype=float)
        px, py, v = x[..., 0], x[..., 1], x[..., 3]
        heading = x[..., 4] + x[..., 6]
        r = np.maximum(np.hypot(px, py), 1e-9)
        cos_h, sin_h = np.cos(heading), np.sin(heading)
        v_rad = v * (px * cos_h + py * sin_h) / r  # radial (outward) speed
        return px, py, v, r, cos_h, sin_h, v_rad

    def value(x: np.ndarray) -> np.ndarray:
        _, _, _, r, _, _, v_rad = _geometry(x)
        h_out = (r_outer - r) - np.maximum(v_rad, 0.0) ** 2 / (2 * a_eff)
        h_in = (r - r_inner) - np.maximum(-v_rad, 0.0) ** 2 / (2 * a_eff)
        return np.minimum(h_out, h_in)

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        px, py, v, r, cos_h, sin_h, v_rad = _geometry(x)
        # Partials of r and v_rad w.r.t. the states they depend on.
        dr_dx, dr_dy = px / r, py / r
        dvr = np.zeros_like(x)
        dvr[..., 0] = v * cos_h / r - v_rad * px / (r * r)
        dvr[..., 1] = v * sin_h / r - v_rad * py / (r * r)
        dvr[..., 3] = (px * cos_h + py * sin_h) / r
        dpsi = v * (-px * sin_h + py * cos_h) / r
        dvr[..., 4] = dpsi
        dvr[..., 6] = dpsi

        h_out = (r_outer - r) - np.maximum(v_rad, 0.0) ** 2 / (2 * a_eff)
        h_in = (r - r_inner) - np.maximum(-v_rad, 0.0) ** 2 / (2 * a_eff)
        outer_active = h_out <= h_in

        g = np.zeros_like(x)
        closing_out = np.maximum(v_rad, 0.0) / a_eff
        closing_in = np.maximum(-v_rad, 0.0) / a_eff
        g[..., 0] = np.where(outer_active, -dr_dx, dr_dx)
        g[..., 1] = np.where(outer_active, -dr_dy, dr_dy)
        scale = np.where(outer_active, -closing_out, closing_in)
        g += scale[..., None] * dvr
        return g

    return BarrierFunction(
        value=value, gradient=gradient, alpha_rate=rate, name="ring_wall_barrier"
    )
