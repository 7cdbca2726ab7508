"""Closed-loop execution of hybrid systems and the benchmark controllers.

The executor integrates the active mode with fixed-step RK4, holds the
control between controller ticks, localizes guard crossings by bisection on
the guard level, and switches modes with an identity reset.  It enforces at
most one switch per integration step; chattering aborts with diagnostics.

Reference controllers: PID speed tracking, pure pursuit path tracking, a
direct single-shooting MPC for the cruise-control benchmark, and a constant
input.  All controllers implement ``reset()`` and ``control(q, x, t)``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dynamics import ControlAffineDynamics
from .hybrid import HybridSystem, HybridTrajectory, TrajectorySegment

log = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "ChatteringError",
    "integrate_step",
    "execute_hybrid",
    "acc_cost",
    "SafetyResult",
    "safety_check",
    "PidController",
    "PurePursuitController",
    "pure_pursuit_curvature",
    "AccMpcController",
    "ConstantController",
    "write_trajectory_csv",
    "run_summary",
]


@dataclass(frozen=True)
class SimConfig:
    """Fixed-step closed-loop settings.

    The control rate must divide the integration rate evenly so controls
    are held for a whole number of steps.
    """

    dt: float = 0.01
    horizon: float = 20.0
    control_rate: float = 100.0
    event_tol: float = 1e-6
    max_switches: int = 100

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0 or self.control_rate <= 0:
            raise ValueError("dt, horizon and control_rate must be positive")
        steps = 1.0 / (self.control_rate * self.dt)
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError(
                f"control rate {self.control_rate} Hz does not divide the "
                f"integration rate {1.0 / self.dt} Hz evenly"
            )

    @property
    def steps_per_tick(self) -> int:
        return int(round(1.0 / (self.control_rate * self.dt)))


class ChatteringError(RuntimeError):
    pass


def _flow(dyn: ControlAffineDynamics, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if dyn.saturation is not None:
        u = dyn.saturation(x, u)
    return dyn.drift(x) + dyn.input_matrix(x) @ u


def integrate_step(
    dyn: ControlAffineDynamics, x: np.ndarray, u: np.ndarray, dt: float
) -> np.ndarray:
    """Classical RK4 step with the control held constant over the step."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    k1 = _flow(dyn, x, u)
    k2 = _flow(dyn, x + 0.5 * dt * k1, u)
    k3 = _flow(dyn, x + 0.5 * dt * k2, u)
    k4 = _flow(dyn, x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise RuntimeError(f"integration diverged at state {x}")
    return out


def _locate_crossing(
    dyn: ControlAffineDynamics,
    guard,
    x: np.ndarray,
    u: np.ndarray,
    dt: float,
    tol: float,
) -> tuple[float, np.ndarray]:
    """Bisect the step [0, dt] for the time where the guard margin hits 0.

    Precondition: margin(x) < 0 <= margin(x + step dt).  Returns (tau,
    state at tau) with |margin| <= tol at the reported state.
    """
    lo, hi = 0.0, dt
    x_hi = integrate_step(dyn, x, u, dt)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        x_mid = integrate_step(dyn, x, u, mid) if mid > 0 else x.copy()
        m = float(guard.margin(x_mid))
        if abs(m) <= tol:
            return mid, x_mid
        if m < 0:
            lo = mid
        else:
            hi, x_hi = mid, x_mid
    return hi, x_hi


def execute_hybrid(
    system: HybridSystem,
    controller,
    x0: np.ndarray,
    q0: int,
    cfg: SimConfig,
    constraint_fields: Mapping[int, Callable[[np.ndarray], np.ndarray]] | None = None,
) -> HybridTrajectory:
    """Run the closed loop from (q0, x0) for the simulation horizon.

    The controller is evaluated at the control rate and held in between.
    Guard crossings are detected by a sign change of the guard margin over
    a step, refined by bisection to the event tolerance, and resolved with
    an identity reset.  When several guards fire in the same step the
    earliest crossing wins; exact ties pick the lowest target mode index
    (logged), since simultaneous guard satisfaction is otherwise
    unspecified.
    """
    x = np.asarray(x0, dtype=float).copy()
    q = int(q0)
    t = 0.0
    controller.reset()
    n_steps = int(round(cfg.horizon / cfg.dt))
    ell_of = constraint_fields or {}
    # Controllers may run slower than the default tick (e.g. a receding-
    # horizon controller at 10 Hz under 100 Hz integration).
    rate = float(getattr(controller, "control_rate", cfg.control_rate))
    steps_per_tick = 1.0 / (rate * cfg.dt)
    if abs(steps_per_tick - round(steps_per_tick)) > 1e-9:
        raise ValueError(
            f"controller rate {rate} Hz does not divide the integration rate"
        )
    steps_per_tick = int(round(steps_per_tick))

    traj = HybridTrajectory()
    seg_t: list[float] = []
    seg_x: list[np.ndarray] = []
    seg_u: list[np.ndarray] = []
    seg_b: list[float] = []
    seg_l: list[float] = []
    seg_fb: list[bool] = []
    solve_times: list[float] = []
    switch_count = 0
    u = np.zeros(system.dynamics[q].control_dim)
    info = {"barrier": float("nan"), "fallback": False}

    def close_segment(switch_time: float | None):
        traj.segments.append(
            TrajectorySegment(
                mode=q,
                times=np.asarray(seg_t),
                states=np.asarray(seg_x),
                controls=np.asarray(seg_u),
                barrier_values=np.asarray(seg_b),
                constraint_values=np.asarray(seg_l),
                fallback_flags=np.asarray(seg_fb, dtype=bool),
                switch_time=switch_time,
            )
        )

    def log_sample(tt: float, xx: np.ndarray, uu: np.ndarray):
        seg_t.append(tt)
        seg_x.append(xx.copy())
        seg_u.append(uu.copy())
        seg_b.append(float(info.get("barrier", float("nan"))))
        ell = ell_of.get(q)
        seg_l.append(float(ell(xx)) if ell is not None else float("nan"))
        seg_fb.append(bool(info.get("fallback", False)))

    for step in range(n_steps):
        if step % steps_per_tick == 0:
            tic = time.perf_counter()
            u = np.asarray(controller.control(q, x, t), dtype=float)
            solve_times.append(time.perf_counter() - tic)
            info = dict(getattr(controller, "last_info", {}))
            u = system.dynamics[q].clip_control(u)
        log_sample(t, x, u)

        dyn = system.dynamics[q]
        margins_before = {
            dst: float(g.margin(x)) for dst, g in system.outgoing(q)
        }
        x_next = integrate_step(dyn, x, u, cfg.dt)

        crossings: list[tuple[float, int, np.ndarray]] = []
        for dst, guard in system.outgoing(q):
            m0 = margins_before[dst]
            m1 = float(guard.margin(x_next))
            if m0 < 0 <= m1:
                tau, x_tau = _locate_crossing(dyn, guard, x, u, cfg.dt, cfg.event_tol)
                crossings.append((tau, dst, x_tau))
            elif m0 >= 0:
                crossings.append((0.0, dst, x.copy()))

        if crossings:
            crossings.sort(key=lambda c: (c[0], c[1]))
            if len(crossings) > 1 and abs(crossings[0][0] - crossings[1][0]) <= cfg.event_tol:
                log.warning(
                    "simultaneous guards at t=%.6f; taking lowest target mode %d",
                    t + crossings[0][0],
                    crossings[0][1],
                )
            tau, dst, x_tau = crossings[0]
            t_switch = t + tau
            switch_count += 1
            if switch_count > cfg.max_switches:
                raise ChatteringError(
                    f"{switch_count} switches exceed the limit at t={t_switch:.4f}"
                )
            if not seg_t or t_switch > seg_t[-1]:
                log_sample(t_switch, x_tau, u)
            close_segment(t_switch)
            seg_t, seg_x, seg_u, seg_b, seg_l, seg_fb = [], [], [], [], [], []
            q = dst
            new_dyn = system.dynamics[q]
            u = new_dyn.clip_control(u) if u.shape == (new_dyn.control_dim,) else np.zeros(
                new_dyn.control_dim
            )
            log_sample(t_switch, x_tau, u)  # identity reset: same state, new mode
            remainder = cfg.dt - tau
            if remainder > 1e-12:
                x = integrate_step(new_dyn, x_tau, u, remainder)
                for dst2, guard2 in system.outgoing(q):
                    if float(guard2.margin(x_tau)) < 0 <= float(guard2.margin(x)):
                        raise ChatteringError(
                            f"second guard ({q},{dst2}) fired within one step at "
                            f"t={t + cfg.dt:.4f}"
                        )
            else:
                x = x_tau
        else:
            x = x_next
        t += cfg.dt

    log_sample(t, x, u)
    close_segment(None)
    traj.mean_solve_time = float(np.mean(solve_times)) if solve_times else 0.0
    traj.switch_count = switch_count
    return traj


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def acc_cost(traj: HybridTrajectory, v_desired: float, t_headway: float) -> float:
    """Trapezoidal quadrature of the tracking cost over the trajectory.

    Integrand: 0.01 (v - v_d)^2 + 0.1 (d - T_h v)^2 with the cruise-control
    state layout (position, velocity, headway).
    """
    times, states, _, _ = traj.stacked()
    v = states[:, 1]
    d = states[:, 2]
    integrand = 0.01 * (v - v_desired) ** 2 + 0.1 * (d - t_headway * v) ** 2
    return float(np.trapezoid(integrand, times))


@dataclass(frozen=True)
class SafetyResult:
    safe: bool
    min_margin: float
    first_violation_time: float | None


def safety_check(
    traj: HybridTrajectory,
    constraint_fields: Mapping[int, Callable[[np.ndarray], np.ndarray]],
) -> SafetyResult:
    """Safe iff the active mode's constraint is non-negative at every sample."""
    min_margin = float("inf")
    first_violation = None
    for seg in traj.segments:
        ell = constraint_fields[seg.mode]
        vals = np.asarray(ell(seg.states), dtype=float)
        m = float(np.min(vals)) if vals.size else float("inf")
        min_margin = min(min_margin, m)
        if first_violation is None and np.any(vals < 0):
            first_violation = float(seg.times[int(np.argmax(vals < 0))])
    return SafetyResult(
        safe=first_violation is None,
        min_margin=min_margin,
        first_violation_time=first_violation,
    )


# ---------------------------------------------------------------------------
# Reference controllers
# ---------------------------------------------------------------------------

class ConstantController:
    def __init__(self, u: Sequence[float]):
        self.u = np.asarray(u, dtype=float)
        self.last_info: dict = {}

    def reset(self) -> None:
        pass

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        return self.u.copy()


class PidController:
    """Speed-tracking PID on the cruise-control state, clamped to a box.

    Integrator windup is avoided by conditional integration: the integral
    only accumulates while the output is unsaturated or the error drives it
    back into the box.
    """

    def __init__(
        self,
        kp: float,
        ki: float,
        kd: float,
        target: float,
        u_min: float,
        u_max: float,
        measure: Callable[[np.ndarray], float] | None = None,
    ):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.target = target
        self.u_min, self.u_max = float(u_min), float(u_max)
        self.measure = measure or (lambda x: float(x[1]))
        self.last_info: dict = {}
        self.reset()

    def reset(self) -> None:
        self._integral = 0.0
        self._prev_err: float | None = None
        self._prev_t: float | None = None

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        err = self.target - self.measure(np.asarray(x, dtype=float))
        deriv = 0.0
        if self._prev_t is not None and t > self._prev_t:
            deriv = (err - self._prev_err) / (t - self._prev_t)
            dt = t - self._prev_t
        else:
            dt = 0.0
        raw = self.kp * err + self.ki * (self._integral + err * dt) + self.kd * deriv
        if self.u_min <= raw <= self.u_max or raw * err < 0:
            self._integral += err * dt
        u = float(np.clip(self.kp * err + self.ki * self._integral + self.kd * deriv,
                          self.u_min, self.u_max))
        self._prev_err, self._prev_t = err, t
        return np.array([u])


def pure_pursuit_curvature(
    position: np.ndarray, heading: float, target: np.ndarray
) -> float:
    """Arc curvature through the target point: 2 sin(alpha) / distance."""
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    delta = target - position
    dist = float(np.hypot(*delta))
    if dist <= 1e-12:
        return 0.0
    alpha = float(np.arctan2(delta[1], delta[0]) - heading)
    return 2.0 * np.sin(alpha) / dist


class PurePursuitController:
    """Pure-pursuit steering plus proportional speed tracking.

    Waypoints form a closed polyline; the lookahead target is the first
    waypoint at least the lookahead distance ahead of the nearest one
    (walking the loop forward).  Speed targets are per waypoint.
    """

    def __init__(
        self,
        waypoints: np.ndarray,
        speed_targets: np.ndarray | float,
        lookahead: float,
        wheelbase: float,
        k_steer: float = 8.0,
        k_speed: float = 4.0,
        u_box: np.ndarray | None = None,
    ):
        self.waypoints = np.asarray(waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2 or len(self.waypoints) < 3:
            raise ValueError("waypoints must be a closed (K, 2) polyline with K >= 3")
        self.speeds = np.broadcast_to(
            np.asarray(speed_targets, dtype=float), (len(self.waypoints),)
        ).copy()
        self.lookahead = float(lookahead)
        self.wheelbase = float(wheelbase)
        self.k_steer = k_steer
        self.k_speed = k_speed
        self.u_box = u_box
        self.last_info: dict = {}

    def reset(self) -> None:
        pass

    def _target(self, position: np.ndarray) -> tuple[np.ndarray, float]:
        d = np.linalg.norm(self.waypoints - position, axis=1)
        nearest = int(np.argmin(d))
        if d[nearest] > 2.0 * self.lookahead:
            raise RuntimeError(
                f"no waypoint within lookahead reach (nearest {d[nearest]:.2f} m)"
            )
        K = len(self.waypoints)
        for off in range(1, K + 1):
            idx = (nearest + off) % K
            if np.linalg.norm(self.waypoints[idx] - position) >= self.lookahead:
                return self.waypoints[idx], float(self.speeds[idx])
        return self.waypoints[nearest], float(self.speeds[nearest])

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        position = x[:2]
        steer, v, yaw = x[2], x[3], x[4]
        target, v_target = self._target(position)
        kappa = pure_pursuit_curvature(position, yaw, target)
        steer_des = float(np.arctan(kappa * self.wheelbase))
        u = np.array([self.k_steer * (steer_des - steer), self.k_speed * (v_target - v)])
        if self.u_box is not None:
            u = np.clip(u, self.u_box[:, 0], self.u_box[:, 1])
        return u


class AccMpcController:
    """Direct single-shooting MPC for the cruise-control benchmark.

    Predicts the mode schedule from position thresholds, rolls the horizon
    out with Euler steps at the MPC rate, and minimizes the discretized
    tracking cost plus a quadratic penalty on headway-constraint violation
    by projected gradient with backtracking (fixed iteration budget,
    deterministic).  Controls are projected onto the predicted mode's box.
    """

    def __init__(
        self,
        mode_dynamics: Mapping[int, ControlAffineDynamics],
        mode_of_position: Callable[[float], int],
        acc_params: Mapping[int, object],
        v_desired: float,
        t_headway: float,
        horizon_steps: int = 70,
        mpc_dt: float = 0.1,
        penalty: float = 200.0,
        margin_buffer: float = 2.0,
        iterations: int = 40,
        control_rate: float = 10.0,
    ):
        if horizon_steps < 1:
            raise ValueError("horizon must be at least one step")
        self.dyn = dict(mode_dynamics)
        self.mode_of_position = mode_of_position
        self.params = dict(acc_params)
        self.v_desired = v_desired
        self.t_headway = t_headway
        self.N = int(horizon_steps)
        self.mpc_dt = float(mpc_dt)
        self.penalty = float(penalty)
        self.buffer = float(margin_buffer)
        self.iterations = int(iterations)
        self.control_rate = float(control_rate)
        self.last_info: dict = {}
        self.reset()

    def reset(self) -> None:
        self._u_warm = np.zeros(self.N)

    def _rollout(self, x0: np.ndarray, u: np.ndarray):
        xs = np.empty((self.N + 1, 3))
        modes = np.empty(self.N, dtype=int)
        xs[0] = x0
        for k in range(self.N):
            mode = self.mode_of_position(xs[k, 0])
            modes[k] = mode
            p = self.params[mode]
            v = xs[k, 1]
            uk = float(np.clip(u[k], -p.u_bound, p.u_bound))
            xs[k + 1, 0] = xs[k, 0] + self.mpc_dt * v
            xs[k + 1, 1] = v + self.mpc_dt * (uk - p.rolling_resistance(v)) / p.m
            xs[k + 1, 2] = xs[k, 2] + self.mpc_dt * (p.v0 - v)
        return xs, modes

    def _cost_and_grad(self, x0: np.ndarray, u: np.ndarray):
        dt = self.mpc_dt
        xs, modes = self._rollout(x0, u)
        v = xs[1:, 1]
        d = xs[1:, 2]
        m = d - self.t_headway * v
        viol = np.maximum(self.buffer - m, 0.0)
        cost = float(
            np.sum(dt * (0.01 * (v - self.v_desired) ** 2 + 0.1 * m**2))
            + self.penalty * np.sum(dt * viol**2)
        )
        # Stage-cost gradients w.r.t. (p, v, d) at steps 1..N.
        gx = np.zeros((self.N + 1, 3))
        dm = 0.2 * dt * m - 2.0 * self.penalty * dt * viol
        gx[1:, 1] = 0.02 * dt * (v - self.v_desired) - self.t_headway * dm
        gx[1:, 2] = dm
        # Reverse sweep: lam_k = grad of cost-to-go w.r.t. x_k.
        lam = gx[self.N].copy()
        gu = np.zeros(self.N)
        for k in range(self.N - 1, -1, -1):
            p = self.params[modes[k]]
            vk = xs[k, 1]
            gu[k] = dt * lam[1] / p.m
            dfdv = -(p.f2 + 2.0 * p.f3 * vk) / p.m
            lam_prev = np.array(
                [
                    lam[0],
                    lam[0] * dt + lam[1] * (1.0 + dt * dfdv) - lam[2] * dt,
                    lam[2],
                ]
            )
            lam = lam_prev + gx[k]
        return cost, gu, modes

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x[2] - self.t_headway * x[1] < 0:
            raise RuntimeError("MPC started from an infeasible headway state")
        u = self._u_warm.copy()
        cost, grad, modes = self._cost_and_grad(x, u)
        bounds = np.array([self.params[m].u_bound for m in modes])
        step = 1.0 / max(float(np.max(np.abs(grad))) / np.max(bounds), 1e-12)
        improved = False
        for _ in range(self.iterations):
            trial = np.clip(u - step * grad, -bounds, bounds)
            trial_cost, trial_grad, modes = self._cost_and_grad(x, trial)
            backtracks = 0
            while trial_cost > cost and backtracks < 12:
                step *= 0.5
                trial = np.clip(u - step * grad, -bounds, bounds)
                trial_cost, trial_grad, modes = self._cost_and_grad(x, trial)
                backtracks += 1
            if trial_cost > cost:
                break
            improvement = cost - trial_cost
            improved = True
            u, cost, grad = trial, trial_cost, trial_grad
            bounds = np.array([self.params[m].u_bound for m in modes])
            step *= 1.5
            if improvement < 1e-10 * max(abs(cost), 1.0):
                break
        # Stalled means the solver got stuck away from first-order optimality
        # (distinct from the warm start already being converged).
        optimality = float(np.max(np.abs(u - np.clip(u - grad, -bounds, bounds))))
        stalled = (not improved) and optimality > 1e-3 * float(np.max(bounds))
        if stalled:
            log.debug("MPC made no progress at t=%.3f; using best iterate", t)
        self._u_warm = np.concatenate([u[1:], u[-1:]])
        self.last_info = {"barrier": float("nan"), "fallback": stalled}
        return np.array([u[0]])


# ---------------------------------------------------------------------------
# Trajectory persistence
# ---------------------------------------------------------------------------

def write_trajectory_csv(
    traj: HybridTrajectory,
    path,
    state_names: Sequence[str],
    control_names: Sequence[str],
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t", "mode", *state_names, *control_names, "barrier", "constraint", "fallback"]
        )
        for seg in traj.segments:
            for i in range(len(seg.times)):
                writer.writerow(
                    [
                        f"{seg.times[i]:.6f}",
                        seg.mode,
                        *[f"{v:.9g}" for v in seg.states[i]],
                        *[f"{v:.9g}" for v in seg.controls[i]],
                        f"{seg.barrier_values[i]:.9g}",
                        f"{seg.constraint_values[i]:.9g}",
                        int(seg.fallback_flags[i]),
                    ]
                )


def run_summary(
    traj: HybridTrajectory,
    safety: SafetyResult,
    cost: float | None,
) -> dict:
    fallback_steps = int(sum(int(seg.fallback_flags.sum()) for seg in traj.segments))
    return {
        "safe": bool(safety.safe),
        "min_margin": float(safety.min_margin),
        "first_violation_time": safety.first_violation_time,
        "cost": cost,
        "mean_solve_time": float(getattr(traj, "mean_solve_time", 0.0)),
        "switch_times": [float(s) for s in traj.switch_times],
        "switch_count": int(getattr(traj, "switch_count", len(traj.switch_times))),
        "mode_sequence": traj.mode_sequence,
        "fallback_steps": fallback_steps,
    }
