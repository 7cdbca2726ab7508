"""Scenario assembly: from a parsed config to systems, barriers and controllers.

Two shipped closed-loop scenarios (multi-friction cruise control and a
three-friction-zone ring track for the single-track car) plus a
double-integrator oracle benchmark.  Everything a command needs -- the
hybrid system, per-mode constraint fields and local barriers, training
domains, oracle grids, and the controller catalog -- is derived here from
the config mapping, with key-path diagnostics on bad input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .barriers import (
    BarrierFunction,
    SwitchingController,
    acc_braking_barrier,
    acc_constraint_field,
    global_min_barrier,
    ring_wall_barrier,
    ring_wall_constraint,
)
from .dynamics import (
    AccModeParams,
    SingleTrackParams,
    acc_dynamics,
    acc_reduced_dynamics,
    double_integrator_dynamics,
    single_track_dynamics,
)
from .hybrid import GuardCondition, HybridSystem, Mode, transition_pairs, unfold_system
from .oracle import Grid
from .sim import (
    AccMpcController,
    ConstantController,
    PidController,
    PurePursuitController,
    SimConfig,
)
from .training import SamplingDomain, TrainingConfig

__all__ = ["ConfigError", "Scenario", "build_scenario", "CONTROLLER_NAMES"]

CONTROLLER_NAMES = (
    "neural_switch_aware",
    "grid_switch_aware",
    "switch_unaware",
    "global_cbf",
    "mpc",
    "reference",
    "constant_zero",
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


def _get(section: Mapping, key: str, path: str, default=None, required: bool = False):
    if key not in section:
        if required:
            raise ConfigError(f"missing config key '{path}.{key}'")
        return default
    return section[key]


def _floats(value, path: str) -> np.ndarray:
    try:
        return np.asarray([float(v) for v in value], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{path}' must be a list of numbers: {exc}") from exc


@dataclass
class Scenario:
    """Everything the pipeline commands need for one benchmark."""

    kind: str
    system: HybridSystem
    barriers: dict[int, BarrierFunction]
    constraint_fields: dict[int, Callable[[np.ndarray], np.ndarray]]
    domains: dict[int, SamplingDomain]
    training: TrainingConfig
    oracle_grids: dict[int, Grid]
    oracle_gamma: float
    oracle_horizon: float
    oracle_slices: int
    sim: SimConfig
    state_names: tuple[str, ...]
    control_names: tuple[str, ...]
    reference_factory: Callable[[], object] = None
    mpc_factory: Callable[[], object] | None = None
    cost_fn: Callable | None = None
    oracle_margin: float = 0.0
    extras: dict = field(default_factory=dict)

    def refined_mode_indices(self) -> list[int]:
        from .hybrid import refinement_order

        order = refinement_order(transition_pairs(self.system))
        seen: list[int] = []
        for src, _ in order:
            if src not in seen:
                seen.append(src)
        return seen

    def build_controller(self, name: str, refined: Mapping[int, object] | None = None):
        """Instantiate one of the catalog controllers.

        ``refined`` supplies the trained (neural or grid) barrier map for the
        switch-aware controllers.
        """
        if name not in CONTROLLER_NAMES:
            raise ConfigError(
                f"unknown controller '{name}'; choose from {', '.join(CONTROLLER_NAMES)}"
            )
        if name == "constant_zero":
            dim = self.system.dynamics[self.system.initial[0]].control_dim
            return ConstantController(np.zeros(dim))
        if name == "mpc":
            if self.mpc_factory is None:
                raise ConfigError(f"scenario '{self.kind}' has no MPC baseline")
            return self.mpc_factory()
        if name == "reference":
            return _FilterlessReference(self.reference_factory(), self.system)
        if name == "switch_unaware":
            return SwitchingController(self.system, self.barriers, self.reference_factory())
        if name == "global_cbf":
            common = global_min_barrier(
                [self.barriers[m.index] for m in self.system.modes]
            )
            tight = np.stack(
                [
                    np.max(
                        np.stack([self.system.dynamics[m.index].u_min for m in self.system.modes]),
                        axis=0,
                    ),
                    np.min(
                        np.stack([self.system.dynamics[m.index].u_max for m in self.system.modes]),
                        axis=0,
                    ),
                ],
                axis=1,
            )
            return SwitchingController(
                self.system,
                {m.index: common for m in self.system.modes},
                self.reference_factory(),
                control_box_override=tight,
            )
        if refined is None:
            raise ConfigError(f"controller '{name}' needs refined barriers")
        return SwitchingController(self.system, refined, self.reference_factory())


class _FilterlessReference:
    """Reference controller passed through unfiltered (box-clipped only)."""

    def __init__(self, reference, system: HybridSystem):
        self.reference = reference
        self.system = system
        self.last_info: dict = {}

    def reset(self) -> None:
        if hasattr(self.reference, "reset"):
            self.reference.reset()

    def control(self, q: int, x: np.ndarray, t: float) -> np.ndarray:
        u = np.asarray(self.reference(q, x, t) if callable(self.reference)
                       else self.reference.control(q, x, t), dtype=float)
        return self.system.dynamics[q].clip_control(u)


class WrappedAngleBarrier:
    """Delegating barrier that wraps periodic state coordinates to [-pi, pi).

    The underlying network is trained on wrapped angles; wrapping a query
    leaves the value and every gradient component unchanged (the field is
    periodic in those coordinates by construction).
    """

    def __init__(self, inner, angle_indices: Sequence[int]):
        self.inner = inner
        self.angle_indices = tuple(angle_indices)
        self.horizon = inner.horizon
        self.alpha_rate = inner.alpha_rate
        self.name = inner.name

    def _wrap(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for j in self.angle_indices:
            x[..., j] = np.mod(x[..., j] + np.pi, 2 * np.pi) - np.pi
        return x

    def value_and_gradient(self, x, t):
        return self.inner.value_and_gradient(self._wrap(x), t)

    def value(self, x, t):
        return self.inner.value(self._wrap(x), t)


# ---------------------------------------------------------------------------
# Shared config blocks
# ---------------------------------------------------------------------------

def _training_from(cfg: Mapping, path: str = "training") -> TrainingConfig:
    t = cfg.get("training", {})
    clip = t.get("level_clip", (-25.0, 25.0))
    kwargs = dict(
        gamma=float(_get(t, "gamma", path, 0.5)),
        residual_weight=float(_get(t, "residual_weight", path, 1.0)),
        horizon=float(_get(t, "horizon", path, 10.0)),
        dataset_size=int(_get(t, "dataset_size", path, 20000)),
        oversample_fraction=float(_get(t, "oversample_fraction", path, 0.38)),
        batch_size=int(_get(t, "batch_size", path, 2048)),
        stage_epochs=tuple(int(e) for e in _get(t, "stage_epochs", path, (500, 3000, 500))),
        lr_main=float(_get(t, "lr_main", path, 2e-4)),
        lr_final=float(_get(t, "lr_final", path, 2e-5)),
        seed=int(cfg.get("seed", 0)),
        hidden_layers=tuple(int(w) for w in _get(t, "hidden_layers", path, (64, 64, 64))),
        omega0=float(_get(t, "omega0", path, 30.0)),
        boundary_pin_fraction=float(_get(t, "boundary_pin_fraction", path, 0.1)),
        guard_slab_fraction=float(_get(t, "guard_slab_fraction", path, 0.1)),
        warmstart=bool(_get(t, "warmstart", path, True)),
        level_clip=None if clip is None else (float(clip[0]), float(clip[1])),
        value_scale=(None if t.get("value_scale") is None else float(t["value_scale"])),
        barrier_margin=float(_get(t, "barrier_margin", path, 0.0)),
    )
    try:
        return TrainingConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"'{path}': {exc}") from exc


def _sim_from(cfg: Mapping) -> SimConfig:
    s = cfg.get("simulation", {})
    try:
        return SimConfig(
            dt=float(_get(s, "dt", "simulation", 0.01)),
            horizon=float(_get(s, "horizon", "simulation", 20.0)),
            control_rate=float(_get(s, "control_rate", "simulation", 100.0)),
            event_tol=float(_get(s, "event_tol", "simulation", 1e-6)),
            max_switches=int(_get(s, "max_switches", "simulation", 100)),
        )
    except ValueError as exc:
        raise ConfigError(f"'simulation': {exc}") from exc


def _grid_from(section: Mapping, path: str) -> Grid:
    try:
        return Grid(
            mins=_floats(_get(section, "mins", path, required=True), f"{path}.mins"),
            maxs=_floats(_get(section, "maxs", path, required=True), f"{path}.maxs"),
            counts=tuple(int(c) for c in _get(section, "counts", path, required=True)),
        )
    except ValueError as exc:
        raise ConfigError(f"'{path}': {exc}") from exc


# ---------------------------------------------------------------------------
# Cruise-control scenario
# ---------------------------------------------------------------------------

def _build_acc(cfg: Mapping) -> Scenario:
    a = cfg.get("acc", {})
    path = "acc"
    mass = float(_get(a, "mass", path, 1650.0))
    grav = float(_get(a, "gravity", path, 9.81))
    v0 = float(_get(a, "lead_velocity", path, 14.0))
    v_d = float(_get(a, "desired_velocity", path, 35.0))
    t_h = float(_get(a, "lookahead_time", path, 1.8))
    alpha = float(_get(a, "alpha_rate", path, 1.0))
    switch_positions = _floats(_get(a, "switch_positions", path, [50.0, 100.0]),
                               f"{path}.switch_positions")

    mode_rows = _get(a, "modes", path, [
        {"label": "rock", "friction": [0.5, 25.0, 1.25], "control_coeff": 0.5},
        {"label": "dry", "friction": [0.3, 15.0, 0.75], "control_coeff": 0.3},
        {"label": "ice", "friction": [0.1, 5.0, 0.25], "control_coeff": 0.1},
    ])
    if len(mode_rows) != len(switch_positions) + 1:
        raise ConfigError(
            f"'{path}.modes' must have one more entry than switch_positions"
        )

    params: dict[int, AccModeParams] = {}
    modes: list[Mode] = []
    dynamics = {}
    barriers = {}
    for i, row in enumerate(mode_rows):
        f1, f2, f3 = _floats(_get(row, "friction", f"{path}.modes[{i}]", required=True),
                             f"{path}.modes[{i}].friction")
        c = float(_get(row, "control_coeff", f"{path}.modes[{i}]", required=True))
        p = AccModeParams(f1=f1, f2=f2, f3=f3, c=c, m=mass, grav=grav, v0=v0, t_headway=t_h)
        params[i] = p
        modes.append(Mode(index=i, label=str(row.get("label", f"mode{i}"))))
        dynamics[i] = acc_dynamics(p)
        barriers[i] = acc_braking_barrier(p, alpha_rate=alpha)

    guards = {}
    for i, pos in enumerate(switch_positions):
        threshold = float(pos)
        guards[(i, i + 1)] = GuardCondition(
            level=(lambda X, th=threshold: np.asarray(X, dtype=float)[..., 0] - th),
            direction="rising",
        )

    init = _get(a, "initial", path, {"mode": modes[0].label, "state": [0.0, 16.0, 60.0]})
    init_label = str(init.get("mode", modes[0].label))
    q0 = next((m.index for m in modes if m.label == init_label), None)
    if q0 is None:
        raise ConfigError(f"'{path}.initial.mode' unknown mode label '{init_label}'")
    x0 = _floats(init.get("state", [0.0, 16.0, 60.0]), f"{path}.initial.state")
    if x0.shape != (3,):
        raise ConfigError(f"'{path}.initial.state' must have 3 entries")

    system = HybridSystem(
        modes=tuple(modes), dynamics=dynamics, guards=guards, initial=(q0, x0)
    )

    dom = a.get("domain", {})
    lo = _floats(_get(dom, "lo", f"{path}.domain", [0.0, 0.0, 0.0]), f"{path}.domain.lo")
    hi = _floats(_get(dom, "hi", f"{path}.domain", [110.0, 36.0, 150.0]), f"{path}.domain.hi")
    pos_margin = float(_get(dom, "position_margin", f"{path}.domain", 10.0))
    o = cfg.get("oracle", {})
    counts = tuple(
        int(c) for c in _get(o, "grid_counts", "oracle", (61, 61, 61))
    )
    # Per refined mode, the position window spans its own road segment plus a
    # margin on both sides (the network is only queried while the mode is
    # active; off-guard queries beyond the entry boundary are dominated by
    # the guard margin in the refinement level).
    domains = {}
    oracle_grids = {}
    for i in range(len(modes) - 1):
        guard = guards[(i, i + 1)]
        p_lo = lo[0] if i == 0 else max(lo[0], switch_positions[i - 1] - pos_margin)
        p_hi = min(hi[0], switch_positions[i] + pos_margin)
        mode_lo = np.array([p_lo, lo[1], lo[2]])
        mode_hi = np.array([p_hi, hi[1], hi[2]])
        domains[i] = SamplingDomain(lo=mode_lo, hi=mode_hi, guard_level=guard.level)
        oracle_grids[i] = Grid(mins=mode_lo, maxs=mode_hi, counts=counts)

    training = _training_from(cfg)
    sim = _sim_from(cfg)
    ell = acc_constraint_field(t_h)
    constraint_fields = {m.index: ell.value for m in modes}

    ref_cfg = cfg.get("simulation", {}).get("reference", {})
    kp = float(ref_cfg.get("kp", 3000.0))
    ki = float(ref_cfg.get("ki", 150.0))
    kd = float(ref_cfg.get("kd", 0.0))
    widest = max(params.values(), key=lambda p: p.u_bound).u_bound

    def reference_factory():
        return PidController(kp=kp, ki=ki, kd=kd, target=v_d, u_min=-widest, u_max=widest)

    mpc_cfg = cfg.get("simulation", {}).get("mpc", {})
    thresholds = list(switch_positions)

    def mode_of_position(pos: float) -> int:
        for i, th in enumerate(thresholds):
            if pos < th:
                return i
        return len(thresholds)

    def mpc_factory():
        return AccMpcController(
            mode_dynamics=dynamics,
            mode_of_position=mode_of_position,
            acc_params=params,
            v_desired=v_d,
            t_headway=t_h,
            horizon_steps=int(mpc_cfg.get("horizon_steps", 70)),
            mpc_dt=1.0 / float(mpc_cfg.get("rate", 10.0)),
            penalty=float(mpc_cfg.get("penalty", 200.0)),
            margin_buffer=float(mpc_cfg.get("margin_buffer", 2.0)),
            iterations=int(mpc_cfg.get("iterations", 40)),
            control_rate=float(mpc_cfg.get("rate", 10.0)),
        )

    from .sim import acc_cost

    return Scenario(
        kind="acc",
        system=system,
        barriers=barriers,
        constraint_fields=constraint_fields,
        domains=domains,
        training=training,
        oracle_grids=oracle_grids,
        oracle_gamma=float(_get(o, "gamma", "oracle", training.gamma)),
        oracle_horizon=float(_get(o, "horizon", "oracle", training.horizon)),
        oracle_slices=int(_get(o, "slices", "oracle", 11)),
        oracle_margin=float(_get(o, "barrier_margin", "oracle", 0.0)),
        sim=sim,
        state_names=("position", "velocity", "headway"),
        control_names=("wheel_force",),
        reference_factory=reference_factory,
        mpc_factory=mpc_factory,
        cost_fn=lambda traj: acc_cost(traj, v_d, t_h),
        extras={
            "params": params,
            "v_desired": v_d,
            "t_headway": t_h,
            "switch_positions": thresholds,
            "domain_lo": lo,
            "domain_hi": hi,
            "reduced": {
                "dynamics": {i: acc_reduced_dynamics(params[i]) for i in params},
                "barriers": {
                    i: acc_braking_barrier(params[i], alpha_rate=alpha, reduced=True)
                    for i in params
                },
                "constraint": acc_constraint_field(t_h, reduced=True),
            },
        },
    )


# ---------------------------------------------------------------------------
# Ring-track racing scenario
# ---------------------------------------------------------------------------

def _build_racing(cfg: Mapping) -> Scenario:
    r = cfg.get("racing", {})
    path = "racing"
    r_in = float(_get(r, "inner_radius", path, 13.0))
    r_out = float(_get(r, "outer_radius", path, 21.0))
    if r_in <= 0 or r_out <= r_in:
        raise ConfigError(f"'{path}': need 0 < inner_radius < outer_radius")
    r_mid = 0.5 * (r_in + r_out)

    zone_rows = _get(r, "zones", path, [
        {"label": "grip_high", "mu": 1.04, "eta": 500.0, "speed": 5.0},
        {"label": "grip_mid", "mu": 0.6, "eta": 50.0, "speed": 4.0},
        {"label": "grip_low", "mu": 0.12, "eta": 0.01, "speed": 2.5},
    ])
    n_zones = len(zone_rows)
    if n_zones < 2:
        raise ConfigError(f"'{path}.zones' needs at least two zones")
    boundaries = [2 * math.pi * (k + 1) / n_zones for k in range(n_zones)]

    base_params = SingleTrackParams()
    brake_fraction = float(_get(r, "brake_fraction", path, 0.5))
    speeds = []
    zone_params: dict[int, SingleTrackParams] = {}
    modes = []
    dynamics = {}
    barriers = {}
    constraint = ring_wall_constraint(r_in, r_out)
    for k, row in enumerate(zone_rows):
        mu = float(_get(row, "mu", f"{path}.zones[{k}]", required=True))
        eta = float(_get(row, "eta", f"{path}.zones[{k}]", required=True))
        speeds.append(float(_get(row, "speed", f"{path}.zones[{k}]", 3.0)))
        p = SingleTrackParams(mu=mu, eta=eta)
        zone_params[k] = p
        modes.append(Mode(index=k, label=str(row.get("label", f"zone{k}"))))
        dynamics[k] = single_track_dynamics(p)
        barriers[k] = ring_wall_barrier(
            r_in, r_out, mu=mu, eta=eta, grav=p.grav, brake_fraction=brake_fraction
        )

    def boundary_level(theta_b: float):
        cos_b, sin_b = math.cos(theta_b), math.sin(theta_b)

        def level(X: np.ndarray) -> np.ndarray:
            X = np.asarray(X, dtype=float)
            # sin(theta - theta_b) scaled by radius: smooth, rising at the
            # boundary ray, falling at the antipodal ray (ignored).
            return X[..., 1] * cos_b - X[..., 0] * sin_b

        return level

    guards = {}
    for k in range(n_zones):
        guards[(k, (k + 1) % n_zones)] = GuardCondition(
            level=boundary_level(boundaries[k]), direction="rising"
        )

    start_angle = float(_get(r, "start_angle", path, 0.05))
    v_start = float(_get(r, "start_speed", path, speeds[0]))
    x0 = np.array([
        r_mid * math.cos(start_angle),
        r_mid * math.sin(start_angle),
        0.0,
        v_start,
        start_angle + math.pi / 2.0,
        v_start / r_mid,
        0.0,
    ])
    base = HybridSystem(
        modes=tuple(modes), dynamics=dynamics, guards=guards, initial=(0, x0)
    )
    task = [int(q) for q in _get(r, "task", path, list(range(n_zones)) + [0])]
    system, graph = unfold_system(base, task)

    v_hi = max(speeds) + 2.0
    lo = np.array([-r_out - 1, -r_out - 1, base_params.steer_min, 0.0, -math.pi, -3.0, -0.3])
    hi = np.array([r_out + 1, r_out + 1, base_params.steer_max, v_hi, math.pi, 3.0, 0.3])

    def annulus_sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        rad = rng.uniform(r_in - 0.5, r_out + 0.5, size=count)
        ang = rng.uniform(-math.pi, math.pi, size=count)
        out = np.empty((count, 7))
        out[:, 0] = rad * np.cos(ang)
        out[:, 1] = rad * np.sin(ang)
        out[:, 2] = rng.uniform(lo[2], hi[2], size=count)
        out[:, 3] = rng.uniform(0.3, v_hi, size=count)
        heading = ang + math.pi / 2.0 + rng.uniform(-0.8, 0.8, size=count)
        out[:, 4] = np.mod(heading + math.pi, 2 * math.pi) - math.pi
        out[:, 5] = rng.uniform(-2.0, 2.0, size=count)
        out[:, 6] = rng.uniform(-0.25, 0.25, size=count)
        return out

    domains = {}
    for v in system.modes:
        out_edges = system.outgoing(v.index)
        guard_level = out_edges[0][1].level if out_edges else None
        domains[v.index] = SamplingDomain(
            lo=lo, hi=hi, guard_level=guard_level,
            slab_halfwidth=0.15 * r_mid, sampler=annulus_sampler,
        )

    waypoint_count = int(_get(r, "waypoints", path, 72))
    angles = np.linspace(0, 2 * math.pi, waypoint_count, endpoint=False)
    waypoints = np.stack([r_mid * np.cos(angles), r_mid * np.sin(angles)], axis=1)
    wp_speeds = np.empty(waypoint_count)
    for i, ang in enumerate(angles):
        zone = int(np.searchsorted(boundaries, ang, side="right")) % n_zones
        wp_speeds[i] = speeds[zone]

    lookahead = float(_get(r, "lookahead", path, 2.5))

    def reference_factory():
        return PurePursuitController(
            waypoints=waypoints,
            speed_targets=wp_speeds,
            lookahead=lookahead,
            wheelbase=base_params.lwb,
            k_steer=float(_get(r, "k_steer", path, 8.0)),
            k_speed=float(_get(r, "k_speed", path, 4.0)),
            u_box=dynamics[0].control_box,
        )

    training = _training_from(cfg)
    sim = _sim_from(cfg)

    def racing_cost(traj):
        # Task completion time: the moment the final unfolded copy is entered
        # (one full lap); incomplete laps cost the whole horizon.
        switches = traj.switch_times
        return switches[-1] if len(switches) == len(task) - 1 else sim.horizon

    return Scenario(
        kind="racing_ring",
        system=system,
        barriers={v.index: barriers[graph.origin[v.index][0]] for v in system.modes},
        constraint_fields={v.index: constraint.value for v in system.modes},
        domains=domains,
        training=training,
        oracle_grids={},
        oracle_gamma=training.gamma,
        oracle_horizon=training.horizon,
        oracle_slices=5,
        sim=sim,
        state_names=("x", "y", "steer", "speed", "yaw", "yaw_rate", "slip"),
        control_names=("steer_rate", "accel"),
        reference_factory=reference_factory,
        mpc_factory=None,
        cost_fn=racing_cost,
        extras={
            "graph": graph,
            "base_system": base,
            "zone_params": zone_params,
            "angle_indices": (4,),
            "waypoints": waypoints,
            "wall_constraint": constraint,
        },
    )


# ---------------------------------------------------------------------------
# Double-integrator oracle benchmark
# ---------------------------------------------------------------------------

def _build_double_integrator(cfg: Mapping) -> Scenario:
    d = cfg.get("double_integrator", {})
    path = "double_integrator"
    accel = float(_get(d, "accel_bound", path, 1.0))
    p_max = float(_get(d, "position_max", path, 10.0))
    dyn = double_integrator_dynamics(accel)

    def level(X: np.ndarray) -> np.ndarray:
        return p_max - np.asarray(X, dtype=float)[..., 0]

    def level_grad(X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        g = np.zeros_like(X)
        g[..., 0] = -1.0
        return g

    barrier = BarrierFunction(value=level, gradient=level_grad, name="position_cap")
    system = HybridSystem(
        modes=(Mode(0, "only"),),
        dynamics={0: dyn},
        guards={},
        initial=(0, np.array([0.0, 0.0])),
    )
    o = cfg.get("oracle", {})
    grid = _grid_from(
        _get(o, "grid", "oracle",
             {"mins": [-2.0, -4.0], "maxs": [12.0, 6.0], "counts": [141, 101]}),
        "oracle.grid",
    )
    training = _training_from(cfg)
    return Scenario(
        kind="double_integrator",
        system=system,
        barriers={0: barrier},
        constraint_fields={0: level},
        domains={0: SamplingDomain(lo=grid.mins, hi=grid.maxs)},
        training=training,
        oracle_grids={0: grid},
        oracle_gamma=float(_get(o, "gamma", "oracle", 0.0)),
        oracle_horizon=float(_get(o, "horizon", "oracle", 30.0)),
        oracle_slices=int(_get(o, "slices", "oracle", 2)),
        sim=_sim_from(cfg),
        state_names=("position", "velocity"),
        control_names=("accel",),
        reference_factory=lambda: ConstantController(np.zeros(1)),
        cost_fn=None,
        extras={"accel_bound": accel, "position_max": p_max},
    )


_BUILDERS = {
    "acc": _build_acc,
    "racing_ring": _build_racing,
    "double_integrator": _build_double_integrator,
}


def build_scenario(cfg: Mapping) -> Scenario:
    if not isinstance(cfg, Mapping):
        raise ConfigError("config root must be a mapping")
    kind = cfg.get("scenario", {}).get("kind") if isinstance(cfg.get("scenario"), Mapping) \
        else cfg.get("scenario")
    if kind is None:
        raise ConfigError("missing config key 'scenario.kind'")
    builder = _BUILDERS.get(str(kind))
    if builder is None:
        raise ConfigError(
            f"'scenario.kind' must be one of {sorted(_BUILDERS)} (got '{kind}')"
        )
    return builder(cfg)
