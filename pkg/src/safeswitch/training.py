"""Refinement training: fit a value network to the safety PDE of one mode.

The training target is the barrier-value function of the mode's dynamics
under a constraint level that has been tightened by the unsafe switching
sets of its outgoing transitions.  Training is self-supervised: a boundary
term anchors B(x, 0) to the constraint level, and a residual term drives
the interior toward the variational inequality.  Three stages: boundary
fit, a time curriculum that grows the trained window from 0 to the full
horizon, and a low-learning-rate polish over the whole window.

``refine_all`` walks the transition edges leaf-to-root and replaces each
non-leaf mode's barrier with its trained network; ``refine_all_grid`` is
the grid-solver twin used as the small-scale reference.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .barriers import BarrierFunction, CbvfBarrier, unsafe_switching_level
from .dynamics import ControlAffineDynamics
from .hybrid import HybridSystem
from .network import CbvfNetwork, Normalization, ParamGrads, init_weights, loss_param_grad
from .oracle import Grid, GridBarrier, solve_cbvf

log = logging.getLogger(__name__)

__all__ = [
    "TrainingConfig",
    "SamplingDomain",
    "TrainingReport",
    "hamiltonian",
    "loss_terms",
    "boundary_target",
    "sample_dataset",
    "train",
    "refined_level_for_mode",
    "refine_all",
    "refine_all_grid",
    "named_rng",
]

BOUNDARY_TIME_TOL = 1e-9


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible stream for a named training component."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs of the refinement training.

    ``stage_epochs`` counts optimizer steps per stage; every step consumes
    one minibatch (states cycle through the dataset, times are redrawn
    inside the curriculum window each step).  ``level_clip`` saturates the
    constraint level to (lo, hi); both bounds keep their sign so the zero
    level set -- the only thing safety depends on -- is untouched, while the
    value range the network must represent stays bounded.
    """

    gamma: float = 0.5
    residual_weight: float = 1.0      # tradeoff between boundary and residual terms
    horizon: float = 10.0
    dataset_size: int = 20000
    oversample_fraction: float = 0.38
    batch_size: int = 2048
    stage_epochs: tuple[int, int, int] = (500, 3000, 500)
    lr_main: float = 2e-4
    lr_final: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden_layers: tuple[int, ...] = (64, 64, 64)
    omega0: float = 30.0
    boundary_pin_fraction: float = 0.1
    guard_slab_fraction: float = 0.1  # slab half-width as a fraction of level extent
    warmstart: bool = True
    level_clip: tuple[float, float] | None = (-25.0, 25.0)
    value_scale: float | None = None  # None: calibrated from the sampled level
    barrier_margin: float = 0.0       # zero-level shift when used as a controller barrier

    def __post_init__(self):
        if self.gamma < 0 or self.residual_weight <= 0 or self.horizon <= 0:
            raise ValueError("gamma >= 0, residual_weight > 0, horizon > 0 required")
        if self.dataset_size <= 0 or not (0 <= self.oversample_fraction < 1):
            raise ValueError("dataset_size > 0 and 0 <= oversample_fraction < 1 required")
        if self.level_clip is not None:
            lo, hi = self.level_clip
            if not (lo < 0 < hi):
                raise ValueError("level_clip must straddle zero to preserve the safe set")

    def fingerprint(self) -> str:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True, default=str).encode()
        ).hexdigest()[:16]


@dataclass(frozen=True)
class SamplingDomain:
    """State box to sample, with an optional near-guard oversampling slab.

    ``sampler`` overrides the uniform box draw (e.g. to sample an annulus);
    the box still defines the network's input normalization.
    """

    lo: np.ndarray
    hi: np.ndarray
    guard_level: Callable[[np.ndarray], np.ndarray] | None = None
    slab_halfwidth: float | None = None   # None: fraction of the level extent
    sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("domain box is degenerate")

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.sampler is not None:
            return np.asarray(self.sampler(rng, count), dtype=float)
        return rng.uniform(self.lo, self.hi, size=(count, self.lo.shape[0]))


def hamiltonian(
    value: np.ndarray,
    grad_x: np.ndarray,
    dyn: ControlAffineDynamics,
    x: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Closed-form control maximization of <grad B, f + g u> + gamma B.

    For a box-constrained affine input the maximum decouples per channel
    and is attained at a box vertex:
    Ham = grad.f + sum_j max(u_min_j q_j, u_max_j q_j) + gamma B with
    q = grad.g.
    """
    x = np.asarray(x, dtype=float)
    f = dyn.drift(x)
    g = dyn.input_matrix(x)
    q = np.einsum("...n,...nm->...m", grad_x, g)
    vertex = np.sum(np.maximum(dyn.u_min * q, dyn.u_max * q), axis=-1)
    return np.sum(grad_x * f, axis=-1) + vertex + gamma * np.asarray(value)


def boundary_target(
    x: np.ndarray,
    ell_unsafe: Callable[[np.ndarray], np.ndarray],
    h_or_ell: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Pointwise boundary value min(ell_unsafe, h): pass the mode's local
    barrier for a warmstarted fit, or the raw constraint level otherwise."""
    x = np.asarray(x, dtype=float)
    return np.minimum(ell_unsafe(x), h_or_ell(x))


def loss_terms(
    net: CbvfNetwork,
    x: np.ndarray,
    t: np.ndarray,
    lnew: Callable[[np.ndarray], np.ndarray],
    dyn: ControlAffineDynamics,
    gamma: float,
):
    """Per-sample boundary and residual magnitudes (h1, h2).

    h1 = |B(x,0) - lnew(x)| on samples with t = 0 (within tolerance), else 0;
    h2 = |min(-dB/dt + Ham, lnew - B)|, the variational-inequality residual.
    """
    from .network import forward_with_input_grads

    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    bundle = forward_with_input_grads(net, x, t)
    ell = np.asarray(lnew(x), dtype=float)
    boundary_mask = np.abs(t) <= BOUNDARY_TIME_TOL
    h1 = np.abs(bundle.value - ell) * boundary_mask
    ham = hamiltonian(bundle.value, bundle.grad_x, dyn, x, gamma)
    residual = np.minimum(-bundle.grad_t + ham, ell - bundle.value)
    h2 = np.abs(residual)
    return h1, h2


def sample_dataset(
    cfg: TrainingConfig,
    domain: SamplingDomain,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw the training states and initial times.

    (1 - oversample_fraction) of the states are uniform over the box; the
    rest are uniform over the slab where the guard level is within the slab
    half-width, drawn by rejection.  Times are uniform over [0, horizon]
    (the trainer redraws them every epoch inside the curriculum window).
    """
    if rng is None:
        rng = named_rng(cfg.seed, "dataset")
    n = domain.lo.shape[0]
    m_total = cfg.dataset_size
    m_near = int(round(cfg.oversample_fraction * m_total))
    if domain.guard_level is None:
        m_near = 0
    m_far = m_total - m_near
    states = domain.draw(rng, m_far)

    if m_near > 0:
        probe = domain.draw(rng, 4096)
        levels = np.asarray(domain.guard_level(probe))
        extent = float(np.max(levels) - np.min(levels))
        half = (
            domain.slab_halfwidth
            if domain.slab_halfwidth is not None
            else cfg.guard_slab_fraction * extent
        )
        near = np.empty((0, n))
        attempts = 0
        while near.shape[0] < m_near:
            cand = domain.draw(rng, 4 * m_near)
            keep = np.abs(np.asarray(domain.guard_level(cand))) <= half
            near = np.concatenate([near, cand[keep]], axis=0)
            attempts += 1
            if attempts > 200:
                raise RuntimeError("near-guard slab has negligible volume in the domain")
        states = np.concatenate([states, near[:m_near]], axis=0)
    times = rng.uniform(0.0, cfg.horizon, size=m_total)
    return states, times


@dataclass
class EpochStats:
    epoch: int
    stage: int
    h1_mean: float
    h2_mean: float
    lr: float
    time_window: float


@dataclass
class TrainingReport:
    """Per-epoch curves plus the reproducibility fingerprint of the run."""

    epochs: list[EpochStats] = field(default_factory=list)
    wall_time: float = 0.0
    fingerprint: str = ""
    seed: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,stage,h1_mean,h2_mean,lr,time_window\n")
            for row in self.epochs:
                fh.write(
                    f"{row.epoch},{row.stage},{row.h1_mean:.8e},"
                    f"{row.h2_mean:.8e},{row.lr:.3e},{row.time_window:.6f}\n"
                )


class _Adam:
    """First-order adaptive-moment optimizer (bias-corrected)."""

    def __init__(self, params: Sequence[np.ndarray], beta1: float, beta2: float, eps: float):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _make_loss_fn(
    ell: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    u_min: np.ndarray,
    u_max: np.ndarray,
    boundary_mask: np.ndarray,
    gamma: float,
    lam: float,
    boundary_only: bool,
):
    """Batch loss mean(h1) + lam * mean(h2) with its exact output partials.

    The residual's min picks the left branch at exact ties, and |.| has
    subgradient 0 at 0; both choices are fixed so gradients are
    deterministic.
    """

    def loss_fn(value, grad_x, grad_t):
        B = value.shape[0]
        r1 = (value - ell) * boundary_mask
        h1 = np.abs(r1)
        d_value = np.sign(r1) * boundary_mask / B
        if boundary_only:
            loss = float(np.mean(h1))
            return loss, d_value, np.zeros_like(grad_x), np.zeros_like(grad_t)

        q = np.einsum("bn,bnm->bm", grad_x, g)
        upper = np.maximum(u_min * q, u_max * q)
        ham = np.sum(grad_x * f, axis=-1) + np.sum(upper, axis=-1) + gamma * value
        inner = -grad_t + ham
        obstacle = ell - value
        take_inner = inner <= obstacle
        residual = np.where(take_inner, inner, obstacle)
        h2 = np.abs(residual)
        s2 = np.sign(residual) * (lam / B)

        u_star = np.where(u_max * q >= u_min * q, u_max, u_min)
        dham_dgx = f + np.einsum("bm,bnm->bn", u_star, g)
        d_value = d_value + s2 * np.where(take_inner, gamma, -1.0)
        d_grad_x = (s2 * take_inner)[:, None] * dham_dgx
        d_grad_t = -s2 * take_inner
        loss = float(np.mean(h1) + lam * np.mean(h2))
        return loss, d_value, d_grad_x, d_grad_t

    return loss_fn


def _auto_normalization(
    domain: SamplingDomain, cfg: TrainingConfig, ell_samples: np.ndarray
) -> Normalization:
    scale = cfg.value_scale
    if scale is None:
        # The discounted value dips below the level floor by up to
        # exp(gamma * horizon); split the difference geometrically so both
        # signs stay in a representable range for the network head.
        base = float(np.max(np.abs(ell_samples)))
        amp = np.exp(0.5 * cfg.gamma * cfg.horizon)
        scale = max(base * amp, 1e-6)
    return Normalization.from_box(domain.lo, domain.hi, cfg.horizon, out_scale=scale)


def train(
    net: CbvfNetwork | None,
    lnew: Callable[[np.ndarray], np.ndarray],
    dyn: ControlAffineDynamics,
    cfg: TrainingConfig,
    domain: SamplingDomain,
) -> tuple[CbvfNetwork, TrainingReport]:
    """Three-stage fit of the value network to the mode's safety PDE.

    Stage 1 regresses the boundary condition with every sample pinned to
    t = 0.  Stage 2 trains the full loss while the sampled time window
    grows linearly from 0 to the horizon; a fixed fraction of each batch
    stays pinned to t = 0 so the boundary anchor never vanishes.  Stage 3
    repeats the full-window training at the reduced learning rate.
    Identical config and seed reproduce identical weights.
    """
    t_start = time.perf_counter()
    states, _ = sample_dataset(cfg, domain)
    ell_all = np.asarray(lnew(states), dtype=float)
    if not np.all(np.isfinite(ell_all)):
        bad = int(np.flatnonzero(~np.isfinite(ell_all))[0])
        raise ValueError(f"constraint level not finite at sample {states[bad]}")

    if net is None:
        norm = _auto_normalization(domain, cfg, ell_all)
        sizes = (dyn.state_dim + 1, *cfg.hidden_layers, 1)
        net = init_weights(sizes, cfg.omega0, seed=int(named_rng(cfg.seed, "init").integers(2**31)),
                           normalization=norm)

    f_all = dyn.drift(states)
    g_all = dyn.input_matrix(states)
    rng_times = named_rng(cfg.seed, "times")

    params = net.parameters()
    adam = _Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainingReport(fingerprint=cfg.fingerprint(), seed=cfg.seed)

    e1, e2, e3 = cfg.stage_epochs
    total = e1 + e2 + e3
    M = states.shape[0]
    bs = min(cfg.batch_size, M)
    n_pin = max(1, int(round(cfg.boundary_pin_fraction * bs)))
    cursor = 0

    for epoch in range(total):
        if epoch < e1:
            stage, lr, t_hi = 1, cfg.lr_main, 0.0
        elif epoch < e1 + e2:
            stage, lr = 2, cfg.lr_main
            t_hi = cfg.horizon * (epoch - e1 + 1) / max(e2, 1)
        else:
            stage, lr, t_hi = 3, cfg.lr_final, cfg.horizon

        idx = (cursor + np.arange(bs)) % M
        cursor = (cursor + bs) % M
        xb = states[idx]
        if stage == 1:
            tb = np.zeros(bs)
        else:
            tb = rng_times.uniform(0.0, t_hi, size=bs)
            tb[:n_pin] = 0.0
        boundary_mask = (np.abs(tb) <= BOUNDARY_TIME_TOL).astype(float)

        loss_fn = _make_loss_fn(
            ell_all[idx],
            f_all[idx],
            g_all[idx],
            dyn.u_min,
            dyn.u_max,
            boundary_mask,
            cfg.gamma,
            cfg.residual_weight,
            boundary_only=(stage == 1),
        )
        loss, grads = loss_param_grad(net, xb, tb, loss_fn)
        if not np.isfinite(loss):
            h1, h2 = loss_terms(net, xb, tb, lambda _x: ell_all[idx], dyn, cfg.gamma)
            bad = int(np.flatnonzero(~np.isfinite(h1 + h2))[0]) if not np.all(
                np.isfinite(h1 + h2)
            ) else 0
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}; offending sample {xb[bad]}, t={tb[bad]}"
            )
        params = adam.step(params, grads.flat(), lr)
        net = net.with_parameters(params)

        h1b, h2b = _report_terms(net, xb, tb, ell_all[idx], f_all[idx], g_all[idx],
                                 dyn, cfg.gamma, boundary_mask)
        report.epochs.append(
            EpochStats(epoch=epoch, stage=stage, h1_mean=h1b, h2_mean=h2b, lr=lr,
                       time_window=t_hi)
        )
    report.wall_time = time.perf_counter() - t_start
    return net, report


def _report_terms(net, xb, tb, ell, f, g, dyn, gamma, boundary_mask):
    """Loss terms of the already-updated network, for the report curves."""
    from .network import forward_with_input_grads

    bundle = forward_with_input_grads(net, xb, tb)
    h1 = float(np.mean(np.abs(bundle.value - ell) * boundary_mask))
    q = np.einsum("bn,bnm->bm", bundle.grad_x, g)
    ham = (
        np.sum(bundle.grad_x * f, axis=-1)
        + np.sum(np.maximum(dyn.u_min * q, dyn.u_max * q), axis=-1)
        + gamma * bundle.value
    )
    resid = np.minimum(-bundle.grad_t + ham, ell - bundle.value)
    return h1, float(np.mean(np.abs(resid)))


# ---------------------------------------------------------------------------
# Refinement over the transition graph
# ---------------------------------------------------------------------------

def _barrier_value_field(barrier) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized x -> h(x) view of a static or time-parameterized barrier.

    Time-parameterized barriers are read at their full training horizon:
    that slice certifies the longest dwell and is the safe set the
    refinement of an upstream mode must respect.
    """
    if isinstance(barrier, BarrierFunction):
        return barrier.value
    if isinstance(barrier, GridBarrier):
        return lambda x: barrier.value(x, barrier.horizon)
    if isinstance(barrier, CbvfBarrier):
        return lambda x: barrier.value(x, barrier.horizon)
    raise TypeError(f"unsupported barrier type {type(barrier)!r}")


def _clip_level(level: Callable, clip: tuple[float, float] | None) -> Callable:
    if clip is None:
        return level
    lo, hi = clip

    def clipped(x: np.ndarray) -> np.ndarray:
        return np.clip(level(x), lo, hi)

    return clipped


def refined_level_for_mode(
    system: HybridSystem,
    q: int,
    barriers: Mapping[int, object],
    warmstart: bool = True,
    constraints: Mapping[int, BarrierFunction] | None = None,
    clip: tuple[float, float] | None = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Constraint level for refining mode q against its outgoing edges.

    min over outgoing edges (q, q') of the edge's unsafe-switching level
    (built from the target mode's *current* barrier), then min with the
    mode's own boundary function: the local barrier when warmstarted, the
    raw constraint otherwise.
    """
    edge_levels = [
        unsafe_switching_level(guard, _barrier_value_field(barriers[dst]))
        for dst, guard in system.outgoing(q)
    ]
    if warmstart or constraints is None:
        own = _barrier_value_field(barriers[q])
    else:
        own = constraints[q].value

    def level(x: np.ndarray) -> np.ndarray:
        out = np.asarray(own(x), dtype=float)
        for lvl in edge_levels:
            out = np.minimum(out, lvl(x))
        return out

    return _clip_level(level, clip)


def refine_all(
    system: HybridSystem,
    order: Sequence[tuple[int, int]],
    barriers: Mapping[int, BarrierFunction],
    cfg: TrainingConfig,
    domains: Mapping[int, SamplingDomain],
    constraints: Mapping[int, BarrierFunction] | None = None,
) -> tuple[dict[int, object], dict[int, TrainingReport]]:
    """Train refined barriers leaf-to-root along the refinement order.

    Each distinct source mode is trained once, against the *current*
    (possibly already refined) barriers of its successor modes; leaf modes
    keep their original barriers.  Returns the refined barrier map and the
    per-mode training reports.
    """
    current: dict[int, object] = dict(barriers)
    reports: dict[int, TrainingReport] = {}
    seen: list[int] = []
    for src, _dst in order:
        if src not in seen:
            seen.append(src)
    for pos, q in enumerate(seen):
        lnew = refined_level_for_mode(
            system, q, current, warmstart=cfg.warmstart,
            constraints=constraints, clip=cfg.level_clip,
        )
        mode_cfg = replace(cfg, seed=cfg.seed + 1000 * pos)
        log.info("refining mode %s (%s)", q, system.label(q))
        net, report = train(None, lnew, system.dynamics[q], mode_cfg, domains[q])
        alpha = getattr(barriers[q], "alpha_rate", 1.0)
        current[q] = CbvfBarrier(
            net, cfg.horizon, alpha_rate=alpha, margin=cfg.barrier_margin,
            name=f"cbvf_{system.label(q)}",
        )
        reports[q] = report
    return current, reports


def refine_all_grid(
    system: HybridSystem,
    order: Sequence[tuple[int, int]],
    barriers: Mapping[int, BarrierFunction],
    grids: Mapping[int, Grid],
    gamma: float,
    horizon: float,
    n_slices: int = 11,
    warmstart: bool = True,
    constraints: Mapping[int, BarrierFunction] | None = None,
    clip: tuple[float, float] | None = None,
    barrier_margin: float = 0.0,
) -> dict[int, object]:
    """Grid-solver counterpart of ``refine_all`` for low-dimensional modes."""
    current: dict[int, object] = dict(barriers)
    seen: list[int] = []
    for src, _dst in order:
        if src not in seen:
            seen.append(src)
    for q in seen:
        lnew = refined_level_for_mode(
            system, q, current, warmstart=warmstart, constraints=constraints, clip=clip
        )
        out_times = np.linspace(0.0, horizon, n_slices)
        vf = solve_cbvf(grids[q], system.dynamics[q], lnew, gamma, horizon,
                        output_times=out_times)
        alpha = getattr(barriers[q], "alpha_rate", 1.0)
        current[q] = GridBarrier(vf, alpha_rate=alpha, margin=barrier_margin,
                                 name=f"grid_{system.label(q)}")
    return current
