"""Grid-based dynamic-programming oracle for barrier-value functions.

Solves the variational inequality

    min( -dB/dt + Ham(x, grad B),  l(x) - B ) = 0,   B(x, 0) = l(x)

by explicit time marching with a Lax-Friedrichs-dissipated Hamiltonian and
the closed-form box maximization over the control.  The marching operator
is monotone under the CFL bound, which yields the structural guarantees the
tests lean on: B(., 0) = l exactly, B <= l everywhere, B pointwise
non-increasing in t, and nested superlevel sets over time.

The module also scores neural value functions against a solved grid and
houses the avoid-set computation used to certify that excluding the unsafe
switching set and excluding its backward-unavoidable hull produce the same
safe set.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .dynamics import ControlAffineDynamics
from .network import CbvfNetwork, forward

__all__ = [
    "Grid",
    "GridValueFunction",
    "GridDimensionError",
    "CflViolationError",
    "solve_cbvf",
    "viability_kernel",
    "back_unsafe",
    "Score",
    "score_network",
    "GridBarrier",
    "save_value_function",
    "load_value_function",
    "ValueFileError",
]

MAX_GRID_DIM = 4


class GridDimensionError(ValueError):
    pass


class CflViolationError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid: per-axis (min, max, point count)."""

    mins: np.ndarray
    maxs: np.ndarray
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mins", np.asarray(self.mins, dtype=float))
        object.__setattr__(self, "maxs", np.asarray(self.maxs, dtype=float))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.mins) != len(self.counts) or len(self.maxs) != len(self.counts):
            raise ValueError("grid axes inconsistent")
        if any(c < 3 for c in self.counts):
            raise ValueError("need at least 3 points per axis")
        if np.any(self.mins >= self.maxs):
            raise ValueError("axis min must be below max")

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> np.ndarray:
        return (self.maxs - self.mins) / (np.asarray(self.counts) - 1)

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(self.mins[j], self.maxs[j], self.counts[j])
            for j in range(self.ndim)
        ]

    def mesh(self) -> np.ndarray:
        """All grid points as an array of shape counts + (ndim,)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def cell_diameter(self) -> float:
        return float(np.linalg.norm(self.spacing))


@dataclass
class GridValueFunction:
    """Dense value function: one grid-shaped slice per stored time."""

    grid: Grid
    times: np.ndarray           # increasing, starts at 0
    values: np.ndarray          # (len(times),) + grid.counts

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.times),) + self.grid.counts:
            raise ValueError("value array shape does not match grid and times")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be increasing and start at 0")

    def time_index(self, t: float, tol: float = 1e-9) -> int:
        hits = np.flatnonzero(np.abs(self.times - t) <= tol)
        if hits.size == 0:
            raise KeyError(
                f"time {t} not stored; available times: {self.times.tolist()}"
            )
        return int(hits[0])

    def slice_at(self, t: float) -> np.ndarray:
        return self.values[self.time_index(t)]


def _directional_differences(B: np.ndarray, h: float, axis: int):
    """Forward/backward differences with one-sided values at the edges."""
    diff = np.diff(B, axis=axis) / h
    first = np.take(diff, [0], axis=axis)
    last = np.take(diff, [-1], axis=axis)
    d_plus = np.concatenate([diff, last], axis=axis)
    d_minus = np.concatenate([first, diff], axis=axis)
    return d_plus, d_minus


def solve_cbvf(
    grid: Grid,
    dyn: ControlAffineDynamics,
    lnew: Callable[[np.ndarray], np.ndarray],
    gamma: float,
    horizon: float,
    output_times: Sequence[float] | None = None,
    cfl: float = 0.5,
    user_dt: float | None = None,
    stop_tol: float | None = None,
) -> GridValueFunction:
    """March the variational inequality from B(., 0) = lnew up to ``horizon``.

    ``output_times`` selects the stored slices (defaults to [0, horizon]);
    the marcher takes shortened landing steps to hit them exactly.  With
    ``stop_tol`` set, marching stops early once the per-step sup change
    falls below the tolerance, and the reached time replaces the horizon.
    A user-forced ``user_dt`` above the CFL bound is rejected.
    """
    if grid.ndim != dyn.state_dim:
        raise ValueError("grid dimension does not match dynamics")
    if grid.ndim > MAX_GRID_DIM:
        raise GridDimensionError(
            f"grid solver supports at most {MAX_GRID_DIM} state dimensions "
            f"(got {grid.ndim}); for larger systems train a neural value "
            "function instead -- the learned refinement needs no avoid-set "
            "computation and no spatial grid"
        )
    X = grid.mesh()
    F = dyn.drift(X)
    G = dyn.input_matrix(X)
    L = np.asarray(lnew(X), dtype=float)
    if not np.all(np.isfinite(L)):
        raise ValueError("constraint level is not finite on the grid")

    u_abs = np.maximum(np.abs(dyn.u_min), np.abs(dyn.u_max))
    h = grid.spacing
    # Per-axis bound on |dHam/dp_j| = |f_j + (g u*)_j|.
    alpha = np.array(
        [
            float(np.max(np.abs(F[..., j]) + np.abs(G[..., j, :]) @ u_abs))
            for j in range(grid.ndim)
        ]
    )
    denom = float(np.sum(alpha / h))
    dt_max = cfl / denom if denom > 0 else horizon
    if user_dt is not None:
        if user_dt > dt_max * (1 + 1e-12):
            raise CflViolationError(
                f"dt {user_dt:.3g} violates the CFL bound {dt_max:.3g}"
            )
        dt_max = user_dt

    if output_times is None:
        output_times = [0.0, horizon]
    out_times = np.asarray(sorted(set(float(t) for t in output_times)), dtype=float)
    if out_times[0] != 0.0:
        out_times = np.concatenate([[0.0], out_times])
    if out_times[-1] > horizon + 1e-12:
        raise ValueError("output times exceed the horizon")

    B = L.copy()
    slices = [B.copy()]
    recorded = [0.0]
    next_out = 1

    t = 0.0
    converged_at = None
    while t < horizon - 1e-12:
        dt = min(dt_max, horizon - t)
        if next_out < len(out_times):
            dt = min(dt, out_times[next_out] - t)
        ham = gamma * B
        for j in range(grid.ndim):
            d_plus, d_minus = _directional_differences(B, h[j], j)
            p_c = 0.5 * (d_plus + d_minus)
            ham = ham + p_c * F[..., j] + 0.5 * alpha[j] * (d_plus - d_minus)
            q = p_c[..., None] * G[..., j, :]
            ham = ham + np.sum(
                np.maximum(dyn.u_min * q, dyn.u_max * q), axis=-1
            )
        B_new = np.minimum(B + dt * ham, L)
        if not np.all(np.isfinite(B_new)):
            bad = np.argwhere(~np.isfinite(B_new))[0]
            raise RuntimeError(
                f"non-finite value at grid index {tuple(int(i) for i in bad)}, t={t + dt:.4f}"
            )
        step_change = float(np.max(np.abs(B_new - B)))
        B = B_new
        t += dt
        if next_out < len(out_times) and abs(t - out_times[next_out]) <= 1e-12:
            slices.append(B.copy())
            recorded.append(out_times[next_out])
            next_out += 1
        if stop_tol is not None and step_change < stop_tol:
            converged_at = t
            break

    if converged_at is not None and (not recorded or recorded[-1] != converged_at):
        slices.append(B.copy())
        recorded.append(converged_at)
    elif recorded[-1] < horizon - 1e-12:
        slices.append(B.copy())
        recorded.append(t)
    return GridValueFunction(
        grid=grid, times=np.asarray(recorded), values=np.stack(slices, axis=0)
    )


def viability_kernel(vf: GridValueFunction, t: float) -> np.ndarray:
    """Boolean mask of the zero-superlevel set at a stored time."""
    return vf.slice_at(t) >= 0.0


def back_unsafe(
    grid: Grid,
    dyn: ControlAffineDynamics,
    unsafe_mask: np.ndarray,
    horizon: float,
    gamma: float = 0.0,
    stop_tol: float | None = None,
) -> np.ndarray:
    """States from which every control enters ``unsafe_mask`` within the horizon.

    Computed through the complementary avoid problem: solve the value
    function for the constraint 'stay outside the unsafe set' (signed
    distance to it as the level function); where that value is negative,
    no control avoids the set.
    """
    unsafe_mask = np.asarray(unsafe_mask, dtype=bool)
    if unsafe_mask.shape != grid.counts:
        raise ValueError("mask shape does not match grid")
    if not unsafe_mask.any():
        return np.zeros(grid.counts, dtype=bool)
    if unsafe_mask.all():
        return np.ones(grid.counts, dtype=bool)
    spacing = tuple(grid.spacing)
    dist_to_unsafe = ndimage.distance_transform_edt(~unsafe_mask, sampling=spacing)
    dist_inside = ndimage.distance_transform_edt(unsafe_mask, sampling=spacing)
    signed = dist_to_unsafe - dist_inside

    def level(X: np.ndarray) -> np.ndarray:
        # level is sampled exactly on this grid; return the precomputed field
        return signed

    vf = solve_cbvf(grid, dyn, level, gamma, horizon, stop_tol=stop_tol)
    return vf.values[-1] < 0.0


# ---------------------------------------------------------------------------
# Scoring a neural value function against the oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Score:
    """Comparison metrics; a percentage is None when its reference set is empty."""

    mse: float
    unsafe_volume_error: float | None  # % of truly-unsafe states marked safe
    safe_volume_error: float | None    # % of truly-safe states marked unsafe


def score_network(net: CbvfNetwork, vf: GridValueFunction, t: float) -> Score:
    """Mean squared error plus percentage volume misclassification at time t."""
    ref = vf.slice_at(t)
    X = vf.grid.mesh().reshape(-1, vf.grid.ndim)
    pred = forward(net, X, float(t)).reshape(ref.shape)
    mse = float(np.mean((pred - ref) ** 2))
    unsafe = ref < 0
    safe = ~unsafe
    uve = (
        100.0 * float(np.count_nonzero(unsafe & (pred >= 0))) / int(unsafe.sum())
        if unsafe.any()
        else None
    )
    sve = (
        100.0 * float(np.count_nonzero(safe & (pred < 0))) / int(safe.sum())
        if safe.any()
        else None
    )
    return Score(mse=mse, unsafe_volume_error=uve, safe_volume_error=sve)


# ---------------------------------------------------------------------------
# Grid value function as a time-parameterized barrier
# ---------------------------------------------------------------------------

class GridBarrier:
    """Multilinear interpolant of a solved value function, with gradient.

    Acts as a time-parameterized barrier for the switching controller: the
    gradient is the exact gradient of the interpolant within each cell.
    Queries are clamped to the grid box and the stored time range.
    """

    def __init__(
        self,
        vf: GridValueFunction,
        alpha_rate: float = 1.0,
        margin: float = 0.0,
        name: str = "",
    ):
        self.vf = vf
        self.alpha_rate = float(alpha_rate)
        self.margin = float(margin)
        self.name = name
        self.horizon = float(vf.times[-1])

    def _interp(self, values: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
        g = self.vf.grid
        h = g.spacing
        xc = np.clip(x, g.mins, g.maxs)
        pos = (xc - g.mins) / h
        base = np.minimum(pos.astype(int), np.asarray(g.counts) - 2)
        frac = pos - base
        val = 0.0
        grad = np.zeros(g.ndim)
        for corner in itertools.product((0, 1), repeat=g.ndim):
            idx = tuple(base + np.asarray(corner))
            w = np.prod(np.where(np.asarray(corner) == 1, frac, 1.0 - frac))
            v = values[idx]
            val += w * v
            for j in range(g.ndim):
                others = np.prod(
                    [
                        frac[k] if corner[k] == 1 else 1.0 - frac[k]
                        for k in range(g.ndim)
                        if k != j
                    ]
                )
                sign = 1.0 if corner[j] == 1 else -1.0
                grad[j] += sign * others * v / h[j]
        return float(val), grad

    def value_and_gradient(self, x: np.ndarray, t: float) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        times = self.vf.times
        t = float(np.clip(t, times[0], times[-1]))
        k = int(np.searchsorted(times, t, side="right") - 1)
        k = min(k, len(times) - 2) if len(times) > 1 else 0
        v0, g0 = self._interp(self.vf.values[k], x)
        if len(times) == 1 or times[k + 1] == times[k]:
            return v0 - self.margin, g0
        w = (t - times[k]) / (times[k + 1] - times[k])
        v1, g1 = self._interp(self.vf.values[k + 1], x)
        return (1 - w) * v0 + w * v1 - self.margin, (1 - w) * g0 + w * g1

    def value(self, x: np.ndarray, t: float):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.value_and_gradient(x, t)[0]
        flat = x.reshape(-1, x.shape[-1])
        out = np.array([self.value_and_gradient(xi, t)[0] for xi in flat])
        return out.reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# Value-function persistence
# ---------------------------------------------------------------------------

class ValueFileError(RuntimeError):
    pass


_MAGIC = b"CBVFGRID"
_VF_VERSION = 1


def save_value_function(vf: GridValueFunction, path) -> None:
    """Self-describing binary layout: header (dims, axes, times), float64 payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VF_VERSION, vf.grid.ndim))
        for j in range(vf.grid.ndim):
            fh.write(
                struct.pack(
                    "<ddQ", vf.grid.mins[j], vf.grid.maxs[j], vf.grid.counts[j]
                )
            )
        fh.write(struct.pack("<Q", len(vf.times)))
        fh.write(np.ascontiguousarray(vf.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vf.values, dtype="<f8").tobytes())


def load_value_function(path) -> GridValueFunction:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != _MAGIC:
        raise ValueFileError("not a value-function file")
    version, ndim = struct.unpack_from("<II", data, 8)
    if version != _VF_VERSION:
        raise ValueFileError(f"version mismatch: file {version}, supported {_VF_VERSION}")
    off = 16
    mins, maxs, counts = [], [], []
    try:
        for _ in range(ndim):
            lo, hi, cnt = struct.unpack_from("<ddQ", data, off)
            off += 24
            mins.append(lo)
            maxs.append(hi)
            counts.append(int(cnt))
        (ntimes,) = struct.unpack_from("<Q", data, off)
        off += 8
        times = np.frombuffer(data, dtype="<f8", count=ntimes, offset=off)
        off += 8 * ntimes
        n_vals = ntimes * int(np.prod(counts))
        values = np.frombuffer(data, dtype="<f8", count=n_vals, offset=off)
    except (struct.error, ValueError) as exc:
        raise ValueFileError(f"truncated file: {exc}") from exc
    grid = Grid(mins=np.array(mins), maxs=np.array(maxs), counts=tuple(counts))
    return GridValueFunction(
        grid=grid,
        times=times.copy(),
        values=values.reshape((ntimes,) + grid.counts).copy(),
    )
