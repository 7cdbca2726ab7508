"""Hybrid system descriptions: modes, guards, transition graphs, trajectories.

A hybrid system here is a switched system: several continuous control-affine
modes, guard conditions that trigger discrete transitions, and an identity
reset (the continuous state is preserved across switches).  The transition
structure induces a directed graph; the refinement machinery needs to know
whether that graph is acyclic, how to unfold a cyclic graph along a task
sequence, and in which order edges must be processed so that a mode is
refined only after everything downstream of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dynamics import ControlAffineDynamics

__all__ = [
    "Mode",
    "GuardCondition",
    "HybridSystem",
    "TransitionGraph",
    "TrajectorySegment",
    "HybridTrajectory",
    "validate_system",
    "transition_pairs",
    "is_acyclic",
    "unfold",
    "refinement_order",
    "unfold_system",
]


@dataclass(frozen=True)
class Mode:
    """Discrete operation mode, identified by a unique index with a short label."""

    index: int
    label: str


@dataclass(frozen=True)
class GuardCondition:
    """Sign condition on a continuous level function.

    The guard set is ``{x : level(x) >= 0}`` for a rising guard and
    ``{x : level(x) <= 0}`` for a falling one.  Encoding guards through a
    continuous level function lets the simulator localize crossings by
    bisection on the level value.
    """

    level: Callable[[np.ndarray], np.ndarray]
    direction: str = "rising"  # "rising" | "falling"

    def __post_init__(self):
        if self.direction not in ("rising", "falling"):
            raise ValueError(f"guard direction must be rising or falling, got {self.direction!r}")

    def margin(self, x: np.ndarray) -> np.ndarray:
        """Signed membership margin: >= 0 inside the guard set."""
        lvl = np.asarray(self.level(np.asarray(x, dtype=float)))
        return lvl if self.direction == "rising" else -lvl

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.margin(x) >= -tol


@dataclass(frozen=True)
class HybridSystem:
    """Switched system: modes, per-mode dynamics, and guard-triggered transitions.

    The reset map is the identity by construction (there is no reset field),
    so a trajectory's continuous state is unchanged at every switch.
    """

    modes: tuple[Mode, ...]
    dynamics: Mapping[int, ControlAffineDynamics]
    guards: Mapping[tuple[int, int], GuardCondition]
    initial: tuple[int, np.ndarray]

    def mode(self, index: int) -> Mode:
        for m in self.modes:
            if m.index == index:
                return m
        raise KeyError(f"unknown mode {index}")

    def label(self, index: int) -> str:
        return self.mode(index).label

    def mode_by_label(self, label: str) -> Mode:
        for m in self.modes:
            if m.label == label:
                return m
        raise KeyError(f"unknown mode label {label!r}")

    def outgoing(self, q: int) -> list[tuple[int, GuardCondition]]:
        """Outgoing transitions of mode q, sorted by target index."""
        out = [(dst, g) for (src, dst), g in self.guards.items() if src == q]
        out.sort(key=lambda item: item[0])
        return out


@dataclass(frozen=True)
class TransitionGraph:
    """Directed graph over mode indices; one edge per declared transition pair.

    For unfolded graphs, ``origin`` maps each vertex to its
    ``(original mode index, visit count)`` so dynamics and barriers can be
    shared between copies instead of duplicated.
    """

    vertices: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    origin: tuple[tuple[int, int], ...] | None = None

    def successors(self, q: int) -> list[int]:
        return sorted(dst for src, dst in self.edges if src == q)

    def out_degree(self, q: int) -> int:
        return sum(1 for src, _ in self.edges if src == q)

    def leaves(self) -> list[int]:
        return [q for q in self.vertices if self.out_degree(q) == 0]


@dataclass(frozen=True)
class TrajectorySegment:
    """Continuous evolution within one mode, sampled at the integration step."""

    mode: int
    times: np.ndarray          # (K,)
    states: np.ndarray         # (K, n)
    controls: np.ndarray       # (K, m)
    barrier_values: np.ndarray  # (K,) active barrier value, NaN when no filter runs
    constraint_values: np.ndarray  # (K,) safety constraint value
    fallback_flags: np.ndarray  # (K,) bool, True where the QP fell back
    switch_time: float | None = None  # exit time, None for the final segment


@dataclass
class HybridTrajectory:
    """Executed solution: ordered mode segments with identity resets at switches."""

    segments: list[TrajectorySegment] = field(default_factory=list)
    mean_solve_time: float = 0.0
    switch_count: int = 0

    @property
    def mode_sequence(self) -> list[int]:
        return [seg.mode for seg in self.segments]

    @property
    def switch_times(self) -> list[float]:
        return [seg.switch_time for seg in self.segments if seg.switch_time is not None]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate (times, states, controls, modes) over all segments."""
        times = np.concatenate([seg.times for seg in self.segments])
        states = np.concatenate([seg.states for seg in self.segments])
        controls = np.concatenate([seg.controls for seg in self.segments])
        modes = np.concatenate(
            [np.full(len(seg.times), seg.mode) for seg in self.segments]
        )
        return times, states, controls, modes

    def final_state(self) -> np.ndarray:
        return self.segments[-1].states[-1]


def validate_system(system: HybridSystem) -> list[str]:
    """Check structural invariants; returns one diagnostic per violation.

    An empty list means the system is well formed.  Violations are reported,
    not raised, so a caller can collect everything wrong with a config at
    once.
    """
    diags: list[str] = []
    indices = [m.index for m in system.modes]
    if len(set(indices)) != len(indices):
        diags.append("duplicate mode indices")
    for m in system.modes:
        if not m.label:
            diags.append(f"mode {m.index}: empty label")
        if m.index < 0:
            diags.append(f"mode {m.index}: negative index")
    known = set(indices)
    for (src, dst) in system.guards:
        for q in (src, dst):
            if q not in known:
                diags.append(f"guard ({src},{dst}): unknown mode {q}")
        if src == dst:
            diags.append(f"guard ({src},{dst}): self-loop")
    for q in known:
        if q not in system.dynamics:
            diags.append(f"mode {q}: missing dynamics")
            continue
        dyn = system.dynamics[q]
        if dyn.control_dim == 0 or np.any(dyn.u_max < dyn.u_min):
            diags.append(f"mode {q}: empty control box")
    q0, x0 = system.initial
    if q0 not in known:
        diags.append(f"initial mode {q0} unknown")
    elif q0 in system.dynamics and np.asarray(x0).shape != (system.dynamics[q0].state_dim,):
        diags.append(
            f"initial state shape {np.asarray(x0).shape} does not match "
            f"mode {q0} state dimension {system.dynamics[q0].state_dim}"
        )
    return diags


def transition_pairs(system: HybridSystem) -> TransitionGraph:
    """The directed graph of declared transition pairs."""
    vertices = tuple(sorted(m.index for m in system.modes))
    edges = tuple(sorted(system.guards.keys()))
    return TransitionGraph(vertices=vertices, edges=edges)


def is_acyclic(graph: TransitionGraph) -> bool:
    """True iff the graph has no directed cycle (iterative DFS three-coloring)."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {v: WHITE for v in graph.vertices}
    adj = {v: graph.successors(v) for v in graph.vertices}
    for root in graph.vertices:
        if color[root] != WHITE:
            continue
        stack: list[tuple[int, int]] = [(root, 0)]
        color[root] = GRAY
        while stack:
            v, i = stack.pop()
            if i < len(adj[v]):
                stack.append((v, i + 1))
                w = adj[v][i]
                if color[w] == GRAY:
                    return False
                if color[w] == WHITE:
                    color[w] = GRAY
                    stack.append((w, 0))
            else:
                color[v] = BLACK
    return True


def unfold(graph: TransitionGraph, task: Sequence[int]) -> TransitionGraph:
    """Unfold a (possibly cyclic) graph along a task mode sequence.

    The result is a path graph whose vertices are fresh copies
    ``(mode, visit index)``; consecutive task modes must be edges of the
    input graph.  The output is acyclic by construction.
    """
    if len(task) == 0:
        raise ValueError("task sequence must be non-empty")
    for q in task:
        if q not in graph.vertices:
            raise ValueError(f"task mode {q} is not a vertex of the graph")
    for a, b in zip(task[:-1], task[1:]):
        if (a, b) not in graph.edges:
            raise ValueError(f"task step ({a},{b}) is not an edge of the graph")
    visits: dict[int, int] = {}
    origin: list[tuple[int, int]] = []
    for q in task:
        k = visits.get(q, 0)
        visits[q] = k + 1
        origin.append((q, k))
    n = len(task)
    vertices = tuple(range(n))
    edges = tuple((i, i + 1) for i in range(n - 1))
    return TransitionGraph(vertices=vertices, edges=edges, origin=tuple(origin))


def refinement_order(graph: TransitionGraph) -> list[tuple[int, int]]:
    """Edges ordered so every mode is refined only after all its successors.

    Sources are visited in reverse-topological order (sinks first); each
    source emits its outgoing edges together.  The number of distinct source
    modes equals (mode count - leaf count): leaves have nothing downstream
    and keep their original barriers.
    """
    if not is_acyclic(graph):
        raise ValueError(
            "transition graph is cyclic; unfold it along a task sequence first"
        )
    # Kahn topological sort, deterministic via sorted vertex scan.
    indeg = {v: 0 for v in graph.vertices}
    for _, dst in graph.edges:
        indeg[dst] += 1
    ready = sorted(v for v in graph.vertices if indeg[v] == 0)
    topo: list[int] = []
    while ready:
        v = ready.pop(0)
        topo.append(v)
        for w in graph.successors(v):
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
        ready.sort()
    order: list[tuple[int, int]] = []
    for v in reversed(topo):
        for w in graph.successors(v):
            order.append((v, w))
    return order


def unfold_system(system: HybridSystem, task: Sequence[int]) -> tuple[HybridSystem, TransitionGraph]:
    """Materialize an executable hybrid system from an unfolded task graph.

    Copies share the original mode's dynamics; guards between consecutive
    copies are the original edge guards.  The final copy has no outgoing
    guard, so execution dwells there once the task is finished.
    """
    graph = unfold(transition_pairs(system), task)
    assert graph.origin is not None
    modes = []
    dynamics: dict[int, ControlAffineDynamics] = {}
    for v in graph.vertices:
        q, visit = graph.origin[v]
        modes.append(Mode(index=v, label=f"{system.label(q)}@{visit}"))
        dynamics[v] = system.dynamics[q]
    guards: dict[tuple[int, int], GuardCondition] = {}
    for (a, b) in graph.edges:
        qa, _ = graph.origin[a]
        qb, _ = graph.origin[b]
        guards[(a, b)] = system.guards[(qa, qb)]
    q0, x0 = system.initial
    if graph.origin[0][0] != q0:
        q0 = graph.origin[0][0]
    unfolded = HybridSystem(
        modes=tuple(modes),
        dynamics=dynamics,
        guards=guards,
        initial=(0, np.asarray(x0, dtype=float)),
    )
    return unfolded, graph
