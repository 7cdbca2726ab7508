import numpy as np
import pytest

from safeswitch.dynamics import double_integrator_dynamics
from safeswitch.hybrid import (
    GuardCondition,
    HybridSystem,
    Mode,
    TransitionGraph,
    is_acyclic,
    refinement_order,
    transition_pairs,
    unfold,
    unfold_system,
    validate_system,
)

FIG_TREE = TransitionGraph(vertices=(1, 2, 3, 4), edges=((1, 2), (1, 3), (3, 4)))
FIG_CYCLE = TransitionGraph(vertices=(1, 2, 3), edges=((1, 2), (2, 3), (3, 1)))


def test_validate_well_formed(acc_system):
    assert validate_system(acc_system) == []


def test_validate_unknown_mode(acc_system):
    guards = dict(acc_system.guards)
    guards[(0, 5)] = GuardCondition(level=lambda X: np.asarray(X)[..., 0])
    bad = HybridSystem(
        modes=acc_system.modes,
        dynamics=acc_system.dynamics,
        guards=guards,
        initial=acc_system.initial,
    )
    assert "guard (0,5): unknown mode 5" in validate_system(bad)


def test_validate_empty_control_box():
    dyn = double_integrator_dynamics(1.0)
    bad_dyn = type(dyn)(
        state_dim=2,
        control_dim=1,
        drift=dyn.drift,
        input_matrix=dyn.input_matrix,
        u_min=np.array([1.0]),
        u_max=np.array([-1.0]),
    )
    sys_ = HybridSystem(
        modes=(Mode(0, "a"), Mode(1, "b")),
        dynamics={0: dyn, 1: bad_dyn},
        guards={(0, 1): GuardCondition(level=lambda X: np.asarray(X)[..., 0])},
        initial=(0, np.zeros(2)),
    )
    assert "mode 1: empty control box" in validate_system(sys_)


def test_transition_pairs(acc_system):
    g = transition_pairs(acc_system)
    assert g.vertices == (0, 1, 2)
    assert g.edges == ((0, 1), (1, 2))


def test_transition_pairs_single_mode():
    dyn = double_integrator_dynamics(1.0)
    sys_ = HybridSystem(
        modes=(Mode(0, "only"),), dynamics={0: dyn}, guards={}, initial=(0, np.zeros(2))
    )
    assert transition_pairs(sys_).edges == ()


def test_is_acyclic():
    assert is_acyclic(FIG_TREE)
    assert not is_acyclic(FIG_CYCLE)
    assert is_acyclic(TransitionGraph(vertices=(), edges=()))


def test_unfold_cycle_to_path():
    g = unfold(FIG_CYCLE, [1, 2, 3, 1])
    assert g.vertices == (0, 1, 2, 3)
    assert g.edges == ((0, 1), (1, 2), (2, 3))
    assert g.origin == ((1, 0), (2, 0), (3, 0), (1, 1))
    assert is_acyclic(g)


def test_unfold_single_mode_task():
    g = unfold(FIG_CYCLE, [2])
    assert g.vertices == (0,)
    assert g.edges == ()


def test_unfold_rejects_non_edge():
    with pytest.raises(ValueError, match=r"\(1,3\)"):
        unfold(FIG_CYCLE, [1, 3])


def test_refinement_order_tree():
    order = refinement_order(FIG_TREE)
    assert order.index((3, 4)) < order.index((1, 3))
    assert len(order) == 3
    sources = {src for src, _ in order}
    assert sources == {1, 3}
    assert len(sources) == len(FIG_TREE.vertices) - len(FIG_TREE.leaves())


def test_refinement_order_chain(acc_system):
    order = refinement_order(transition_pairs(acc_system))
    assert order == [(1, 2), (0, 1)]


def test_refinement_order_edgeless():
    assert refinement_order(TransitionGraph(vertices=(0, 1), edges=())) == []


def test_refinement_order_rejects_cycle():
    with pytest.raises(ValueError, match="unfold"):
        refinement_order(FIG_CYCLE)


def test_refinement_order_successors_first():
    # every edge with source q' appears before any edge (q, q')
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        edges = set()
        for a in range(n):
            for b in range(a + 1, n):
                if rng.random() < 0.4:
                    edges.add((a, b))
        g = TransitionGraph(vertices=tuple(range(n)), edges=tuple(sorted(edges)))
        order = refinement_order(g)
        assert len(order) == len(edges)
        for i, (_, dst) in enumerate(order):
            for j, (src2, _) in enumerate(order):
                if src2 == dst:
                    assert j < i


def test_unfold_system_shares_dynamics(acc_system):
    # fold the chain into a cycle (ice back to rock) and unfold along a lap
    guards = dict(acc_system.guards)
    guards[(2, 0)] = GuardCondition(level=lambda X: -np.asarray(X)[..., 0])
    cyclic = HybridSystem(
        modes=acc_system.modes,
        dynamics=acc_system.dynamics,
        guards=guards,
        initial=acc_system.initial,
    )
    unfolded, graph = unfold_system(cyclic, [0, 1, 2, 0])
    assert [m.label for m in unfolded.modes] == ["rock@0", "dry@0", "ice@0", "rock@1"]
    assert unfolded.dynamics[0] is unfolded.dynamics[3]  # shared, not copied
    assert is_acyclic(transition_pairs(unfolded))
