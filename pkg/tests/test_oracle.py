import numpy as np
import pytest

from safeswitch.dynamics import AccModeParams, acc_reduced_dynamics, double_integrator_dynamics
from safeswitch.barriers import acc_braking_barrier
from safeswitch.network import Normalization, init_weights, CbvfNetwork
from safeswitch.oracle import (
    CflViolationError,
    Grid,
    GridBarrier,
    GridDimensionError,
    GridValueFunction,
    ValueFileError,
    back_unsafe,
    load_value_function,
    save_value_function,
    score_network,
    solve_cbvf,
    viability_kernel,
)


def di_setup(counts=(141, 101), accel=1.0, p_max=10.0):
    dyn = double_integrator_dynamics(accel)
    grid = Grid(mins=[-2.0, -4.0], maxs=[12.0, 6.0], counts=counts)
    lnew = lambda X: p_max - np.asarray(X, dtype=float)[..., 0]
    return dyn, grid, lnew


def assert_vi_properties(vf: GridValueFunction, lnew):
    """The structural guarantees every solve must satisfy."""
    L = np.asarray(lnew(vf.grid.mesh()), dtype=float)
    np.testing.assert_array_equal(vf.values[0], L)
    assert np.all(vf.values <= L + 1e-12)
    for k in range(len(vf.times) - 1):
        assert np.all(vf.values[k + 1] <= vf.values[k] + 1e-12)
    masks = [vf.values[k] >= 0 for k in range(len(vf.times))]
    for early, late in zip(masks, masks[1:]):
        assert not np.any(late & ~early)  # kernels nest over time


class TestSolve:
    def test_boundary_slice_exact(self):
        dyn, grid, lnew = di_setup(counts=(41, 31))
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 1.0)
        np.testing.assert_array_equal(vf.values[0], lnew(grid.mesh()))

    def test_constant_positive_level(self):
        dyn, grid, _ = di_setup(counts=(41, 31))
        lnew = lambda X: np.ones(np.asarray(X).shape[:-1])
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 2.0)
        assert np.all(vf.values >= 0.0)
        assert np.all(vf.values <= 1.0)

    def test_structural_properties(self):
        dyn, grid, lnew = di_setup(counts=(71, 51))
        vf = solve_cbvf(
            grid, dyn, lnew, 0.5, 4.0, output_times=np.linspace(0, 4.0, 9)
        )
        assert_vi_properties(vf, lnew)

    def test_double_integrator_analytic_kernel(self):
        accel, p_max = 1.0, 10.0
        dyn, grid, lnew = di_setup(accel=accel, p_max=p_max)
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 60.0, stop_tol=1e-4)
        mask = viability_kernel(vf, vf.times[-1])
        X = grid.mesh()
        p, v = X[..., 0], X[..., 1]
        analytic = (p <= p_max) & (
            v <= np.sqrt(np.maximum(2 * accel * (p_max - p), 0.0))
        )
        mismatch = mask != analytic
        # mismatches confined to two cells around the parabola / position cap
        vb = np.sqrt(np.maximum(2 * accel * (p_max - p), 0.0))
        near = (np.abs(v - vb) <= 2 * grid.spacing[1] + 1e-12) | (
            np.abs(p - p_max) <= 2 * grid.spacing[0] + 1e-12
        )
        assert np.all(~mismatch | near)

    def test_grid_refinement_consistency(self):
        # doubling the resolution moves the kernel boundary by less than the
        # coarse cell size
        accel, p_max = 1.0, 10.0
        masks = {}
        for counts in ((71, 51), (141, 101)):
            dyn, grid, lnew = di_setup(counts=counts, accel=accel, p_max=p_max)
            vf = solve_cbvf(grid, dyn, lnew, 0.0, 40.0, stop_tol=1e-4)
            masks[counts] = (viability_kernel(vf, vf.times[-1]), grid)
        coarse_mask, coarse = masks[(71, 51)]
        fine_mask, fine = masks[(141, 101)]
        fine_on_coarse = fine_mask[::2, ::2]
        mismatch = coarse_mask != fine_on_coarse
        X = coarse.mesh()
        vb = np.sqrt(np.maximum(2 * accel * (p_max - X[..., 0]), 0.0))
        near = (np.abs(X[..., 1] - vb) <= coarse.spacing[1] + 1e-12) | (
            np.abs(X[..., 0] - p_max) <= coarse.spacing[0] + 1e-12
        )
        assert np.all(~mismatch | near)

    def test_discount_shrinks_or_preserves_kernel(self):
        dyn, grid, lnew = di_setup(counts=(71, 51))
        vf0 = solve_cbvf(grid, dyn, lnew, 0.1, 6.0)
        vf1 = solve_cbvf(grid, dyn, lnew, 0.8, 6.0)
        k0 = viability_kernel(vf0, 6.0)
        k1 = viability_kernel(vf1, 6.0)
        grew = k1 & ~k0
        # discounting may not grow the kernel beyond boundary roundoff
        assert np.count_nonzero(grew) == 0

    def test_cfl_rejection(self):
        dyn, grid, lnew = di_setup(counts=(41, 31))
        with pytest.raises(CflViolationError):
            solve_cbvf(grid, dyn, lnew, 0.0, 1.0, user_dt=1.0)

    def test_dimension_guard(self):
        from safeswitch.dynamics import ControlAffineDynamics

        dyn = ControlAffineDynamics(
            state_dim=5,
            control_dim=1,
            drift=lambda X: np.zeros_like(X),
            input_matrix=lambda X: np.zeros(np.asarray(X).shape[:-1] + (5, 1)),
            u_min=np.array([-1.0]),
            u_max=np.array([1.0]),
        )
        grid = Grid(mins=np.zeros(5), maxs=np.ones(5), counts=(3,) * 5)
        with pytest.raises(GridDimensionError, match="neural"):
            solve_cbvf(grid, dyn, lambda X: np.ones(np.asarray(X).shape[:-1]), 0, 1.0)

    def test_unknown_time_rejected(self):
        dyn, grid, lnew = di_setup(counts=(41, 31))
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 1.0)
        with pytest.raises(KeyError, match="available times"):
            viability_kernel(vf, 0.123)


class TestBackUnsafe:
    def test_empty_mask(self):
        dyn, grid, _ = di_setup(counts=(41, 31))
        mask = np.zeros(grid.counts, dtype=bool)
        assert not back_unsafe(grid, dyn, mask, 2.0).any()

    def test_full_mask(self):
        dyn, grid, _ = di_setup(counts=(41, 31))
        mask = np.ones(grid.counts, dtype=bool)
        assert back_unsafe(grid, dyn, mask, 2.0).all()

    def test_contains_the_unsafe_set(self):
        dyn, grid, _ = di_setup(counts=(71, 51))
        X = grid.mesh()
        mask = X[..., 0] >= 10.0
        hull = back_unsafe(grid, dyn, mask, 20.0, stop_tol=1e-4)
        interior = X[..., 0] >= 10.5  # interior of the unsafe set
        assert np.all(hull[interior])
        # states moving fast toward the cap with no room to brake are doomed
        doomed = (X[..., 1] > np.sqrt(np.maximum(2 * (10.0 - X[..., 0]), 0)) + 1.0) & (
            X[..., 0] > 4
        )
        assert hull[doomed].mean() > 0.95


class TestScore:
    def _interp_net(self, vf):
        """Tiny network replaced by exact interpolation is overkill; instead
        check the scorer with hand-made fields."""

    def test_perfect_and_shifted(self):
        p = AccModeParams(f1=0.3, f2=15.0, f3=0.75, c=0.3)
        dyn = acc_reduced_dynamics(p)
        grid = Grid(mins=[0.0, 0.0], maxs=[36.0, 150.0], counts=(41, 41))
        lnew = acc_braking_barrier(p, reduced=True).value
        vf = solve_cbvf(grid, dyn, lnew, 0.5, 2.0)

        class FieldNet:
            # minimal stand-in with the forward() contract used by the scorer
            def __init__(self, offset):
                self.offset = offset
                self.vf = vf

        # exercise score_network through a real (constant) network instead:
        net = init_weights([2 + 1, 8, 1], seed=0,
                           normalization=Normalization.from_box(grid.mins, grid.maxs, 2.0))
        zero_w = tuple(np.zeros_like(w) for w in net.weights)
        big = vf.values[-1].max() + 1.0
        biases = tuple(
            b if k < len(net.biases) - 1 else np.array([big])
            for k, b in enumerate(net.biases)
        )
        always_safe = CbvfNetwork(net.layer_sizes, zero_w, biases, net.omega0,
                                  net.normalization)
        s = score_network(always_safe, vf, 2.0)
        assert s.unsafe_volume_error == pytest.approx(100.0)
        assert s.safe_volume_error == pytest.approx(0.0)

        low = vf.values[-1].min() - 1.0
        biases = tuple(
            b if k < len(net.biases) - 1 else np.array([low])
            for k, b in enumerate(net.biases)
        )
        always_unsafe = CbvfNetwork(net.layer_sizes, zero_w, biases, net.omega0,
                                    net.normalization)
        s2 = score_network(always_unsafe, vf, 2.0)
        assert s2.unsafe_volume_error == pytest.approx(0.0)
        assert s2.safe_volume_error == pytest.approx(100.0)

    def test_empty_reference_set_undefined(self):
        dyn, grid, _ = di_setup(counts=(21, 21))
        lnew = lambda X: np.ones(np.asarray(X).shape[:-1])  # everything safe
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 0.5)
        net = init_weights([3, 8, 1], seed=1,
                           normalization=Normalization.from_box(grid.mins, grid.maxs, 1.0))
        s = score_network(net, vf, 0.5)
        assert s.unsafe_volume_error is None


class TestGridBarrier:
    def test_interpolation_and_gradient(self):
        dyn, grid, lnew = di_setup(counts=(81, 61))
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 3.0, output_times=[0.0, 1.5, 3.0])
        gb = GridBarrier(vf)
        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(20):
            x = rng.uniform([-1.5, -3.5], [11.5, 5.5])
            t = float(rng.uniform(0, 3))
            val, grad = gb.value_and_gradient(x, t)
            # finite differences of the interpolant inside one cell
            for j in range(2):
                d = np.zeros(2)
                d[j] = eps
                fp, _ = gb.value_and_gradient(x + d, t)
                fm, _ = gb.value_and_gradient(x - d, t)
                fd = (fp - fm) / (2 * eps)
                assert grad[j] == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_time_zero_slice_matches_level(self):
        dyn, grid, lnew = di_setup(counts=(41, 31))
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 1.0, output_times=[0.0, 1.0])
        gb = GridBarrier(vf)
        X = grid.mesh()
        idx = (7, 11)
        val, _ = gb.value_and_gradient(X[idx], 0.0)
        assert val == pytest.approx(float(lnew(X[idx])))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        dyn, grid, lnew = di_setup(counts=(31, 21))
        vf = solve_cbvf(grid, dyn, lnew, 0.3, 1.0, output_times=[0.0, 0.5, 1.0])
        path = tmp_path / "vf.bin"
        save_value_function(vf, path)
        loaded = load_value_function(path)
        np.testing.assert_array_equal(loaded.values, vf.values)
        np.testing.assert_array_equal(loaded.times, vf.times)
        np.testing.assert_array_equal(loaded.grid.mins, vf.grid.mins)
        assert loaded.grid.counts == vf.grid.counts

    def test_truncated_file(self, tmp_path):
        dyn, grid, lnew = di_setup(counts=(31, 21))
        vf = solve_cbvf(grid, dyn, lnew, 0.0, 0.5)
        path = tmp_path / "vf.bin"
        save_value_function(vf, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueFileError):
            load_value_function(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "vf.bin"
        path.write_bytes(b"NOTAFILE" + b"\x00" * 64)
        with pytest.raises(ValueFileError, match="not a value-function file"):
            load_value_function(path)
