"""Reduced-model equivalence check of the two refinement routes.

On the switching surface of the last transition the position coordinate is
frozen, leaving a 2-D (velocity, headway) problem.  Route A refines against
the unsafe switching set directly; route B first computes the set of states
from which entering it is unavoidable (the backward hull) and refines
against that.  The two value functions must carve out the same safe set;
route B is therefore never needed in the pipeline, and this module exists
to certify that claim on a grid: the kernels may disagree only within a
one-cell band around the safe-set boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .oracle import Grid, GridValueFunction, back_unsafe, solve_cbvf, viability_kernel
from .scenarios import Scenario

__all__ = ["CertificationResult", "acc_reduced_certification", "boundary_band"]


@dataclass
class CertificationResult:
    vf_unsafe: GridValueFunction   # route A: exclude the unsafe switching set
    vf_avoid: GridValueFunction    # route B: exclude its backward hull
    kernel_unsafe: np.ndarray
    kernel_avoid: np.ndarray
    mismatch_cells: int
    within_band: bool


def boundary_band(mask: np.ndarray) -> np.ndarray:
    """Cells within one cell of the mask's boundary (3^n neighborhood)."""
    structure = np.ones((3,) * mask.ndim, dtype=bool)
    dilated = ndimage.binary_dilation(mask, structure=structure)
    eroded = ndimage.binary_erosion(mask, structure=structure)
    return dilated & ~eroded


def acc_reduced_certification(
    scenario: Scenario,
    counts: tuple[int, int] = (201, 201),
    gamma: float = 0.5,
    horizon: float = 10.0,
    v_max: float = 36.0,
    d_max: float = 150.0,
) -> CertificationResult:
    """Run both refinement routes for the final transition of the chain.

    The source mode's reduced dynamics evolve (velocity, headway); its local
    barrier is the constraint, and the arriving mode's barrier defines the
    unsafe switching set (every reduced state sits on the frozen guard).
    """
    reduced = scenario.extras["reduced"]
    mode_indices = sorted(reduced["dynamics"].keys())
    src, dst = mode_indices[-2], mode_indices[-1]
    dyn = reduced["dynamics"][src]
    h_src = reduced["barriers"][src]
    h_dst = reduced["barriers"][dst]

    grid = Grid(mins=[0.0, 0.0], maxs=[v_max, d_max], counts=counts)
    X = grid.mesh()

    def level_unsafe_route(pts: np.ndarray) -> np.ndarray:
        return np.minimum(h_src.value(pts), h_dst.value(pts))

    vf_u = solve_cbvf(grid, dyn, level_unsafe_route, gamma, horizon)

    unsafe_mask = (h_src.value(X) >= 0) & (h_dst.value(X) < 0)
    hull = back_unsafe(grid, dyn, unsafe_mask, horizon)
    spacing = tuple(grid.spacing)
    if hull.any() and not hull.all():
        signed = ndimage.distance_transform_edt(
            ~hull, sampling=spacing
        ) - ndimage.distance_transform_edt(hull, sampling=spacing)
    else:
        signed = np.where(hull, -grid.cell_diameter(), grid.cell_diameter())

    def level_avoid_route(pts: np.ndarray) -> np.ndarray:
        # sampled exactly on the certification grid
        return np.minimum(h_src.value(pts), signed)

    vf_b = solve_cbvf(grid, dyn, level_avoid_route, gamma, horizon)

    t_end = min(vf_u.times[-1], vf_b.times[-1])
    ker_u = viability_kernel(vf_u, vf_u.times[-1])
    ker_b = viability_kernel(vf_b, vf_b.times[-1])
    mismatch = ker_u ^ ker_b
    band = boundary_band(ker_u) | boundary_band(ker_b)
    within = bool(np.all(~mismatch | band))
    del t_end
    return CertificationResult(
        vf_unsafe=vf_u,
        vf_avoid=vf_b,
        kernel_unsafe=ker_u,
        kernel_avoid=ker_b,
        mismatch_cells=int(mismatch.sum()),
        within_band=within,
    )
