"""Sparse finite-difference reference discretizations (1D/2D).

Independent validation route for the Monte Carlo pipeline: the forward
operator is discretized in flux form on cell centers with zero (Dirichlet)
ghost values, its adjoint with centered stencils and constant-extrapolation
(Neumann-type) ghosts.  On interior cells the two matrices are exact
transposes, mirroring the operators' adjointness.

Eigenvalues come from two deliberately different routes: shift-invert
Arnoldi around a small negative shift, and time evolution of a density
bump with a decaying-sinusoid fit to a region-mass trace.  Agreement of
the routes validates both.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigs, splu

from .collocation import BoxGrid
from .density import ReferenceBox
from .models import SdeModel
from .spectral import FitResult, fit_eigenvalue


@dataclass
class FdOperator:
    """Assembled sparse operator with its grid metadata."""

    kind: str
    grid: BoxGrid
    matrix: sp.csr_matrix
    meta: dict = field(default_factory=dict)

    @property
    def centers(self) -> np.ndarray:
        return self.grid.center(np.arange(self.grid.n_boxes))

    def interior_mask(self, margin: int = 2) -> np.ndarray:
        """Cells at least ``margin`` cells away from every domain edge,
        where forward and backward stencils are unmodified."""
        n = self.grid.n_per_dim
        idx = np.arange(n)
        keep1 = (idx >= margin) & (idx < n - margin)
        if self.grid.dim == 1:
            return keep1
        return (keep1[:, None] & keep1[None, :]).ravel()


def _stencil_2d(model: SdeModel, grid: BoxGrid):
    n = grid.n_per_dim
    hx, hy = grid.widths
    centers = grid.center(np.arange(grid.n_boxes))
    f = model.drift(centers)
    g2 = model.diffusion_product(centers)
    f1 = f[:, 0].reshape(n, n)
    f2 = f[:, 1].reshape(n, n)
    g11 = g2[:, 0, 0].reshape(n, n)
    g12 = g2[:, 0, 1].reshape(n, n)
    g22 = g2[:, 1, 1].reshape(n, n)
    # per-offset first/second-derivative weights, evaluated pointwise
    offsets = {
        (1, 0): (f1 / (2 * hx), g11 / (2 * hx * hx)),
        (-1, 0): (-f1 / (2 * hx), g11 / (2 * hx * hx)),
        (0, 1): (f2 / (2 * hy), g22 / (2 * hy * hy)),
        (0, -1): (-f2 / (2 * hy), g22 / (2 * hy * hy)),
        (0, 0): (np.zeros((n, n)), -(g11 / (hx * hx) + g22 / (hy * hy))),
        (1, 1): (np.zeros((n, n)), g12 / (4 * hx * hy)),
        (-1, -1): (np.zeros((n, n)), g12 / (4 * hx * hy)),
        (1, -1): (np.zeros((n, n)), -g12 / (4 * hx * hy)),
        (-1, 1): (np.zeros((n, n)), -g12 / (4 * hx * hy)),
    }
    return offsets


def _stencil_1d(model: SdeModel, grid: BoxGrid):
    n = grid.n_per_dim
    h = grid.widths[0]
    centers = grid.center(np.arange(n))
    f = model.drift(centers)[:, 0]
    g = model.diffusion_product(centers)[:, 0, 0]
    return {
        (1,): (f / (2 * h), g / (2 * h * h)),
        (-1,): (-f / (2 * h), g / (2 * h * h)),
        (0,): (np.zeros(n), -g / (h * h)),
    }


def assemble(model: SdeModel, grid: BoxGrid, kind: str) -> FdOperator:
    """Build the sparse forward or backward operator matrix on cell
    centers of the grid (row-major flat indexing; ids match the grid's
    box ids).

    backward rows:  L*[u](c) = f(c) . grad u + 1/2 G(c) : hess u,
    centered stencils, out-of-range neighbors clamped to the edge cell
    (constant extrapolation, a one-sided Neumann closure); the constant
    vector is in the kernel exactly.

    forward rows:   L[rho](c) = -div(f rho) + 1/2 div div(G rho),
    with products f*rho, G*rho differenced in flux form (weights taken
    at the source cell) and zero ghost values (Dirichlet).
    """
    if kind not in ("forward", "backward"):
        raise ValueError(f"unknown operator kind: {kind!r}")
    if grid.dim not in (1, 2):
        raise ValueError("finite-difference reference supports 1D and 2D")
    if model.dim != grid.dim:
        raise ValueError("model and grid dimensions differ")
    offsets = (_stencil_1d if grid.dim == 1 else _stencil_2d)(model, grid)
    n = grid.n_per_dim
    total = grid.n_boxes
    if grid.dim == 1:
        cell_index = np.arange(n)[:, None]  # (cells, 1)
    else:
        gx, gy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        cell_index = np.stack([gx.ravel(), gy.ravel()], axis=1)
    strides = np.array([n ** (grid.dim - 1 - d) for d in range(grid.dim)])

    rows, cols, vals = [], [], []
    for off, (adv, diff) in offsets.items():
        off = np.asarray(off)
        neighbor = cell_index + off
        if kind == "backward":
            # L* u at the row cell; clamp neighbors to the edge (ghost =
            # edge value), accumulating duplicates
            clamped = np.clip(neighbor, 0, n - 1)
            col = clamped @ strides
            row = cell_index @ strides
            weight = (adv + diff).ravel()
            # the advective part of an out-of-range neighbor cancels in
            # the clamped pair only through summation; keep all entries
            rows.append(row)
            cols.append(col)
            vals.append(weight)
        else:
            inside = np.all((neighbor >= 0) & (neighbor < n), axis=1)
            row = (cell_index @ strides)[inside]
            col = (neighbor @ strides)[inside]
            # flux form: weights at the source (column) cell, advection
            # with opposite sign relative to the backward stencil
            weight = -adv.ravel()[col] + diff.ravel()[col]
            rows.append(row)
            cols.append(col)
            vals.append(weight)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(total, total)).tocsr()
    return FdOperator(kind=kind, grid=grid, matrix=mat,
                      meta={"model": model.name, "params": model.params})


def leading_eigs(op: FdOperator, count: int, shift: float = -0.1,
                 trivial_tol: float = 1e-3, extra: int = 6,
                 fallback: dict | None = None
                 ) -> tuple[np.ndarray, np.ndarray | None]:
    """Nonzero eigenvalues with the smallest-magnitude real part, by
    shift-invert Arnoldi around a small negative real shift.

    Conjugate partners are kept; within a pair the positive-frequency
    member sorts first.  The near-zero stationary/constant mode is
    filtered by ``trivial_tol``.  If Arnoldi fails to converge and
    ``fallback`` provides evolve_and_fit arguments, that route's
    eigenvalue is returned (with a warning) and eigenvectors are None.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if shift >= 0:
        raise ValueError("shift must be a small negative real number")
    k = min(count + extra, op.grid.n_boxes - 2)
    try:
        vals, vecs = eigs(op.matrix.tocsc().astype(float), k=k, sigma=shift,
                          which="LM")
    except ArpackNoConvergence:
        if fallback is None:
            raise
        warnings.warn("Arnoldi did not converge; falling back to the "
                      "time-evolution route", RuntimeWarning)
        result = evolve_and_fit(op, **fallback)
        lam = result.fit.eigenvalue
        return np.asarray([lam]), None
    keep = np.abs(vals) > trivial_tol
    vals, vecs = vals[keep], vecs[:, keep]
    order = np.lexsort((-vals.imag, np.abs(vals.real)))
    vals, vecs = vals[order], vecs[:, order]
    return vals[:count], vecs[:, :count]


def leading_oscillatory(op: FdOperator, shift: float = -0.1,
                        **kwargs) -> tuple[complex, np.ndarray]:
    """The slowest decaying mode with positive frequency and its vector."""
    vals, vecs = leading_eigs(op, count=4, shift=shift, **kwargs)
    for i, v in enumerate(vals):
        if v.imag > 0:
            return complex(v), vecs[:, i]
    raise RuntimeError("no oscillatory mode found near the shift")


@dataclass
class EvolveResult:
    times: np.ndarray
    trace: np.ndarray
    fit: FitResult
    dt_used: float
    mass_drift_per_time: float
    retried: bool = False


def gaussian_bump(grid: BoxGrid, center, width: float) -> np.ndarray:
    """Normalized density bump used as an off-stationary initial state."""
    centers = grid.center(np.arange(grid.n_boxes))
    d2 = np.sum((centers - np.asarray(center)) ** 2, axis=1)
    rho = np.exp(-d2 / (2 * width * width))
    return rho / (rho.sum() * grid.box_volume)


def evolve_and_fit(op: FdOperator, rho0: np.ndarray, t_final: float,
                   dt: float, window: tuple[float, float],
                   region: ReferenceBox, fit_seed: int = 0,
                   mass_tol: float = 1e-6) -> EvolveResult:
    """March the forward operator with the implicit trapezoidal rule and
    fit the decaying-sinusoid model to the region-mass trace.

    A per-step total-mass jump above ``mass_tol`` flags step-size
    trouble; the step is halved and the march retried once.
    """
    if op.kind != "forward":
        raise ValueError("time evolution validates the forward operator")
    rho0 = np.asarray(rho0, dtype=float)
    centers = op.grid.center(np.arange(op.grid.n_boxes))
    sel = region.contains(centers)
    vol = op.grid.box_volume

    def march(step: float):
        steps = int(round(t_final / step))
        eye = sp.identity(op.grid.n_boxes, format="csc")
        m1 = (eye - 0.5 * step * op.matrix).tocsc()
        m2 = (eye + 0.5 * step * op.matrix).tocsr()
        lu = splu(m1)
        rho = rho0.copy()
        times = step * np.arange(1, steps + 1)
        trace = np.empty(steps)
        mass_prev = rho.sum() * vol
        worst_jump = 0.0
        for k in range(steps):
            rho = lu.solve(m2 @ rho)
            mass = rho.sum() * vol
            worst_jump = max(worst_jump, abs(mass - mass_prev))
            mass_prev = mass
            trace[k] = rho[sel].sum() * vol
        drift = abs(mass_prev - rho0.sum() * vol) / t_final
        return times, trace, worst_jump, drift

    times, trace, jump, drift = march(dt)
    retried = False
    dt_used = dt
    if jump > mass_tol:
        retried = True
        dt_used = dt / 2
        times, trace, jump, drift = march(dt_used)
    fit = fit_eigenvalue(times, trace, window, seed=fit_seed)
    return EvolveResult(times=times, trace=trace, fit=fit, dt_used=dt_used,
                        mass_drift_per_time=drift, retried=retried)
