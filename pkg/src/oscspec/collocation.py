"""Collocation point selection on a half-open box partition of the domain.

Two point families feed the pipeline: a training set of distinct box
centers (where eigenfunction values are estimated) and a reference set of
raw points (where the operator residual is evaluated).  Both mix samples
harvested from a long trajectory, which concentrate where the process
actually lives, with uniform draws that guard coverage of rarely visited
regions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .models import SdeModel
from .simulate import ConfigError, SimConfig, _Stepper, spawn_stream

OUTSIDE = np.int64(-1)

# substream ids within a stage seed
_STREAM_TRAIN_TRAJ = 1
_STREAM_TRAIN_UNIF = 2
_STREAM_REF_TRAJ = 3
_STREAM_REF_UNIF = 4


class ShortfallError(RuntimeError):
    """Raised when the sampling budget runs out before the target count."""


@dataclass(frozen=True)
class BoxGrid:
    """Regular partition of a rectangular domain into N^n half-open boxes.

    Box b along each axis covers [low + b*w, low + (b+1)*w); points on the
    upper domain boundary therefore fall outside.  Flat box ids are
    row-major int64, which keeps id arithmetic exact up to 4D at the grid
    sizes used here.
    """

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    n_per_dim: int

    def __post_init__(self):
        if self.n_per_dim < 1:
            raise ConfigError("n_per_dim must be >= 1")
        if len(self.lows) != len(self.highs):
            raise ConfigError("lows and highs must have equal length")
        if any(h <= l for l, h in zip(self.lows, self.highs)):
            raise ConfigError("each high must exceed its low")
        object.__setattr__(self, "lows", tuple(float(v) for v in self.lows))
        object.__setattr__(self, "highs", tuple(float(v) for v in self.highs))

    @property
    def dim(self) -> int:
        return len(self.lows)

    @property
    def widths(self) -> np.ndarray:
        return (np.asarray(self.highs) - np.asarray(self.lows)) / self.n_per_dim

    @property
    def n_boxes(self) -> int:
        return self.n_per_dim ** self.dim

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.widths))

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., n) to flat box ids; OUTSIDE for points not in
        the domain (including the upper boundary) or non-finite points."""
        pts = np.asarray(points, dtype=float)
        scaled = (pts - np.asarray(self.lows)) / self.widths
        with np.errstate(invalid="ignore"):
            idx = np.floor(scaled).astype(np.int64)
            inside = np.all(np.isfinite(pts), axis=-1)
            inside &= np.all((idx >= 0) & (idx < self.n_per_dim), axis=-1)
        flat = np.zeros(pts.shape[:-1], dtype=np.int64)
        for d in range(self.dim):
            flat = flat * self.n_per_dim + np.where(inside, idx[..., d], 0)
        return np.where(inside, flat, OUTSIDE)

    def center(self, box_ids: np.ndarray) -> np.ndarray:
        """Center coordinates of flat box ids, shape (..., n)."""
        ids = np.asarray(box_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.n_boxes):
            raise ValueError("box id out of range")
        coords = np.empty(ids.shape + (self.dim,))
        rem = ids
        for d in range(self.dim - 1, -1, -1):
            coords[..., d] = rem % self.n_per_dim
            rem = rem // self.n_per_dim
        return np.asarray(self.lows) + (coords + 0.5) * self.widths

    def sample_in_boxes(self, box_ids: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
        """Uniform draws inside the given boxes, one point per id."""
        centers = self.center(box_ids)
        jitter = rng.uniform(-0.5, 0.5, size=centers.shape)
        return centers + jitter * self.widths

    def sample_domain(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lows, self.highs, size=(count, self.dim))


@dataclass
class CollocationSets:
    """Training box centers (with their ids) plus raw reference points."""

    grid: BoxGrid
    training_ids: np.ndarray
    training_points: np.ndarray
    reference_points: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.training_ids)) != len(self.training_ids):
            raise ValueError("training box ids must be distinct")


def _harvest_trajectory_boxes(model: SdeModel, grid: BoxGrid, sim: SimConfig,
                              target: int, claimed: set[int],
                              order: list[int], rng: np.random.Generator,
                              budget: int) -> None:
    """Claim boxes visited by a burned-in trajectory, every t_gap."""
    if target == 0:
        return
    stepper = _Stepper(model, sim.dt)
    x = grid.sample_domain(1, rng)
    for _ in range(sim.burn_steps):
        x = stepper(x, rng)
    found = 0
    spent = 0
    chunk = 512  # slices integrated per locate call
    while found < target:
        if spent >= budget:
            raise ShortfallError(
                f"trajectory sampling budget exhausted: {found} of {target} "
                f"boxes claimed after {spent} samples")
        block = np.empty((chunk, grid.dim))
        for k in range(chunk):
            for _ in range(sim.gap_steps):
                x = stepper(x, rng)
            if not np.all(np.isfinite(x)):
                # restart from a fresh uniform point; diverged walker
                x = grid.sample_domain(1, rng)
                for _ in range(sim.burn_steps):
                    x = stepper(x, rng)
            block[k] = x[0]
        spent += chunk
        for bid in grid.locate(block):
            if bid != OUTSIDE and int(bid) not in claimed:
                claimed.add(int(bid))
                order.append(int(bid))
                found += 1
                if found == target:
                    break


def generate_training_set(model: SdeModel, grid: BoxGrid, sim: SimConfig,
                          n_x: int, alpha: float, seed: int | None = None,
                          budget_factor: int = 100
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Select n_x distinct boxes and return (ids, centers).

    A ceil(alpha * n_x) share of the boxes is claimed from a burned-in
    trajectory sampled every t_gap; the rest come from uniform draws over
    the domain.  Sampling stops at exactly n_x distinct boxes or fails
    with a shortfall error after budget_factor * n_x samples.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if n_x < 1 or n_x > grid.n_boxes:
        raise ConfigError(
            f"n_x must lie in [1, {grid.n_boxes}] for this grid")
    eff_seed = sim.seed if seed is None else seed
    n_traj = math.ceil(alpha * n_x)
    claimed: set[int] = set()
    order: list[int] = []
    budget = budget_factor * n_x
    _harvest_trajectory_boxes(model, grid, sim, n_traj, claimed, order,
                              spawn_stream(eff_seed, _STREAM_TRAIN_TRAJ),
                              budget)
    rng_u = spawn_stream(eff_seed, _STREAM_TRAIN_UNIF)
    spent = 0
    while len(order) < n_x:
        if spent >= budget:
            raise ShortfallError(
                f"uniform sampling budget exhausted: {len(order)} of {n_x} "
                f"boxes claimed after {spent} draws")
        pts = grid.sample_domain(min(4 * n_x, budget - spent), rng_u)
        spent += len(pts)
        for bid in grid.locate(pts):
            if bid != OUTSIDE and int(bid) not in claimed:
                claimed.add(int(bid))
                order.append(int(bid))
                if len(order) == n_x:
                    break
    ids = np.asarray(order, dtype=np.int64)
    return ids, grid.center(ids)


def generate_reference_set(model: SdeModel, grid: BoxGrid, sim: SimConfig,
                           n_y: int, alpha: float, seed: int | None = None,
                           budget_factor: int = 100) -> np.ndarray:
    """Draw n_y raw points: ceil(alpha*n_y) from a burned-in trajectory
    stream (duplicates allowed, points outside the domain skipped), the
    rest uniform over the domain."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    if n_y < 1:
        raise ConfigError("n_y must be positive")
    eff_seed = sim.seed if seed is None else seed
    n_traj = math.ceil(alpha * n_y)
    points = np.empty((n_y, grid.dim))
    if n_traj > 0:
        rng_t = spawn_stream(eff_seed, _STREAM_REF_TRAJ)
        stepper = _Stepper(model, sim.dt)
        x = grid.sample_domain(1, rng_t)
        for _ in range(sim.burn_steps):
            x = stepper(x, rng_t)
        got = 0
        spent = 0
        budget = budget_factor * n_y
        while got < n_traj:
            if spent >= budget:
                raise ShortfallError(
                    f"reference trajectory budget exhausted: {got} of "
                    f"{n_traj} points after {spent} samples")
            for _ in range(sim.gap_steps):
                x = stepper(x, rng_t)
            spent += 1
            if not np.all(np.isfinite(x)):
                x = grid.sample_domain(1, rng_t)
                for _ in range(sim.burn_steps):
                    x = stepper(x, rng_t)
                continue
            if grid.locate(x)[0] != OUTSIDE:
                points[got] = x[0]
                got += 1
    if n_y > n_traj:
        rng_u = spawn_stream(eff_seed, _STREAM_REF_UNIF)
        points[n_traj:] = grid.sample_domain(n_y - n_traj, rng_u)
    return points


# ---------------------------------------------------------------------------
# persistence (CSV, one row per point)

def save_training_csv(path, grid: BoxGrid, ids: np.ndarray,
                      centers: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["box_id"] + [f"x{d+1}" for d in range(grid.dim)])
        for bid, row in zip(ids, centers):
            writer.writerow([int(bid)] + [repr(float(v)) for v in row])


def load_training_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.asarray([[float(v) for v in r] for r in rows[1:]])
    return data[:, 0].astype(np.int64), data[:, 1:]


def save_points_csv(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{d+1}" for d in range(points.shape[1])])
        for row in points:
            writer.writerow([repr(float(v)) for v in row])


def load_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.asarray([[float(v) for v in r] for r in rows[1:]])
