"""Monte Carlo estimation of transition-density data matrices.

Two histogram estimators feed the spectral stage:

* forward: all trajectories start inside one source box; each matrix
  entry is the box-occupation density of a training box at one slice,
  an estimate of the transition density rho(x_i, t_k | x0).
* backward: a trajectory bundle starts inside every training box; each
  entry is the fraction found inside a fixed reference region at one
  slice, an estimate of the conditional occupation probability.

Work is split into batches over independent random streams; batch
histograms merge by addition, so any batch layout (or worker count)
yields the same totals.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .collocation import OUTSIDE, BoxGrid
from .models import SdeModel
from .simulate import ConfigError, SimConfig, evolve_slices, spawn_stream

_MAGIC = b"OSCDMX1\n"

# substream id blocks per stage seed; batches get consecutive ids
_STREAM_FORWARD = 1 << 20
_STREAM_BACKWARD = 1 << 21
_STREAM_STATIONARY = 1 << 22

_DIVERGENCE_LIMIT = 1e-3


class DivergenceError(RuntimeError):
    """Raised when more than 0.1% of launched trajectories diverge."""


@dataclass(frozen=True)
class ReferenceBox:
    """Axis-aligned region whose occupation probability is traced."""

    lows: tuple[float, ...]
    highs: tuple[float, ...]

    def __post_init__(self):
        if len(self.lows) != len(self.highs):
            raise ConfigError("reference box lows/highs length mismatch")
        if any(h <= l for l, h in zip(self.lows, self.highs)):
            raise ConfigError("reference box must have positive volume")
        object.__setattr__(self, "lows", tuple(float(v) for v in self.lows))
        object.__setattr__(self, "highs", tuple(float(v) for v in self.highs))

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points)
        lo = np.asarray(self.lows)
        hi = np.asarray(self.highs)
        with np.errstate(invalid="ignore"):
            ok = np.all((pts >= lo) & (pts < hi), axis=-1)
        return ok & np.all(np.isfinite(pts), axis=-1)

    def require_inside(self, grid: BoxGrid) -> None:
        if (any(l < gl for l, gl in zip(self.lows, grid.lows))
                or any(h > gh for h, gh in zip(self.highs, grid.highs))):
            raise ConfigError("reference box must lie inside the domain")


@dataclass
class DensityMatrix:
    """Slice-by-box data matrix with its sampling metadata.

    values[k, i]: forward runs store count/(K * delta); backward runs
    store count/K.  times[k] = (k+1) * t_gap measured from launch.
    """

    kind: str
    values: np.ndarray
    times: np.ndarray
    delta: float
    k_trajectories: int
    box_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def merge(self, other: "DensityMatrix") -> "DensityMatrix":
        """Pool two estimates of the same layout run with different
        trajectory counts; counts add, so the pooled matrix equals a
        single run of k1+k2 trajectories in distribution."""
        if self.kind != other.kind:
            raise ValueError("cannot merge matrices of different kinds")
        if self.values.shape != other.values.shape:
            raise ValueError("cannot merge matrices of different shapes")
        if not np.array_equal(self.box_ids, other.box_ids):
            raise ValueError("cannot merge matrices over different boxes")
        k1, k2 = self.k_trajectories, other.k_trajectories
        pooled = (self.values * k1 + other.values * k2) / (k1 + k2)
        meta = dict(self.meta)
        meta["diverged"] = (self.meta.get("diverged", 0)
                            + other.meta.get("diverged", 0))
        return DensityMatrix(self.kind, pooled, self.times.copy(), self.delta,
                             k1 + k2, self.box_ids.copy(), meta)

    # -- persistence: compact header + raw float64 payload ------------------

    def save(self, path) -> None:
        header = {
            "kind": self.kind,
            "shape": list(self.values.shape),
            "delta": self.delta,
            "k_trajectories": self.k_trajectories,
            "times": [repr(float(t)) for t in self.times],
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.box_ids, dtype=np.int64)
                     .tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype=np.float64)
                     .tobytes())

    @classmethod
    def load(cls, path) -> "DensityMatrix":
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise ValueError(f"{path} is not a density matrix file")
            hlen = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(hlen))
            shape = tuple(header["shape"])
            ids = np.frombuffer(fh.read(8 * shape[1]), dtype=np.int64).copy()
            values = np.frombuffer(fh.read(8 * shape[0] * shape[1]),
                                   dtype=np.float64).reshape(shape).copy()
        return cls(kind=header["kind"], values=values,
                   times=np.asarray([float(t) for t in header["times"]]),
                   delta=header["delta"],
                   k_trajectories=header["k_trajectories"],
                   box_ids=ids, meta=header.get("meta", {}))


def _column_lookup(box_ids: np.ndarray):
    """Vectorized flat-id -> column mapper over the tracked boxes."""
    order = np.argsort(box_ids)
    sorted_ids = box_ids[order]

    def lookup(ids: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(sorted_ids, ids)
        pos = np.clip(pos, 0, len(sorted_ids) - 1)
        hit = sorted_ids[pos] == ids
        return np.where(hit, order[pos], -1)

    return lookup


def _worker_count() -> int:
    raw = os.environ.get("OSCSPEC_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _check_divergence(diverged: int, launched: int) -> None:
    if diverged > _DIVERGENCE_LIMIT * launched:
        raise DivergenceError(
            f"{diverged} of {launched} trajectories diverged "
            f"(limit {_DIVERGENCE_LIMIT:.1%})")


def estimate_forward(model: SdeModel, grid: BoxGrid, box_ids: np.ndarray,
                     sim: SimConfig, x0_box: int, k_trajectories: int,
                     batch_size: int = 65536) -> DensityMatrix:
    """Histogram K trajectories launched uniformly inside one source box.

    No burn-in: the point of the forward run is the transient relaxation
    from the source box.  Diverged trajectories stop contributing from
    the first bad slice on and are tallied; the run fails above 0.1%.
    """
    if k_trajectories < 1:
        raise ConfigError("k_trajectories must be positive")
    box_ids = np.asarray(box_ids, dtype=np.int64)
    lookup = _column_lookup(box_ids)
    n_x = len(box_ids)
    counts = np.zeros((sim.n_t, n_x), dtype=np.float64)
    starts = list(range(0, k_trajectories, batch_size))

    def run_batch(batch_index: int) -> tuple[np.ndarray, int]:
        lo = starts[batch_index]
        size = min(batch_size, k_trajectories - lo)
        rng = spawn_stream(sim.seed, _STREAM_FORWARD + batch_index)
        x0 = grid.sample_in_boxes(np.full(size, x0_box, dtype=np.int64), rng)
        local = np.zeros_like(counts)
        seen_dead = 0
        for k, states, alive in evolve_slices(model, x0, sim, rng):
            cols = lookup(grid.locate(states[alive]))
            cols = cols[cols >= 0]
            if len(cols):
                local[k] += np.bincount(cols, minlength=n_x)
            seen_dead = size - int(alive.sum())
        return local, seen_dead

    diverged = 0
    workers = _worker_count()
    if workers == 1:
        results = map(run_batch, range(len(starts)))
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        results = pool.map(run_batch, range(len(starts)))
    for local, dead in results:  # fixed batch order: deterministic merge
        counts += local
        diverged += dead
    if workers > 1:
        pool.shutdown()
    _check_divergence(diverged, k_trajectories)
    values = counts / (k_trajectories * grid.box_volume)
    return DensityMatrix(
        kind="forward", values=values, times=sim.times,
        delta=grid.box_volume, k_trajectories=k_trajectories,
        box_ids=box_ids.copy(),
        meta={"x0_box": int(x0_box), "diverged": int(diverged),
              "seed": sim.seed})


def estimate_backward(model: SdeModel, grid: BoxGrid, box_ids: np.ndarray,
                      sim: SimConfig, ref_box: ReferenceBox,
                      k_trajectories: int, max_states: int = 1 << 20
                      ) -> DensityMatrix:
    """Occupation-probability traces for bundles started in every box.

    For each tracked box, K trajectories start uniformly inside it; entry
    [k, i] is the fraction of bundle i inside the reference region at
    slice k.  Start boxes are processed in blocks sized to keep at most
    ``max_states`` concurrent trajectories.
    """
    if k_trajectories < 1:
        raise ConfigError("k_trajectories must be positive")
    ref_box.require_inside(grid)
    box_ids = np.asarray(box_ids, dtype=np.int64)
    n_x = len(box_ids)
    values = np.zeros((sim.n_t, n_x), dtype=np.float64)
    boxes_per_block = max(1, max_states // k_trajectories)
    blocks = list(range(0, n_x, boxes_per_block))

    def run_block(block_index: int) -> tuple[int, np.ndarray, int]:
        lo = blocks[block_index]
        ids = box_ids[lo:lo + boxes_per_block]
        nb = len(ids)
        rng = spawn_stream(sim.seed, _STREAM_BACKWARD + block_index)
        x0 = grid.sample_in_boxes(np.repeat(ids, k_trajectories), rng)
        local = np.zeros((sim.n_t, nb))
        dead_mask = np.zeros(nb * k_trajectories, dtype=bool)
        for k, states, alive in evolve_slices(model, x0, sim, rng):
            inside = ref_box.contains(states) & alive
            local[k] = inside.reshape(nb, k_trajectories).sum(axis=1)
            dead_mask = ~alive
        return lo, local / k_trajectories, int(dead_mask.sum())

    diverged = 0
    workers = _worker_count()
    if workers == 1:
        results = map(run_block, range(len(blocks)))
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        results = pool.map(run_block, range(len(blocks)))
    for lo, local, dead in results:
        values[:, lo:lo + local.shape[1]] = local
        diverged += dead
    if workers > 1:
        pool.shutdown()
    _check_divergence(diverged, n_x * k_trajectories)
    return DensityMatrix(
        kind="backward", values=values, times=sim.times,
        delta=grid.box_volume, k_trajectories=k_trajectories,
        box_ids=box_ids.copy(),
        meta={"ref_box_lows": list(ref_box.lows),
              "ref_box_highs": list(ref_box.highs),
              "diverged": int(diverged), "seed": sim.seed})


@dataclass
class StationaryEstimate:
    """Sparse long-run box-occupation histogram.

    p0[j] estimates the stationary density on tracked box box_ids[j]
    (count / (samples * delta)); boxes never visited are absent and
    read as zero.
    """

    box_ids: np.ndarray
    p0: np.ndarray
    delta: float
    samples: int
    inside_fraction: float

    def at_boxes(self, query_ids: np.ndarray) -> np.ndarray:
        lookup = _column_lookup(self.box_ids)
        cols = lookup(np.asarray(query_ids, dtype=np.int64))
        vals = np.where(cols >= 0, self.p0[np.clip(cols, 0, None)], 0.0)
        return vals

    def mass_in(self, grid: BoxGrid, region: ReferenceBox) -> float:
        """Approximate integral of P0 over the region: sum of tracked-box
        densities whose centers fall inside, times box volume."""
        centers = grid.center(self.box_ids)
        sel = region.contains(centers)
        return float(np.sum(self.p0[sel]) * self.delta)

    def save_csv(self, path, grid: BoxGrid) -> None:
        centers = grid.center(self.box_ids)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(
                ["box_id"] + [f"x{d+1}" for d in range(grid.dim)] + ["p0"])
                + "\n")
            for bid, row, v in zip(self.box_ids, centers, self.p0):
                fh.write(",".join([str(int(bid))]
                                  + [repr(float(c)) for c in row]
                                  + [repr(float(v))]) + "\n")


def estimate_stationary(model: SdeModel, grid: BoxGrid, sim: SimConfig,
                        k_trajectories: int, t_long: float
                        ) -> StationaryEstimate:
    """Time-averaged histogram over K burned-in trajectories of length
    t_long, sampled every t_gap.  Returns a sparse per-box estimate."""
    n_slices = int(round(t_long / sim.t_gap))
    if n_slices < 1:
        raise ConfigError("t_long must cover at least one t_gap")
    run = SimConfig(dt=sim.dt, t_burn=sim.t_burn, t_gap=sim.t_gap,
                    n_t=n_slices, seed=sim.seed)
    rng = spawn_stream(sim.seed, _STREAM_STATIONARY)
    x0 = grid.sample_domain(k_trajectories, rng)
    tally: dict[int, int] = {}
    total = 0
    inside = 0
    for _, states, alive in evolve_slices(model, x0, run, rng,
                                          burn_in=True):
        ids = grid.locate(states[alive])
        total += int(alive.sum())
        ids = ids[ids != OUTSIDE]
        inside += len(ids)
        uniq, cnt = np.unique(ids, return_counts=True)
        for u, c in zip(uniq, cnt):
            tally[int(u)] = tally.get(int(u), 0) + int(c)
    box_ids = np.asarray(sorted(tally), dtype=np.int64)
    counts = np.asarray([tally[int(b)] for b in box_ids], dtype=float)
    p0 = counts / (total * grid.box_volume)
    return StationaryEstimate(box_ids=box_ids, p0=p0,
                              delta=grid.box_volume, samples=total,
                              inside_fraction=inside / max(total, 1))
