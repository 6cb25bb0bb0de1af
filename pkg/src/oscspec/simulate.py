"""Euler-Maruyama integration with counter-based random streams.

Trajectory batches draw their noise from Philox streams keyed by
(seed, stream_id), so any subset of the work can be replayed bit-for-bit
regardless of execution order or batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import SdeModel

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Raised for inconsistent simulation settings."""


@dataclass(frozen=True)
class SimConfig:
    """Sampling layout shared by every Monte Carlo stage.

    dt : integrator step.
    t_burn : time discarded before any recording (stationary warm-up).
    t_gap : spacing between recorded slices; must be an integer multiple
        of dt.
    n_t : number of recorded slices per trajectory.
    seed : master seed for the owning stage.
    """

    dt: float
    t_burn: float
    t_gap: float
    n_t: int
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.t_burn < 0:
            raise ConfigError("t_burn must be nonnegative")
        if self.n_t < 1:
            raise ConfigError("n_t must be at least 1")
        ratio = self.t_gap / self.dt
        if self.t_gap <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1):
            raise ConfigError(
                f"t_gap={self.t_gap} is not an integer multiple of dt={self.dt}")

    @property
    def gap_steps(self) -> int:
        return int(round(self.t_gap / self.dt))

    @property
    def burn_steps(self) -> int:
        return int(round(self.t_burn / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t_gap * np.arange(1, self.n_t + 1)


def spawn_stream(seed: int, stream_id: int) -> np.random.Generator:
    """Independent generator for (seed, stream_id), Philox counter-based.

    Streams with distinct ids never overlap, and the mapping is a pure
    function of the two integers: work split across any batch layout or
    worker count replays identically.
    """
    key = ((seed & _MASK64) << 64) | (stream_id & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def step(model: SdeModel, x: np.ndarray, dt: float,
         noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama update for a batch of states.

    Parameters
    ----------
    x : (..., n) states.
    noise : (..., m) standard normal draws; scaled by sqrt(dt) here.
    """
    sqdt = np.sqrt(dt)
    if model.diffusion_is_constant and model.diffusion_is_diagonal:
        diag = np.diagonal(model.diffusion(np.zeros((1, model.dim)))[0])
        return x + model.drift(x) * dt + diag * noise * sqdt
    if model.diffusion_is_diagonal:
        g = model.diffusion(x)
        diag = np.einsum("...ii->...i", g)
        return x + model.drift(x) * dt + diag * noise * sqdt
    g = model.diffusion(x)
    return x + model.drift(x) * dt + np.einsum(
        "...ij,...j->...i", g, noise) * sqdt


class _Stepper:
    """Precomputes the cheapest update rule for a model."""

    def __init__(self, model: SdeModel, dt: float):
        self.model = model
        self.dt = dt
        self.sqdt = np.sqrt(dt)
        self.const_diag = None
        if model.diffusion_is_constant and model.diffusion_is_diagonal:
            g = model.diffusion(np.zeros((1, model.dim)))[0]
            self.const_diag = np.diagonal(g).copy()

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(x.shape[:-1] + (self.model.noise_dim,))
        if self.const_diag is not None:
            return (x + self.model.drift(x) * self.dt
                    + (self.const_diag * self.sqdt) * noise)
        if self.model.diffusion_is_diagonal:
            diag = np.einsum("...ii->...i", self.model.diffusion(x))
            return x + self.model.drift(x) * self.dt + diag * noise * self.sqdt
        g = self.model.diffusion(x)
        return (x + self.model.drift(x) * self.dt
                + np.einsum("...ij,...j->...i", g, noise) * self.sqdt)


@dataclass
class TrajectorySample:
    """Recorded slices of one trajectory.

    ``diverged_at`` is the index of the first non-finite slice, or None;
    states from that slice on are NaN.
    """

    times: np.ndarray
    states: np.ndarray
    diverged_at: int | None = None


def run_trajectory(model: SdeModel, config: SimConfig, x0: np.ndarray,
                   stream_id: int = 0) -> TrajectorySample:
    """Integrate one trajectory and record n_t slices spaced t_gap apart
    after the burn-in, with times measured from the end of the burn-in."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.dim,):
        raise ConfigError(f"x0 must have shape ({model.dim},)")
    rng = spawn_stream(config.seed, stream_id)
    stepper = _Stepper(model, config.dt)
    x = x0[None, :].copy()
    for _ in range(config.burn_steps):
        x = stepper(x, rng)
    states = np.full((config.n_t, model.dim), np.nan)
    diverged_at = None
    for k in range(config.n_t):
        for _ in range(config.gap_steps):
            x = stepper(x, rng)
        if diverged_at is None and not np.all(np.isfinite(x)):
            diverged_at = k
        if diverged_at is None:
            states[k] = x[0]
    return TrajectorySample(times=config.times, states=states,
                            diverged_at=diverged_at)


def evolve_slices(model: SdeModel, x0_batch: np.ndarray, config: SimConfig,
                  rng: np.random.Generator, burn_in: bool = False):
    """Generator over recorded slices for a batch of trajectories.

    Yields (slice_index, states, alive) with states shape (B, n).  A
    trajectory that turns non-finite is frozen at NaN and reported dead
    from that slice on; integration of the rest of the batch continues.
    """
    x = np.array(x0_batch, dtype=float, copy=True)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ConfigError("x0_batch must have shape (B, dim)")
    stepper = _Stepper(model, config.dt)
    alive = np.ones(x.shape[0], dtype=bool)
    if burn_in:
        for _ in range(config.burn_steps):
            x = stepper(x, rng)
    for k in range(config.n_t):
        for _ in range(config.gap_steps):
            x = stepper(x, rng)
        bad = alive & ~np.all(np.isfinite(x), axis=1)
        if np.any(bad):
            alive = alive & ~bad
            x[~alive] = np.nan
        yield k, x, alive
