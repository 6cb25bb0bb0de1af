"""Eigenvalue and eigenfunction recovery from density traces.

Stage one fits a decaying sinusoid

    f(t; b) = b1 exp(b5 t) sin(2 pi t / b2 + 2 pi / b3) + b4

to scalar traces of the density data, giving the slowest oscillatory
eigenvalue  lam = b5 + i 2 pi / b2.  Stage two solves, per collocation
box, a small linear least-squares problem whose design matrix carries
the known decay/oscillation time factors, leaving the complex
eigenfunction value at that box as the unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .density import DensityMatrix


class WindowError(ValueError):
    """Raised for fit/solve windows that cannot support the requested
    modes."""


class RankDeficiencyError(RuntimeError):
    """Raised when the design matrix loses rank on the chosen window."""


class NearOrthogonalError(RuntimeError):
    """Raised when forward/backward estimates are nearly orthogonal,
    which usually means the two routes locked onto different modes."""


@dataclass(frozen=True)
class DecayFitParams:
    """Parameters of the decaying-sinusoid trace model; the amplitude,
    period, offset and decay magnitude are all strictly positive."""

    b1: float
    b2: float
    b3: float
    b4: float
    b5: float

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return (self.b1 * np.exp(self.b5 * t)
                * np.sin(2 * np.pi * t / self.b2 + 2 * np.pi / self.b3)
                + self.b4)


@dataclass
class FitResult:
    params: DecayFitParams | None
    eigenvalue: complex | None
    success: bool
    residual: float
    message: str


def _initial_guess(t: np.ndarray, y: np.ndarray) -> np.ndarray | None:
    """Heuristic start: dominant FFT frequency for the period, extrema
    envelope slope for the decay, tail mean for the offset."""
    d = y - y.mean()
    if np.max(np.abs(d)) <= 0.0:
        return None
    dt = t[1] - t[0]
    spec = np.abs(np.fft.rfft(d))
    freqs = np.fft.rfftfreq(len(d), d=dt)
    k = 1 + int(np.argmax(spec[1:]))
    if freqs[k] <= 0:
        return None
    b2 = 1.0 / freqs[k]
    omega = 2 * np.pi / b2

    # envelope decay from local extrema magnitudes
    interior = np.arange(1, len(d) - 1)
    is_ext = ((d[interior] - d[interior - 1]) * (d[interior + 1] - d[interior])
              < 0)
    ext_idx = interior[is_ext]
    ext_amp = np.abs(d[ext_idx])
    keep = ext_amp > 1e-12 * np.max(np.abs(d))
    if keep.sum() >= 2:
        slope = np.polyfit(t[ext_idx[keep]], np.log(ext_amp[keep]), 1)[0]
    else:
        half = len(d) // 2
        r1 = np.sqrt(np.mean(d[:half] ** 2)) + 1e-300
        r2 = np.sqrt(np.mean(d[half:] ** 2)) + 1e-300
        slope = np.log(r2 / r1) / (t[half] - t[0] + 1e-300)
    b5 = min(slope, -1e-4)

    tail = max(1, len(y) // 10)
    b4 = float(np.mean(y[-tail:]))
    first = max(3, min(len(d), int(round(b2 / dt))))
    b1 = 0.5 * float(d[:first].max() - d[:first].min())
    if b1 <= 0:
        b1 = float(np.max(np.abs(d)))
    phase = float(np.arctan2(np.sum(d * np.cos(omega * t)),
                             np.sum(d * np.sin(omega * t))))
    return np.array([np.log(b1), np.log(b2), phase, b4, np.log(-b5)])


def _unpack(theta: np.ndarray) -> tuple[float, float, float, float, float]:
    # b1, b2 positive and b5 negative by construction (log scale); the
    # phase and the offset b4 are unconstrained.
    th = np.clip(theta, -60.0, 60.0)
    return (float(np.exp(th[0])), float(np.exp(th[1])), float(th[2]),
            float(th[3]), float(-np.exp(th[4])))


def fit_eigenvalue(times: np.ndarray, trace: np.ndarray,
                   window: tuple[float, float], seed: int = 0,
                   restarts: int = 5) -> FitResult:
    """Fit the decaying-sinusoid model on a time window of a trace.

    The phase is optimized as a free angle and reported through the
    b3 = 2 pi / phase convention afterwards (phase folded into (0, 2 pi]),
    which keeps the optimizer away from the b3 -> infinity singularity at
    zero phase.  Multi-start Nelder-Mead; the lowest residual wins.
    """
    times = np.asarray(times, dtype=float)
    trace = np.asarray(trace, dtype=float)
    t_s, t_f = window
    mask = (times >= t_s - 1e-12) & (times <= t_f + 1e-12)
    if mask.sum() < 20:
        raise WindowError(
            f"window [{t_s}, {t_f}] covers {int(mask.sum())} slices; "
            "at least 20 required")
    t = times[mask]
    y_raw = trace[mask]
    if not np.all(np.isfinite(y_raw)):
        return FitResult(None, None, False, np.inf,
                         "trace contains non-finite values in the window")

    # Standardize so the objective and the optimizer tolerances are
    # scale-free: traces arrive in arbitrary units (fractions, densities)
    # and absolute tolerances would otherwise never trigger on large ones.
    shift = float(y_raw.mean())
    scale = float(y_raw.std())
    if scale == 0.0:
        return FitResult(None, None, False, 0.0,
                         "oscillation amplitude indistinguishable from 0")
    y = (y_raw - shift) / scale

    theta0 = _initial_guess(t, y)
    if theta0 is None:
        return FitResult(None, None, False,
                         float(np.sum((y_raw - shift) ** 2)),
                         "oscillation amplitude indistinguishable from 0")

    def objective(theta: np.ndarray) -> float:
        b1, b2, phase, b4, b5 = _unpack(theta)
        model = b1 * np.exp(b5 * t) * np.sin(2 * np.pi * t / b2 + phase) + b4
        r = y - model
        return float(r @ r)

    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + rng.normal(0.0, 0.1, size=5)
                         for _ in range(restarts)]
    best = None
    for s in starts:
        # standardized data keeps the objective O(n), so these absolute
        # tolerances sit well above float64 evaluation noise (~f * 1e-16)
        # yet far below any statistical uncertainty in the fit
        res = minimize(objective, s, method="Nelder-Mead",
                       options={"maxiter": 4000, "maxfev": 8000,
                                "xatol": 1e-9, "fatol": 1e-12,
                                "adaptive": True})
        if best is None or res.fun < best.fun:
            best = res
    b1, b2, phase, b4, b5 = _unpack(best.x)
    ok = bool(best.success) and np.isfinite(best.fun)
    msg = "" if ok else "optimizer did not converge"
    if b1 <= 1e-12 * max(1.0, abs(b4)):
        ok = False
        msg = "oscillation amplitude indistinguishable from 0"
    # map amplitude, offset and residual back to the trace's own units
    b1 *= scale
    b4 = b4 * scale + shift
    folded = phase % (2 * np.pi)
    if folded == 0.0:
        folded = 2 * np.pi
    params = DecayFitParams(b1=b1, b2=b2, b3=2 * np.pi / folded, b4=b4, b5=b5)
    lam = complex(b5, 2 * np.pi / b2)
    return FitResult(params=params, eigenvalue=lam, success=ok,
                     residual=float(best.fun) * scale * scale, message=msg)


def aggregate_eigenvalue(fits: list[FitResult]) -> tuple[complex, int]:
    """Average decay rates and angular frequencies over successful fits."""
    good = [f for f in fits if f.success and f.params is not None]
    if not good:
        raise RuntimeError("no successful trace fits to aggregate")
    mu = float(np.mean([f.params.b5 for f in good]))
    om = float(np.mean([2 * np.pi / f.params.b2 for f in good]))
    return complex(mu, om), len(good)


def parabolic_spectrum(lam1: complex, count: int) -> list[complex]:
    """Higher-mode guesses lam_k ~ mu1 k^2 + i omega1 k, the exact pattern
    of pure rotational phase diffusion, used as a multi-mode ansatz."""
    if lam1.real >= 0 or lam1.imag <= 0:
        raise ValueError("lam1 must have negative real and positive "
                         "imaginary part")
    return [complex(lam1.real * k * k, lam1.imag * k)
            for k in range(1, count + 1)]


def design_matrix(times: np.ndarray, eigenvalues: list[complex],
                  row_weighted: bool = False) -> np.ndarray:
    """Columns exp(mu_k t) cos(w_k t), -exp(mu_k t) sin(w_k t) per mode.

    With row_weighted (single mode only) the decay factor moves to the
    right-hand side instead: rows are premultiplied by exp(-mu1 t), so
    the columns reduce to plain cos/-sin.  The growth of that weight is
    capped at 1e12.
    """
    times = np.asarray(times, dtype=float)
    m = len(eigenvalues)
    a = np.empty((len(times), 2 * m))
    for k, lam in enumerate(eigenvalues):
        envelope = np.exp(lam.real * times)
        a[:, 2 * k] = envelope * np.cos(lam.imag * times)
        a[:, 2 * k + 1] = -envelope * np.sin(lam.imag * times)
    if row_weighted:
        if m != 1:
            raise ValueError("row weighting applies to single-mode solves")
        w = np.exp(-eigenvalues[0].real * times)
        if np.max(w) > 1e12:
            raise OverflowError(
                "row weight exp(-mu1 t) exceeds 1e12 on this window; "
                "shorten the window or disable row weighting")
        a = a * w[:, None]
    return a


@dataclass
class EigenEstimate:
    """Eigenfunction values at the training boxes for each fitted mode.

    values[i, k] is the complex estimate at box i for eigenvalue
    eigenvalues[k]; the slowest mode comes first.
    """

    kind: str
    eigenvalues: list[complex]
    values: np.ndarray
    box_ids: np.ndarray
    window: tuple[float, float]
    residuals: np.ndarray

    def __post_init__(self):
        lam1 = self.eigenvalues[0]
        if not (lam1.real < 0 and lam1.imag > 0):
            raise ValueError(
                "leading eigenvalue must decay (Re < 0) and oscillate "
                f"(Im > 0); got {lam1}")
        if any(abs(l.real) < abs(lam1.real) - 1e-12
               for l in self.eigenvalues[1:]):
            raise ValueError("eigenvalues must lead with the slowest mode")

    def save_csv(self, path, centers: np.ndarray) -> None:
        m = len(self.eigenvalues)
        cols = ["box_id"] + [f"x{d+1}" for d in range(centers.shape[1])]
        for k in range(m):
            cols += [f"re{k+1}", f"im{k+1}"]
        cols.append("residual")
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for i, bid in enumerate(self.box_ids):
                row = [str(int(bid))]
                row += [repr(float(c)) for c in centers[i]]
                for k in range(m):
                    row += [repr(float(self.values[i, k].real)),
                            repr(float(self.values[i, k].imag))]
                row.append(repr(float(self.residuals[i])))
                fh.write(",".join(row) + "\n")


def load_eigenestimate_csv(path, kind: str, eigenvalues: list[complex],
                           window: tuple[float, float]) -> tuple[
                               EigenEstimate, np.ndarray]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    m = len(eigenvalues)
    n_dim = sum(1 for name in data.dtype.names if name.startswith("x"))
    ids = data["box_id"].astype(np.int64)
    centers = np.stack([data[f"x{d+1}"] for d in range(n_dim)], axis=-1)
    values = np.empty((len(ids), m), dtype=complex)
    for k in range(m):
        values[:, k] = data[f"re{k+1}"] + 1j * data[f"im{k+1}"]
    est = EigenEstimate(kind=kind, eigenvalues=eigenvalues, values=values,
                        box_ids=ids, window=window,
                        residuals=np.asarray(data["residual"]))
    return est, centers


def solve_eigenfunction_lsq(density: DensityMatrix, p0,
                            eigenvalues: list[complex],
                            window: tuple[int, int],
                            row_weighted: bool = False) -> EigenEstimate:
    """Recover complex eigenfunction values per box by least squares.

    Parameters
    ----------
    density : data matrix from the forward or backward estimator.
    p0 : stationary offset subtracted from every entry; per-box array
        for forward data, scalar region mass for backward data.
    eigenvalues : fitted modes, slowest first; each contributes a
        cos/sin column pair carrying its decay envelope.
    window : inclusive (start, stop) slice indices into density.times.
    row_weighted : single-mode variant that scales rows by the inverse
        envelope instead (equivalent solution in exact arithmetic).
    """
    s, e = window
    n_t = density.values.shape[0]
    if not (0 <= s < e < n_t):
        raise WindowError(f"window indices ({s}, {e}) invalid for {n_t} slices")
    m = len(eigenvalues)
    n_win = e - s + 1
    if n_win < 2 * m:
        raise WindowError(
            f"window holds {n_win} slices; {2 * m} needed for {m} modes")
    t = density.times[s:e + 1]
    lam1 = eigenvalues[0]
    if lam1.imag * (t[-1] - t[0]) < np.pi:
        raise WindowError(
            f"window [{t[0]:.6g}, {t[-1]:.6g}] spans less than half an "
            "oscillation period; eigenfunction phases are unidentifiable")
    rhs = density.values[s:e + 1] - np.asarray(p0)
    a = design_matrix(t, eigenvalues, row_weighted=row_weighted)
    if row_weighted:
        rhs = rhs * np.exp(-lam1.real * t)[:, None]
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    if diag.min() < 1e-12 * max(diag.max(), 1e-300):
        raise RankDeficiencyError(
            f"design matrix rank-deficient on window [{t[0]:.6g}, "
            f"{t[-1]:.6g}]; modes are not separable there")
    coef = solve_triangular(r, q.T @ rhs)
    values = (coef[0::2] + 1j * coef[1::2]).T.copy()
    residuals = np.linalg.norm(a @ coef - rhs, axis=0)
    return EigenEstimate(kind=density.kind, eigenvalues=list(eigenvalues),
                         values=values, box_ids=density.box_ids.copy(),
                         window=(float(t[0]), float(t[-1])),
                         residuals=residuals)


def rescale_biorthonormal(p_values: np.ndarray, q_values: np.ndarray,
                          delta: float) -> tuple[np.ndarray, complex]:
    """Rescale forward-mode values so the discrete pairing with the
    backward values is 1: c = sum_i P_i Q_i delta, then P <- P / c.

    The pairing multiplies the stored values directly: the backward
    estimates already are the conjugated family that is biorthogonal to
    the forward one, so no further conjugation enters the sum.
    """
    c = complex(np.sum(p_values * q_values) * delta)
    if abs(c) < 1e-12:
        raise NearOrthogonalError(
            f"pairing magnitude {abs(c):.3e} below 1e-12: the two routes "
            "likely estimated different modes")
    return p_values / c, c


def align_global_phase(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate u by the unit phase minimizing ||e^{i theta} u - v||_2."""
    s = complex(np.sum(u * np.conj(v)))
    if s == 0:
        return u.copy()
    return u * np.exp(-1j * np.angle(s))


def relative_l2_error(u: np.ndarray, v: np.ndarray) -> float:
    """||u - v|| / ||v|| over the common points."""
    denom = np.linalg.norm(v)
    if denom == 0:
        return float(np.linalg.norm(u))
    return float(np.linalg.norm(u - v) / denom)


def phase_winding(values: np.ndarray) -> float:
    """Net winding number of arg(values) along a closed loop.

    The loop is traversed in array order (the first point is appended as
    the closing segment); increments are wrapped to (-pi, pi], so the
    result counts full turns of the phase.
    """
    v = np.asarray(values)
    if len(v) < 3:
        raise ValueError("a loop needs at least 3 points")
    ang = np.angle(np.concatenate([v, v[:1]]))
    inc = np.diff(ang)
    inc = (inc + np.pi) % (2 * np.pi) - np.pi
    return float(np.sum(inc) / (2 * np.pi))


def lemma_error_scan(lam: complex, beta0: np.ndarray, *,
                     window_starts: tuple[float, ...] = (1.0,),
                     slice_counts: tuple[int, ...] = (1000,),
                     window_length: float = 10.0,
                     noise_scale: float = 0.0,
                     high_mode: tuple[float, float, float] | None = None,
                     replicates: int = 64,
                     seed: int = 0) -> list[dict]:
    """Synthetic study of the least-squares error sources.

    Generates traces  y = X beta0 + y_noise + y_high  on windows
    [T_s, T_s + window_length] with N equispaced slices, where X is the
    single-mode design for lam, y_noise is white with the given scale,
    and y_high (when present) is a faster-decaying contaminant
    c exp(mu_hat t) cos(omega_hat t + phi) averaged over phases phi.
    Returns one record per (T_s, N) with the mean coefficient error.
    """
    rng = np.random.default_rng(seed)
    records = []
    for t_s in window_starts:
        for n in slice_counts:
            t = np.linspace(t_s, t_s + window_length, n)
            x = design_matrix(t, [lam])
            q, r = np.linalg.qr(x)
            clean = x @ beta0
            errs = []
            for rep in range(replicates):
                y = clean.copy()
                if noise_scale > 0:
                    y = y + rng.normal(0.0, noise_scale, size=n)
                if high_mode is not None:
                    mu_hat, omega_hat, amp = high_mode
                    phi = 2 * np.pi * rep / replicates
                    y = y + amp * np.exp(mu_hat * t) * np.cos(
                        omega_hat * t + phi)
                beta = solve_triangular(r, q.T @ y)
                errs.append(np.linalg.norm(beta - beta0))
            records.append({"t_start": float(t_s), "n_slices": int(n),
                            "error": float(np.mean(errs))})
    return records
