"""Physics-informed refinement of estimated eigenfunctions.

A two-output tanh network (real and imaginary eigenfunction parts) is
trained on the sum of an operator-residual penalty at reference points
and a least-squares misfit against the box-level estimates at training
points.  For the complex eigenvalue lam = mu + i omega the split-real
residuals read

    r_R = L[N_R] - mu N_R + omega N_I,
    r_I = L[N_I] - mu N_I - omega N_R,

where L is the forward or backward operator.

The derivative engine is self-contained: values, input-gradients and
input-Hessians propagate forward layer by layer with closed-form tanh
derivatives, and parameter gradients come from reverse accumulation over
that same graph.  No finite differences are used anywhere in training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import SdeModel, operator_coefficients

_MAGIC = b"OSCMLP1\n"


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class MlpParams:
    """Tanh multilayer perceptron with input standardization.

    The network evaluates N(z) with z = (x - center) / half_width, so raw
    domain coordinates map into [-1, 1]^n; all reported derivatives are
    with respect to the raw coordinates (the affine map is chain-ruled
    in).  Output dimension is always 2: (real part, imaginary part).
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        if self.widths[-1] != 2:
            raise ValueError("output dimension must be exactly 2")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l], self.widths[l + 1]):
                raise ValueError(f"weight {l} has shape {w.shape}, expected "
                                 f"{(self.widths[l], self.widths[l + 1])}")
            if b.shape != (self.widths[l + 1],):
                raise ValueError(f"bias {l} shape mismatch")

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.widths),
                         [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         self.center.copy(), self.half_width.copy())

    def save(self, path) -> None:
        header = {
            "version": 1,
            "widths": self.widths,
            "center": [repr(float(v)) for v in self.center],
            "half_width": [repr(float(v)) for v in self.half_width],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for w, b in zip(self.weights, self.biases):
                fh.write(np.ascontiguousarray(w, dtype=np.float64).tobytes())
                fh.write(np.ascontiguousarray(b, dtype=np.float64).tobytes())

    @classmethod
    def load(cls, path) -> "MlpParams":
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise ValueError(f"{path} is not a network parameter file")
            hlen = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(hlen))
            if header.get("version") != 1:
                raise ValueError("unsupported network file version")
            widths = header["widths"]
            weights, biases = [], []
            for l in range(len(widths) - 1):
                w = np.frombuffer(fh.read(8 * widths[l] * widths[l + 1]),
                                  dtype=np.float64)
                weights.append(w.reshape(widths[l], widths[l + 1]).copy())
                b = np.frombuffer(fh.read(8 * widths[l + 1]),
                                  dtype=np.float64)
                biases.append(b.copy())
        return cls(widths=widths, weights=weights, biases=biases,
                   center=np.asarray([float(v) for v in header["center"]]),
                   half_width=np.asarray(
                       [float(v) for v in header["half_width"]]))


def default_hidden(dim: int) -> list[int]:
    """Four tanh layers; narrower in four dimensions where the Hessian
    propagation cost grows quadratically with input count."""
    return [12] * 4 if dim >= 4 else [32] * 4


def init_mlp(n_inputs: int, hidden: Sequence[int], lows, highs,
             seed: int = 0) -> MlpParams:
    """Fan-in-scaled uniform initialization, standardizing the domain
    box [lows, highs] onto [-1, 1]^n."""
    widths = [n_inputs] + list(hidden) + [2]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(widths) - 1):
        bound = 1.0 / np.sqrt(widths[l])
        weights.append(rng.uniform(-bound, bound,
                                   size=(widths[l], widths[l + 1])))
        biases.append(np.zeros(widths[l + 1]))
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    return MlpParams(widths=widths, weights=weights, biases=biases,
                     center=(lows + highs) / 2, half_width=(highs - lows) / 2)


# ---------------------------------------------------------------------------
# forward pass with input-derivative propagation and its reverse sweep


def _forward_tape(params: MlpParams, x: np.ndarray, order: int):
    """Propagate (value, input-gradient, input-Hessian) through the net.

    Returns the output triplet and a tape of per-layer intermediates for
    the reverse sweep.  ``order`` 0 skips all derivative carrying.
    """
    x = np.asarray(x, dtype=float)
    b, n = x.shape
    a = (x - params.center) / params.half_width
    j = h = None
    if order >= 1:
        j = np.zeros((b, n, n))
        j[:, np.arange(n), np.arange(n)] = 1.0 / params.half_width
    if order >= 2:
        h = np.zeros((b, n, n, n))
    tape = []
    n_layers = len(params.weights)
    for l, (w, bias) in enumerate(zip(params.weights, params.biases)):
        tape.append(("linear", a, j, h))
        a = a @ w + bias
        if order >= 1:
            j = np.einsum("bnw,wv->bnv", j, w, optimize=True)
        if order >= 2:
            h = np.einsum("bnmw,wv->bnmv", h, w, optimize=True)
        if l < n_layers - 1:
            s = np.tanh(a)
            t1 = 1.0 - s * s
            t2 = -2.0 * s * t1
            tape.append(("tanh", s, t1, t2, j, h))
            a = s
            if order >= 2:
                h = (t1[:, None, None, :] * h
                     + t2[:, None, None, :]
                     * j[:, :, None, :] * j[:, None, :, :])
            if order >= 1:
                j = t1[:, None, :] * j
    return a, j, h, tape


def _reverse_tape(params: MlpParams, tape, a_bar, j_bar, h_bar):
    """Accumulate parameter adjoints from output-triplet adjoints.

    Walks the tape backwards; a None j_bar/h_bar seeds a value-only
    (classic backprop) sweep for terms that never touch derivatives.
    """
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    layer = len(params.weights)
    for entry in reversed(tape):
        if entry[0] == "tanh":
            _, s, t1, t2, j_in, h_in = entry
            if h_bar is not None:
                t3 = -2.0 * (t1 * t1 + s * t2)
                term_j = np.einsum("bnw,bnw->bw", j_bar, j_in, optimize=True)
                term_h = np.einsum("bnmw,bnmw->bw", h_bar, h_in,
                                   optimize=True)
                term_jj = np.einsum("bnmw,bnw,bmw->bw", h_bar, j_in, j_in,
                                    optimize=True)
                a_new = a_bar * t1 + (term_j + term_h) * t2 + term_jj * t3
                sym = (np.einsum("bnmw,bmw->bnw", h_bar, j_in, optimize=True)
                       + np.einsum("bmnw,bmw->bnw", h_bar, j_in,
                                   optimize=True))
                j_bar = t1[:, None, :] * j_bar + t2[:, None, :] * sym
                h_bar = t1[:, None, None, :] * h_bar
                a_bar = a_new
            elif j_bar is not None:
                term_j = np.einsum("bnw,bnw->bw", j_bar, j_in, optimize=True)
                a_bar = a_bar * t1 + term_j * t2
                j_bar = t1[:, None, :] * j_bar
            else:
                a_bar = a_bar * t1
        else:
            _, a_in, j_in, h_in = entry
            layer -= 1
            w = params.weights[layer]
            gw = a_in.T @ a_bar
            if j_bar is not None:
                gw = gw + np.einsum("bnw,bnv->wv", j_in, j_bar,
                                    optimize=True)
            if h_bar is not None:
                gw = gw + np.einsum("bnmw,bnmv->wv", h_in, h_bar,
                                    optimize=True)
            grads_w[layer] = gw
            grads_b[layer] = a_bar.sum(axis=0)
            a_bar = a_bar @ w.T
            if j_bar is not None:
                j_bar = np.einsum("bnv,wv->bnw", j_bar, w, optimize=True)
            if h_bar is not None:
                h_bar = np.einsum("bnmv,wv->bnmw", h_bar, w, optimize=True)
    return grads_w, grads_b


def eval_with_derivatives(params: MlpParams, x: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Network outputs with exact input-gradients and input-Hessians.

    Returns (values (B, 2), gradients (B, n, 2), Hessians (B, n, n, 2)),
    all with respect to raw (unstandardized) coordinates.
    """
    a, j, h, _ = _forward_tape(params, x, order=2)
    return a, j, h


def evaluate_complex(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Field values N_R + i N_I without derivative overhead."""
    a, _, _, _ = _forward_tape(params, np.asarray(x, dtype=float), order=0)
    return a[:, 0] + 1j * a[:, 1]


# ---------------------------------------------------------------------------
# loss

def precompute_coefficients(model: SdeModel, points: np.ndarray, kind: str
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operator coefficients at the residual points, computed once; they
    depend only on the model, never on the network."""
    return operator_coefficients(model, np.asarray(points, dtype=float), kind)


def loss_and_grad(params: MlpParams, lam: complex,
                  x_batch: np.ndarray | None, x_targets: np.ndarray | None,
                  y_batch: np.ndarray | None,
                  y_coeffs: tuple[np.ndarray, np.ndarray, np.ndarray] | None,
                  ) -> tuple[dict, list[np.ndarray], list[np.ndarray]]:
    """Evaluate the four loss terms and their exact parameter gradients.

    Either batch may be None to evaluate only the other contribution
    (used by the alternating update mode and by residual-only metrics).
    Loss terms: operator residual means over the reference batch plus
    squared data misfits (real and imaginary) over the training batch.
    """
    mu, om = lam.real, lam.imag
    terms = {"residual_r": 0.0, "residual_i": 0.0,
             "data_r": 0.0, "data_i": 0.0}
    zw = [np.zeros_like(w) for w in params.weights]
    zb = [np.zeros_like(b) for b in params.biases]

    if y_batch is not None and len(y_batch):
        c0, c1, c2 = y_coeffs
        a, j, h, tape = _forward_tape(params, y_batch, order=2)
        batch = len(y_batch)
        apply_r = (c0 * a[:, 0]
                   + np.einsum("bn,bn->b", c1, j[:, :, 0], optimize=True)
                   + np.einsum("bnm,bnm->b", c2, h[:, :, :, 0],
                               optimize=True))
        apply_i = (c0 * a[:, 1]
                   + np.einsum("bn,bn->b", c1, j[:, :, 1], optimize=True)
                   + np.einsum("bnm,bnm->b", c2, h[:, :, :, 1],
                               optimize=True))
        r_r = apply_r - mu * a[:, 0] + om * a[:, 1]
        r_i = apply_i - mu * a[:, 1] - om * a[:, 0]
        terms["residual_r"] = float(np.mean(r_r ** 2))
        terms["residual_i"] = float(np.mean(r_i ** 2))
        scale = 2.0 / batch
        a_bar = np.empty_like(a)
        a_bar[:, 0] = scale * (r_r * (c0 - mu) - r_i * om)
        a_bar[:, 1] = scale * (r_r * om + r_i * (c0 - mu))
        j_bar = np.empty_like(j)
        j_bar[:, :, 0] = scale * r_r[:, None] * c1
        j_bar[:, :, 1] = scale * r_i[:, None] * c1
        h_bar = np.empty_like(h)
        h_bar[:, :, :, 0] = scale * r_r[:, None, None] * c2
        h_bar[:, :, :, 1] = scale * r_i[:, None, None] * c2
        gw, gb = _reverse_tape(params, tape, a_bar, j_bar, h_bar)
        zw = [z + g for z, g in zip(zw, gw)]
        zb = [z + g for z, g in zip(zb, gb)]

    if x_batch is not None and len(x_batch):
        a, _, _, tape = _forward_tape(params, x_batch, order=0)
        batch = len(x_batch)
        d_r = a[:, 0] - x_targets.real
        d_i = a[:, 1] - x_targets.imag
        terms["data_r"] = float(np.mean(d_r ** 2))
        terms["data_i"] = float(np.mean(d_i ** 2))
        a_bar = (2.0 / batch) * np.stack([d_r, d_i], axis=1)
        gw, gb = _reverse_tape(params, tape, a_bar, None, None)
        zw = [z + g for z, g in zip(zw, gw)]
        zb = [z + g for z, g in zip(zb, gb)]

    terms["total"] = sum(terms.values())
    return terms, zw, zb


def operator_residual_mean(params: MlpParams, lam: complex,
                           points: np.ndarray,
                           coeffs: tuple[np.ndarray, np.ndarray, np.ndarray]
                           ) -> float:
    """Mean squared operator residual (both parts) over a point set."""
    terms, _, _ = loss_and_grad(params, lam, None, None, points, coeffs)
    return terms["residual_r"] + terms["residual_i"]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and batching settings.

    update_mode "summed" applies one step on the summed gradients of the
    residual and data terms each iteration; "alternating" takes separate
    steps on the two terms on alternating iterations.
    """

    epochs: int = 30
    batch_x: int = 256
    batch_y: int = 1024
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    update_mode: str = "summed"

    def __post_init__(self):
        if self.update_mode not in ("summed", "alternating"):
            raise ValueError("update_mode must be 'summed' or 'alternating'")
        if min(self.epochs, self.batch_x, self.batch_y) < 1:
            raise ValueError("epochs and batch sizes must be positive")


class _Adam:
    def __init__(self, params: MlpParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m_w = [np.zeros_like(w) for w in params.weights]
        self.v_w = [np.zeros_like(w) for w in params.weights]
        self.m_b = [np.zeros_like(b) for b in params.biases]
        self.v_b = [np.zeros_like(b) for b in params.biases]
        self.t = 0

    def step(self, params: MlpParams, gw, gb) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for store_m, store_v, grads, target in (
                (self.m_w, self.v_w, gw, params.weights),
                (self.m_b, self.v_b, gb, params.biases)):
            for i, g in enumerate(grads):
                store_m[i] = c.beta1 * store_m[i] + (1 - c.beta1) * g
                store_v[i] = c.beta2 * store_v[i] + (1 - c.beta2) * g * g
                m_hat = store_m[i] / corr1
                v_hat = store_v[i] / corr2
                target[i] = target[i] - c.learning_rate * m_hat / (
                    np.sqrt(v_hat) + c.eps)


def train(params: MlpParams, cfg: TrainConfig, model: SdeModel, kind: str,
          lam: complex, x_points: np.ndarray, x_targets: np.ndarray,
          y_points: np.ndarray, include_residual: bool = True
          ) -> tuple[MlpParams, list[dict]]:
    """Optimize the network; returns updated parameters and the loss
    history (one record per iteration).

    Each iteration draws a fresh batch from the training boxes (epoch
    permutations) and from the reference points (fresh subset), so both
    data streams reshuffle continuously.  ``include_residual`` False
    trains on the data terms alone, the baseline used to quantify how
    much the operator penalty improves the field.
    """
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    coeffs = precompute_coefficients(model, y_points, kind) \
        if include_residual else None
    n_x = len(x_points)
    iters_per_epoch = max(1, int(np.ceil(n_x / cfg.batch_x)))
    adam = _Adam(params, cfg)
    history: list[dict] = []
    first_total = None
    it = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_x)
        for chunk in range(iters_per_epoch):
            sel_x = perm[chunk * cfg.batch_x:(chunk + 1) * cfg.batch_x]
            if len(sel_x) == 0:
                continue
            xb = x_points[sel_x]
            xt = x_targets[sel_x]
            yb = yc = None
            if include_residual:
                sel_y = rng.choice(len(y_points),
                                   size=min(cfg.batch_y, len(y_points)),
                                   replace=False)
                yb = y_points[sel_y]
                yc = (coeffs[0][sel_y], coeffs[1][sel_y], coeffs[2][sel_y])
            if cfg.update_mode == "summed" or not include_residual:
                terms, gw, gb = loss_and_grad(params, lam, xb, xt, yb, yc)
                adam.step(params, gw, gb)
            else:
                # strict alternation: residual step, then data step on the
                # next iteration
                if it % 2 == 0:
                    terms, gw, gb = loss_and_grad(params, lam, None, None,
                                                  yb, yc)
                    extra, _, _ = loss_and_grad(params, lam, xb, xt, None,
                                                None)
                    terms.update({k: extra[k] for k in ("data_r", "data_i")})
                else:
                    terms, gw, gb = loss_and_grad(params, lam, xb, xt, None,
                                                  None)
                    extra, _, _ = loss_and_grad(params, lam, None, None, yb,
                                                yc)
                    terms.update({k: extra[k]
                                  for k in ("residual_r", "residual_i")})
                terms["total"] = (terms["residual_r"] + terms["residual_i"]
                                  + terms["data_r"] + terms["data_i"])
                adam.step(params, gw, gb)
            record = {"iteration": it, "epoch": epoch, **terms}
            history.append(record)
            if first_total is None:
                first_total = max(terms["total"], 1e-300)
            if (not np.isfinite(terms["total"])
                    or terms["total"] > 1e6 * max(first_total, 1.0)):
                raise TrainingDivergedError(
                    f"training diverged at iteration {it}: total loss "
                    f"{terms['total']:.3e}", history)
            it += 1
    return params, history


def save_history_csv(path, history: list[dict]) -> None:
    cols = ["iteration", "epoch", "residual_r", "residual_i",
            "data_r", "data_i", "total"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for rec in history:
            fh.write(",".join(repr(rec[c]) if isinstance(rec[c], float)
                              else str(rec[c]) for c in cols) + "\n")
