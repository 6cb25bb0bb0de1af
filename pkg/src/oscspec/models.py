"""Stochastic differential equation models and their generator operators.

Each model packages the drift ``f`` and diffusion ``g`` of an Ito SDE

    dX = f(X) dt + g(X) dW,      X in R^n,  W an m-dimensional Wiener process,

together with the analytic derivative fields needed to apply the forward
(Fokker-Planck) operator

    L[rho]  = -sum_i d_i(f_i rho) + 1/2 sum_ij d_i d_j (G_ij rho),

and its adjoint, the backward (Koopman generator) operator

    L*[u]   = sum_i f_i d_i u + 1/2 sum_ij G_ij d_i d_j u,

where ``G = g g^T``.  All callables are vectorized: they accept arrays of
shape ``(..., n)`` and return outputs with matching leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Array = np.ndarray


class NumericDomainError(ValueError):
    """Raised when an operator is applied to non-finite inputs."""


@dataclass(frozen=True)
class SdeModel:
    """Bundle of analytic fields defining an SDE and its generator.

    Attributes
    ----------
    name : str
        Identifier used by configs and presets.
    dim : int
        State dimension n.
    noise_dim : int
        Number of independent Wiener components m.
    drift : callable
        ``(..., n) -> (..., n)``, the drift field f.
    diffusion : callable
        ``(..., n) -> (..., n, m)``, the diffusion matrix g.
    drift_jacobian : callable
        ``(..., n) -> (..., n, n)``, entry [i, j] = d f_i / d x_j.
    diffusion_product : callable
        ``(..., n) -> (..., n, n)``, G = g g^T.
    diffusion_product_grad : callable
        ``(..., n) -> (..., n, n, n)``, entry [i, j, k] = d G_ij / d x_k.
    diffusion_product_hess : callable
        ``(..., n) -> (..., n, n)``, entry [i, j] = d^2 G_ij / d x_i d x_j
        (exactly the mixed second partials the forward operator needs).
    diffusion_is_constant : bool
        True when g does not depend on the state (enables fast stepping).
    diffusion_is_diagonal : bool
        True when g is square diagonal (enables fast stepping).
    params : dict
        The constructor parameters, for provenance in run summaries.
    """

    name: str
    dim: int
    noise_dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    diffusion_product: Callable[[Array], Array]
    diffusion_product_grad: Callable[[Array], Array]
    diffusion_product_hess: Callable[[Array], Array]
    diffusion_is_constant: bool = False
    diffusion_is_diagonal: bool = False
    params: dict[str, Any] = field(default_factory=dict)


def _require_finite(name: str, *arrays: Array) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"{name}: non-finite input")


def apply_backward_operator(model: SdeModel, grad_u: Array, hess_u: Array,
                            x: Array) -> Array:
    """Apply the Koopman generator L* to a function known through its
    gradient and Hessian at points x.

    Parameters
    ----------
    grad_u : (..., n) array
    hess_u : (..., n, n) array
    x : (..., n) array

    Returns
    -------
    (...,) array of L*[u](x) values.
    """
    _require_finite("apply_backward_operator", grad_u, hess_u, x)
    f = model.drift(x)
    g2 = model.diffusion_product(x)
    drift_term = np.einsum("...i,...i->...", f, grad_u)
    diff_term = 0.5 * np.einsum("...ij,...ij->...", g2, hess_u)
    return drift_term + diff_term


def apply_forward_operator(model: SdeModel, rho: Array, grad_rho: Array,
                           hess_rho: Array, x: Array) -> Array:
    """Apply the Fokker-Planck operator L to a density known pointwise
    with its gradient and Hessian.

    Expands the divergence form by the product rule, so only analytic
    derivatives of the model fields (never of rho beyond second order)
    are required:

        L[rho] = -(div f) rho - f . grad rho
                 + 1/2 [ (sum_ij d2 G_ij/dx_i dx_j) rho
                        + 2 sum_j (sum_i dG_ij/dx_i) d_j rho
                        + sum_ij G_ij d_i d_j rho ].
    """
    _require_finite("apply_forward_operator", rho, grad_rho, hess_rho, x)
    jac = model.drift_jacobian(x)
    f = model.drift(x)
    g2 = model.diffusion_product(x)
    g2_grad = model.diffusion_product_grad(x)
    g2_hess = model.diffusion_product_hess(x)

    div_f = np.einsum("...ii->...", jac)
    drift_term = -(div_f * rho + np.einsum("...i,...i->...", f, grad_rho))
    # sum_i dG_ij/dx_i, one entry per j; G symmetric makes the two
    # first-derivative product-rule terms equal.
    g2_div = np.einsum("...iji->...j", g2_grad)
    hess_sum = np.einsum("...ij->...", g2_hess)
    diff_term = 0.5 * (
        hess_sum * rho
        + 2.0 * np.einsum("...j,...j->...", g2_div, grad_rho)
        + np.einsum("...ij,...ij->...", g2, hess_rho)
    )
    return drift_term + diff_term


def operator_coefficients(model: SdeModel, x: Array, kind: str
                          ) -> tuple[Array, Array, Array]:
    """Pointwise coefficients (c0, c1, C2) such that the requested operator
    acts on a scalar field u as  c0*u + c1 . grad u + C2 : hess u.

    kind = "backward":  c0 = 0,                 c1 = f,                C2 = G/2
    kind = "forward":   c0 = -div f + (1/2) sum_ij d2 G_ij/dx_i dx_j,
                        c1_k = -f_k + sum_i dG_ik/dx_i,               C2 = G/2

    Useful for residual evaluation where the coefficients are fixed per
    point and the field varies (e.g. network training).
    """
    if kind not in ("forward", "backward"):
        raise ValueError(f"unknown operator kind: {kind!r}")
    _require_finite("operator_coefficients", x)
    f = model.drift(x)
    g2 = model.diffusion_product(x)
    c2 = 0.5 * g2
    if kind == "backward":
        c0 = np.zeros(x.shape[:-1])
        return c0, f, c2
    jac = model.drift_jacobian(x)
    g2_grad = model.diffusion_product_grad(x)
    g2_hess = model.diffusion_product_hess(x)
    c0 = -np.einsum("...ii->...", jac) + 0.5 * np.einsum("...ij->...", g2_hess)
    c1 = -f + np.einsum("...iki->...k", g2_grad)
    return c0, c1, c2


# ---------------------------------------------------------------------------
# constant-diffusion helpers

def _broadcast_const(mat: Array) -> Callable[[Array], Array]:
    mat = np.asarray(mat, dtype=float)

    def fn(x: Array) -> Array:
        shape = np.shape(x)[:-1] + mat.shape
        return np.broadcast_to(mat, shape)

    return fn


def _zeros_field(trailing: tuple[int, ...]) -> Callable[[Array], Array]:
    def fn(x: Array) -> Array:
        return np.zeros(np.shape(x)[:-1] + trailing)

    return fn


# ---------------------------------------------------------------------------
# model catalog


def StuartLandau2D(omega: float = 2.0, noise: float = 0.09473) -> SdeModel:
    """Planar limit-cycle oscillator with isotropic additive noise.

        dX = [-4 X (X^2 + Y^2 - 1) + omega Y] dt + sqrt(2 noise) dW1
        dY = [-4 Y (X^2 + Y^2 - 1) - omega X] dt + sqrt(2 noise) dW2

    The drift is the sum of a gradient part -grad V, V = (x^2+y^2-1)^2,
    and a solenoidal rotation, so the stationary density is known in
    closed form: P0 proportional to exp(-V/noise).
    """
    w = float(omega)
    d = float(noise)
    if d < 0:
        raise ValueError("noise must be nonnegative")

    def drift(x: Array) -> Array:
        a = x[..., 0]
        b = x[..., 1]
        r = a * a + b * b - 1.0
        return np.stack([-4.0 * a * r + w * b, -4.0 * b * r - w * a], axis=-1)

    def drift_jacobian(x: Array) -> Array:
        a = x[..., 0]
        b = x[..., 1]
        r = a * a + b * b - 1.0
        j11 = -4.0 * r - 8.0 * a * a
        j12 = -8.0 * a * b + w
        j21 = -8.0 * a * b - w
        j22 = -4.0 * r - 8.0 * b * b
        return np.stack([
            np.stack([j11, j12], axis=-1),
            np.stack([j21, j22], axis=-1),
        ], axis=-2)

    g = np.sqrt(2.0 * d) * np.eye(2)
    return SdeModel(
        name="stuart_landau",
        dim=2,
        noise_dim=2,
        drift=drift,
        diffusion=_broadcast_const(g),
        drift_jacobian=drift_jacobian,
        diffusion_product=_broadcast_const(g @ g.T),
        diffusion_product_grad=_zeros_field((2, 2, 2)),
        diffusion_product_hess=_zeros_field((2, 2)),
        diffusion_is_constant=True,
        diffusion_is_diagonal=True,
        params={"omega": w, "noise": d},
    )


def stuart_landau_stationary(noise: float = 0.09473
                             ) -> Callable[[Array], Array]:
    """Unnormalized closed-form stationary density of StuartLandau2D."""
    d = float(noise)

    def p0(x: Array) -> Array:
        r = x[..., 0] ** 2 + x[..., 1] ** 2 - 1.0
        return np.exp(-r * r / d)

    return p0


def Lorenz3D(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0,
             noise: float = 5.0) -> SdeModel:
    """Chaotic Lorenz flow driven by isotropic additive noise sqrt(2 noise)."""
    s, r, b, d = float(sigma), float(rho), float(beta), float(noise)

    def drift(x: Array) -> Array:
        a, y, z = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([s * (y - a), a * (r - z) - y, a * y - b * z], axis=-1)

    def drift_jacobian(x: Array) -> Array:
        a, y, z = x[..., 0], x[..., 1], x[..., 2]
        one = np.ones_like(a)
        zero = np.zeros_like(a)
        return np.stack([
            np.stack([-s * one, s * one, zero], axis=-1),
            np.stack([r - z, -one, -a], axis=-1),
            np.stack([y, a, -b * one], axis=-1),
        ], axis=-2)

    g = np.sqrt(2.0 * d) * np.eye(3)
    return SdeModel(
        name="lorenz",
        dim=3,
        noise_dim=3,
        drift=drift,
        diffusion=_broadcast_const(g),
        drift_jacobian=drift_jacobian,
        diffusion_product=_broadcast_const(g @ g.T),
        diffusion_product_grad=_zeros_field((3, 3, 3)),
        diffusion_product_hess=_zeros_field((3, 3)),
        diffusion_is_constant=True,
        diffusion_is_diagonal=True,
        params={"sigma": s, "rho": r, "beta": b, "noise": d},
    )


def OrnsteinUhlenbeck(a_matrix: Array, sigma: Array) -> SdeModel:
    """Linear SDE dX = A X dt + Sigma dW with constant Sigma.

    Serves as the analytic oracle: when A has eigenvalues mu +- i omega,
    the slowest Koopman eigenfunction is the linear form w^T x built from
    the corresponding eigenvector w of A^T, with eigenvalue mu + i omega.
    """
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("A must be square")
    if sig.shape[0] != n:
        raise ValueError("Sigma row count must match A")

    def drift(x: Array) -> Array:
        return np.einsum("ij,...j->...i", a, x)

    return SdeModel(
        name="ornstein_uhlenbeck",
        dim=n,
        noise_dim=sig.shape[1],
        drift=drift,
        diffusion=_broadcast_const(sig),
        drift_jacobian=_broadcast_const(a),
        diffusion_product=_broadcast_const(sig @ sig.T),
        diffusion_product_grad=_zeros_field((n, n, n)),
        diffusion_product_hess=_zeros_field((n, n)),
        diffusion_is_constant=True,
        diffusion_is_diagonal=bool(
            sig.shape[0] == sig.shape[1]
            and np.allclose(sig, np.diag(np.diag(sig)))),
        params={"a_matrix": a.tolist(), "sigma": sig.tolist()},
    )


def ou_stationary_covariance(model: SdeModel) -> Array:
    """Solve A C + C A^T + Sigma Sigma^T = 0 for the stationary covariance."""
    from scipy.linalg import solve_lyapunov

    a = np.asarray(model.params["a_matrix"], dtype=float)
    sig = np.asarray(model.params["sigma"], dtype=float)
    return solve_lyapunov(a, -sig @ sig.T)


def ou_leading_eigenpair(model: SdeModel) -> tuple[complex, Array]:
    """Slowest oscillatory Koopman eigenvalue of an OU model and the
    coefficient vector w of its exact linear eigenfunction Q(x) = w^T x."""
    a = np.asarray(model.params["a_matrix"], dtype=float)
    vals, vecs = np.linalg.eig(a.T)
    order = np.argsort(-vals.real)
    vals, vecs = vals[order], vecs[:, order]
    for k in range(len(vals)):
        if vals[k].imag > 0:
            return complex(vals[k]), vecs[:, k]
    raise ValueError("A has no complex eigenvalue pair; not oscillatory")


@dataclass(frozen=True)
class MorrisLecarParams:
    """Conductance-based neuron pair parameters (Hopf-regime defaults).

    ``iota`` rescales time so one oscillation spans a few model time units;
    voltages keep their physiological range.  Noise: additive voltage terms
    with intensities d_v1/d_v2 plus multiplicative channel terms on the
    gating variables with amplitudes eps1/eps2.
    """

    cap: float = 20.0
    g_leak: float = 2.0
    v_leak: float = -60.0
    g_k: float = 8.0
    v_k: float = -84.0
    g_ca: float = 4.0
    v_ca: float = 120.0
    v1: float = -1.2
    v2: float = 18.0
    v3: float = 2.0
    v4: float = 30.0
    phi: float = 0.04
    current: float = 100.0
    iota: float = 20.0
    kappa: float = 0.0
    d_v1: float = 15.0
    d_v2: float = 50.0
    eps1: float = 0.3
    eps2: float = 1.0


def MorrisLecar4D(params: MorrisLecarParams | None = None, **overrides
                  ) -> SdeModel:
    """Pair of gap-junction-coupled conductance-based neurons.

    State x = (V1, N1, V2, N2).  Per oscillator:

        dV = iota/cap [ current - g_leak (V - v_leak) - g_k N (V - v_k)
                        - g_ca m_inf(V) (V - v_ca) + kappa (V_other - V) ] dt
             + sqrt(2 d_v) dW_v
        dN = iota [ alpha(V) (1 - N) - beta(V) N ] dt
             + eps sqrt(max(alpha(V)(1-N) + beta(V) N, 0)) dW_n

    with m_inf(V) = (1 + tanh((V - v1)/v2)) / 2 and opening/closing rates

        alpha(V) = phi cosh((V - v3)/(2 v4)) (1 + tanh((V - v3)/v4)) / 2
        beta(V)  = phi cosh((V - v3)/(2 v4)) (1 - tanh((V - v3)/v4)) / 2.

    The channel-noise radicand is clamped at zero so excursions of N
    outside [0, 1] keep the diffusion real.
    """
    if params is None:
        params = MorrisLecarParams(**overrides)
    elif overrides:
        raise ValueError("pass either a params object or keyword overrides")
    p = params

    def m_inf(v):
        return 0.5 * (1.0 + np.tanh((v - p.v1) / p.v2))

    def m_inf_prime(v):
        return 0.5 / (p.v2 * np.cosh((v - p.v1) / p.v2) ** 2)

    def rates(v):
        u = (v - p.v3) / p.v4
        c = np.cosh(0.5 * u)
        t = np.tanh(u)
        alpha = 0.5 * p.phi * c * (1.0 + t)
        beta = 0.5 * p.phi * c * (1.0 - t)
        return alpha, beta

    def rates_prime(v):
        u = (v - p.v3) / p.v4
        c = np.cosh(0.5 * u)
        s = np.sinh(0.5 * u)
        t = np.tanh(u)
        sech2 = 1.0 - t * t
        da = 0.5 * p.phi * (s * (1.0 + t) / (2.0 * p.v4) + c * sech2 / p.v4)
        db = 0.5 * p.phi * (s * (1.0 - t) / (2.0 * p.v4) - c * sech2 / p.v4)
        return da, db

    def _volt_drift(v, n, v_other):
        ionic = (p.current
                 - p.g_leak * (v - p.v_leak)
                 - p.g_k * n * (v - p.v_k)
                 - p.g_ca * m_inf(v) * (v - p.v_ca)
                 + p.kappa * (v_other - v))
        return p.iota / p.cap * ionic

    def drift(x: Array) -> Array:
        v1, n1, v2, n2 = (x[..., i] for i in range(4))
        a1, b1 = rates(v1)
        a2, b2 = rates(v2)
        return np.stack([
            _volt_drift(v1, n1, v2),
            p.iota * (a1 * (1.0 - n1) - b1 * n1),
            _volt_drift(v2, n2, v1),
            p.iota * (a2 * (1.0 - n2) - b2 * n2),
        ], axis=-1)

    def drift_jacobian(x: Array) -> Array:
        v1, n1, v2, n2 = (x[..., i] for i in range(4))
        out = np.zeros(x.shape[:-1] + (4, 4))
        for (iv, inn, vv, nn) in ((0, 1, v1, n1), (2, 3, v2, n2)):
            dvdv = p.iota / p.cap * (
                -p.g_leak - p.g_k * nn
                - p.g_ca * (m_inf_prime(vv) * (vv - p.v_ca) + m_inf(vv))
                - p.kappa)
            dvdn = p.iota / p.cap * (-p.g_k * (vv - p.v_k))
            da, db = rates_prime(vv)
            al, be = rates(vv)
            dndv = p.iota * (da * (1.0 - nn) - db * nn)
            dndn = -p.iota * (al + be)
            out[..., iv, iv] = dvdv
            out[..., iv, inn] = dvdn
            out[..., iv, 2 - iv] = p.iota / p.cap * p.kappa
            out[..., inn, iv] = dndv
            out[..., inn, inn] = dndn
        return out

    def _radicand(v, n):
        a, b = rates(v)
        return a * (1.0 - n) + b * n

    def diffusion(x: Array) -> Array:
        v1, n1, v2, n2 = (x[..., i] for i in range(4))
        out = np.zeros(x.shape[:-1] + (4, 4))
        out[..., 0, 0] = np.sqrt(2.0 * p.d_v1)
        out[..., 1, 1] = p.eps1 * np.sqrt(np.maximum(_radicand(v1, n1), 0.0))
        out[..., 2, 2] = np.sqrt(2.0 * p.d_v2)
        out[..., 3, 3] = p.eps2 * np.sqrt(np.maximum(_radicand(v2, n2), 0.0))
        return out

    def diffusion_product(x: Array) -> Array:
        v1, n1, v2, n2 = (x[..., i] for i in range(4))
        out = np.zeros(x.shape[:-1] + (4, 4))
        out[..., 0, 0] = 2.0 * p.d_v1
        out[..., 1, 1] = p.eps1 ** 2 * np.maximum(_radicand(v1, n1), 0.0)
        out[..., 2, 2] = 2.0 * p.d_v2
        out[..., 3, 3] = p.eps2 ** 2 * np.maximum(_radicand(v2, n2), 0.0)
        return out

    def diffusion_product_grad(x: Array) -> Array:
        v1, n1, v2, n2 = (x[..., i] for i in range(4))
        out = np.zeros(x.shape[:-1] + (4, 4, 4))
        for (iv, inn, vv, nn, eps) in ((0, 1, v1, n1, p.eps1),
                                       (2, 3, v2, n2, p.eps2)):
            live = _radicand(vv, nn) > 0.0
            da, db = rates_prime(vv)
            al, be = rates(vv)
            out[..., inn, inn, iv] = (eps ** 2) * live * (
                da * (1.0 - nn) + db * nn)
            out[..., inn, inn, inn] = (eps ** 2) * live * (be - al)
        return out

    # every G entry is constant or linear in the coordinate it is
    # differentiated against twice, so the summed second partials vanish
    return SdeModel(
        name="morris_lecar",
        dim=4,
        noise_dim=4,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=drift_jacobian,
        diffusion_product=diffusion_product,
        diffusion_product_grad=diffusion_product_grad,
        diffusion_product_hess=_zeros_field((4, 4)),
        diffusion_is_constant=False,
        diffusion_is_diagonal=True,
        params={k: getattr(p, k) for k in MorrisLecarParams.__dataclass_fields__},
    )


_BUILDERS: dict[str, Callable[..., SdeModel]] = {
    "stuart_landau": StuartLandau2D,
    "lorenz": Lorenz3D,
    "ornstein_uhlenbeck": OrnsteinUhlenbeck,
    "morris_lecar": MorrisLecar4D,
}


def build_model(name: str, params: dict[str, Any] | None = None) -> SdeModel:
    """Instantiate a catalog model by name with keyword parameters."""
    if name not in _BUILDERS:
        raise ValueError(
            f"unknown model {name!r}; available: {sorted(_BUILDERS)}")
    return _BUILDERS[name](**(params or {}))


def check_model_derivatives(model: SdeModel, points: Array,
                            step: float = 1e-6) -> dict[str, float]:
    """Central finite-difference consistency check of the analytic fields.

    Returns the max absolute discrepancy per field; intended for tests.
    """
    pts = np.atleast_2d(points)
    n = model.dim
    errs = {"drift_jacobian": 0.0, "diffusion_product_grad": 0.0}
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        df = (model.drift(pts + e) - model.drift(pts - e)) / (2 * step)
        jac = model.drift_jacobian(pts)[..., :, k]
        errs["drift_jacobian"] = max(errs["drift_jacobian"],
                                     float(np.max(np.abs(df - jac))))
        dg = (model.diffusion_product(pts + e)
              - model.diffusion_product(pts - e)) / (2 * step)
        gg = model.diffusion_product_grad(pts)[..., :, :, k]
        errs["diffusion_product_grad"] = max(
            errs["diffusion_product_grad"], float(np.max(np.abs(dg - gg))))
    # summed mixed second partials d2 G_ij / dx_i dx_j via nested differences
    hess = model.diffusion_product_hess(pts)
    fd = np.zeros_like(hess)
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = step
            ej[j] = step
            gpp = model.diffusion_product(pts + ei + ej)[..., i, j]
            gpm = model.diffusion_product(pts + ei - ej)[..., i, j]
            gmp = model.diffusion_product(pts - ei + ej)[..., i, j]
            gmm = model.diffusion_product(pts - ei - ej)[..., i, j]
            fd[..., i, j] = (gpp - gpm - gmp + gmm) / (4 * step * step)
    errs["diffusion_product_hess"] = float(np.max(np.abs(fd - hess)))
    gg = model.diffusion(pts)
    errs["diffusion_product"] = float(np.max(np.abs(
        np.einsum("...ik,...jk->...ij", gg, gg)
        - model.diffusion_product(pts))))
    return errs
