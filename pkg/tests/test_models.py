"""Model catalog: drift/diffusion fields, operator application, analytic oracles."""

import numpy as np
import pytest

from oscspec import (
    Lorenz3D,
    MorrisLecar4D,
    OrnsteinUhlenbeck,
    StuartLandau2D,
    apply_backward_operator,
    apply_forward_operator,
    build_model,
    check_model_derivatives,
    operator_coefficients,
    ou_leading_eigenpair,
    ou_stationary_covariance,
    stuart_landau_stationary,
)


def ou_spiral(mu=-0.4, omega=4.0, g=0.5):
    a = np.array([[mu, -omega], [omega, mu]])
    return OrnsteinUhlenbeck(a, g * np.eye(2))


# ---------------------------------------------------------------- catalog

def test_registry_builds_all_models():
    for name in ("stuart_landau", "lorenz", "ornstein_uhlenbeck", "morris_lecar"):
        params = None
        if name == "ornstein_uhlenbeck":
            params = {"a_matrix": [[-1.0, 0.0], [0.0, -1.0]],
                      "sigma": [[1.0, 0.0], [0.0, 1.0]]}
        model = build_model(name, params)
        assert model.dim >= 2
        x = np.zeros((3, model.dim)) + 0.1
        assert model.drift(x).shape == (3, model.dim)
        assert model.diffusion_product(x).shape == (3, model.dim, model.dim)


def test_registry_rejects_unknown_name():
    with pytest.raises(ValueError, match="unknown model"):
        build_model("van_der_pol")


def test_diffusion_product_is_psd_everywhere():
    rng = np.random.default_rng(0)
    for model in (StuartLandau2D(), Lorenz3D(), MorrisLecar4D(), ou_spiral()):
        x = rng.uniform(-1.0, 1.0, size=(20, model.dim))
        if model.name == "morris_lecar":
            x[:, 1] = rng.uniform(0.05, 0.95, size=20)
            x[:, 3] = rng.uniform(0.05, 0.95, size=20)
        g_mat = model.diffusion_product(x)
        assert np.allclose(g_mat, np.swapaxes(g_mat, 1, 2))
        eigs = np.linalg.eigvalsh(g_mat)
        assert eigs.min() >= -1e-12


# ----------------------------------------------- worked-example oracles

def test_stuart_landau_drift_at_unit_point():
    model = StuartLandau2D(omega=2.0, noise=0.0)
    f = model.drift(np.array([[1.0, 0.0]]))[0]
    np.testing.assert_allclose(f, [0.0, -2.0], atol=1e-14)


def test_backward_operator_on_radius_squared():
    # u = x^2 + y^2 at (1,0): the drift is tangent to the unit circle there,
    # so only the diffusion term survives: 4 * 0.09473.
    model = StuartLandau2D()
    x = np.array([[1.0, 0.0]])
    grad = np.array([[2.0, 0.0]])
    hess = np.array([[[2.0, 0.0], [0.0, 2.0]]])
    val = apply_backward_operator(model, grad, hess, x)
    np.testing.assert_allclose(val, [0.37892], rtol=1e-12)


def test_forward_operator_on_constant_density_is_minus_divergence():
    # For constant rho and constant diffusion the forward operator reduces to
    # -div(f) rho; the Lorenz drift has divergence -(sigma + 1 + beta).
    model = Lorenz3D(sigma=10.0, rho=28.0, beta=8.0 / 3.0)
    x = np.array([[1.0, 1.0, 1.0]])
    val = apply_forward_operator(
        model, np.array([1.0]), np.zeros((1, 3)), np.zeros((1, 3, 3)), x)
    np.testing.assert_allclose(val, [10.0 + 1.0 + 8.0 / 3.0], rtol=1e-12)


def test_linear_observable_is_exact_backward_eigenfunction():
    # u(x) = w.x with w a left eigenvector of the drift matrix: the Hessian
    # term vanishes and the backward operator acts as multiplication by the
    # eigenvalue.
    model = ou_spiral(mu=-0.3, omega=1.7, g=0.8)
    lam, w = ou_leading_eigenpair(model)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 2))
    grad = np.broadcast_to(w, (50, 2))
    hess = np.zeros((50, 2, 2))
    lhs_re = apply_backward_operator(model, grad.real, hess, x)
    lhs_im = apply_backward_operator(model, grad.imag, hess, x)
    np.testing.assert_allclose(lhs_re + 1j * lhs_im, lam * (x @ w), rtol=1e-10)


def test_ou_leading_eigenpair_matches_drift_spectrum():
    model = ou_spiral(mu=-0.4, omega=4.0)
    lam, w = ou_leading_eigenpair(model)
    assert lam == pytest.approx(-0.4 + 4.0j)
    a = np.array(model.params["a_matrix"])
    np.testing.assert_allclose(w @ a, lam * w, atol=1e-12)


def test_ou_stationary_covariance_solves_lyapunov():
    model = ou_spiral(mu=-0.25, omega=2.0, g=0.7)
    a = np.array(model.params["a_matrix"])
    cov = ou_stationary_covariance(model)
    sig = 0.7 * np.eye(2)
    residual = a @ cov + cov @ a.T + sig @ sig.T
    np.testing.assert_allclose(residual, np.zeros((2, 2)), atol=1e-12)


def test_stuart_landau_stationary_is_annihilated_by_forward_operator():
    noise = 0.09473
    model = StuartLandau2D(noise=noise)
    p0 = stuart_landau_stationary(noise)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1.6, 1.6, size=(40, 2))

    r2 = (pts ** 2).sum(axis=1)
    val = p0(pts)
    # p0 = exp(-(r^2-1)^2/D): grad_i = a * x_i with a = -4 (r^2-1) p0 / D,
    # and hess_ij = a delta_ij + x_i da_j by one more product rule.
    a_val = -4.0 * (r2 - 1.0) * val / noise
    grad = a_val[:, None] * pts
    da = -4.0 * (2.0 * val[:, None] * pts + (r2 - 1.0)[:, None] * grad) / noise
    hess = a_val[:, None, None] * np.eye(2)[None, :, :] \
        + pts[:, :, None] * da[:, None, :]

    out = apply_forward_operator(model, val, grad, hess, pts)
    assert np.max(np.abs(out)) < 1e-10 * max(1.0, np.max(np.abs(val)))


# ----------------------------------------------- derivative consistency

@pytest.mark.parametrize("factory", [
    StuartLandau2D,
    Lorenz3D,
    MorrisLecar4D,
    ou_spiral,
])
def test_analytic_derivatives_match_finite_differences(factory):
    model = factory()
    rng = np.random.default_rng(5)
    pts = rng.uniform(-0.8, 0.8, size=(30, model.dim))
    if model.name == "morris_lecar":
        pts[:, 0] = rng.uniform(-40.0, 20.0, size=30)
        pts[:, 2] = rng.uniform(-40.0, 20.0, size=30)
        pts[:, 1] = rng.uniform(0.1, 0.9, size=30)
        pts[:, 3] = rng.uniform(0.1, 0.9, size=30)
        report = check_model_derivatives(model, pts, step=1e-4)
    else:
        report = check_model_derivatives(model, pts)
    assert report["drift_jacobian"] < 1e-5
    assert report["diffusion_product_grad"] < 1e-5
    # Second derivatives of G lose more digits to cancellation in central
    # differences; the analytic values are exact for every catalog model.
    assert report["diffusion_product_hess"] < 1e-3


def test_backward_operator_linear_in_derivatives():
    model = StuartLandau2D()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(25, 2))
    g1, g2 = rng.normal(size=(2, 25, 2))
    h1, h2 = rng.normal(size=(2, 25, 2, 2))
    h1 = h1 + np.swapaxes(h1, 1, 2)
    h2 = h2 + np.swapaxes(h2, 1, 2)
    a, b = 1.37, -0.59
    lhs = apply_backward_operator(model, a * g1 + b * g2, a * h1 + b * h2, x)
    rhs = a * apply_backward_operator(model, g1, h1, x) \
        + b * apply_backward_operator(model, g2, h2, x)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_operator_coefficients_reproduce_direct_application():
    rng = np.random.default_rng(13)
    for model in (StuartLandau2D(), ou_spiral(), Lorenz3D()):
        n = model.dim
        x = rng.normal(size=(12, n)) * 0.5
        val = rng.normal(size=12)
        grad = rng.normal(size=(12, n))
        hess = rng.normal(size=(12, n, n))
        hess = hess + np.swapaxes(hess, 1, 2)
        for kind in ("backward", "forward"):
            c0, c1, c2 = operator_coefficients(model, x, kind)
            via_coef = c0 * val + np.einsum("bi,bi->b", c1, grad) \
                + np.einsum("bij,bij->b", c2, hess)
            if kind == "backward":
                direct = apply_backward_operator(model, grad, hess, x)
            else:
                direct = apply_forward_operator(model, val, grad, hess, x)
            np.testing.assert_allclose(via_coef, direct, rtol=1e-10, atol=1e-12)


def test_forward_backward_adjoint_under_quadrature():
    # <L rho, u> = <rho, L+ u> for compactly supported smooth fields,
    # checked with trapezoidal quadrature on a fine grid.
    model = StuartLandau2D()
    n = 321
    axis = np.linspace(-2.5, 2.5, n)
    h = axis[1] - axis[0]
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])

    def bump(cx, cy, w):
        # Gaussian bumps decay to ~1e-13 at the domain edge, so they are
        # compactly supported to quadrature accuracy while keeping the
        # finite-difference derivative error second order and small.
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return np.exp(-r2 / (2.0 * w ** 2))

    u = bump(0.4, -0.3, 0.45)
    rho = bump(-0.5, 0.2, 0.5)

    def grids(f):
        gx, gy = np.gradient(f, h, h, edge_order=2)
        gxx = np.gradient(gx, h, axis=0, edge_order=2)
        gxy = np.gradient(gx, h, axis=1, edge_order=2)
        gyy = np.gradient(gy, h, axis=1, edge_order=2)
        grad = np.column_stack([gx.ravel(), gy.ravel()])
        hess = np.empty((f.size, 2, 2))
        hess[:, 0, 0] = gxx.ravel()
        hess[:, 0, 1] = hess[:, 1, 0] = gxy.ravel()
        hess[:, 1, 1] = gyy.ravel()
        return grad, hess

    gu, hu = grids(u)
    gr, hr = grids(rho)
    lu = apply_backward_operator(model, gu, hu, pts)
    lr = apply_forward_operator(model, rho.ravel(), gr, hr, pts)
    inner_fwd = np.sum(lr * u.ravel()) * h * h
    inner_bwd = np.sum(rho.ravel() * lu) * h * h
    scale = np.linalg.norm(rho) * np.linalg.norm(u) * h * h
    assert abs(inner_fwd - inner_bwd) / scale < 1e-3


def test_morris_lecar_voltage_noise_is_state_independent():
    # The voltage channels carry additive noise with intensity d_v1, d_v2
    # under the same convention as the other catalog models (G_ii = 2 d).
    model = MorrisLecar4D(d_v1=15.0, d_v2=50.0)
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 0.9, size=(8, 4))
    x[:, 0] = rng.uniform(-60.0, 30.0, size=8)
    x[:, 2] = rng.uniform(-60.0, 30.0, size=8)
    g_mat = model.diffusion_product(x)
    np.testing.assert_allclose(g_mat[:, 0, 0], 30.0, rtol=1e-12)
    np.testing.assert_allclose(g_mat[:, 2, 2], 100.0, rtol=1e-12)
    # Gating noise stays nonnegative throughout the physical range.
    assert g_mat[:, 1, 1].min() >= 0.0
    assert g_mat[:, 3, 3].min() >= 0.0


def test_morris_lecar_time_rescale_scales_drift():
    fast = MorrisLecar4D(iota=20.0)
    slow = MorrisLecar4D(iota=1.0)
    x = np.array([[-10.0, 0.3, -15.0, 0.4]])
    np.testing.assert_allclose(fast.drift(x), 20.0 * slow.drift(x), rtol=1e-12)
