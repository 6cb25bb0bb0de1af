"""Box grids and collocation-point generation."""

import numpy as np
import pytest

from oscspec import (
    BoxGrid,
    ShortfallError,
    SimConfig,
    StuartLandau2D,
    generate_reference_set,
    generate_training_set,
    load_points_csv,
    load_training_csv,
    save_points_csv,
    save_training_csv,
    stuart_landau_stationary,
)
from oscspec.collocation import OUTSIDE


SL_SIM = SimConfig(dt=0.005, t_burn=2.0, t_gap=0.05, n_t=200, seed=5)


def test_locate_center_roundtrip_exhaustive():
    grid = BoxGrid((-2.0, -1.0), (2.0, 3.0), 7)
    ids = np.arange(grid.n_boxes)
    np.testing.assert_array_equal(grid.locate(grid.center(ids)), ids)


def test_boxes_are_half_open():
    grid = BoxGrid((0.0, 0.0), (1.0, 1.0), 4)
    # A point on an interior box edge belongs to the box on its upper side.
    inner_edge = np.array([[0.25, 0.1]])
    lower_side = np.array([[0.25 - 1e-9, 0.1]])
    assert grid.locate(inner_edge)[0] != grid.locate(lower_side)[0]
    # The domain's upper boundary is outside every half-open box.
    assert grid.locate(np.array([[1.0, 0.5]]))[0] == OUTSIDE
    assert grid.locate(np.array([[0.0, 0.0]]))[0] == 0


def test_locate_flags_exterior_points():
    grid = BoxGrid((-1.0, -1.0), (1.0, 1.0), 4)
    pts = np.array([[1.5, 0.0], [0.0, -3.0], [0.2, 0.2]])
    located = grid.locate(pts)
    assert located[0] == OUTSIDE and located[1] == OUTSIDE
    assert located[2] != OUTSIDE


def test_box_volume_matches_widths():
    grid = BoxGrid((-2.0, -1.0), (2.0, 3.0), 8)
    np.testing.assert_allclose(grid.box_volume, np.prod(grid.widths))
    np.testing.assert_allclose(grid.widths, [0.5, 0.5])


def test_sampling_respects_bounds_and_boxes():
    grid = BoxGrid((-1.0, -1.0), (1.0, 1.0), 5)
    rng = np.random.default_rng(0)
    dom = grid.sample_domain(500, rng)
    assert ((dom >= -1.0) & (dom < 1.0)).all()
    ids = np.array([0, 7, 24, 24])
    pts = grid.sample_in_boxes(ids, rng)
    np.testing.assert_array_equal(grid.locate(pts), ids)


def test_training_set_uniform_mode_counts_and_distinctness():
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 10)
    ids, centers = generate_training_set(model, grid, SL_SIM, n_x=60, alpha=0.0)
    assert len(ids) == 60
    assert len(np.unique(ids)) == 60
    np.testing.assert_allclose(centers, grid.center(ids))


def test_training_set_trajectory_mode_concentrates_on_attractor():
    # With alpha=1 every selected box is claimed by a simulated trajectory,
    # so the selection concentrates where the stationary mass lives: at
    # least 90% of the box centers near the unit circle, and the mean
    # analytic stationary density over selected boxes beats the uniform
    # baseline by a factor of two.
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 20)
    ids, centers = generate_training_set(model, grid, SL_SIM, n_x=80, alpha=1.0)
    assert len(np.unique(ids)) == 80
    radii = np.hypot(centers[:, 0], centers[:, 1])
    assert np.mean((radii >= 0.6) & (radii <= 1.4)) >= 0.9

    p0 = stuart_landau_stationary()
    all_centers = grid.center(np.arange(grid.n_boxes))
    assert p0(centers).mean() >= 2.0 * p0(all_centers).mean()


def test_training_set_is_deterministic_given_seed():
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 10)
    a = generate_training_set(model, grid, SL_SIM, n_x=30, alpha=0.5, seed=8)
    b = generate_training_set(model, grid, SL_SIM, n_x=30, alpha=0.5, seed=8)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1])


def test_training_set_shortfall_raises():
    # With alpha=1 every box must be claimed by a trajectory visit, but the
    # limit cycle only ever touches a thin annulus of boxes, so demanding
    # most of the grid exhausts the sampling budget.
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 6)
    with pytest.raises(ShortfallError):
        generate_training_set(model, grid, SL_SIM, n_x=32, alpha=1.0,
                              budget_factor=5)


def test_reference_set_raw_points_within_bounds():
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 10)
    pts = generate_reference_set(model, grid, SL_SIM, n_y=400, alpha=0.3)
    assert pts.shape == (400, 2)
    assert ((pts >= -2.0) & (pts < 2.0)).all()


def test_training_csv_roundtrip(tmp_path):
    model = StuartLandau2D()
    grid = BoxGrid((-2.0, -2.0), (2.0, 2.0), 10)
    ids, centers = generate_training_set(model, grid, SL_SIM, n_x=25, alpha=0.0)
    path = tmp_path / "training.csv"
    save_training_csv(path, grid, ids, centers)
    ids2, centers2 = load_training_csv(path)
    np.testing.assert_array_equal(ids, ids2)
    np.testing.assert_allclose(centers, centers2)


def test_points_csv_roundtrip(tmp_path):
    pts = np.random.default_rng(1).uniform(-1, 1, size=(17, 3))
    path = tmp_path / "points.csv"
    save_points_csv(path, pts)
    np.testing.assert_allclose(load_points_csv(path), pts)


def test_four_dimensional_grid_stays_sparse():
    # A 100^4 conceptual grid must not allocate per-box storage.
    grid = BoxGrid((-90.0, 0.0, -90.0, 0.0), (90.0, 1.0, 90.0, 1.0), 100)
    assert grid.n_boxes == 100 ** 4
    pts = np.array([[0.0, 0.5, 0.0, 0.5], [-89.0, 0.01, 89.0, 0.99]])
    ids = grid.locate(pts)
    assert (ids >= 0).all()
    np.testing.assert_array_equal(grid.locate(grid.center(ids)), ids)
