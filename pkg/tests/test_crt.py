import numpy as np
import pytest
import scipy.sparse as sp

from proxnf.crt import (
    CRTFrameOperator,
    DynamicCRTOperator,
    Measurements,
    SensorSchedule,
    add_noise,
    adjoint_frame,
    build_frame_operator,
    forward,
    make_radii,
    operator_norm_estimate,
)
from proxnf.grid import ImageStack, SpacetimeGrid


@pytest.fixture(scope="module")
def small_system():
    grid = SpacetimeGrid(32, 3.72, 4, 10.0)
    schedule = SensorSchedule(aperture_radius=2.63, frames=4)
    radii = make_radii(grid, schedule, 40)
    ops = DynamicCRTOperator(grid, schedule, radii)
    return grid, schedule, radii, ops


def render_disk(grid, radius, supersample=8):
    """Pixel coverage of a centered disk, supersampled."""
    h = grid.pixel_size
    offs = (np.arange(supersample) + 0.5) / supersample * h
    centers = grid.pixel_centers()
    lo_x = centers[:, 0] - 0.5 * h
    lo_y = centers[:, 1] - 0.5 * h
    cov = np.zeros(grid.n_pixels)
    for ox in offs:
        for oy in offs:
            cov += ((lo_x + ox) ** 2 + (lo_y + oy) ** 2) <= radius**2
    return cov / supersample**2


def test_schedule_angles():
    sch = SensorSchedule(aperture_radius=2.63, n_groups=2, sensors_per_group=5,
                         sensor_spacing=1.0, rotation_per_frame=5.0, frames=8)
    assert sch.n_sensors == 10
    a0 = sch.sensor_angles(0)
    assert a0[0] == 0.0
    assert a0[4] == 4.0
    assert a0[5] == 180.0  # antipodal second group
    a1 = sch.sensor_angles(1)
    assert np.allclose((a1 - a0) % 360.0, 5.0)
    p = sch.sensor_positions(0)
    assert np.allclose(np.linalg.norm(p, axis=1), 2.63)


def test_zero_image_zero_measurements(small_system):
    grid, _, _, ops = small_system
    stack = ImageStack(grid, np.zeros((grid.n_pixels, grid.frames)))
    meas = forward(stack, ops)
    assert np.all(meas.data == 0.0)


def test_forward_is_framewise(small_system):
    grid, _, _, ops = small_system
    rng = np.random.default_rng(0)
    coeffs = np.zeros((grid.n_pixels, grid.frames))
    coeffs[:, 2] = rng.random(grid.n_pixels)
    meas = forward(ImageStack(grid, coeffs), ops)
    for k in range(grid.frames):
        if k == 2:
            assert np.linalg.norm(meas.frame(k)) > 0
        else:
            assert np.all(meas.frame(k) == 0.0)


def test_forward_superposition(small_system):
    grid, _, _, ops = small_system
    rng = np.random.default_rng(1)
    F = rng.normal(size=(grid.n_pixels, grid.frames))
    G = rng.normal(size=(grid.n_pixels, grid.frames))
    lhs = forward(ImageStack(grid, F + G), ops).data
    rhs = forward(ImageStack(grid, F), ops).data + forward(ImageStack(grid, G), ops).data
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())


def test_disk_rows_match_analytic_arc_length():
    # oracle: arc length of a circle of radius ell centered at distance R
    # from the origin, inside a centered disk of radius a:
    #   2 * ell * acos((ell^2 + R^2 - a^2) / (2 ell R))
    grid = SpacetimeGrid(64, 3.72, 1, 1.0)
    h = grid.pixel_size
    a = 8 * h  # h = a/8
    schedule = SensorSchedule(aperture_radius=2.63, n_groups=1,
                              sensors_per_group=1, frames=1)
    R = schedule.aperture_radius
    # stay 3 pixels away from the tangency radii R -/+ a, where the analytic
    # arc length changes by more than its own value across one pixel width
    radii = np.linspace(R - a + 3 * h, R + a - 3 * h, 25)
    op = build_frame_operator(grid, schedule, radii, 0)
    disk = render_disk(grid, a)
    values = op.apply(disk)
    arg = (radii**2 + R**2 - a**2) / (2.0 * radii * R)
    expected = 2.0 * radii * np.arccos(np.clip(arg, -1.0, 1.0))
    rel = np.abs(values - expected) / expected
    assert rel.max() < 0.01

    # radii that miss the disk entirely see only background (zero image there)
    miss = np.array([0.5 * (R - a), R + a + 0.2])
    op_miss = build_frame_operator(grid, schedule, np.sort(miss), 0)
    assert np.allclose(op_miss.apply(disk), 0.0, atol=1e-12)


def test_random_image_matches_refined_quadrature(small_system):
    grid, schedule, radii, _ = small_system
    op = build_frame_operator(grid, schedule, radii, 0)
    oracle = build_frame_operator(grid, schedule, radii, 0,
                                  samples_per_pixel=10 * 8)
    x = np.random.default_rng(7).random(grid.n_pixels)
    y = op.apply(x)
    ystar = oracle.apply(x)
    assert np.linalg.norm(y - ystar) / np.linalg.norm(ystar) < 1e-3


def test_adjoint_dot_product(small_system):
    grid, _, _, ops = small_system
    rng = np.random.default_rng(2)
    for k in range(grid.frames):
        op = ops.frame_operator(k)
        for _ in range(20):
            x = rng.standard_normal(op.n_pixels)
            y = rng.standard_normal(op.n_rows)
            lhs = np.dot(op.apply(x), y)
            rhs = np.dot(x, op.adjoint(y))
            assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_adjoint_frame_basics(small_system):
    grid, _, _, ops = small_system
    op = ops.frame_operator(0)
    assert np.all(adjoint_frame(op, np.zeros(op.n_rows)) == 0.0)
    e = np.zeros(op.n_rows)
    row = 5 * op.radii.size + 7
    e[row] = 1.0
    back = adjoint_frame(op, e)
    assert np.allclose(back, op.matrix.getrow(row).toarray().ravel())
    with pytest.raises(ValueError):
        adjoint_frame(op, np.zeros(op.n_rows + 1))


def test_rows_nonnegative_and_bounded(small_system):
    grid, _, radii, ops = small_system
    op = ops.frame_operator(1)
    assert op.matrix.nnz > 0
    assert np.all(op.matrix.data >= 0.0)
    row_sums = np.asarray(op.matrix.sum(axis=1)).ravel()
    assert np.all(np.isfinite(row_sums))
    assert row_sums.max() <= 2.0 * np.pi * radii.max() + 1e-9


def test_geometry_cache_rotation_period():
    grid = SpacetimeGrid(16, 3.72, 144, 10.0)
    schedule = SensorSchedule(aperture_radius=2.63, rotation_per_frame=5.0, frames=144)
    radii = make_radii(grid, schedule, 10)
    ops = DynamicCRTOperator(grid, schedule, radii, samples_per_pixel=8)
    mats = [ops.frame_operator(k).matrix for k in range(144)]
    assert ops.n_cached == 72
    # frames separated by a full revolution share the identical matrix object
    for k in range(72):
        assert mats[k] is mats[k + 72]
        assert (mats[k] != mats[k + 72]).nnz == 0


def test_time_averaged_matrix(small_system):
    grid, _, _, ops = small_system
    avg = ops.time_averaged_matrix()
    direct = sum(ops.frame_operator(k).matrix for k in range(grid.frames)) / grid.frames
    assert np.allclose(avg.toarray(), direct.toarray())


def test_build_validation(small_system):
    grid, schedule, _, _ = small_system
    with pytest.raises(ValueError):
        build_frame_operator(grid, schedule, np.array([-1.0, 1.0]), 0)
    with pytest.raises(ValueError):
        build_frame_operator(grid, schedule, np.array([1.0, 0.5]), 0)
    with pytest.raises(ValueError):
        build_frame_operator(grid, schedule, np.array([]), 0)


def test_add_noise_zero_rnl(small_system):
    grid, _, _, ops = small_system
    stack = ImageStack(grid, np.random.default_rng(3).random((grid.n_pixels, grid.frames)))
    clean = forward(stack, ops)
    noisy = add_noise(clean, 0.0, seed=11)
    assert np.array_equal(noisy.data, clean.data)
    assert noisy.sigma == 0.0


def test_add_noise_sigma_and_determinism(small_system):
    grid, _, _, ops = small_system
    stack = ImageStack(grid, np.random.default_rng(4).random((grid.n_pixels, grid.frames)))
    clean = forward(stack, ops)
    noisy = add_noise(clean, 0.04, seed=5)
    assert noisy.sigma == pytest.approx(0.04 * clean.max_abs)
    again = add_noise(clean, 0.04, seed=5)
    assert np.array_equal(noisy.data, again.data)
    other = add_noise(clean, 0.04, seed=6)
    assert not np.array_equal(noisy.data, other.data)


def test_add_noise_empirical_std():
    # sample-statistics oracle over >= 1e5 samples
    data = np.ones((500, 256))
    clean = Measurements(data=data, n_sensors=10, n_radii=50)
    noisy = add_noise(clean, 0.1, seed=9)
    sigma = 0.1 * 1.0
    emp = np.std(noisy.data - clean.data)
    assert abs(emp - sigma) / sigma < 0.02


def test_operator_norm_identity_and_diagonal():
    eye = CRTFrameOperator(matrix=sp.identity(50, format="csc"),
                           radii=np.array([1.0]), frame_index=0)
    assert operator_norm_estimate([eye]) == pytest.approx(1.0, abs=1e-6)
    d = np.ones(50)
    d[17] = 3.0
    diag = CRTFrameOperator(matrix=sp.diags(d, format="csc"),
                            radii=np.array([1.0]), frame_index=0)
    assert operator_norm_estimate([diag]) == pytest.approx(3.0, abs=1e-3)


def test_operator_norm_matches_dense_svd():
    rng = np.random.default_rng(12)
    A = rng.standard_normal((100, 64))
    op = CRTFrameOperator(matrix=sp.csc_matrix(A), radii=np.array([1.0]), frame_index=0)
    est = operator_norm_estimate([op])
    exact = np.linalg.svd(A, compute_uv=False)[0]
    assert abs(est - exact) / exact < 1e-3


def test_measurements_validation():
    with pytest.raises(ValueError):
        Measurements(data=np.ones(5))
    with pytest.raises(ValueError):
        Measurements(data=np.ones((5, 2)), sigma=-1.0)
