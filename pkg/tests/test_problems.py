import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from trumpetflow.metrics import mobius_distance
from trumpetflow.problems import (
    Dataset,
    DatasetFormatError,
    DegenerateRayError,
    LinearForward,
    ProblemInstance,
    SensorNet,
    ZeroSignalError,
    add_noise_snr,
    angle_conditioning,
    boundary_sensors,
    center_mask_operator,
    downsample_operator,
    export_csv,
    mask_operator,
    mobius_point,
    mobius_sample,
    random_mask_operator,
    ray_weights,
    read_dataset,
    torus_point,
    torus_sample,
    traveltime_operator,
    write_dataset,
)


# --- fiber bundles ---------------------------------------------------------

def test_torus_points():
    assert_allclose(torus_point(0.0, 0.0), [1.25, 0.0, 0.0], atol=1e-15)
    assert_allclose(torus_point(np.pi, 0.0), [-1.25, 0.0, 0.0], atol=1e-15)
    assert_allclose(torus_point(0.0, np.pi / 2), [1.0, 0.0, 0.25], atol=1e-15)


def test_torus_samples_lie_in_the_tube(rng):
    points, t = torus_sample(5000, rng)
    assert points.shape == (5000, 3)
    assert np.all((t >= 0.0) & (t < 2 * np.pi))
    tube = (np.hypot(points[:, 0], points[:, 1]) - 1.0) ** 2 + points[:, 2] ** 2
    assert np.all(tube <= 0.25 ** 2 + 1e-9)
    assert_allclose(np.arctan2(points[:, 1], points[:, 0]) % (2 * np.pi), t, atol=1e-9)


def test_mobius_points():
    assert_allclose(mobius_point(0.0, 0.0), [1.4, 0.0, 0.0], atol=1e-15)
    assert_allclose(mobius_point(0.0, np.pi / 2), [1.0, 0.0, 0.1], atol=1e-15)


def test_mobius_fiber_turns_half_a_revolution():
    # after one turn around the base circle the ellipse is upside down
    assert_allclose(mobius_point(2 * np.pi, 0.0), [0.6, 0.0, 0.0], atol=1e-12)


def test_mobius_samples_lie_in_the_band(rng):
    points, _ = mobius_sample(2000, rng)
    assert np.all(mobius_distance(points) < 1e-3)


def test_fiber_samples_reject_empty_requests(rng):
    with pytest.raises(ValueError):
        torus_sample(0, rng)
    with pytest.raises(ValueError):
        mobius_sample(-1, rng)


def test_angle_conditioning_is_continuous_across_the_wrap():
    assert_allclose(angle_conditioning(0.0), [[1.0, 0.0]])
    assert_allclose(angle_conditioning([2 * np.pi - 1e-9]), [[1.0, 0.0]], atol=1e-8)


def test_mobius_dataset_is_reproducible():
    problem = ProblemInstance("mobius")
    first = problem.generate(18000, np.random.default_rng(3))
    second = problem.generate(18000, np.random.default_rng(3))
    assert np.array_equal(first.x, second.x)
    assert np.array_equal(first.y, second.y)
    assert first.x.shape == (18000, 3)


# --- restoration operators -------------------------------------------------

def test_full_patch_mask_is_zero():
    assert np.array_equal(mask_operator(4, (0, 0), 4), np.zeros((16, 16)))


def test_center_mask():
    a = center_mask_operator(4, 2)
    assert np.array_equal(a, np.diag(np.diag(a)))
    assert np.diag(a).sum() == 12
    assert np.array_equal(np.diag(a).reshape(4, 4)[1:3, 1:3], np.zeros((2, 2)))
    assert np.array_equal(a @ a, a)


def test_mask_outside_grid_is_rejected():
    with pytest.raises(ValueError):
        mask_operator(4, (3, 3), 2)


def test_random_mask(rng):
    a = random_mask_operator(8, 0.5, rng)
    assert set(np.unique(np.diag(a))) <= {0.0, 1.0}
    assert np.array_equal(a @ a, a)
    with pytest.raises(ValueError):
        random_mask_operator(8, 1.0, rng)


def test_downsample_operator():
    a = downsample_operator(4, 2)
    assert a.shape == (4, 16)
    assert_allclose(a.sum(axis=1), 1.0)
    image = np.arange(16.0).reshape(4, 4)
    assert_allclose(a @ image.reshape(-1), [2.5, 4.5, 10.5, 12.5])
    with pytest.raises(ValueError):
        downsample_operator(4, 3)


def test_linear_forward_noise(rng):
    forward = LinearForward(np.eye(3), noise_std=0.0)
    x = rng.normal(size=(2, 3))
    assert np.array_equal(forward.apply(x, rng), x)
    with pytest.raises(ValueError):
        LinearForward(np.eye(3), noise_std=-1.0)


# --- travel time -----------------------------------------------------------

def test_boundary_sensors_sit_on_the_lower_boundary():
    sensors = boundary_sensors(10)
    assert sensors.shape == (10, 2)
    on_edge = (sensors[:, 0] == 0.0) | (sensors[:, 0] == 1.0) | (sensors[:, 1] == 0.0)
    assert np.all(on_edge)
    assert np.all(sensors[:, 1] <= 0.5)
    assert len({tuple(s) for s in sensors}) == 10


def test_sensor_net_pairs():
    net = SensorNet(boundary_sensors(10))
    assert len(net.pairs) == 45
    assert all(i < j for i, j in net.pairs)
    assert SensorNet(boundary_sensors(4), pairs=[(3, 1)]).pairs == [(1, 3)]
    with pytest.raises(ValueError):
        SensorNet(np.array([[0.5, 1.5], [0.0, 0.0]]))


@pytest.mark.parametrize("method", ["exact", "quadrature"])
def test_constant_slowness_gives_unit_travel_times(method):
    a = traveltime_operator(8, SensorNet(boundary_sensors(10)), method)
    assert a.shape == (45, 64)
    assert_allclose(a @ np.ones(64), 1.0, atol=1e-12)


def test_swapped_sensors_give_the_same_row():
    sensors = boundary_sensors(10)
    for i, j in SensorNet(sensors).pairs:
        assert np.array_equal(ray_weights(sensors[i], sensors[j], 8), ray_weights(sensors[j], sensors[i], 8))


def test_ray_along_the_bottom_row():
    w = ray_weights([0.0, 0.05], [1.0, 0.05], 4).reshape(4, 4)
    assert_allclose(w[3], 0.25)
    assert_allclose(w[:3], 0.0)


def test_exact_weights_match_dense_line_sampling():
    n = 8
    p, q = np.array([0.0, 0.3]), np.array([1.0, 0.05])
    weights = ray_weights(p, q, n).reshape(n, n)
    lam = (np.arange(1_000_000) + 0.5) / 1_000_000
    points = p + lam[:, None] * (q - p)
    cols = np.minimum((points[:, 0] * n).astype(int), n - 1)
    rows = n - 1 - np.minimum((points[:, 1] * n).astype(int), n - 1)
    sampled = np.zeros((n, n))
    np.add.at(sampled, (rows, cols), 1.0 / lam.size)
    assert_allclose(weights, sampled, atol=1e-3)


def test_degenerate_ray_and_unknown_method():
    with pytest.raises(DegenerateRayError):
        ray_weights([0.2, 0.0], [0.2, 0.0], 4)
    with pytest.raises(ValueError):
        ray_weights([0.0, 0.0], [1.0, 0.0], 4, method="fast-marching")


# --- noise ---------------------------------------------------------------

def test_infinite_snr_is_pass_through(rng):
    y = rng.normal(size=(3, 5))
    assert np.array_equal(add_noise_snr(y, float("inf"), rng), y)


def test_zero_signal_is_rejected(rng):
    with pytest.raises(ZeroSignalError):
        add_noise_snr(np.zeros(4), 10.0, rng)


@pytest.mark.parametrize("snr_db, ratio", [(0.0, 1.0), (40.0, 1e-4)])
def test_noise_power_matches_target(rng, snr_db, ratio):
    y = rng.normal(size=20)
    clean = np.tile(y, (10000, 1))
    noise = add_noise_snr(clean, snr_db, rng) - clean
    mean_power = np.mean(np.sum(noise ** 2, axis=1))
    assert mean_power == pytest.approx(ratio * np.sum(y ** 2), rel=0.03)


# --- datasets and problem instances ----------------------------------------

def test_dataset_file_roundtrip(tmp_path, rng):
    dataset = Dataset("grf-inpaint", rng.normal(size=(5, 16)), rng.normal(size=(5, 16)), 7, {"grid_side": 4})
    path = write_dataset(dataset, tmp_path / "train.bin")
    loaded = read_dataset(path)
    assert loaded.problem == "grf-inpaint"
    assert loaded.seed == 7
    assert loaded.params == {"grid_side": 4}
    assert np.array_equal(loaded.x, dataset.x)
    assert np.array_equal(loaded.y, dataset.y)
    assert len(loaded) == 5


def test_damaged_dataset_files(tmp_path, rng):
    path = write_dataset(Dataset("torus", rng.normal(size=(4, 3)), rng.normal(size=(4, 1)), 0), tmp_path / "d.bin")
    data = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-3])
    (tmp_path / "short.bin").write_bytes(data[:-8])
    (tmp_path / "other.bin").write_bytes(b"hello\n")
    for name in ("cut.bin", "short.bin", "other.bin"):
        with pytest.raises(DatasetFormatError):
            read_dataset(tmp_path / name)
    with pytest.raises(DatasetFormatError):
        Dataset("torus", np.zeros((3, 3)), np.zeros((2, 1)), 0)


def test_export_csv(tmp_path):
    dataset = Dataset("torus", [[1.0, 2.0, 3.0]], [[0.5]], 0)
    with open(export_csv(dataset, tmp_path / "d.csv"), newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["x0", "x1", "x2", "y0"], ["1.0", "2.0", "3.0", "0.5"]]


def test_fiber_problem_instance(rng):
    problem = ProblemInstance("torus")
    dataset = problem.generate(10, rng)
    assert (problem.data_dim, problem.cond_dim) == (3, 2)
    assert dataset.y.shape == (10, 1)
    cond = problem.conditioning(dataset.y)
    assert_allclose(cond, np.column_stack([np.cos(dataset.y[:, 0]), np.sin(dataset.y[:, 0])]))


def test_grf_problem_instance(rng):
    problem = ProblemInstance("grf-inpaint", grid_side=8, patch_size=4, noise_std=0.0)
    dataset = problem.generate(6, rng)
    assert (problem.data_dim, problem.cond_dim) == (64, 64)
    assert_allclose(dataset.y, dataset.x @ problem.forward.matrix.T)
    assert_allclose(problem.conditioning(dataset.y), dataset.y)


def test_traveltime_problem_instance(rng):
    problem = ProblemInstance("traveltime", grid_side=8, num_sensors=10, measurement_snr_db=float("inf"))
    dataset = problem.generate(4, rng)
    assert dataset.y.shape == (4, 45)
    assert problem.cond_dim == 64
    assert_allclose(dataset.y, dataset.x @ problem.forward.matrix.T)
    assert problem.conditioning(dataset.y).shape == (4, 64)


def test_problem_instance_rebuilds_from_dataset(rng):
    problem = ProblemInstance("grf-inpaint", seed=11, grid_side=8, grf_operator="random-mask", mask_prob=0.3)
    rebuilt = ProblemInstance.from_dataset(problem.generate(2, rng))
    assert rebuilt.seed == 11
    assert np.array_equal(rebuilt.forward.matrix, problem.forward.matrix)


def test_unknown_problem_and_operator():
    with pytest.raises(ValueError):
        ProblemInstance("mnist")
    with pytest.raises(ValueError):
        ProblemInstance("grf-inpaint", grid_side=8, grf_operator="blur")
