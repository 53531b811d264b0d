"""
Problem Generators and Forward Operators

Synthetic inverse problems used to train and check the model:
- fiber bundles: solid torus and solid elliptic Moebius band over the base circle
- GRF restoration: inpainting mask, random pixel mask, block downsampling, denoising
- linearized travel-time tomography between boundary sensors

Also the SNR-specified noise model and the dataset file format.
"""

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from trumpetflow.oracles import GRFPrior

logger = logging.getLogger(__name__)

PROBLEMS = ("torus", "mobius", "grf-inpaint", "traveltime")
FIBER_PROBLEMS = ("torus", "mobius")
GRF_OPERATORS = ("mask", "random-mask", "downsample", "identity")

TORUS_R = 1.0
TORUS_r = 0.25
MOBIUS_R = 1.0
MOBIUS_A = 0.4
MOBIUS_B = 0.1

QUADRATURE_SAMPLES = 256
DATASET_MAGIC = "TRUMPETFLOW-DATASET"
DATASET_VERSION = 1


class DegenerateRayError(ValueError):
    """Raised when a travel-time ray has coincident end points."""
    pass


class ZeroSignalError(ValueError):
    """Raised when SNR-specified noise is requested for an all-zero signal."""
    pass


class DatasetFormatError(ValueError):
    """Raised when a dataset file is malformed."""
    pass


# ---------------------------------------------------------------------------
# Fiber bundles
# ---------------------------------------------------------------------------

def torus_point(t, s, rho=TORUS_r, R: float = TORUS_R) -> np.ndarray:
    """Point of the solid torus at base angle t, fiber angle s and fiber radius rho."""
    t, s, rho = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (t, s, rho)))
    ring = R + rho * np.cos(s)
    return np.stack([np.cos(t) * ring, np.sin(t) * ring, rho * np.sin(s)], axis=-1)


def mobius_point(t, s, fill=1.0, R: float = MOBIUS_R, a: float = MOBIUS_A, b: float = MOBIUS_B) -> np.ndarray:
    """
    Point of the solid elliptic Moebius band.

    The fiber ellipse with semi-axes (a, b) turns by t/2 in the meridian plane
    as t goes around the base circle; `fill` in [0, 1] scales it.
    """
    t, s, fill = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (t, s, fill)))
    half = t / 2.0
    radial = fill * (a * np.cos(half) * np.cos(s) - b * np.sin(half) * np.sin(s))
    height = fill * (b * np.cos(half) * np.sin(s) + a * np.sin(half) * np.cos(s))
    ring = R + radial
    return np.stack([np.cos(t) * ring, np.sin(t) * ring, height], axis=-1)


def torus_sample(count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Uniform samples of the solid torus (R=1, r=0.25).

    Returns:
        (points of shape (count, 3), base angles t of shape (count,))
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    t = rng.uniform(0.0, 2.0 * np.pi, count)
    s = rng.uniform(0.0, 2.0 * np.pi, count)
    rho = TORUS_r * np.sqrt(rng.uniform(0.0, 1.0, count))
    return torus_point(t, s, rho), t


def mobius_sample(count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform samples over the elliptic cross-sections of the solid Moebius band (R=1, a=0.4, b=0.1)."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    t = rng.uniform(0.0, 2.0 * np.pi, count)
    s = rng.uniform(0.0, 2.0 * np.pi, count)
    fill = np.sqrt(rng.uniform(0.0, 1.0, count))
    return mobius_point(t, s, fill), t


def angle_conditioning(t) -> np.ndarray:
    """Base angle -> (cos t, sin t), continuous across the 2 pi wrap."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


# ---------------------------------------------------------------------------
# Linear forward operators
# ---------------------------------------------------------------------------

@dataclass
class LinearForward:
    """y = A x + n with n ~ N(0, noise_std^2 I)."""
    matrix: np.ndarray
    noise_std: float = 0.0
    name: str = "linear"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"{self.name}: forward matrix must be 2-D, got shape {self.matrix.shape}")
        if not self.noise_std >= 0:
            raise ValueError(f"{self.name}: noise_std must be non-negative, got {self.noise_std}")

    @property
    def measurement_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def data_dim(self) -> int:
        return self.matrix.shape[1]

    def clean(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix.T

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        y = self.clean(x)
        if self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return y


def mask_operator(n: int, patch_origin: Tuple[int, int], patch_size: int) -> np.ndarray:
    """Diagonal 0/1 matrix zeroing a square patch of an n x n image (row-major pixels)."""
    row, col = patch_origin
    if patch_size < 0 or row < 0 or col < 0 or row + patch_size > n or col + patch_size > n:
        raise ValueError(f"patch at {patch_origin} of size {patch_size} does not fit a {n}x{n} grid")
    keep = np.ones((n, n))
    keep[row:row + patch_size, col:col + patch_size] = 0.0
    return np.diag(keep.reshape(-1))


def center_mask_operator(n: int, patch_size: int) -> np.ndarray:
    start = (n - patch_size) // 2
    return mask_operator(n, (start, start), patch_size)


def random_mask_operator(n: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Diagonal 0/1 matrix dropping each pixel independently with probability drop_prob."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {drop_prob}")
    return np.diag((rng.uniform(size=n * n) >= drop_prob).astype(np.float64))


def downsample_operator(n: int, factor: int) -> np.ndarray:
    """Block-average an n x n image down to (n/factor) x (n/factor)."""
    if factor < 1 or n % factor:
        raise ValueError(f"downsample factor {factor} must divide the grid side {n}")
    small = n // factor
    a = np.zeros((small * small, n * n))
    for i in range(n):
        for j in range(n):
            a[(i // factor) * small + j // factor, i * n + j] = 1.0 / (factor * factor)
    return a


def identity_operator(n: int) -> np.ndarray:
    return np.eye(n * n)


# ---------------------------------------------------------------------------
# Travel-time tomography
# ---------------------------------------------------------------------------

def boundary_sensors(count: int) -> np.ndarray:
    """
    `count` sensors spread evenly along the lower boundary of the unit square:
    down the lower half of the left edge, along the bottom, up the lower half
    of the right edge. Returns (count, 2) positions (x right, y up).
    """
    if count < 2:
        raise ValueError(f"need at least 2 sensors, got {count}")
    arc = (np.arange(count) + 0.5) * 2.0 / count
    positions = np.zeros((count, 2))
    for k, u in enumerate(arc):
        if u < 0.5:
            positions[k] = (0.0, 0.5 - u)
        elif u < 1.5:
            positions[k] = (u - 0.5, 0.0)
        else:
            positions[k] = (1.0, u - 1.5)
    return positions


@dataclass
class SensorNet:
    """Sensor positions in the unit square and the unordered pairs that are measured."""
    positions: np.ndarray
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"sensor positions must have shape (NS, 2), got {self.positions.shape}")
        if np.any(self.positions < 0.0) or np.any(self.positions > 1.0):
            raise ValueError("sensors must lie in the unit square")
        if not self.pairs:
            self.pairs = list(itertools.combinations(range(len(self.positions)), 2))
        self.pairs = [tuple(sorted(p)) for p in self.pairs]


def _axis_intervals(a: float, d: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """lambda-interval [lo, hi] spent in each of the n cells along one axis."""
    if d == 0.0:
        lo, hi = np.zeros(n), np.zeros(n)
        cell = min(int(np.floor(a * n)), n - 1)
        hi[cell] = 1.0
        return lo, hi
    edges = (np.arange(n + 1) / n - a) / d
    lo = np.clip(np.minimum(edges[:-1], edges[1:]), 0.0, 1.0)
    hi = np.clip(np.maximum(edges[:-1], edges[1:]), 0.0, 1.0)
    return lo, hi


def _canonical(p: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return (p, q) if tuple(p) <= tuple(q) else (q, p)


def ray_weights(p, q, n: int, method: str = "exact") -> np.ndarray:
    """
    Weights w with t = w . f for the line integral int_0^1 f(p + lam (q - p)) d lam
    over an n x n pixel image (row 0 at the top).

    method="exact" gives each pixel the fraction of lambda the ray spends in
    it; method="quadrature" uses 256 equispaced lambda samples with
    nearest-pixel lookup.
    """
    p, q = _canonical(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64))
    if np.allclose(p, q, rtol=0.0, atol=1e-12):
        raise DegenerateRayError(f"sensors at {p} and {q} coincide")
    d = q - p
    weights = np.zeros((n, n))
    if method == "exact":
        lo_x, hi_x = _axis_intervals(p[0], d[0], n)
        lo_y, hi_y = _axis_intervals(p[1], d[1], n)
        # cell k along y counts from the bottom; image row n-1-k
        overlap = np.minimum(hi_y[:, None], hi_x[None, :]) - np.maximum(lo_y[:, None], lo_x[None, :])
        weights = np.maximum(overlap, 0.0)[::-1]
        return (weights / weights.sum()).reshape(-1)
    if method == "quadrature":
        lam = (np.arange(QUADRATURE_SAMPLES) + 0.5) / QUADRATURE_SAMPLES
        points = p[None, :] + lam[:, None] * d[None, :]
        cols = np.minimum((points[:, 0] * n).astype(int), n - 1)
        rows = n - 1 - np.minimum((points[:, 1] * n).astype(int), n - 1)
        np.add.at(weights, (rows, cols), 1.0 / QUADRATURE_SAMPLES)
        return weights.reshape(-1)
    raise ValueError(f"Unknown travel-time method '{method}' (expected 'exact' or 'quadrature')")


def traveltime_operator(n: int, sensors: SensorNet, method: str = "exact") -> np.ndarray:
    """One row per unordered sensor pair mapping an n x n slowness image to travel times."""
    rows = [
        ray_weights(sensors.positions[i], sensors.positions[j], n, method)
        for i, j in sensors.pairs
    ]
    logger.debug(f"[OK] Travel-time operator: {len(rows)} rays over a {n}x{n} grid ({method})")
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def add_noise_snr(clean, target_snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """
    Add white Gaussian noise so that, per measurement vector,
    10 log10(|y|^2 / E|eps|^2) equals target_snr_db. An infinite target
    returns the measurements unchanged.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if np.isinf(target_snr_db) and target_snr_db > 0:
        return clean.copy()
    rows = clean.reshape(1, -1) if clean.ndim == 1 else clean
    power = np.sum(rows * rows, axis=-1)
    if np.any(power == 0.0):
        raise ZeroSignalError("add_noise_snr: measurement vector is identically zero")
    sigma = np.sqrt(power / (rows.shape[-1] * 10.0 ** (target_snr_db / 10.0)))
    noisy = rows + sigma[:, None] * rng.standard_normal(rows.shape)
    return noisy.reshape(clean.shape)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """
    Paired samples of one problem.

    Attributes:
        problem: problem id
        x: ground-truth signals, shape (N, D)
        y: measurements, shape (N, m) (the base angle for fiber bundles)
        seed: seed the set was generated from
        params: problem parameters needed to rebuild operators and conditioning
    """
    problem: str
    x: np.ndarray
    y: np.ndarray
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise DatasetFormatError(f"x {self.x.shape} and y {self.y.shape} must be 2-D with equal row counts")

    def __len__(self) -> int:
        return self.x.shape[0]


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Magic line, one JSON header line, then x and y as little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": DATASET_VERSION,
        "problem": dataset.problem,
        "seed": dataset.seed,
        "x_shape": list(dataset.x.shape),
        "y_shape": list(dataset.y.shape),
        "params": dataset.params,
    }
    with open(path, "wb") as f:
        f.write((DATASET_MAGIC + "\n").encode("ascii"))
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.y, dtype="<f8").tobytes())
    return path


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").strip()
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file")
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"{path}: unreadable header ({e})")
        payload = f.read()
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {header.get('version')}")
    x_shape, y_shape = tuple(header["x_shape"]), tuple(header["y_shape"])
    if len(payload) % 8:
        raise DatasetFormatError(f"{path}: truncated array data ({len(payload)} bytes)")
    values = np.frombuffer(payload, dtype="<f8")
    x_size, y_size = int(np.prod(x_shape)), int(np.prod(y_shape))
    if values.size != x_size + y_size:
        raise DatasetFormatError(f"{path}: expected {x_size + y_size} values, found {values.size}")
    x = values[:x_size].astype(np.float64).reshape(x_shape)
    y = values[x_size:].astype(np.float64).reshape(y_shape)
    return Dataset(header["problem"], x, y, int(header["seed"]), header.get("params", {}))


def export_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Columns x0..x{D-1}, y0..y{m-1}; one row per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(dataset.x.shape[1])] + [f"y{i}" for i in range(dataset.y.shape[1])])
        for xr, yr in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in xr] + [repr(float(v)) for v in yr])
    return path


# ---------------------------------------------------------------------------
# Problem instances
# ---------------------------------------------------------------------------

class ProblemInstance:
    """
    A problem id with its parameters: generates (x, y) pairs and maps
    measurements to the conditioning input the model sees.

    Args:
        problem: one of PROBLEMS
        seed: fixes operator randomness (random masks)
        grid_side, patch_size, noise_std, grf_operator, mask_prob, downsample,
        num_sensors, measurement_snr_db: problem parameters (ignored where irrelevant)
    """

    def __init__(self, problem: str, seed: int = 0, grid_side: int = 16, patch_size: int = 8,
                 noise_std: float = 5e-3, grf_operator: str = "mask", mask_prob: float = 0.5,
                 downsample: int = 2, num_sensors: int = 10, measurement_snr_db: float = 40.0):
        if problem not in PROBLEMS:
            raise ValueError(f"Unknown problem '{problem}' (expected one of {PROBLEMS})")
        self.problem = problem
        self.seed = seed
        self.params = {
            "grid_side": grid_side, "patch_size": patch_size, "noise_std": noise_std,
            "grf_operator": grf_operator, "mask_prob": mask_prob, "downsample": downsample,
            "num_sensors": num_sensors, "measurement_snr_db": measurement_snr_db, "operator_seed": seed,
        }
        self.prior = None
        self.forward: Optional[LinearForward] = None
        self.sensors: Optional[SensorNet] = None
        self._cond_map: Optional[np.ndarray] = None
        if problem in FIBER_PROBLEMS:
            return

        self.prior = GRFPrior(grid_side)
        if problem == "grf-inpaint":
            matrix = self._restoration_matrix(grf_operator, grid_side, patch_size, mask_prob, downsample, seed)
            self.forward = LinearForward(matrix, noise_std, grf_operator)
        else:
            self.sensors = SensorNet(boundary_sensors(num_sensors))
            self.forward = LinearForward(traveltime_operator(grid_side, self.sensors), 0.0, "traveltime")
            self._cond_map = np.linalg.pinv(self.forward.matrix)

    @staticmethod
    def _restoration_matrix(operator: str, n: int, patch_size: int, mask_prob: float,
                            factor: int, seed: int) -> np.ndarray:
        if operator == "mask":
            return center_mask_operator(n, patch_size)
        if operator == "random-mask":
            return random_mask_operator(n, mask_prob, np.random.default_rng([seed, 7]))
        if operator == "downsample":
            return downsample_operator(n, factor)
        if operator == "identity":
            return identity_operator(n)
        raise ValueError(f"Unknown GRF operator '{operator}' (expected one of {GRF_OPERATORS})")

    @property
    def data_dim(self) -> int:
        return 3 if self.problem in FIBER_PROBLEMS else self.prior.dim

    @property
    def cond_dim(self) -> int:
        if self.problem in FIBER_PROBLEMS:
            return 2
        if self.problem == "traveltime":
            return self.prior.dim
        return self.forward.measurement_dim

    def generate(self, count: int, rng: np.random.Generator) -> Dataset:
        if self.problem == "torus":
            x, t = torus_sample(count, rng)
            y = t[:, None]
        elif self.problem == "mobius":
            x, t = mobius_sample(count, rng)
            y = t[:, None]
        else:
            x = self.prior.sample(count, rng)
            if self.problem == "grf-inpaint":
                y = self.forward.apply(x, rng)
            else:
                y = add_noise_snr(self.forward.clean(x), self.params["measurement_snr_db"], rng)
        return Dataset(self.problem, x, y, self.seed, dict(self.params))

    def conditioning(self, y: np.ndarray) -> np.ndarray:
        """Model conditioning input: (cos t, sin t), the raw measurement, or pinv(A) y."""
        y = np.asarray(y, dtype=np.float64)
        if self.problem in FIBER_PROBLEMS:
            return angle_conditioning(y)
        if self.problem == "traveltime":
            return y @ self._cond_map.T
        return y.copy()

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ProblemInstance":
        params = dict(dataset.params)
        seed = params.pop("operator_seed", dataset.seed)
        return cls(dataset.problem, seed=seed, **params)
