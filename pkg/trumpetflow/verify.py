"""
Verification Suites

Self-contained oracle and property checks run by `trumpetflow verify`:
layer round trips, log-det against brute-force Jacobians, the FVC
log-det identity, tape gradients against finite differences, the exact
Gaussian posterior and the travel-time operator.

Each suite returns a SuiteResult; nothing here raises on a failed check.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from trumpetflow import diffcore as dc
from trumpetflow.flow_layers import (
    FVC,
    STANDARD,
    ActNorm,
    CouplingLayer,
    LULinear,
    RevnetBlock,
    SkipConnection,
)
from trumpetflow.model import Architecture, CTrumpetModel
from trumpetflow.nets import ETA, GAMMA
from trumpetflow.oracles import GRFPrior, analytic_posterior
from trumpetflow.problems import (
    LinearForward,
    SensorNet,
    boundary_sensors,
    center_mask_operator,
    ray_weights,
    traveltime_operator,
)
from trumpetflow.training import MSE, ML, gradient_check

logger = logging.getLogger(__name__)

ROUNDTRIP_TOL = 1e-9
LOGDET_TOL = 1e-7
FVC_TOL = 1e-10


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    messages: List[str] = field(default_factory=list)

    def check(self, ok: bool, message: str):
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.messages.append(message)

    @property
    def ok(self) -> bool:
        return self.failed == 0


def _random_layers(rng: np.random.Generator, dim: int, cond_dim: int) -> List[tuple]:
    """(name, layer, is_conditional) for every bijective layer kind."""
    actnorm = ActNorm(dim, "v.actnorm", ETA)
    actnorm.set_scale(rng.normal(size=dim), np.exp(rng.normal(scale=0.5, size=dim)))
    coupling = CouplingLayer(dim, rng, "v.coupling", ETA, mode=STANDARD)
    fvc = CouplingLayer(dim, rng, "v.fvc", ETA, mode=FVC)
    _perturb(rng, coupling.parameters() + fvc.parameters())
    block = RevnetBlock(dim, dim, rng, "v.block", ETA, mode=STANDARD, cond_dim=cond_dim, cond_width=4, hidden=8)
    _perturb(rng, block.parameters())
    block.actnorm.set_scale(rng.normal(size=dim), np.exp(rng.normal(scale=0.5, size=dim)))
    skip = SkipConnection(RevnetBlock(dim, dim, rng, "v.skip", GAMMA, cond_dim=cond_dim, cond_width=4, hidden=8),
                          cond_dim, "v.skip", GAMMA)
    _perturb(rng, skip.parameters())
    return [
        ("actnorm", actnorm, False),
        ("lu_linear", LULinear(dim, rng, "v.lu", ETA), False),
        ("coupling", coupling, False),
        ("coupling-fvc", fvc, False),
        ("revnet-conditional", block, True),
        ("skip", skip, True),
    ]


def _perturb(rng: np.random.Generator, params, scale: float = 0.3):
    for p in params:
        p.value = p.value + scale * rng.normal(size=p.shape)


def _forward(layer, z: dc.Tensor, cond):
    return layer.forward(z, cond) if cond is not None else layer.forward(z)


def _inverse(layer, x: dc.Tensor, cond):
    return layer.inverse(x, cond) if cond is not None else layer.inverse(x)


def _analytic_and_bruteforce(layers, z: np.ndarray, cond) -> tuple:
    dim = z.shape[0]
    cond_t = dc.constant(cond.reshape(1, -1)) if cond is not None else None
    logdet = 0.0
    x = dc.constant(z.reshape(1, -1))
    for layer in layers:
        x, ld = _forward(layer, x, cond_t)
        logdet += float(ld.data[0])

    def f(v: dc.Tensor) -> dc.Tensor:
        out = dc.reshape(v, (1, dim))
        for layer in layers:
            out, _ = _forward(layer, out, cond_t)
        return dc.reshape(out, (dim,))

    _, brute = np.linalg.slogdet(dc.jacobian(f, z))
    return logdet, float(brute)


def roundtrip_suite(rng: np.random.Generator) -> SuiteResult:
    result = SuiteResult("roundtrip")
    for dim in (2, 3, 5, 8):
        cond = rng.normal(size=(4, 3))
        for name, layer, conditional in _random_layers(rng, dim, 3):
            c = dc.constant(cond) if conditional else None
            z = rng.normal(size=(4, dim))
            back = _inverse(layer, _forward(layer, dc.constant(z), c)[0], c).data
            err = float(np.max(np.abs(back - z)))
            result.check(err < ROUNDTRIP_TOL, f"{name} dim {dim}: round-trip error {err:.3e}")
        for depth in (2, 4, 6):
            model = _random_composition(rng, dim, depth)
            z = rng.normal(size=(4, dim))
            y = dc.constant(rng.normal(size=(4, 3)))
            x, _ = model.h_forward_tensor(dc.constant(z), y)
            back, _ = model.h_inverse_tensor(x, y)
            err = float(np.max(np.abs(back.data - z)))
            result.check(err < ROUNDTRIP_TOL, f"{depth}-block composition dim {dim}: round-trip error {err:.3e}")
    return result


def _random_composition(rng: np.random.Generator, dim: int, depth: int) -> CTrumpetModel:
    arch = Architecture(latent_dim=dim, data_dim=dim, cond_dim=3, g_blocks=0, h_blocks=depth,
                        hidden_width=8, cond_width=4, seed=int(rng.integers(1 << 31)))
    model = CTrumpetModel(arch)
    _perturb(rng, model.parameters(ETA), scale=0.2)
    return model


def logdet_suite(rng: np.random.Generator) -> SuiteResult:
    result = SuiteResult("logdet")
    for dim in (2, 3, 5, 8):
        cond = rng.normal(size=3)
        for name, layer, conditional in _random_layers(rng, dim, 3):
            analytic, brute = _analytic_and_bruteforce([layer], rng.normal(size=dim), cond if conditional else None)
            result.check(abs(analytic - brute) < LOGDET_TOL,
                         f"{name} dim {dim}: analytic {analytic:.10f} vs Jacobian {brute:.10f}")
        for depth in (2, 4, 6):
            model = _random_composition(rng, dim, depth)
            z = rng.normal(size=dim)
            y = rng.normal(size=3)
            analytic, brute = _analytic_and_bruteforce(model.h_layers, z, y)
            result.check(abs(analytic - brute) < LOGDET_TOL,
                         f"{depth}-block composition dim {dim}: analytic {analytic:.10f} vs Jacobian {brute:.10f}")
    return result


def fvc_suite(rng: np.random.Generator, layers: int = 100, inputs: int = 100) -> SuiteResult:
    result = SuiteResult("fvc")
    worst = 0.0
    for i in range(layers):
        dim = int(rng.integers(2, 9))
        layer = CouplingLayer(dim, rng, f"fvc.{i}", ETA, mode=FVC, cond_width=2)
        _perturb(rng, layer.parameters(), scale=1.0)
        z = rng.normal(scale=3.0, size=(inputs, dim))
        features = dc.constant(rng.normal(size=(inputs, 2)))
        _, logdet = layer.forward(dc.constant(z), features)
        worst = max(worst, float(np.max(np.abs(logdet.data - 1.0))))
    result.check(worst < FVC_TOL, f"max |logdet - 1| = {worst:.3e}")
    if result.ok:
        result.passed = layers * inputs
    return result


def gradient_suite(rng: np.random.Generator) -> SuiteResult:
    result = SuiteResult("gradient")
    arch = Architecture(latent_dim=2, data_dim=4, cond_dim=2, g_blocks=2, h_blocks=2,
                        hidden_width=8, cond_width=4, g_actnorm=True, skip_connections=True, seed=11)
    model = CTrumpetModel(arch)
    _perturb(rng, model.parameters(), scale=0.1)
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 2))
    for phase in (MSE, ML):
        report = gradient_check(model, phase, x, y, rng, fraction=0.05)
        result.passed += report.checked - len(report.failures)
        result.failed += len(report.failures)
        result.messages.extend(f"{phase}: {m}" for m in report.failures)
    return result


def posterior_suite(rng: np.random.Generator) -> SuiteResult:
    result = SuiteResult("posterior")
    prior = GRFPrior(4, length_scale=1.0)
    y = rng.normal(size=16)

    post = analytic_posterior(prior, LinearForward(np.zeros((16, 16)), 0.1), y)
    result.check(np.allclose(post.mean, prior.mean) and np.allclose(post.covariance, prior.covariance),
                 "A = 0 does not return the prior")

    post = analytic_posterior(prior, LinearForward(np.eye(16), 1e-8), y)
    err = float(np.max(np.abs(post.mean - y)))
    result.check(err < 1e-5, f"A = I, lambda = 1e-8: mean differs from y by {err:.3e}")

    mask = center_mask_operator(4, 2)
    post = analytic_posterior(prior, LinearForward(mask, 0.05), y)
    eigenvalues = np.linalg.eigvalsh(prior.covariance - post.covariance)
    result.check(eigenvalues.min() >= -1e-8, f"prior - posterior covariance has eigenvalue {eigenvalues.min():.3e}")
    result.check(np.linalg.eigvalsh(post.covariance).min() >= -1e-10, "posterior covariance is not PSD")

    gaps = []
    for lam in (1e-1, 1e-3, 1e-6):
        post = analytic_posterior(prior, LinearForward(mask, lam), y)
        observed = np.diag(mask) > 0
        gaps.append(float(np.max(np.abs(post.mean[observed] - y[observed]))))
    result.check(gaps[0] >= gaps[1] >= gaps[2] and gaps[2] < 1e-4,
                 f"unmasked posterior mean does not approach the data as lambda -> 0: {gaps}")
    return result


def traveltime_suite(rng: np.random.Generator, n: int = 8, mc_samples: int = 10 ** 6) -> SuiteResult:
    result = SuiteResult("traveltime")
    sensors = SensorNet(boundary_sensors(10))
    a = traveltime_operator(n, sensors)
    times = a @ np.ones(n * n)
    result.check(np.allclose(times, 1.0, rtol=0.0, atol=1e-12), f"constant image: max |t - 1| = {np.max(np.abs(times - 1)):.3e}")
    result.check(bool(np.all(a >= 0.0)), "negative operator entries")

    for i, j in sensors.pairs:
        forward = ray_weights(sensors.positions[i], sensors.positions[j], n)
        backward = ray_weights(sensors.positions[j], sensors.positions[i], n)
        result.check(np.array_equal(forward, backward), f"pair {i}-{j}: row changes when the sensors are swapped")

    for row in rng.choice(len(sensors.pairs), size=3, replace=False):
        i, j = sensors.pairs[row]
        p, q = sensors.positions[i], sensors.positions[j]
        pixel = int(np.argmax(a[row]))
        lam = (np.arange(mc_samples) + rng.uniform(size=mc_samples)) / mc_samples
        points = p[None, :] + lam[:, None] * (q - p)[None, :]
        cols = np.minimum((points[:, 0] * n).astype(int), n - 1)
        rows = n - 1 - np.minimum((points[:, 1] * n).astype(int), n - 1)
        fraction = float(np.mean(rows * n + cols == pixel))
        result.check(abs(fraction - a[row, pixel]) < 1e-3,
                     f"pair {i}-{j} pixel {pixel}: operator {a[row, pixel]:.6f} vs Monte-Carlo {fraction:.6f}")
    return result


SUITES: List[tuple] = [
    ("roundtrip", roundtrip_suite),
    ("logdet", logdet_suite),
    ("fvc", fvc_suite),
    ("gradient", gradient_suite),
    ("posterior", posterior_suite),
    ("traveltime", traveltime_suite),
]


def run_all(seed: int = 0) -> List[SuiteResult]:
    """Run every suite with its own RNG stream; a crashing suite counts as one failure."""
    results = []
    for index, (name, suite) in enumerate(SUITES):
        rng = np.random.default_rng([seed, 100 + index])
        try:
            result = suite(rng)
        except Exception as e:
            result = SuiteResult(name, failed=1, messages=[f"{type(e).__name__}: {e}"])
        level = logging.INFO if result.ok else logging.ERROR
        tag = "[OK]" if result.ok else "[ERROR]"
        logger.log(level, f"{tag} {name}: {result.passed} passed, {result.failed} failed")
        results.append(result)
    return results
