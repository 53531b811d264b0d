"""
Two-Phase Trainer

Phase "mse" fits the injective part g (parameter group gamma) by minimizing
the squared distance between each sample and its projection onto the range
of g. Phase "ml" then freezes g and fits the bijective part h (group eta) by
maximum likelihood on the intermediate codes z' = g^dagger(x). Both phases
use Adam with bias correction.

Per-epoch shuffles derive from (seed, phase, epoch), so a run resumed from
an end-of-epoch checkpoint is bitwise identical to an uninterrupted one.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from trumpetflow import diffcore as dc
from trumpetflow.diffcore import DomainError, Tape, Tensor
from trumpetflow.model import CTrumpetModel, save_checkpoint
from trumpetflow.nets import ETA, GAMMA, Parameter, bound

logger = logging.getLogger(__name__)

MSE = "mse"
ML = "ml"
DONE = "done"
PHASE_GROUPS = {MSE: GAMMA, ML: ETA}
PHASE_IDS = {MSE: 0, ML: 1}
METRICS_COLUMNS = ("phase", "epoch", "step", "loss")


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite or exceeds the divergence limit."""

    def __init__(self, phase: str, epoch: int, step: int, loss: float, reason: str = ""):
        self.phase = phase
        self.epoch = epoch
        self.step = step
        self.loss = loss
        detail = f" ({reason})" if reason else ""
        super().__init__(f"Training diverged in phase '{phase}' at epoch {epoch}, step {step}: loss={loss}{detail}")


@dataclass
class TrainConfig:
    """
    Optimization settings for both phases.

    Attributes:
        epochs_mse: epochs of the projection (gamma) phase
        epochs_ml: epochs of the likelihood (eta) phase
        batch_size: rows per step; the last batch of an epoch may be smaller
        lr: Adam learning rate
        beta1, beta2: Adam moment decay rates, in [0, 1)
        adam_eps: Adam denominator offset
        seed: seeds the per-epoch shuffles
        divergence_limit: losses above this abort the run
    """
    epochs_mse: int = 10
    epochs_ml: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.epochs_mse < 0 or self.epochs_ml < 0:
            raise ValueError(f"epoch counts must be non-negative, got {self.epochs_mse}/{self.epochs_ml}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not self.adam_eps > 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")


@dataclass
class AdamMoments:
    """First/second moment accumulators of one parameter and its update count."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, value: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(value), np.zeros_like(value), 0)


@dataclass
class TrainState:
    """
    Trainer position and optimizer memory.

    `epoch` is the next epoch to run within `phase`; `history` holds one
    (phase, epoch, step, loss) row per optimization step.
    """
    phase: str = MSE
    epoch: int = 0
    step: int = 0
    moments: Dict[str, AdamMoments] = field(default_factory=dict)
    history: List[Tuple[str, int, int, float]] = field(default_factory=list)

    def moments_for(self, param: Parameter) -> AdamMoments:
        if param.name not in self.moments:
            self.moments[param.name] = AdamMoments.zeros_like(param.value)
        moments = self.moments[param.name]
        if moments.m.shape != param.value.shape:
            raise dc.ShapeError(f"Adam moments for {param.name} have shape {moments.m.shape}, "
                                f"parameter has {param.value.shape}")
        return moments

    def to_checkpoint(self) -> Tuple[dict, List[np.ndarray]]:
        """JSON-ready description plus the moment arrays it refers to (m then v per entry)."""
        names = sorted(self.moments)
        arrays = []
        for name in names:
            arrays.extend([self.moments[name].m, self.moments[name].v])
        described = {
            "phase": self.phase,
            "epoch": self.epoch,
            "step": self.step,
            "moments": [[name, self.moments[name].t] for name in names],
            "history": [list(row) for row in self.history],
        }
        return described, arrays

    @classmethod
    def from_checkpoint(cls, described: dict, arrays: List[np.ndarray]) -> "TrainState":
        entries = described.get("moments", [])
        if len(arrays) != 2 * len(entries):
            raise ValueError(f"trainer state lists {len(entries)} moment pairs but {len(arrays)} arrays were stored")
        moments = {
            name: AdamMoments(arrays[2 * i], arrays[2 * i + 1], int(t))
            for i, (name, t) in enumerate(entries)
        }
        history = [(str(p), int(e), int(s), float(l)) for p, e, s, l in described.get("history", [])]
        return cls(described["phase"], int(described["epoch"]), int(described["step"]), moments, history)


def adam_update(value: np.ndarray, grad: np.ndarray, moments: AdamMoments, config: TrainConfig) -> np.ndarray:
    """
    One bias-corrected Adam step.

    Args:
        value: current parameter array
        grad: gradient of the loss w.r.t. value
        moments: accumulators for this parameter (updated in place)
        config: supplies lr, betas and eps

    Returns:
        The new parameter array (a fresh array; `value` is not modified).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != value.shape:
        raise dc.ShapeError(f"adam_update: gradient shape {grad.shape} != parameter shape {value.shape}")
    moments.t += 1
    moments.m = config.beta1 * moments.m + (1.0 - config.beta1) * grad
    moments.v = config.beta2 * moments.v + (1.0 - config.beta2) * grad * grad
    m_hat = moments.m / (1.0 - config.beta1 ** moments.t)
    v_hat = moments.v / (1.0 - config.beta2 ** moments.t)
    return value - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse_loss_tensor(model: CTrumpetModel, x: Tensor, y: Tensor) -> Tensor:
    """Batch mean of |x - g(g^dagger(x; y); y)|^2."""
    residual = x - model.g_forward_tensor(model.g_pinv_tensor(x, y), y)
    return dc.reduce_mean(dc.reduce_sum(residual * residual, axis=-1))


def ml_loss_tensor(model: CTrumpetModel, z_prime: Tensor, y: Tensor) -> Tensor:
    """Batch mean of -log p_Z(h^{-1}(z')) + log|det J_h|."""
    z, logdet = model.h_inverse_tensor(z_prime, y)
    return dc.reduce_mean(logdet - model.latent.log_prob(z))


def phase_loss(model: CTrumpetModel, phase: str, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Loss of one phase on a batch, using whatever parameters are currently bound."""
    x_t, y_t = dc.constant(x), dc.constant(y)
    if phase == MSE:
        return mse_loss_tensor(model, x_t, y_t)
    if phase == ML:
        # g is frozen in this phase: z' carries no gradient
        with_g_frozen = dc.constant(model.g_pinv_tensor(x_t, y_t).data)
        return ml_loss_tensor(model, with_g_frozen, y_t)
    raise ValueError(f"Unknown phase '{phase}'")


def compute_gradients(model: CTrumpetModel, phase: str, x: np.ndarray, y: np.ndarray
                      ) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Loss and gradients for the parameters the phase trains.

    Returns:
        (loss, {parameter name: gradient})
    """
    params = model.parameters(PHASE_GROUPS[phase])
    tape = Tape()
    with bound(params, tape) as leaves:
        loss = phase_loss(model, phase, x, y)
        if not loss.linked:
            return loss.item(), {p.name: np.zeros_like(p.value) for p in params}
        grads = dc.backward(loss)
    tape.clear()
    return loss.item(), {name: grads[leaf.node] for name, leaf in leaves.items()}


def _step(model: CTrumpetModel, phase: str, x: np.ndarray, y: np.ndarray, state: TrainState,
          config: TrainConfig) -> float:
    try:
        loss, grads = compute_gradients(model, phase, x, y)
    except DomainError as e:
        raise DivergenceError(phase, state.epoch, state.step, float("nan"), str(e))
    if not np.isfinite(loss) or loss > config.divergence_limit:
        raise DivergenceError(phase, state.epoch, state.step, loss)
    for param in model.parameters(PHASE_GROUPS[phase]):
        param.value = adam_update(param.value, grads[param.name], state.moments_for(param), config)
    state.history.append((phase, state.epoch, state.step, loss))
    state.step += 1
    logger.debug(f"{phase} epoch {state.epoch} step {state.step}: loss {loss:.6e}")
    return loss


def mse_step(model: CTrumpetModel, x: np.ndarray, y: np.ndarray, state: TrainState, config: TrainConfig) -> float:
    """One Adam step on the projection loss; only gamma parameters move."""
    if state.phase != MSE:
        raise dc.ContractError(f"mse_step called in phase '{state.phase}'")
    return _step(model, MSE, x, y, state, config)


def ml_step(model: CTrumpetModel, x: np.ndarray, y: np.ndarray, state: TrainState, config: TrainConfig) -> float:
    """One Adam step on the intermediate negative log-likelihood; only eta parameters move."""
    if state.phase != ML:
        raise dc.ContractError(f"ml_step called in phase '{state.phase}'")
    return _step(model, ML, x, y, state, config)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    phase: str
    checked: int
    max_rel_error: float
    failures: List[str]

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(model: CTrumpetModel, phase: str, x: np.ndarray, y: np.ndarray,
                   rng: np.random.Generator, fraction: float = 0.01, step: float = 1e-5,
                   rtol: float = 1e-4, atol: float = 1e-8) -> GradientCheckReport:
    """
    Compare tape gradients with central differences on a random subsample
    of the phase's parameter entries (at least one entry per check).
    """
    _, grads = compute_gradients(model, phase, x, y)
    params = model.parameters(PHASE_GROUPS[phase])
    entries = [(p, i) for p in params for i in range(p.value.size)]
    count = max(1, int(round(fraction * len(entries))))
    picks = rng.choice(len(entries), size=min(count, len(entries)), replace=False)

    failures, worst = [], 0.0
    for k in sorted(picks):
        param, index = entries[k]
        flat = param.value.reshape(-1)
        original = flat[index]
        flat[index] = original + step
        upper = phase_loss(model, phase, x, y).item()
        flat[index] = original - step
        lower = phase_loss(model, phase, x, y).item()
        flat[index] = original
        numeric = (upper - lower) / (2.0 * step)
        analytic = float(grads[param.name].reshape(-1)[index])
        error = abs(analytic - numeric)
        scale = max(abs(analytic), abs(numeric))
        rel = error / scale if scale > 0 else 0.0
        worst = max(worst, rel if error > atol else 0.0)
        if error > rtol * scale + atol:
            failures.append(f"{param.name}[{index}]: tape {analytic:.8e} vs finite difference {numeric:.8e}")
    return GradientCheckReport(phase, len(picks), worst, failures)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, seed: int, phase: str, epoch: int) -> List[np.ndarray]:
    """Row indices of each batch in one epoch, from a permutation seeded by (seed, phase, epoch)."""
    order = np.random.default_rng([seed, PHASE_IDS[phase], epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def diverged_checkpoint_path(path: Union[str, Path]) -> Path:
    """Where the aborted state of a diverged run goes: run.ckpt -> run.diverged.ckpt."""
    path = Path(path)
    return path.with_name(f"{path.stem}.diverged{path.suffix}")


def write_metrics(history: List[Tuple[str, int, int, float]], path: Union[str, Path]) -> Path:
    """Write per-step losses as CSV with columns phase, epoch, step, loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for phase, epoch, step, loss in history:
            writer.writerow([phase, epoch, step, repr(float(loss))])
    return path


@dataclass
class TrainResult:
    model: CTrumpetModel
    state: TrainState

    def epoch_losses(self, phase: str) -> List[float]:
        """Mean loss per epoch of one phase."""
        by_epoch: Dict[int, List[float]] = {}
        for p, epoch, _, loss in self.state.history:
            if p == phase:
                by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(model: CTrumpetModel, x: np.ndarray, cond: np.ndarray, config: TrainConfig,
          checkpoint_path: Optional[Union[str, Path]] = None,
          metrics_path: Optional[Union[str, Path]] = None,
          state: Optional[TrainState] = None) -> TrainResult:
    """
    Run the MSE phase then the ML phase.

    Args:
        model: model to train in place
        x: training data, shape (N, D)
        cond: conditioning inputs, shape (N, cond_dim)
        config: optimization settings
        checkpoint_path: written at the end of every epoch; on divergence the
            aborted state goes to diverged_checkpoint_path(checkpoint_path) and
            the last end-of-epoch checkpoint is left untouched
        metrics_path: per-step loss CSV, written at the end and on divergence
        state: trainer state to resume from (None starts fresh)

    Returns:
        TrainResult with the trained model and final trainer state.

    Raises:
        DivergenceError: a loss became non-finite or exceeded the limit
    """
    x = np.asarray(x, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"train: dataset must be a non-empty (N, D) array, got shape {x.shape}")
    if cond.shape[0] != x.shape[0]:
        raise dc.ShapeError(f"train: {x.shape[0]} samples but {cond.shape[0]} conditioning rows")
    state = state if state is not None else TrainState()
    epochs = {MSE: config.epochs_mse, ML: config.epochs_ml}

    def checkpoint(path=checkpoint_path):
        if path is not None:
            described, arrays = state.to_checkpoint()
            described["config"] = asdict(config)
            save_checkpoint(model, path, described, arrays)

    try:
        for phase in (MSE, ML):
            if state.phase == DONE or (phase == MSE and state.phase == ML):
                continue
            if state.epoch == 0 and epochs[phase] > 0:
                first = epoch_batches(x.shape[0], config.batch_size, config.seed, phase, 0)[0]
                model.initialize_actnorms(x[first], cond[first], PHASE_GROUPS[phase])
            while state.epoch < epochs[phase]:
                losses = []
                for rows in epoch_batches(x.shape[0], config.batch_size, config.seed, phase, state.epoch):
                    losses.append(_step(model, phase, x[rows], cond[rows], state, config))
                logger.info(f"[OK] {phase} epoch {state.epoch + 1}/{epochs[phase]}: mean loss {np.mean(losses):.6f}")
                state.epoch += 1
                checkpoint()
            state.phase = ML if phase == MSE else DONE
            state.epoch = 0
    except DivergenceError as e:
        logger.error(f"[ERROR] {e}")
        if checkpoint_path is not None:
            checkpoint(diverged_checkpoint_path(checkpoint_path))
        if metrics_path is not None:
            write_metrics(state.history, metrics_path)
        raise

    checkpoint()
    if metrics_path is not None:
        write_metrics(state.history, metrics_path)
    return TrainResult(model, state)
