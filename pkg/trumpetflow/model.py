"""
C-Trumpet Model

Assembles the injective part g (latent d -> data D, parameter group gamma)
and the bijective part h (on R^d, parameter group eta) into
f(z; y) = g(h(z; y); y), and provides sampling, range projection, the
intermediate-space likelihood, the single-pass surrogate MAP and the
checkpoint file format.

Public methods take and return numpy arrays; the *_tensor variants work on
diffcore tensors and are what the trainer differentiates through.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from trumpetflow import diffcore as dc
from trumpetflow.diffcore import ContractError, Tensor
from trumpetflow.flow_layers import (
    COUPLING_MODES,
    DEFAULT_SCALE_CLAMP,
    FVC,
    STANDARD,
    ActNorm,
    LULinear,
    RevnetBlock,
    SkipConnection,
)
from trumpetflow.nets import ETA, GAMMA, Parameter

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TRUMPETFLOW-CHECKPOINT"
CHECKPOINT_VERSION = 1
BRUTEFORCE_MAX_DIM = 8


class MAPPreconditionError(RuntimeError):
    """Raised when the single-pass MAP shortcut is requested on a model whose h is not FVC."""
    pass


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or truncated."""
    pass


class ArchitectureMismatchError(CheckpointError):
    """Raised when a checkpoint's architecture differs from the expected one."""
    pass


@dataclass(frozen=True)
class Architecture:
    """
    Structural description of a C-Trumpet network.

    Two models built from equal Architectures (same seed included) have the
    same layer structure and the same fixed permutations.
    """
    latent_dim: int
    data_dim: int
    cond_dim: int
    g_blocks: int = 4
    h_blocks: int = 6
    h_mode: str = STANDARD
    g_actnorm: bool = False
    h_actnorm: bool = True
    skip_connections: bool = False
    hidden_width: int = 32
    cond_width: int = 16
    scale_clamp: float = DEFAULT_SCALE_CLAMP
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be at least 2, got {self.latent_dim}")
        if self.latent_dim > self.data_dim:
            raise ValueError(f"latent_dim {self.latent_dim} exceeds data_dim {self.data_dim}")
        if self.cond_dim < 1:
            raise ValueError(f"cond_dim must be positive, got {self.cond_dim}")
        if self.g_blocks < 0 or self.h_blocks < 0:
            raise ValueError(f"block counts must be non-negative, got g={self.g_blocks} h={self.h_blocks}")
        if self.h_mode not in COUPLING_MODES:
            raise ValueError(f"h_mode must be one of {COUPLING_MODES}, got '{self.h_mode}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Architecture":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise CheckpointError(f"Unknown architecture fields: {unknown}")
        return cls(**data)


def expansion_dims(latent_dim: int, data_dim: int) -> List[int]:
    """Widths visited by g: doubling from latent_dim, capped at data_dim."""
    dims = [latent_dim]
    while dims[-1] < data_dim:
        dims.append(min(2 * dims[-1], data_dim))
    return dims


class LatentDistribution:
    """Standard Gaussian on R^d."""

    def __init__(self, dim: int):
        self.dim = dim

    def log_prob(self, z: Tensor) -> Tensor:
        """Per-row log-density -(d/2) log(2 pi) - |z|^2 / 2."""
        return -0.5 * dc.reduce_sum(z * z, axis=-1) + (-0.5 * self.dim * np.log(2.0 * np.pi))

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.dim))

    def mean(self) -> np.ndarray:
        return np.zeros(self.dim)


Block = Union[RevnetBlock, SkipConnection]


class CTrumpetModel:
    """
    Conditional injective flow f(z; y) = g(h(z; y); y).

    Attributes:
        architecture: the structural descriptor the model was built from
        g_layers: blocks mapping R^d to R^D (injective expanders and bijective blocks)
        h_layers: bijective blocks on R^d
        latent: the standard Gaussian base distribution
    """

    def __init__(self, architecture: Architecture):
        arch = architecture
        self.architecture = arch
        rng = np.random.default_rng([arch.seed, 0])
        self.latent = LatentDistribution(arch.latent_dim)
        self.h_layers: List[Block] = [
            self._block(arch.latent_dim, arch.latent_dim, rng, f"h.{i}", ETA,
                        actnorm=arch.h_actnorm, mode=arch.h_mode, skip=False)
            for i in range(arch.h_blocks)
        ]
        self.g_layers: List[Block] = []
        dims = expansion_dims(arch.latent_dim, arch.data_dim)
        stages = max(len(dims) - 1, 1)
        per_stage = [len(chunk) for chunk in np.array_split(np.arange(arch.g_blocks), stages)]
        index = 0
        for stage in range(stages):
            if len(dims) > 1:
                self.g_layers.append(self._block(dims[stage], dims[stage + 1], rng, f"g.{index}", GAMMA,
                                                 actnorm=arch.g_actnorm, mode=STANDARD,
                                                 skip=arch.skip_connections))
                index += 1
            width = dims[min(stage + 1, len(dims) - 1)]
            for _ in range(per_stage[stage]):
                self.g_layers.append(self._block(width, width, rng, f"g.{index}", GAMMA,
                                                 actnorm=arch.g_actnorm, mode=STANDARD,
                                                 skip=arch.skip_connections))
                index += 1
        self._check_structure()
        logger.debug(f"[OK] Built C-Trumpet: {len(self.g_layers)} g blocks over widths {dims}, "
                     f"{len(self.h_layers)} h blocks ({arch.h_mode})")

    def _block(self, in_dim: int, out_dim: int, rng, name: str, group: str,
               actnorm: bool, mode: str, skip: bool) -> Block:
        arch = self.architecture
        block = RevnetBlock(in_dim, out_dim, rng, name, group, actnorm=actnorm, mode=mode,
                            cond_dim=arch.cond_dim, cond_width=arch.cond_width,
                            hidden=arch.hidden_width, scale_clamp=arch.scale_clamp)
        if skip:
            return SkipConnection(block, arch.cond_dim, f"{name}.skip", group)
        return block

    def _check_structure(self):
        width = self.latent_dim
        for layer in self.h_layers:
            if layer.injective or layer.in_dim != width:
                raise ContractError(f"h block {layer.in_dim}->{layer.out_dim} breaks the width chain at {width}")
        for layer in self.g_layers:
            if layer.in_dim != width:
                raise ContractError(f"g block {layer.in_dim}->{layer.out_dim} breaks the width chain at {width}")
            width = layer.out_dim
        if width != self.data_dim:
            raise ContractError(f"g ends at width {width}, expected data_dim {self.data_dim}")

    # -- descriptors --------------------------------------------------------

    @property
    def latent_dim(self) -> int:
        return self.architecture.latent_dim

    @property
    def data_dim(self) -> int:
        return self.architecture.data_dim

    @property
    def cond_dim(self) -> int:
        return self.architecture.cond_dim

    @property
    def h_mode(self) -> str:
        return self.architecture.h_mode

    def parameters(self, group: Optional[str] = None) -> List[Parameter]:
        """All parameters in declaration order (h first, then g), optionally one group only."""
        params = [p for layer in self.h_layers + self.g_layers for p in layer.parameters()]
        if group is not None:
            params = [p for p in params if p.group == group]
        return params

    def actnorms(self, group: Optional[str] = None) -> List[ActNorm]:
        layers = {GAMMA: self.g_layers, ETA: self.h_layers, None: self.h_layers + self.g_layers}[group]
        return [a for layer in layers for a in layer.actnorms()]

    def lu_linears(self) -> List[LULinear]:
        return [lu for layer in self.h_layers + self.g_layers for lu in layer.lu_linears()]

    def to_identity(self):
        """Set every block to the identity map (g becomes zero-padding). Needs skip connections off."""
        for layer in self.h_layers + self.g_layers:
            if isinstance(layer, SkipConnection):
                raise ContractError("a model with skip connections has no identity setting")
            layer.to_identity()

    # -- tensor-level passes ------------------------------------------------

    def h_forward_tensor(self, z: Tensor, y: Tensor) -> Tuple[Tensor, Tensor]:
        logdet = dc.constant(np.zeros(z.shape[0]))
        for layer in self.h_layers:
            z, ld = layer.forward(z, y)
            logdet = logdet + ld
        return z, logdet

    def h_inverse_tensor(self, z_prime: Tensor, y: Tensor) -> Tuple[Tensor, Tensor]:
        """h^{-1}(z'; y) and the summed forward log-det of h evaluated at the result."""
        logdet = dc.constant(np.zeros(z_prime.shape[0]))
        z = z_prime
        for layer in reversed(self.h_layers):
            z, ld = layer.inverse_with_logdet(z, y)
            logdet = logdet + ld
        return z, logdet

    def g_forward_tensor(self, z_prime: Tensor, y: Tensor) -> Tensor:
        x = z_prime
        for layer in self.g_layers:
            x, _ = layer.forward(x, y)
        return x

    def g_pinv_tensor(self, x: Tensor, y: Tensor) -> Tensor:
        z = x
        for layer in reversed(self.g_layers):
            z = layer.inverse(z, y)
        return z

    def forward_tensor(self, z: Tensor, y: Tensor) -> Tensor:
        return self.g_forward_tensor(self.h_forward_tensor(z, y)[0], y)

    # -- array API ----------------------------------------------------------

    def _rows(self, a, width: int, what: str) -> Tuple[np.ndarray, bool]:
        a = np.asarray(a, dtype=np.float64)
        single = a.ndim == 1
        a = a.reshape(1, -1) if single else a
        if a.ndim != 2 or a.shape[1] != width:
            raise dc.ShapeError(f"{what}: expected width {width}, got shape {a.shape}")
        return a, single

    def _pair(self, a, width: int, y, what: str) -> Tuple[Tensor, Tensor, bool]:
        a, single = self._rows(a, width, what)
        y, _ = self._rows(y, self.cond_dim, f"{what} (y)")
        if y.shape[0] == 1 and a.shape[0] > 1:
            y = np.repeat(y, a.shape[0], axis=0)
        if y.shape[0] != a.shape[0]:
            raise dc.ShapeError(f"{what}: {a.shape[0]} rows but {y.shape[0]} measurements")
        return dc.constant(a), dc.constant(y), single

    @staticmethod
    def _out(t: Tensor, single: bool) -> np.ndarray:
        return t.data[0].copy() if single else t.data.copy()

    def sample(self, y, z=None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """
        Generate x = g(h(z; y); y).

        Args:
            y: measurement(s), shape (cond_dim,) or (B, cond_dim)
            z: latent(s) matching y; drawn from the base distribution when None
            rng: random source used when z is None

        Returns:
            Array of shape (D,) or (B, D).
        """
        if z is None:
            if rng is None:
                raise ContractError("sample: give either z or a random source")
            y_rows, single = self._rows(y, self.cond_dim, "sample (y)")
            z = self.latent.sample(y_rows.shape[0], rng)
            z = z[0] if single else z
        z_t, y_t, single = self._pair(z, self.latent_dim, y, "sample")
        return self._out(self.forward_tensor(z_t, y_t), single)

    def g_pinv(self, x, y) -> np.ndarray:
        x_t, y_t, single = self._pair(x, self.data_dim, y, "g_pinv")
        return self._out(self.g_pinv_tensor(x_t, y_t), single)

    def range_project(self, x, y) -> np.ndarray:
        """P_g(x; y) = g(g^dagger(x; y); y)."""
        x_t, y_t, single = self._pair(x, self.data_dim, y, "range_project")
        return self._out(self.g_forward_tensor(self.g_pinv_tensor(x_t, y_t), y_t), single)

    def intermediate_loglik(self, x, y) -> Union[float, np.ndarray]:
        """
        Log-likelihood in z'-space: log p_Z(z) - log|det J_h(z)| with z = h^{-1}(g^dagger(x)).

        Returns a float for a single x, otherwise one value per row.
        """
        x_t, y_t, single = self._pair(x, self.data_dim, y, "intermediate_loglik")
        z, logdet = self.h_inverse_tensor(self.g_pinv_tensor(x_t, y_t), y_t)
        loglik = (self.latent.log_prob(z) - logdet).data
        return float(loglik[0]) if single else loglik.copy()

    def intermediate_loglik_latent(self, z_prime, y) -> Union[float, np.ndarray]:
        """Same as intermediate_loglik but starting from z' directly."""
        z_t, y_t, single = self._pair(z_prime, self.latent_dim, y, "intermediate_loglik_latent")
        z, logdet = self.h_inverse_tensor(z_t, y_t)
        loglik = (self.latent.log_prob(z) - logdet).data
        return float(loglik[0]) if single else loglik.copy()

    def intermediate_latents(self, x, y) -> np.ndarray:
        """Recovered base-space latents h^{-1}(g^dagger(x; y); y)."""
        x_t, y_t, single = self._pair(x, self.data_dim, y, "intermediate_latents")
        z, _ = self.h_inverse_tensor(self.g_pinv_tensor(x_t, y_t), y_t)
        return self._out(z, single)

    def surrogate_map(self, y) -> np.ndarray:
        """
        Single-pass MAP estimate g(h(0; y); y).

        Raises:
            MAPPreconditionError: h is not built from FVC couplings
        """
        if self.h_mode != FVC:
            raise MAPPreconditionError(
                f"surrogate_map needs fixed-volume-change couplings in h (h_mode='{FVC}'), "
                f"this model has h_mode='{self.h_mode}'"
            )
        y_rows, single = self._rows(y, self.cond_dim, "surrogate_map (y)")
        zeros = np.zeros((y_rows.shape[0], self.latent_dim))
        return self.sample(y_rows[0] if single else y_rows, zeros[0] if single else zeros)

    def data_loglik_bruteforce(self, x, y) -> float:
        """
        End-to-end data-space log-likelihood of one on-range x:
        log p_Z(z) - 1/2 log det(J^T J), J the D x d Jacobian of f at z.

        Only for data_dim <= 8.
        """
        if self.data_dim > BRUTEFORCE_MAX_DIM:
            raise ContractError(f"data_loglik_bruteforce needs data_dim <= {BRUTEFORCE_MAX_DIM}, got {self.data_dim}")
        x_t, y_t, single = self._pair(x, self.data_dim, y, "data_loglik_bruteforce")
        if not single and x_t.shape[0] != 1:
            raise ContractError("data_loglik_bruteforce evaluates one point at a time")
        z, _ = self.h_inverse_tensor(self.g_pinv_tensor(x_t, y_t), y_t)

        def f(v: Tensor) -> Tensor:
            out = self.forward_tensor(dc.reshape(v, (1, self.latent_dim)), y_t)
            return dc.reshape(out, (self.data_dim,))

        jac = dc.jacobian(f, z.data[0])
        sign, gram_logdet = np.linalg.slogdet(jac.T @ jac)
        if sign <= 0:
            raise dc.DomainError("data_loglik_bruteforce: Jacobian is rank deficient")
        return float(self.latent.log_prob(z).data[0] - 0.5 * gram_logdet)

    # -- data-dependent init ------------------------------------------------

    def initialize_actnorms(self, x, y, group: str):
        """
        Data-dependent ActNorm init for one part, run in the data-to-latent direction.

        For group gamma the g blocks are inverted from x; for eta, x is first
        mapped through g^dagger and the h blocks are inverted from there.
        Layers already initialized are left alone.
        """
        x_t, y_t, _ = self._pair(x, self.data_dim, y, "initialize_actnorms")
        if group not in (GAMMA, ETA):
            raise ValueError(f"Unknown parameter group '{group}'")
        z = x_t
        for layer in reversed(self.g_layers):
            z = layer.inverse(z, y_t, initialize=(group == GAMMA))
        if group == ETA:
            for layer in reversed(self.h_layers):
                z = layer.inverse(z, y_t, initialize=True)
        pending = [a for a in self.actnorms(group) if not a.initialized]
        if pending:
            logger.warning(f"[WARNING] {len(pending)} ActNorm layers left uninitialized")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout:
#   line 1: TRUMPETFLOW-CHECKPOINT
#   line 2: JSON header (sorted keys) with version, architecture, parameter
#           names/shapes in declaration order, ActNorm init flags, the fixed
#           LU permutations and signs, and the
#           optional trainer state
#   rest:   little-endian float64 arrays, parameters in declaration order,
#           followed by the trainer's extra arrays (Adam moments)

def save_checkpoint(model: CTrumpetModel, path: Union[str, Path], train_state: Optional[dict] = None,
                    extra_arrays: Sequence[np.ndarray] = ()) -> Path:
    """
    Write a checkpoint.

    Args:
        model: the model to store
        path: destination file
        train_state: JSON-serializable trainer state (None for a bare model)
        extra_arrays: arrays appended after the parameters, described by train_state

    Returns:
        The path written.
    """
    path = Path(path)
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture.to_dict(),
        "parameters": [[p.name, list(p.shape)] for p in params],
        "actnorm_initialized": [a.initialized for a in model.actnorms()],
        "lu_fixed": [[np.argmax(lu.perm, axis=0).tolist(), lu.sign_s.astype(int).tolist()]
                     for lu in model.lu_linears()],
        "extra_shapes": [list(np.shape(a)) for a in extra_arrays],
        "train_state": train_state,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("ascii"))
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for array in [p.value for p in params] + list(extra_arrays):
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    tmp.replace(path)
    logger.debug(f"[OK] Checkpoint written to {path}")
    return path


def read_checkpoint_header(path: Union[str, Path]) -> Tuple[dict, int]:
    """Return the parsed header and the byte offset where the arrays start."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic '{magic[:40]}')")
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header ({e})")
        offset = f.tell()
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, offset


def load_checkpoint(path: Union[str, Path], expected: Optional[Architecture] = None
                    ) -> Tuple[CTrumpetModel, Optional[dict], List[np.ndarray]]:
    """
    Rebuild a model from a checkpoint.

    Args:
        path: checkpoint file
        expected: architecture the caller requires; a different one is an error

    Returns:
        (model, train_state or None, extra arrays)

    Raises:
        CheckpointError: malformed or truncated file
        ArchitectureMismatchError: stored architecture differs from `expected`
    """
    path = Path(path)
    header, offset = read_checkpoint_header(path)
    found = Architecture.from_dict(header["architecture"])
    if expected is not None and found != expected:
        raise ArchitectureMismatchError(
            f"{path}: architecture mismatch\n  expected: {json.dumps(expected.to_dict(), sort_keys=True)}"
            f"\n  found:    {json.dumps(found.to_dict(), sort_keys=True)}"
        )
    model = CTrumpetModel(found)
    params = model.parameters()
    stored = [(name, tuple(shape)) for name, shape in header["parameters"]]
    if stored != [(p.name, p.shape) for p in params]:
        raise ArchitectureMismatchError(f"{path}: parameter layout does not match the rebuilt architecture")

    payload = path.read_bytes()[offset:]
    if len(payload) % 8:
        raise CheckpointError(f"{path}: truncated array data ({len(payload)} bytes)")
    raw = np.frombuffer(payload, dtype="<f8")
    shapes = [p.shape for p in params] + [tuple(s) for s in header.get("extra_shapes", [])]
    needed = sum(int(np.prod(s)) for s in shapes)
    if raw.size != needed:
        raise CheckpointError(f"{path}: expected {needed} float64 values, found {raw.size}")

    arrays, cursor = [], 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(raw[cursor:cursor + count].astype(np.float64).reshape(shape))
        cursor += count
    for p, value in zip(params, arrays):
        p.value = value
    for actnorm, flag in zip(model.actnorms(), header["actnorm_initialized"]):
        actnorm.initialized = bool(flag)
    for lu, (rows, signs) in zip(model.lu_linears(), header.get("lu_fixed", [])):
        lu.perm = np.zeros((lu.dim, lu.dim))
        lu.perm[rows, np.arange(lu.dim)] = 1.0
        lu.sign_s = np.asarray(signs, dtype=np.float64)
    return model, header.get("train_state"), arrays[len(params):]


def architecture_summary(model: CTrumpetModel) -> Dict[str, int]:
    """Parameter counts per group, for log lines and reports."""
    return {
        GAMMA: int(sum(p.value.size for p in model.parameters(GAMMA))),
        ETA: int(sum(p.value.size for p in model.parameters(ETA))),
    }
