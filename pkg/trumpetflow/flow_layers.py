"""
Invertible and Injective Flow Layers

Activation normalization, LU-parametrized 1x1 linear maps (bijective and
dimension-expanding), affine coupling in standard and fixed-volume-change
(FVC) modes, skip connections to the measurements, and the revnet block that
chains them.

Every layer works on row batches, z of shape (batch, dim), and returns its
log-det contribution per sample, shape (batch,). Forward is the generative
direction (latent to data).
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg as sla

from trumpetflow import diffcore as dc
from trumpetflow.diffcore import ContractError, Tensor
from trumpetflow.nets import CondNet, MLP, Parameter

logger = logging.getLogger(__name__)

STANDARD = "standard"
FVC = "fvc"
COUPLING_MODES = (STANDARD, FVC)

DEFAULT_SCALE_CLAMP = 2.0
SKIP_EPS = 1e-3
SIGMA_FLOOR = 1e-4
PINV_CONDITION_LIMIT = 1e12


class InvariantViolationError(ArithmeticError):
    """Raised when a layer parameter leaves its admissible set (e.g. sigma <= 0)."""
    pass


class SingularMatrixError(ArithmeticError):
    """Raised when the normal-equation matrix of an injective layer is numerically singular."""
    pass


def _per_sample(value: Tensor, batch: int) -> Tensor:
    """Broadcast a scalar log-det term to one entry per sample."""
    return dc.constant(np.ones(batch)) * value


def _rows(z: Tensor) -> int:
    if z.ndim != 2:
        raise dc.ShapeError(f"flow layers expect (batch, dim) inputs, got shape {z.shape}")
    return z.shape[0]


# ---------------------------------------------------------------------------
# Activation normalization
# ---------------------------------------------------------------------------

class ActNorm:
    """
    Per-feature affine normalization, x = (z - mu) / sigma.

    sigma is stored as log(sigma) so it stays positive under gradient steps;
    explicit assignments are validated.
    """

    kind = "actnorm"

    def __init__(self, dim: int, name: str, group: str):
        self.dim = dim
        self.mu = Parameter(f"{name}.mu", np.zeros(dim), group)
        self.log_sigma = Parameter(f"{name}.log_sigma", np.zeros(dim), group)
        self.initialized = False

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.value)

    def set_scale(self, mu, sigma):
        """Assign mu and sigma directly; sigma must be positive everywhere."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise InvariantViolationError(f"ActNorm sigma must be positive, got {sigma}")
        self.mu.value = np.array(mu, dtype=np.float64).reshape(self.dim)
        self.log_sigma.value = np.log(sigma).reshape(self.dim)
        self.initialized = True

    def initialize(self, x: np.ndarray):
        """
        Data-dependent init from data-side values x (the inverse direction):
        choose mu, sigma so that the inverse output sigma*x + mu has zero mean
        and unit variance per feature.
        """
        x = np.asarray(x, dtype=np.float64)
        std = np.maximum(x.std(axis=0), SIGMA_FLOOR)
        sigma = np.maximum(1.0 / std, SIGMA_FLOOR)
        self.set_scale(-x.mean(axis=0) * sigma, sigma)
        logger.debug(f"[OK] ActNorm {self.mu.name} initialized from {x.shape[0]} samples")

    def logdet(self, batch: int) -> Tensor:
        return _per_sample(-dc.reduce_sum(self.log_sigma.tensor()), batch)

    def forward(self, z: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        batch = _rows(z)
        x = (z - self.mu.tensor()) * dc.exp(-self.log_sigma.tensor())
        return x, self.logdet(batch)

    def inverse_with_logdet(self, x: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        z = x * dc.exp(self.log_sigma.tensor()) + self.mu.tensor()
        return z, self.logdet(_rows(x))

    def inverse(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        return self.inverse_with_logdet(x, cond)[0]

    def to_identity(self):
        self.set_scale(np.zeros(self.dim), np.ones(self.dim))

    def parameters(self) -> List[Parameter]:
        return [self.mu, self.log_sigma]


# ---------------------------------------------------------------------------
# 1x1 linear maps
# ---------------------------------------------------------------------------

class LULinear:
    """
    Invertible linear map w = P L (U + diag(sign_s * exp(log_s))).

    P is a fixed permutation, L unit lower triangular, U strictly upper
    triangular. log|det w| = sum(log_s), and the inverse costs a permutation
    undo plus two triangular solves.
    """

    kind = "lu_linear"

    def __init__(self, dim: int, rng: np.random.Generator, name: str, group: str,
                 matrix: Optional[np.ndarray] = None):
        if matrix is None:
            # random rotation, as in Glow
            matrix = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
        perm, lower, upper = sla.lu(np.asarray(matrix, dtype=np.float64))
        s = np.diag(upper).copy()
        if np.any(s == 0.0):
            raise SingularMatrixError(f"{name}: initial matrix is singular")
        self.dim = dim
        self.perm = perm
        self.sign_s = np.sign(s)
        self.lower_mask = np.tril(np.ones((dim, dim)), -1)
        self.upper_mask = np.triu(np.ones((dim, dim)), 1)
        self.lower = Parameter(f"{name}.lower", np.tril(lower, -1), group)
        self.upper = Parameter(f"{name}.upper", np.triu(upper, 1), group)
        self.log_s = Parameter(f"{name}.log_s", np.log(np.abs(s)), group)

    @classmethod
    def from_factors(cls, perm, lower, upper, s, name: str = "lu", group: str = "gamma") -> "LULinear":
        """Build from explicit P, L, U (off-diagonal parts) and diagonal s."""
        perm = np.asarray(perm, dtype=np.float64)
        lower = np.tril(np.asarray(lower, dtype=np.float64), -1) + np.eye(perm.shape[0])
        upper = np.triu(np.asarray(upper, dtype=np.float64), 1) + np.diag(np.asarray(s, dtype=np.float64))
        layer = cls(perm.shape[0], np.random.default_rng(0), name, group, matrix=perm @ lower @ upper)
        # scipy may choose a different pivot order; keep the caller's factors
        layer.perm = perm
        layer.sign_s = np.sign(np.diag(upper))
        layer.lower.value = np.tril(lower, -1)
        layer.upper.value = np.triu(upper, 1)
        layer.log_s.value = np.log(np.abs(np.diag(upper)))
        return layer

    def _factors(self) -> Tuple[Tensor, Tensor]:
        eye = dc.constant(np.eye(self.dim))
        lower = self.lower.tensor() * dc.constant(self.lower_mask) + eye
        diag = eye * (dc.constant(self.sign_s) * dc.exp(self.log_s.tensor()))
        upper = self.upper.tensor() * dc.constant(self.upper_mask) + diag
        return lower, upper

    def weight(self) -> Tensor:
        lower, upper = self._factors()
        return dc.matmul(dc.matmul(dc.constant(self.perm), lower), upper)

    def logdet(self, batch: int) -> Tensor:
        return _per_sample(dc.reduce_sum(self.log_s.tensor()), batch)

    def forward(self, z: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        batch = _rows(z)
        x = dc.matmul(z, dc.transpose(self.weight()))
        return x, self.logdet(batch)

    def inverse_with_logdet(self, x: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        batch = _rows(x)
        lower, upper = self._factors()
        unpermuted = dc.matmul(dc.constant(self.perm.T), dc.transpose(x))
        z = dc.solve(upper, dc.solve(lower, unpermuted, "unit_lower"), "upper")
        return dc.transpose(z), self.logdet(batch)

    def inverse(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        return self.inverse_with_logdet(x, cond)[0]

    def to_identity(self):
        self.perm = np.eye(self.dim)
        self.sign_s = np.ones(self.dim)
        self.lower.value = np.zeros((self.dim, self.dim))
        self.upper.value = np.zeros((self.dim, self.dim))
        self.log_s.value = np.zeros(self.dim)

    def parameters(self) -> List[Parameter]:
        return [self.lower, self.upper, self.log_s]


class InjectiveLinear:
    """
    Dimension-expanding linear map w = [top; free] of shape (c_out, c_in).

    The top block is an LULinear, so w has full column rank by construction.
    The left inverse is the pseudo-inverse (w^T w)^{-1} w^T.
    """

    kind = "injective_linear"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str, group: str,
                 matrix: Optional[np.ndarray] = None):
        if c_out <= c_in:
            raise ValueError(f"InjectiveLinear needs c_out > c_in, got {c_in} -> {c_out}")
        self.c_in = c_in
        self.c_out = c_out
        if matrix is None:
            top = None
            free = rng.normal(scale=1.0 / np.sqrt(c_in), size=(c_out - c_in, c_in))
        else:
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.shape != (c_out, c_in):
                raise dc.ShapeError(f"{name}: matrix shape {matrix.shape} != {(c_out, c_in)}")
            top, free = matrix[:c_in], matrix[c_in:]
        self.top = LULinear(c_in, rng, f"{name}.top", group, matrix=top)
        self.free = Parameter(f"{name}.free", free, group)

    @classmethod
    def from_matrix(cls, matrix, name: str = "inj", group: str = "gamma") -> "InjectiveLinear":
        matrix = np.asarray(matrix, dtype=np.float64)
        c_out, c_in = matrix.shape
        return cls(c_in, c_out, np.random.default_rng(0), name, group, matrix=matrix)

    def weight(self) -> Tensor:
        return dc.concat([self.top.weight(), self.free.tensor()], axis=0)

    def _gram(self, w: Tensor) -> Tensor:
        gram = dc.matmul(dc.transpose(w), w)
        condition = np.linalg.cond(gram.data)
        if not np.isfinite(condition) or condition > PINV_CONDITION_LIMIT:
            raise SingularMatrixError(
                f"{self.free.name}: normal-equation matrix is numerically singular (cond {condition:.3e})"
            )
        return gram

    def half_logdet(self, batch: int) -> Tensor:
        w = self.weight()
        return _per_sample(0.5 * dc.logdet(self._gram(w)), batch)

    def forward(self, z: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        batch = _rows(z)
        w = self.weight()
        x = dc.matmul(z, dc.transpose(w))
        return x, _per_sample(0.5 * dc.logdet(self._gram(w)), batch)

    def pinv(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        _rows(x)
        w = self.weight()
        rhs = dc.matmul(dc.transpose(w), dc.transpose(x))
        return dc.transpose(dc.solve(self._gram(w), rhs))

    inverse = pinv

    def projection_matrix(self) -> np.ndarray:
        """P = w w^dagger, the orthogonal projector onto the range of w."""
        w = self.weight().data
        return w @ np.linalg.solve(w.T @ w, w.T)

    def to_identity(self):
        """w = [I; 0], so the pseudo-inverse truncates to the first c_in coordinates."""
        self.top.to_identity()
        self.free.value = np.zeros((self.c_out - self.c_in, self.c_in))

    def parameters(self) -> List[Parameter]:
        return self.top.parameters() + [self.free]


# ---------------------------------------------------------------------------
# Affine coupling
# ---------------------------------------------------------------------------

class CouplingLayer:
    """
    Affine coupling: x1 = z1, x2 = s(z1, c) * z2 + b(z1, c).

    The shift takes z1 (= x1), so the inverse z2 = (x2 - b(x1, c)) / s(x1, c)
    uses only quantities available from x. In standard mode
    s = exp(clamp * tanh(raw)); in FVC mode s = exp(softmax(m)), which fixes
    sum(log s) = 1 for every input.
    """

    kind = "coupling"

    def __init__(self, dim: int, rng: np.random.Generator, name: str, group: str,
                 mode: str = STANDARD, cond_width: int = 0, hidden: int = 32,
                 split_index: Optional[int] = None, scale_clamp: float = DEFAULT_SCALE_CLAMP):
        if mode not in COUPLING_MODES:
            raise ValueError(f"Unknown coupling mode '{mode}' (expected one of {COUPLING_MODES})")
        split = dim // 2 if split_index is None else split_index
        if not 0 < split < dim:
            raise ValueError(f"{name}: split index {split} outside (0, {dim})")
        self.dim = dim
        self.split_index = split
        self.mode = mode
        self.cond_width = cond_width
        self.scale_clamp = scale_clamp
        n_in = split + cond_width
        n_out = dim - split
        # 3 fully connected layers; last layer starts at zero
        self.scale_net = MLP([n_in, hidden, hidden, n_out], rng, f"{name}.scale", group, zero_last=True)
        self.shift_net = MLP([n_in, hidden, hidden, n_out], rng, f"{name}.shift", group, zero_last=True)

    @property
    def conditional(self) -> bool:
        return self.cond_width > 0

    def _scale_shift(self, fixed: Tensor, features: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        if self.conditional != (features is not None):
            raise ContractError(
                f"coupling: conditional={self.conditional} but features "
                f"{'missing' if features is None else 'given'}"
            )
        net_in = dc.concat([fixed, features]) if features is not None else fixed
        raw = self.scale_net(net_in)
        if self.mode == FVC:
            log_s = dc.softmax(raw)
        else:
            log_s = self.scale_clamp * dc.tanh(raw)
        return log_s, self.shift_net(net_in)

    def _check_scale(self, log_s: Tensor):
        if np.any(np.exp(log_s.data) <= 0.0):
            raise InvariantViolationError("coupling scale has non-positive entries")

    def forward(self, z: Tensor, features: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        _rows(z)
        z1 = dc.take(z, 0, self.split_index)
        z2 = dc.take(z, self.split_index, self.dim)
        log_s, shift = self._scale_shift(z1, features)
        self._check_scale(log_s)
        x2 = dc.exp(log_s) * z2 + shift
        return dc.concat([z1, x2]), dc.reduce_sum(log_s, axis=-1)

    def inverse_with_logdet(self, x: Tensor, features: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Inverse plus the forward log-det evaluated at the returned z."""
        _rows(x)
        x1 = dc.take(x, 0, self.split_index)
        x2 = dc.take(x, self.split_index, self.dim)
        log_s, shift = self._scale_shift(x1, features)
        self._check_scale(log_s)
        z2 = (x2 - shift) * dc.exp(-log_s)
        return dc.concat([x1, z2]), dc.reduce_sum(log_s, axis=-1)

    def inverse(self, x: Tensor, features: Optional[Tensor] = None) -> Tensor:
        return self.inverse_with_logdet(x, features)[0]

    def to_identity(self):
        """Zero both output layers: identity in standard mode, s = exp(1/l) and b = 0 in FVC mode."""
        for net in (self.scale_net, self.shift_net):
            last = net.layers[-1]
            last.weight.value = np.zeros_like(last.weight.value)
            last.bias.value = np.zeros_like(last.bias.value)

    def parameters(self) -> List[Parameter]:
        return self.scale_net.parameters() + self.shift_net.parameters()


# ---------------------------------------------------------------------------
# Revnet block
# ---------------------------------------------------------------------------

class RevnetBlock:
    """
    ActNorm (optional) -> 1x1 linear (bijective or injective) -> coupling.

    A conditional block owns the conditioning network that feeds its
    coupling layer.
    """

    kind = "revnet"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str, group: str,
                 actnorm: bool = True, mode: str = STANDARD, cond_dim: int = 0, cond_width: int = 16,
                 hidden: int = 32, scale_clamp: float = DEFAULT_SCALE_CLAMP):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.actnorm = ActNorm(in_dim, f"{name}.actnorm", group) if actnorm else None
        if out_dim == in_dim:
            self.linear = LULinear(in_dim, rng, f"{name}.linear", group)
        else:
            self.linear = InjectiveLinear(in_dim, out_dim, rng, f"{name}.linear", group)
        width = cond_width if cond_dim > 0 else 0
        self.cond_net = CondNet(cond_dim, cond_width, rng, f"{name}.cond", group) if cond_dim > 0 else None
        self.coupling = CouplingLayer(out_dim, rng, f"{name}.coupling", group, mode=mode,
                                      cond_width=width, hidden=hidden, scale_clamp=scale_clamp)

    @property
    def injective(self) -> bool:
        return self.out_dim > self.in_dim

    def _features(self, cond: Optional[Tensor]) -> Optional[Tensor]:
        if self.cond_net is None:
            return None
        if cond is None:
            raise ContractError("revnet block is conditional but no measurement was given")
        return self.cond_net(cond)

    def forward(self, z: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        x, logdet = z, None
        if self.actnorm is not None:
            x, logdet = self.actnorm.forward(x)
        x, ld = self.linear.forward(x)
        logdet = ld if logdet is None else logdet + ld
        x, ld = self.coupling.forward(x, self._features(cond))
        return x, logdet + ld

    def inverse(self, x: Tensor, cond: Optional[Tensor] = None, initialize: bool = False) -> Tensor:
        """Exact inverse (pseudo-inverse for injective blocks); optionally run ActNorm data init."""
        z = self.coupling.inverse(x, self._features(cond))
        z = self.linear.inverse(z)
        if self.actnorm is not None:
            if initialize and not self.actnorm.initialized:
                self.actnorm.initialize(z.data)
            z = self.actnorm.inverse(z)
        return z

    def inverse_with_logdet(self, x: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        if self.injective:
            raise ContractError("inverse_with_logdet is only defined for bijective blocks")
        z, logdet = self.coupling.inverse_with_logdet(x, self._features(cond))
        z, ld = self.linear.inverse_with_logdet(z)
        logdet = logdet + ld
        if self.actnorm is not None:
            z, ld = self.actnorm.inverse_with_logdet(z)
            logdet = logdet + ld
        return z, logdet

    def actnorms(self) -> List[ActNorm]:
        return [self.actnorm] if self.actnorm is not None else []

    def lu_linears(self) -> List[LULinear]:
        return [self.linear.top if isinstance(self.linear, InjectiveLinear) else self.linear]

    def to_identity(self):
        if self.actnorm is not None:
            self.actnorm.to_identity()
        self.linear.to_identity()
        self.coupling.to_identity()

    def parameters(self) -> List[Parameter]:
        params = self.actnorm.parameters() if self.actnorm is not None else []
        params = params + self.linear.parameters()
        if self.cond_net is not None:
            params = params + self.cond_net.parameters()
        return params + self.coupling.parameters()


# ---------------------------------------------------------------------------
# Skip connection
# ---------------------------------------------------------------------------

def resize_matrix(m: int, c: int) -> np.ndarray:
    """
    Constant (m, c) matrix R with resize(y) = y @ R.

    Identity when m == c, cyclic repeat-padding when m < c and mean-pooling
    over contiguous groups when m > c.
    """
    r = np.zeros((m, c))
    if m == c:
        return np.eye(m)
    if m < c:
        r[np.arange(c) % m, np.arange(c)] = 1.0
        return r
    for j, group in enumerate(np.array_split(np.arange(m), c)):
        r[group, j] = 1.0 / len(group)
    return r


class SkipConnection:
    """
    x = (1 - S) * rev(z; y) + S * resize(y).

    S is a logistic map of an unconstrained parameter into [eps, 1 - eps],
    so (1 - S) never vanishes and the inverse
    z = rev^{-1}((x - S * resize(y)) / (1 - S); y) is always defined.
    """

    kind = "skip"

    def __init__(self, inner: RevnetBlock, cond_dim: int, name: str, group: str, eps: float = SKIP_EPS):
        self.inner = inner
        self.eps = eps
        self.resize = resize_matrix(cond_dim, inner.out_dim)
        # raw 0 gives S = 0.5
        self.s_raw = Parameter(f"{name}.s_raw", np.zeros(inner.out_dim), group)

    @property
    def in_dim(self) -> int:
        return self.inner.in_dim

    @property
    def out_dim(self) -> int:
        return self.inner.out_dim

    @property
    def injective(self) -> bool:
        return self.inner.injective

    def mixing(self) -> Tensor:
        """Effective S = eps + (1 - 2 eps) * logistic(s_raw)."""
        logistic = 0.5 * (1.0 + dc.tanh(0.5 * self.s_raw.tensor()))
        return self.eps + (1.0 - 2.0 * self.eps) * logistic

    def _resized(self, cond: Optional[Tensor]) -> Tensor:
        if cond is None:
            raise ContractError("skip connection needs the measurement y")
        return dc.matmul(cond, dc.constant(self.resize))

    def forward(self, z: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        inner_x, logdet = self.inner.forward(z, cond)
        s = self.mixing()
        keep = 1.0 - s
        x = keep * inner_x + s * self._resized(cond)
        return x, logdet + _per_sample(dc.reduce_sum(dc.log(keep)), _rows(z))

    def inverse(self, x: Tensor, cond: Optional[Tensor] = None, initialize: bool = False) -> Tensor:
        s = self.mixing()
        inner_x = (x - s * self._resized(cond)) / (1.0 - s)
        return self.inner.inverse(inner_x, cond, initialize=initialize)

    def inverse_with_logdet(self, x: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        s = self.mixing()
        keep = 1.0 - s
        inner_x = (x - s * self._resized(cond)) / keep
        z, logdet = self.inner.inverse_with_logdet(inner_x, cond)
        return z, logdet + _per_sample(dc.reduce_sum(dc.log(keep)), _rows(x))

    def actnorms(self) -> List[ActNorm]:
        return self.inner.actnorms()

    def lu_linears(self) -> List[LULinear]:
        return self.inner.lu_linears()

    def parameters(self) -> List[Parameter]:
        return self.inner.parameters() + [self.s_raw]
