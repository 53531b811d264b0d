"""
Parameters and Fully Connected Networks

Named parameter arrays (tagged with the training group that owns them) and
the small fully connected networks used for coupling scale/shift functions
and conditioning feature extractors.
"""

from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from trumpetflow import diffcore as dc
from trumpetflow.diffcore import Tape, Tensor

# Training groups: gamma = injective part g, eta = bijective part h
GAMMA = "gamma"
ETA = "eta"
GROUPS = (GAMMA, ETA)


class Parameter:
    """
    A named float64 array owned by one training group.

    While bound to a Tape, tensor() returns the tape leaf so gradients can
    flow to it; otherwise it returns a plain constant tensor.
    """

    def __init__(self, name: str, value, group: str):
        if group not in GROUPS:
            raise ValueError(f"Unknown parameter group '{group}' for {name}")
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.group = group
        self._bound: Optional[Tensor] = None

    @property
    def shape(self):
        return self.value.shape

    def tensor(self) -> Tensor:
        if self._bound is not None:
            return self._bound
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape}, group={self.group})"


@contextmanager
def bound(parameters: Sequence[Parameter], tape: Tape) -> Iterator[Dict[str, Tensor]]:
    """
    Make each parameter a leaf of the tape for the duration of the block.

    Yields:
        Map from parameter name to its leaf tensor.
    """
    leaves = {}
    try:
        for p in parameters:
            p._bound = tape.leaf(p.value)
            leaves[p.name] = p._bound
        yield leaves
    finally:
        for p in parameters:
            p._bound = None


class Dense:
    """Affine map x @ W + b on row-batched inputs."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, group: str,
                 zero_init: bool = False):
        if zero_init:
            weight = np.zeros((n_in, n_out))
        else:
            weight = rng.normal(scale=1.0 / np.sqrt(n_in), size=(n_in, n_out))
        self.weight = Parameter(f"{name}.weight", weight, group)
        self.bias = Parameter(f"{name}.bias", np.zeros(n_out), group)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.matmul(x, self.weight.tensor()) + self.bias.tensor()

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class MLP:
    """
    Fully connected network with tanh between layers.

    Args:
        sizes: layer widths, input first, output last
        final_activation: apply tanh after the last layer too
        zero_last: start the last layer at zero (network outputs 0 at init)
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str, group: str,
                 final_activation: bool = False, zero_last: bool = False):
        if len(sizes) < 2:
            raise ValueError(f"MLP needs at least input and output widths, got {list(sizes)}")
        self.sizes = list(sizes)
        self.final_activation = final_activation
        last = len(sizes) - 2
        self.layers = [
            Dense(sizes[i], sizes[i + 1], rng, f"{name}.{i}", group, zero_init=zero_last and i == last)
            for i in range(len(sizes) - 1)
        ]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = dc.tanh(x)
        return x

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class CondNet(MLP):
    """
    Conditioning network c_phi: raw measurement y -> feature vector.

    Two fully connected tanh layers; the output width must equal the
    conditioning width its coupling layer expects.
    """

    def __init__(self, cond_dim: int, width: int, rng: np.random.Generator, name: str, group: str):
        super().__init__([cond_dim, width, width], rng, name, group, final_activation=True)
