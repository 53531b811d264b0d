"""
TrumpetFlow Package

Conditional injective normalizing flows for small Bayesian inverse problems.
Modules:
- diffcore: float64 tensors with a reverse-mode gradient tape
- nets / flow_layers: parameters, small networks and invertible layers
- model: the injective-then-bijective flow, sampling, projection, MAP
- training: two-phase Adam trainer
- problems / oracles / metrics: synthetic problems, exact Gaussian posterior, metrics
- settings / verify / cli: configuration, self-checks and the command line
"""

__version__ = "1.0.0"
