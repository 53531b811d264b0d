"""
Settings and Run Configuration

Environment settings come from .env / the process environment. Run
configurations are flat KEY=VALUE files (same syntax as .env, parsed with
python-dotenv) that must declare SCHEMA_VERSION=1.

Precedence: problem defaults < config file < --quick preset < CLI flags.
"""

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv

from trumpetflow.flow_layers import COUPLING_MODES
from trumpetflow.metrics import SSIM_WINDOW
from trumpetflow.model import Architecture
from trumpetflow.problems import FIBER_PROBLEMS, GRF_OPERATORS, PROBLEMS
from trumpetflow.training import TrainConfig

# Load environment variables
load_dotenv()

THREADS = int(os.getenv('TRUMPETFLOW_THREADS', '1'))
LOG_LEVEL = os.getenv('TRUMPETFLOW_LOG_LEVEL', 'INFO')
OUTPUT_DIR = os.getenv('TRUMPETFLOW_OUTPUT_DIR', 'runs')

SCHEMA_VERSION = "1"
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


class ConfigError(ValueError):
    """Raised when a run configuration is missing, malformed or invalid."""
    pass


@dataclass
class RunConfig:
    """One experiment: problem, architecture, optimization and evaluation knobs."""
    problem: str = "torus"
    seed: int = 0
    latent_dim: int = 2
    g_blocks: int = 4
    h_blocks: int = 6
    h_mode: str = "standard"
    g_actnorm: bool = False
    h_actnorm: bool = True
    skip_connections: bool = False
    hidden_width: int = 32
    cond_width: int = 16
    scale_clamp: float = 2.0
    epochs_mse: int = 20
    epochs_ml: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    num_samples: int = 18000
    num_test: int = 1000
    grid_side: int = 16
    patch_size: int = 8
    noise_std: float = 5e-3
    grf_operator: str = "mask"
    mask_prob: float = 0.5
    downsample: int = 2
    num_sensors: int = 10
    measurement_snr_db: float = 40.0
    k_samples: int = 25
    out: str = field(default=OUTPUT_DIR, metadata={"file_key": False})

    def validate(self) -> "RunConfig":
        if self.problem not in PROBLEMS:
            raise ConfigError(f"PROBLEM must be one of {PROBLEMS}, got '{self.problem}'")
        if self.h_mode not in COUPLING_MODES:
            raise ConfigError(f"H_MODE must be one of {COUPLING_MODES}, got '{self.h_mode}'")
        if self.grf_operator not in GRF_OPERATORS:
            raise ConfigError(f"GRF_OPERATOR must be one of {GRF_OPERATORS}, got '{self.grf_operator}'")
        for name in ("num_samples", "num_test", "grid_side", "batch_size", "hidden_width", "cond_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name.upper()} must be positive, got {getattr(self, name)}")
        if self.k_samples < 2:
            raise ConfigError(f"K_SAMPLES must be at least 2, got {self.k_samples}")
        if self.problem not in FIBER_PROBLEMS and self.grid_side < SSIM_WINDOW:
            raise ConfigError(f"GRID_SIDE must be at least {SSIM_WINDOW} (the SSIM window), got {self.grid_side}")
        if self.problem not in FIBER_PROBLEMS and self.latent_dim > self.grid_side ** 2:
            raise ConfigError(f"LATENT_DIM {self.latent_dim} exceeds the data dimension {self.grid_side ** 2}")
        if self.problem in FIBER_PROBLEMS and self.latent_dim > 3:
            raise ConfigError(f"LATENT_DIM {self.latent_dim} exceeds the data dimension 3")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e))
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs_mse=self.epochs_mse, epochs_ml=self.epochs_ml, batch_size=self.batch_size,
            lr=self.lr, beta1=self.adam_beta1, beta2=self.adam_beta2, adam_eps=self.adam_eps,
            seed=self.seed,
        )

    def architecture(self, data_dim: int, cond_dim: int) -> Architecture:
        try:
            return Architecture(
                latent_dim=self.latent_dim, data_dim=data_dim, cond_dim=cond_dim,
                g_blocks=self.g_blocks, h_blocks=self.h_blocks, h_mode=self.h_mode,
                g_actnorm=self.g_actnorm, h_actnorm=self.h_actnorm,
                skip_connections=self.skip_connections, hidden_width=self.hidden_width,
                cond_width=self.cond_width, scale_clamp=self.scale_clamp, seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(str(e))

    def problem_params(self) -> dict:
        return dict(
            grid_side=self.grid_side, patch_size=self.patch_size, noise_std=self.noise_std,
            grf_operator=self.grf_operator, mask_prob=self.mask_prob, downsample=self.downsample,
            num_sensors=self.num_sensors, measurement_snr_db=self.measurement_snr_db,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# Problem defaults on top of the dataclass defaults
PROBLEM_DEFAULTS: Dict[str, dict] = {
    "torus": {},
    "mobius": {},
    "grf-inpaint": dict(latent_dim=32, h_mode="fvc", skip_connections=True, hidden_width=64,
                        cond_width=32, num_samples=10000, num_test=20),
    "traveltime": dict(latent_dim=32, h_mode="fvc", skip_connections=True, hidden_width=64,
                       cond_width=32, num_samples=10000, num_test=20),
}

QUICK_PRESET = dict(g_blocks=4, h_blocks=6, epochs_mse=5, epochs_ml=5, batch_size=128)
QUICK_SAMPLES = {"torus": 2560, "mobius": 2560, "grf-inpaint": 512, "traveltime": 512}
QUICK_TEST = 4


def _file_keys() -> Dict[str, str]:
    return {f.name.upper(): f.name for f in fields(RunConfig) if f.metadata.get("file_key", True)}


def _convert(key: str, raw: Optional[str], kind) -> object:
    if raw is None:
        raise ConfigError(f"{key} has no value")
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read '{raw}' as {getattr(kind, '__name__', kind)}")


def read_config_file(path: Union[str, Path]) -> dict:
    """
    Parse a run-configuration file into RunConfig field overrides.

    Raises:
        ConfigError: missing file, missing/unsupported SCHEMA_VERSION, unknown keys or bad values
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path)
    version = values.pop("SCHEMA_VERSION", None)
    if version is None:
        raise ConfigError(f"{path}: SCHEMA_VERSION is missing")
    if version.strip() != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported SCHEMA_VERSION {version} (expected {SCHEMA_VERSION})")
    keys = _file_keys()
    unknown = sorted(k for k in values if k not in keys)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    types = {f.name: f.type for f in fields(RunConfig)}
    return {keys[k]: _convert(k, v, types[keys[k]]) for k, v in values.items()}


def build_run_config(config_path: Optional[Union[str, Path]] = None, quick: bool = False,
                     overrides: Optional[dict] = None) -> RunConfig:
    """
    Assemble a validated RunConfig.

    Args:
        config_path: optional run-configuration file
        quick: apply the small fast preset
        overrides: explicit values (CLI flags); None entries are ignored
    """
    from_file = read_config_file(config_path) if config_path is not None else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    problem = overrides.get("problem", from_file.get("problem", RunConfig.problem))
    if problem not in PROBLEMS:
        raise ConfigError(f"Unknown problem '{problem}' (expected one of {PROBLEMS})")

    config = replace(RunConfig(), **PROBLEM_DEFAULTS[problem])
    config = replace(config, **from_file)
    if quick:
        config = replace(config, **QUICK_PRESET,
                         num_samples=min(config.num_samples, QUICK_SAMPLES[problem]),
                         num_test=min(config.num_test, QUICK_TEST))
    config = replace(config, **overrides)
    return config.validate()
