"""
Run configuration, manifests and logging setup for the command line.

Each subcommand has one dataclass holding everything needed to rerun it.
The resolved dataclass is written to `manifest.json` next to the outputs.
"""
from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
import os
import sys
from pathlib import Path

from loguru import logger

from morphtools.errors import ConfigError, DataError
from morphtools.images import read_pairs
from morphtools.losses import LossWeights
from morphtools.morph import OptimizerConfig

LOG_LEVELS = {"error": "ERROR", "warn": "WARNING", "info": "INFO", "debug": "DEBUG"}
MANIFEST_NAME = "manifest.json"

# case name -> loss weight overrides on top of the run's weights
SWEEP_PRESETS = {
    "ablation": {
        "proposed": {},
        "no_perceptual": {"lambda1": 0.0},
        "no_identity": {"lambda2": 0.0},
        "no_ms_ssim": {"lambda3": 0.0},
        "no_id_diff": {"lambda4": 0.0},
    },
    "hyperparams": {
        "proposed": {},
        "lambda1_0.0004": {"lambda1": 0.0004},
        "lambda1_0.0001": {"lambda1": 0.0001},
        "lambda2_1_lambda3_10": {"lambda2": 1.0, "lambda3": 10.0},
        "lambda2_1_lambda4_10": {"lambda2": 1.0, "lambda4": 10.0},
    },
}


def setup_logging(level=None):
    """Single stderr sink at the level from `MORPHBENCH_LOG` (default info)."""
    requested = (level or os.environ.get("MORPHBENCH_LOG", "info")).strip().lower()
    logger.remove()
    logger.add(
        sys.stderr,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>",
        level=LOG_LEVELS.get(requested, "INFO"),
    )
    if requested not in LOG_LEVELS:
        logger.warning("unknown MORPHBENCH_LOG value '{}', using info", requested)
    return LOG_LEVELS.get(requested, "INFO")


def _existing_file(value, what):
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return str(path.resolve())


def _existing_dir(value, what):
    path = Path(value)
    if not path.is_dir():
        raise ConfigError(f"{what} not found: {path}")
    return str(path.resolve())


def _pair_list(value):
    path = _existing_file(value, "pair list")
    try:
        read_pairs(path)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    return path


def _output_dir(value):
    path = Path(value)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {path}")
    return str(path.resolve())


class RunConfig:
    """Shared behaviour of the per-subcommand configurations."""

    command = ""

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown {cls.command} config keys: {unknown}")
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        return self

    def with_out(self, out):
        values = self.to_dict()
        values["out"] = str(out)
        return type(self).from_dict(values)


@dataclass
class MorphRunConfig(RunConfig):
    pairs: str = ""
    out: str = "out"
    models: str = ""
    seed: int = 0
    jobs: int = 1
    lambda1: float = 0.0002
    lambda2: float = 10.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    iterations: int = 150
    lr0: float = 0.03
    decay: float = 0.95
    decay_every: int = 6
    latent_shape: list = field(default_factory=lambda: [18, 512])
    image_side: int = 64
    embed_dim: int = 64

    command = "morph"

    def __post_init__(self):
        self.latent_shape = [int(v) for v in self.latent_shape]
        if len(self.latent_shape) != 2:
            raise ConfigError(f"latent shape must be layers×dims, got {self.latent_shape}")
        if not self.models:
            self.models = f"toy:{self.seed}"
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def optimizer_config(self, weights=None):
        return OptimizerConfig(
            iterations=self.iterations,
            lr0=self.lr0,
            decay=self.decay,
            decay_every=self.decay_every,
            weights=weights or self.loss_weights(),
            seed=self.seed,
        )

    def validate(self):
        self.pairs = _pair_list(self.pairs)
        if not self.models.startswith("toy:"):
            self.models = _existing_file(self.models, "model weight file")
        self.out = _output_dir(self.out)
        self.optimizer_config()
        return self


@dataclass
class SweepRunConfig(MorphRunConfig):
    preset: str = "ablation"

    command = "sweep"

    def validate(self):
        if self.preset not in SWEEP_PRESETS:
            raise ConfigError(f"unknown sweep preset '{self.preset}', choose from {sorted(SWEEP_PRESETS)}")
        return super().validate()


@dataclass
class VulnRunConfig(RunConfig):
    scores: str = ""
    out: str = "out"
    fmr: float = 0.001
    threshold: float = None
    group_by: list = field(default_factory=lambda: ["gender", "medium"])
    seed: int = 0

    command = "vuln"

    def validate(self):
        if not (0 < self.fmr < 1):
            raise ConfigError(f"--fmr must lie in (0, 1), got {self.fmr}")
        self.scores = _existing_file(self.scores, "score file")
        self.out = _output_dir(self.out)
        return self


@dataclass
class QualityRunConfig(RunConfig):
    pairs: str = ""
    morph_dir: str = ""
    out: str = "out"
    ci_method: str = "normal"
    jobs: int = 1
    seed: int = 0

    command = "quality"

    def validate(self):
        if self.ci_method not in ("normal", "t"):
            raise ConfigError(f"--ci-method must be normal or t, got {self.ci_method}")
        self.pairs = _pair_list(self.pairs)
        self.morph_dir = _existing_dir(self.morph_dir, "morph directory")
        self.out = _output_dir(self.out)
        return self


@dataclass
class MadRunConfig(RunConfig):
    scores: str = ""
    out: str = "out"
    jobs: int = 1
    seed: int = 0

    command = "mad"

    def validate(self):
        self.scores = _existing_file(self.scores, "MAD score file")
        self.out = _output_dir(self.out)
        return self


@dataclass
class MadScoreRunConfig(RunConfig):
    images: str = ""
    out: str = "out"
    jobs: int = 1
    seed: int = 0

    command = "mad-score"

    def validate(self):
        self.images = _existing_file(self.images, "image list")
        self.out = _output_dir(self.out)
        return self


@dataclass
class GradcheckRunConfig(RunConfig):
    out: str = "out"
    trials: int = 100
    dim: int = 64
    seed: int = 0

    command = "gradcheck"

    def validate(self):
        if self.trials < 1 or self.dim < 2:
            raise ConfigError("gradcheck needs trials >= 1 and dim >= 2")
        self.out = _output_dir(self.out)
        return self


RUN_CONFIGS = {cls.command: cls for cls in (
    MorphRunConfig, SweepRunConfig, VulnRunConfig, QualityRunConfig,
    MadRunConfig, MadScoreRunConfig, GradcheckRunConfig,
)}


def config_hash(command, values):
    canonical = json.dumps({"command": command, "config": values}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(cfg, out_dir=None):
    values = cfg.to_dict()
    manifest = {"command": cfg.command, "config": values, "config_hash": config_hash(cfg.command, values)}
    path = Path(out_dir or cfg.out) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    command = manifest.get("command")
    if command not in RUN_CONFIGS:
        raise ConfigError(f"{path}: unknown command '{command}'")
    values = manifest.get("config", {})
    if manifest.get("config_hash") != config_hash(command, values):
        raise ConfigError(f"{path}: config_hash does not match its config")
    return RUN_CONFIGS[command].from_dict(values)
