"""
Experiment configuration.

A config file is TOML with one table per section::

    [pretrain]
    framework = "subgraph"
    epochs = 200

    [prompt]
    L = 16
    pt_mode = "lowrank:8"

Unknown sections or keys are rejected. ``--set section.key=value`` overrides
parse the value as a TOML literal, falling back to a bare string.
"""

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace

from . import errors
from .augment import AugmentConfig
from .const import (
    BATCH_SIZE,
    DATA_DIR,
    DENSE_SIZE_CAP,
    EGO_RADIUS,
    FILTER_DEGREE,
    HEAD_HIDDEN_DIM,
    HEAD_OUT_DIM,
    HIDDEN_DIM,
    MASK_RATE,
    NUM_LAYERS,
    PER_CLASS_TRAIN,
    PRETRAIN_EPOCHS,
    PRETRAIN_FULL_BASIS_CAP,
    PRETRAIN_K,
    PRETRAIN_LR,
    SEMI_INDUCTIVE_CLASS_RATIO,
    SETTINGS,
    TEMPERATURE,
    VAL_TEST_RATIO,
)
from .prompts import PromptConfig
from .synthetic import SbmConfig

logger = logging.getLogger(__name__)

SOURCES = ("sbm", "pair", "file", "graphset")
SWEEPS = ("none", "L", "K", "ablation")


@dataclass
class GraphSection:
    path: str = ""
    graphset: str = ""
    normalized: bool = False


@dataclass
class SpectralSection:
    size_cap: int = DENSE_SIZE_CAP
    full_basis_cap: int = PRETRAIN_FULL_BASIS_CAP
    k_pre: int = PRETRAIN_K


@dataclass
class ModelSection:
    hidden_dim: int = HIDDEN_DIM
    n_layers: int = NUM_LAYERS
    degree: int = FILTER_DEGREE
    head_hidden: int = HEAD_HIDDEN_DIM
    head_out: int = HEAD_OUT_DIM

    def __post_init__(self):
        if min(self.hidden_dim, self.n_layers, self.head_hidden, self.head_out) < 1 or self.degree < 0:
            raise errors.ConfigError("model sizes must be positive and the filter degree non-negative")


@dataclass
class PretrainSection:
    framework: str = "subgraph"
    epochs: int = PRETRAIN_EPOCHS
    lr: float = PRETRAIN_LR
    batch_size: int = BATCH_SIZE
    temperature: float = TEMPERATURE
    mask_rate: float = MASK_RATE
    radius: int = EGO_RADIUS
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.temperature <= 0:
            raise errors.ConfigError("pretrain epochs must be >= 0, batch_size >= 1 and temperature > 0")


@dataclass
class SplitSection:
    setting: str = "transductive"
    # desk-scale default; the benchmark protocol samples PER_CLASS_TRAIN
    per_class_train: int = 20
    val_ratio: int = VAL_TEST_RATIO[0]
    test_ratio: int = VAL_TEST_RATIO[1]
    class_ratio: float = SEMI_INDUCTIVE_CLASS_RATIO
    finetune_classes: int = 0
    pretrain_classes: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise errors.ConfigError(f"unknown setting {self.setting!r}, expected one of {SETTINGS}")


@dataclass
class SyntheticSection:
    blocks: int = 4
    nodes_per_block: int = 100
    p_in: float = 0.1
    p_out: float = 0.01
    n_features: int = 32
    mean_scale: float = 1.0
    sigma: float = 1.0
    signal_shift: float = 1.5
    structure_shift: float = 0.3
    n_graphs: int = 40

    def sbm(self):
        return SbmConfig(self.blocks, self.nodes_per_block, self.p_in, self.p_out,
                         self.n_features, self.mean_scale, self.sigma)


@dataclass
class ExperimentSection:
    name: str = "igap"
    seed: int = 0
    seeds: list = field(default_factory=list)
    source: str = "sbm"
    sweep: str = "none"
    ablations: list = field(default_factory=lambda: ["none"])
    out_dir: str = DATA_DIR

    def __post_init__(self):
        if self.source not in SOURCES:
            raise errors.ConfigError(f"unknown source {self.source!r}, expected one of {SOURCES}")
        if self.sweep not in SWEEPS:
            raise errors.ConfigError(f"unknown sweep {self.sweep!r}, expected one of {SWEEPS}")

    def run_seeds(self):
        return list(self.seeds) if self.seeds else [self.seed]


SECTIONS = {
    "graph": GraphSection,
    "spectral": SpectralSection,
    "model": ModelSection,
    "augment": AugmentConfig,
    "pretrain": PretrainSection,
    "prompt": PromptConfig,
    "split": SplitSection,
    "synthetic": SyntheticSection,
    "experiment": ExperimentSection,
}


@dataclass
class ExperimentConfig:
    graph: GraphSection = field(default_factory=GraphSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    split: SplitSection = field(default_factory=SplitSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self):
        return hashlib.md5(self.to_json().encode("utf-8")).hexdigest()

    def with_values(self, section, **values):
        """Copy with some keys of one section replaced (validated like a file)."""
        return from_dict({**self.to_dict(), section: {**self.to_dict()[section], **values}})


def _build_section(name, values):
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise errors.ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return replace(cls(), **values)
    except TypeError as e:
        raise errors.ConfigError(f"bad value in [{name}]: {e}") from None


def from_dict(data):
    """ExperimentConfig from nested ``{section: {key: value}}`` data."""
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise errors.ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return ExperimentConfig(**{name: _build_section(name, data.get(name, {})) for name in SECTIONS})


def parse_override(text):
    """``section.key=value`` -> (section, key, value)."""
    target, sep, raw = text.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not key:
        raise errors.ConfigError(f"override {text!r} must look like section.key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key.strip(), value


def load_config(path=None, overrides=()):
    """
    Read a TOML config file (optional) and apply ``section.key=value`` overrides.

    Raises:
        ConfigError: unreadable file, unknown section/key or invalid value
    """
    data = {}
    if path:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as e:
            raise errors.ConfigError(f"cannot read config {path}: {e}") from None
        except tomllib.TOMLDecodeError as e:
            raise errors.ConfigError(f"invalid TOML in {path}: {e}") from None
    for text in overrides:
        section, key, value = parse_override(text)
        data.setdefault(section, {})[key] = value
    cfg = from_dict(data)
    logger.debug(f"Loaded config {path or '(defaults)'} with {len(overrides)} override(s)")
    return cfg


def log_config(cfg):
    logger.info(f"Resolved config ({cfg.config_hash()}): {cfg.to_json()}")
