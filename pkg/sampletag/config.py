import os
from dataclasses import asdict, dataclass, field, fields

import structlog
import yaml
from dotenv import load_dotenv

from sampletag.errors import ConfigError

load_dotenv()  # This loads variables from .env into os.environ

logger = structlog.get_logger(__name__)


class Config:
    # Logging
    LOG_LEVEL = os.environ.get('SAMPLETAG_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.environ.get('SAMPLETAG_LOG_FORMAT', 'kv')

    # Runs
    RUNS_DIR = os.environ.get('SAMPLETAG_RUNS_DIR', 'runs')
    DEFAULT_SEED = int(os.environ.get('SAMPLETAG_SEED', '0'))

    # Data
    SAMPLE_RATE = 22050
    TOP_K = int(os.environ.get('SAMPLETAG_TOP_K', '50'))


BLOCK_KINDS = ('basic', 'se', 'res1', 'res2', 'rese1', 'rese2')
SE_KINDS = ('se', 'rese1', 'rese2')
FULL_SCHEDULE = [128, 128, 128, 256, 256, 256, 256, 512, 512]
ALPHA_GRID = [2.0 ** e for e in range(-3, 7)]
# 3^7 samples, about 0.1 s at 22050 Hz
DESK_INPUT_LEN = 2187


@dataclass
class ModelConfig:
    block_kind: str = 'se'
    depth: int = 9
    input_len: int = 59049
    stem_channels: int = 128
    channel_schedule: list = field(default_factory=lambda: list(FULL_SCHEDULE))
    alpha: float = 16.0
    multi_level: bool = True
    head_hidden: int = 512
    num_tags: int = 50
    dropout_head: float = 0.5
    weight_decay: float = 0.0

    @property
    def head_input_dim(self):
        if self.multi_level:
            return sum(self.channel_schedule[-3:])
        return self.channel_schedule[-1]

    def validate(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.input_len != 3 ** (self.depth + 1):
            raise ConfigError(
                f"input_len must equal 3^(depth+1) = {3 ** (self.depth + 1)}, got {self.input_len}")
        if len(self.channel_schedule) != self.depth:
            raise ConfigError(
                f"channel_schedule length must equal depth ({self.depth}), "
                f"got {len(self.channel_schedule)}")
        if any(c < 1 for c in self.channel_schedule) or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.multi_level and self.depth < 3:
            raise ConfigError("multi_level aggregation needs depth >= 3")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.block_kind in SE_KINDS:
            if min(self.channel_schedule) * self.alpha < 0.5:
                raise ConfigError("alpha * channels must round to at least 1")
            if self.alpha not in ALPHA_GRID:
                logger.warning('alpha_off_grid', alpha=self.alpha)
        if self.head_hidden < 1 or self.num_tags < 1:
            raise ConfigError("head_hidden and num_tags must be >= 1")
        if not 0.0 <= self.dropout_head < 1.0:
            raise ConfigError(f"dropout_head must be in [0, 1), got {self.dropout_head}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 23
    max_epochs: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    plateau_factor: float = 5.0
    plateau_patience: int = 3
    min_lr: float = 1e-6
    min_delta: float = 0.0
    early_stop: int = 10
    prefetch: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.plateau_factor <= 1 or self.plateau_patience < 1:
            raise ConfigError("plateau_factor must be > 1 and plateau_patience >= 1")
        return self


@dataclass
class DataConfig:
    manifest: str = ''
    audio_root: str = ''
    top_k: int = Config.TOP_K
    synth_songs: int = 200
    synth_segments: int = 2

    def validate(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = Config.DEFAULT_SEED
    out_dir: str = Config.RUNS_DIR
    preset: str = 'mtat'

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        sections = {'model': ModelConfig, 'train': TrainConfig, 'data': DataConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw.pop(f.name)
            if f.name in sections:
                kwargs[f.name] = _build_section(sections[f.name], value, f.name)
            else:
                kwargs[f.name] = value
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)


def _build_section(section_cls, value, name):
    value = dict(value or {})
    known = {f.name for f in fields(section_cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    # YAML 1.1 reads exponents without a dot ("1e-4") as strings
    for f in fields(section_cls):
        if f.type is float and isinstance(value.get(f.name), str):
            try:
                value[f.name] = float(value[f.name])
            except ValueError as e:
                raise ConfigError(f"{name}.{f.name} must be a number, got {value[f.name]!r}") from e
    return section_cls(**value)


def mtat_config():
    return RunConfig(preset='mtat')


def msd_config():
    # None of the regularizations are used on MSD
    run = RunConfig(preset='msd')
    run.model.dropout_head = 0.0
    run.model.weight_decay = 0.0
    return run


def desk_config():
    run = RunConfig(preset='desk')
    run.model = ModelConfig(depth=6, input_len=DESK_INPUT_LEN, stem_channels=16,
                            channel_schedule=[16] * 6, head_hidden=32, num_tags=8)
    run.data.top_k = 8
    return run


# Configuration dictionary
PRESETS = {
    'mtat': mtat_config,
    'msd': msd_config,
    'desk': desk_config,
    'default': desk_config,
}


def derive_depth(model, depth):
    """Set depth and the fields tied to it (input_len, schedule)."""
    if not 1 <= depth <= len(FULL_SCHEDULE):
        raise ConfigError(f"derived schedules exist for depth 1..{len(FULL_SCHEDULE)}, got {depth}")
    model.depth = depth
    model.input_len = 3 ** (depth + 1)
    model.channel_schedule = list(FULL_SCHEDULE[-depth:])
    return model


def apply_override(raw, dotted_key, value):
    """Set `value` at `dotted_key` in a nested dict; last writer wins."""
    node = raw
    parts = dotted_key.split('.')
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"override {dotted_key!r}: {part!r} is not a section")
        node = node[part]
    node[parts[-1]] = value


def load_run_config(path=None, overrides=(), preset=None):
    """Resolve a RunConfig from a preset, an optional YAML file and dotted overrides."""
    raw = {}
    if path:
        try:
            with open(path, encoding='utf-8') as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    name = preset or raw.get('preset', 'mtat')
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]().to_dict()
    _merge(base, raw)
    base['preset'] = name

    touched = set()
    for key, value in overrides:
        if isinstance(value, str):
            value = yaml.safe_load(value)
        apply_override(base, key, value)
        touched.add(key)

    run = RunConfig.from_dict(base)
    if 'model.depth' in touched and not touched & {'model.input_len', 'model.channel_schedule'}:
        derive_depth(run.model, run.model.depth)
    return run.validate()


def _merge(base, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
