"""Experiment configuration: model widths, stage schedules, plug-in keys.

Two presets ship with the package:

* ``ExperimentConfig.default()`` uses the full published widths (backbone
  channels 64/256/512/1024/2048, 2048-wide attention pooling, 1280-wide
  region features). Shape checks run against this preset.
* ``ExperimentConfig.desk()`` is a shrunken configuration for CPU training
  runs and tests. All widths scale down; the wiring is identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = "1"

NUM_REGIONS = 29
GLOBAL_INDEX = 30  # 1-based index of the whole-image feature slot
NUM_SENTENCES = 5


@dataclass
class SynthConfig:
    """Knobs for the synthetic cohort generator."""

    image_size: int = 224
    covariate_count: int = 17
    censoring_fraction: float = 0.3
    box_jitter_sigma: float = 0.01
    blob_region: int = 4            # 1-based region index carrying the planted abnormality
    blob_amplitude: float = 0.85    # peak intensity added at severity 1
    # per-group severity thresholds above which the group's sentence turns abnormal
    group_thresholds: dict = field(
        default_factory=lambda: {1: 0.35, 2: 0.75, 3: 0.9, 4: 2.0, 5: 0.35}
    )
    time_scale_days: float = 180.0
    risk_coefficient: float = 2.2       # severity weight in log event time
    frailty_coefficient: float = 1.0    # clinical-frailty weight (covariates only)
    time_noise_sd: float = 0.2
    clinical_signal: float = 1.0        # scales the latent leak into vitals

    def validate(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if not 0.0 <= self.censoring_fraction < 1.0:
            raise ConfigError(f"censoring_fraction must be in [0,1): {self.censoring_fraction}")
        if not 1 <= self.blob_region <= NUM_REGIONS:
            raise ConfigError(f"blob_region must be in 1..{NUM_REGIONS}: {self.blob_region}")
        if self.box_jitter_sigma < 0:
            raise ConfigError("box_jitter_sigma must be >= 0")
        if self.covariate_count < 1:
            raise ConfigError("covariate_count must be >= 1")


@dataclass
class ModelConfig:
    input_size: int = 224
    backbone_channels: tuple = (64, 256, 512, 1024, 2048)
    roi_sizes: tuple = (4, 2, 2, 1, 1)
    roi_proj_width: int = 256       # per-scale projection width; region feature = 5x this
    attention_heads: int = 8
    sentence_width: int = 512       # d_e, output of the sentence embedders
    text_width: int = 128           # d_t, decoder model width
    decoder_blocks: int = 2
    decoder_heads: int = 8
    decoder_ffn_width: int = 512
    max_sentence_len: int = 24
    survival_width: int = 2048      # width of the per-modality survival features
    survival_hidden: int = 256      # hidden width of the two-layer survival encoders
    completer_hidden: int = 512
    completer_mask_low: int = 1
    completer_mask_high: int = 8
    min_box_side: float = 0.01

    @property
    def attention_dim(self) -> int:
        return self.backbone_channels[-1]

    @property
    def region_feature_width(self) -> int:
        return self.roi_proj_width * len(self.backbone_channels)

    @property
    def pyramid_positions(self) -> int:
        side = self.input_size // 2 ** len(self.backbone_channels)
        return side * side

    def validate(self):
        if len(self.backbone_channels) != 5 or len(self.roi_sizes) != 5:
            raise ConfigError("backbone_channels and roi_sizes must have 5 levels")
        if self.attention_dim % self.attention_heads != 0:
            raise ConfigError(
                f"attention_dim {self.attention_dim} not divisible by heads {self.attention_heads}"
            )
        if self.text_width % self.decoder_heads != 0:
            raise ConfigError(
                f"text_width {self.text_width} not divisible by decoder_heads {self.decoder_heads}"
            )
        if self.input_size % 2 ** len(self.backbone_channels) != 0:
            raise ConfigError("input_size must be divisible by 32")
        if not 1 <= self.completer_mask_low <= self.completer_mask_high <= NUM_REGIONS - 1:
            raise ConfigError("completer mask range must satisfy 1 <= low <= high <= 28")


@dataclass
class StageConfig:
    epochs: int
    lr: float
    batch_size: int
    weight_decay: float = 1e-4


@dataclass
class TrainConfig:
    # published schedule: 100 epochs for survival (lr 1e-4), 20000 epochs for
    # report generation (lr 1e-5), batch size 16, completer batch 2000 / lr 1e-3.
    # Desk-scale defaults below are small enough for CPU; all are config knobs.
    completer: StageConfig = field(default_factory=lambda: StageConfig(300, 1e-3, 128, 0.0))
    stage1: StageConfig = field(default_factory=lambda: StageConfig(100, 1e-4, 16))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(60, 1e-3, 16, 1e-5))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(50, 1e-3, 16, 1e-2))

    def validate(self):
        for name in ("stage1", "stage3"):
            if getattr(self, name).batch_size < 2:
                raise ConfigError(f"{name}.batch_size must be >= 2 (risk sets need pairs)")
        for name in ("completer", "stage1", "stage2", "stage3"):
            stage = getattr(self, name)
            if stage.epochs < 0 or stage.lr <= 0 or stage.batch_size < 1:
                raise ConfigError(f"invalid schedule for {name}: {stage}")


@dataclass
class PluginConfig:
    backbone: str = "conv5"
    detector: str = "oracle"
    text_encoder: str = "mean_embedding"
    labeler: str = "keyword"
    detector_dropout: float = 0.0
    detector_score_noise: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    split_ratios: tuple = (0.7, 0.1, 0.2)
    group_table_path: str = ""      # empty -> built-in default grouping
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plugins: PluginConfig = field(default_factory=PluginConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls()

    @classmethod
    def desk(cls, seed: int = 0) -> "ExperimentConfig":
        """Shrunken widths for CPU-friendly training runs."""
        model = ModelConfig(
            backbone_channels=(8, 16, 32, 64, 128),
            roi_proj_width=32,
            attention_heads=4,
            sentence_width=64,
            text_width=64,
            decoder_heads=4,
            decoder_ffn_width=128,
            survival_width=128,
            survival_hidden=128,
            completer_hidden=256,
        )
        return cls(seed=seed, model=model)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if len(self.split_ratios) != 3:
            raise ConfigError("split_ratios must have 3 entries")
        from .registry import resolve_all  # deferred: registry imports config

        resolve_all(self.plugins)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            model = ModelConfig(**_tupled(data.get("model", {}), ("backbone_channels", "roi_sizes")))
            train_raw = data.get("train", {})
            train = TrainConfig(
                **{k: StageConfig(**v) for k, v in train_raw.items()}
            )
            plugins = PluginConfig(**data.get("plugins", {}))
            synth_raw = dict(data.get("synth", {}))
            if "group_thresholds" in synth_raw:
                synth_raw["group_thresholds"] = {
                    int(k): float(v) for k, v in synth_raw["group_thresholds"].items()
                }
            synth = SynthConfig(**synth_raw)
            return cls(
                seed=data.get("seed", 0),
                split_ratios=tuple(data.get("split_ratios", (0.7, 0.1, 0.2))),
                group_table_path=data.get("group_table_path", ""),
                model=model,
                train=train,
                plugins=plugins,
                synth=synth,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {path}: {exc}") from exc
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg

    def save(self, path):
        Path(path).write_text(self.to_json())

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _tupled(data: dict, keys) -> dict:
    out = dict(data)
    for key in keys:
        if key in out:
            out[key] = tuple(out[key])
    return out


# Sentence groups: 4 Findings groups over anatomical regions plus the global
# Impression slot. The grouping is configuration, not anatomy ground truth;
# this default is a hand-authored stand-in (1-based region indices, 30=global).
DEFAULT_GROUP_TABLE = {
    1: [1, 2, 3, 4, 5, 6, 9, 10, 11, 12, 13, 14],   # lungs
    2: [7, 8, 15, 16],                               # pleura / diaphragm
    3: [17, 21, 22, 23, 24, 25, 26, 27, 28],         # heart and mediastinum
    4: [18, 19, 20],                                 # bones
    5: [GLOBAL_INDEX],                               # impression (whole image)
}

GROUP_NAMES = {1: "lungs", 2: "pleura", 3: "heart and mediastinum", 4: "bones", 5: "impression"}


def validate_group_table(groups: dict) -> dict:
    if sorted(groups) != [1, 2, 3, 4, 5]:
        raise ConfigError(f"group table must map sentences 1..5, got {sorted(groups)}")
    out = {}
    for i, members in groups.items():
        members = sorted(int(j) for j in members)
        if not members:
            raise ConfigError(f"group {i} is empty")
        for j in members:
            if not 1 <= j <= GLOBAL_INDEX:
                raise ConfigError(f"group {i} has out-of-range region index {j}")
        out[i] = members
    if GLOBAL_INDEX not in out[5]:
        raise ConfigError("group 5 (impression) must contain the global index 30")
    return out


def load_group_table(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"group table file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"group table is not valid JSON: {exc}") from exc
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unknown group table schema_version: {data.get('schema_version')!r}")
    groups = {int(k): v for k, v in data.get("groups", {}).items()}
    return validate_group_table(groups)


def save_group_table(groups: dict, path):
    groups = validate_group_table(groups)
    payload = {"schema_version": SCHEMA_VERSION, "groups": {str(k): v for k, v in groups.items()}}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def resolve_group_table(config: ExperimentConfig) -> dict:
    if config.group_table_path:
        return load_group_table(config.group_table_path)
    return validate_group_table(DEFAULT_GROUP_TABLE)
