"""Pipeline configuration: flat ``section.key = value`` text format.

Precedence is flags over file values over built-in defaults. Unknown keys are
rejected, every section validates its own constraints, and the effective
configuration can be echoed back in the same format (the echo re-parses to an
identical config, which is what pipeline runs write next to their artifacts).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import SyntheticWorldConfig
from .encoder import DEFAULT_WIDTHS
from .errors import ConfigError
from .finetune import FinetuneConfig
from .pointcloud import AugmentationConfig
from .pretrain import PretrainConfig
from .retrieval import EnhanceConfig


@dataclass(frozen=True)
class IndexConfig:
    pos_threshold: float = 10.0
    neg_threshold: float = 50.0

    def __post_init__(self):
        if not 0 < self.pos_threshold < self.neg_threshold:
            raise ValueError("thresholds must satisfy 0 < pos_threshold < neg_threshold")


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 25.0

    def __post_init__(self):
        if self.match_radius <= 0:
            raise ValueError("match_radius must be > 0")


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = DEFAULT_WIDTHS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "gidp-out"
    eval_fraction: float = 0.5
    query_fraction: float = 0.5
    skip_pretrain: bool = False

    def __post_init__(self):
        if not 0 < self.eval_fraction < 1 or not 0 < self.query_fraction < 1:
            raise ValueError("eval_fraction and query_fraction must be in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    run: RunConfig = field(default_factory=RunConfig)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_widths(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.replace(" ", "").split(",") if part)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# config key -> (section, attribute, parser); iteration order defines the echo order
SCHEMA: dict[str, tuple[str, str, object]] = {
    "world.num_sites": ("world", "num_sites", int),
    "world.submaps_per_site": ("world", "submaps_per_site", int),
    "world.site_spacing": ("world", "site_spacing", float),
    "world.intra_site_spread": ("world", "intra_site_spread", float),
    "world.points_per_cloud": ("world", "points_per_cloud", int),
    "world.geometry_seed": ("world", "geometry_seed", int),
    "augment.jitter_sigma": ("augment", "jitter_sigma", float),
    "augment.jitter_clip": ("augment", "jitter_clip", float),
    "augment.point_removal_fraction": ("augment", "point_removal_fraction", float),
    "augment.block_extent": ("augment", "block_extent", float),
    "augment.shear_max": ("augment", "shear_max", float),
    "augment.seed": ("augment", "seed", int),
    "pretrain.momentum": ("pretrain", "momentum_m", float),
    "pretrain.queue_capacity": ("pretrain", "queue_capacity", int),
    "pretrain.temperature": ("pretrain", "temperature", float),
    "pretrain.batch_size": ("pretrain", "batch_size", int),
    "pretrain.learning_rate": ("pretrain", "learning_rate", float),
    "pretrain.epochs": ("pretrain", "epochs", int),
    "pretrain.num_negatives": ("pretrain", "num_negatives", int),
    "pretrain.include_positive_in_denominator": (
        "pretrain",
        "include_positive_in_denominator",
        _parse_bool,
    ),
    "finetune.margin": ("finetune", "margin", float),
    "finetune.batch_size": ("finetune", "batch_size", int),
    "finetune.learning_rate": ("finetune", "learning_rate", float),
    "finetune.epochs": ("finetune", "epochs", int),
    "finetune.lr_decay_factor": ("finetune", "lr_decay_factor", float),
    "finetune.lr_decay_epoch": ("finetune", "lr_decay_epoch", int),
    "finetune.num_pos_candidates": ("finetune", "num_pos_candidates", int),
    "finetune.num_neg_candidates": ("finetune", "num_neg_candidates", int),
    "enhance.lambda": ("enhance", "lam", float),
    "enhance.neighbors": ("enhance", "neighbors", int),
    "enhance.mode": ("enhance", "mode", str),
    "enhance.enhance_queries": ("enhance", "enhance_queries", _parse_bool),
    "enhance.enhance_database": ("enhance", "enhance_database", _parse_bool),
    "index.pos_threshold": ("index", "pos_threshold", float),
    "index.neg_threshold": ("index", "neg_threshold", float),
    "eval.match_radius": ("eval", "match_radius", float),
    "encoder.widths": ("encoder", "widths", _parse_widths),
    "run.seed": ("run", "seed", int),
    "run.out_dir": ("run", "out_dir", str),
    "run.eval_fraction": ("run", "eval_fraction", float),
    "run.query_fraction": ("run", "query_fraction", float),
    "run.skip_pretrain": ("run", "skip_pretrain", _parse_bool),
}

_SECTION_TYPES = {
    "world": SyntheticWorldConfig,
    "augment": AugmentationConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "enhance": EnhanceConfig,
    "index": IndexConfig,
    "eval": EvalConfig,
    "encoder": EncoderConfig,
    "run": RunConfig,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from config text; unknown keys rejected."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = raw.strip()
    return values


def parse_config(
    path: str | Path | None = None,
    text: str | None = None,
    overrides: dict[str, str] | None = None,
) -> PipelineConfig:
    """Build a validated PipelineConfig from defaults <- file/text <- overrides."""
    values: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    if text is not None:
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = str(raw)

    per_section: dict[str, dict[str, object]] = {name: {} for name in _SECTION_TYPES}
    for key, raw in values.items():
        section, attr, parser = SCHEMA[key]
        try:
            per_section[section][attr] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"config key '{key}': {exc}") from exc

    sections: dict[str, object] = {}
    try:
        for name, cls in _SECTION_TYPES.items():
            sections[name] = cls(**per_section[name])
        # the pretraining stage owns a nested augmentation config
        sections["pretrain"] = replace(sections["pretrain"], augmentation=sections["augment"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(**sections)


def format_config(cfg: PipelineConfig) -> str:
    """Echo the effective config; parses back to an identical PipelineConfig."""
    lines = ["# gidp effective configuration"]
    for key, (section, attr, _) in SCHEMA.items():
        lines.append(f"{key} = {_fmt(getattr(getattr(cfg, section), attr))}")
    return "\n".join(lines) + "\n"
