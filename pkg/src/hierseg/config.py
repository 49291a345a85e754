"""Declarative pipeline configuration.

Configuration is one flat namespace of dotted keys. It can be provided as
a text file of ``key = value`` lines (``#`` comments and blank lines are
ignored) and overridden from the command line; precedence is CLI > file >
defaults. Values are coerced to the type of the key's default. The resolved
snapshot is what run manifests record, and its hash identifies a run
configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS: dict[str, object] = {
    "backbone": "vit_b_16",
    "weights.root": "",                  # empty -> $HIERSEG_WEIGHTS or ./weights
    "input.short_side": 336,
    "fusion.layers": "all",              # "all" or comma-separated 1-based indices
    "fusion.attention_source": "early_layer_avg",
    "fusion.normalizer": "count",
    "text.templates": "full80",
    "background.strategy": "softmax_threshold",
    "background.temperature": 0.01,
    "background.threshold": 0.5,
    "classify.threshold": 0.5,
    "compensation.enabled": True,
    "interp.mode": "bilinear",
    "sd.timestep_index": 45,
    "sd.total_steps": 50,
    "sd.layer_combine": "mean",
    "sd.head_fusion": "multiplication",
    "sd.single_head_index": 0,
    "sd.renormalize": False,
    "sd.input_side": 512,
    "dataset.id": "",
    "dataset.root": "",
    "dataset.split": "val",
    "dataset.class_file": "",
    "replay.scores_dir": "",
    "replay.sd_dir": "",
    "eval.workers": 1,
    "seed": 0,
    "out": "runs",
}


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{key}: expected a number, got {raw!r}") from None
    return raw.strip()


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Read ``key = value`` lines into a typed flat mapping."""
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    out: dict[str, object] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{p}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigurationError(f"{p}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    """Parse repeated ``--set key=value`` arguments."""
    out: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve(file_values: dict | None = None,
            overrides: dict | None = None) -> dict[str, object]:
    """Merge defaults, file values, and overrides (highest precedence last)."""
    flat = dict(DEFAULTS)
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            flat[key] = value
    return flat


# Keys that only steer where results are written; they do not change what
# is computed and are excluded from the configuration identity.
_NON_SEMANTIC_KEYS = ("out",)


def config_hash(flat: dict[str, object]) -> str:
    semantic = {k: v for k, v in flat.items() if k not in _NON_SEMANTIC_KEYS}
    canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PipelineConfig:
    """Typed view over the resolved flat mapping."""

    flat: dict

    @classmethod
    def build(cls, config_file: str | None = None,
              overrides: dict | None = None) -> "PipelineConfig":
        file_values = parse_config_file(config_file) if config_file else None
        return cls(resolve(file_values, overrides))

    def __getitem__(self, key: str):
        return self.flat[key]

    @property
    def backbone(self) -> str:
        return self.flat["backbone"]

    @property
    def seed(self) -> int:
        return int(self.flat["seed"])

    @property
    def short_side(self) -> int:
        return int(self.flat["input.short_side"])

    @property
    def compensation_enabled(self) -> bool:
        return bool(self.flat["compensation.enabled"])

    @property
    def interp_mode(self) -> str:
        return self.flat["interp.mode"]

    @property
    def replay_scores_dir(self) -> str:
        return self.flat["replay.scores_dir"]

    @property
    def replay_sd_dir(self) -> str:
        return self.flat["replay.sd_dir"]

    @property
    def out_dir(self) -> Path:
        return Path(self.flat["out"])

    def fusion_layers(self) -> tuple[int, ...] | None:
        raw = str(self.flat["fusion.layers"]).strip()
        if raw == "all":
            return None
        try:
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        except ValueError:
            raise ConfigurationError(
                f"fusion.layers must be 'all' or comma-separated integers, got {raw!r}"
            ) from None

    def fusion_config(self):
        from .fusion import FusionConfig
        return FusionConfig(
            layer_set=self.fusion_layers(),
            attention_source=self.flat["fusion.attention_source"],
            normalizer=self.flat["fusion.normalizer"],
        )

    def extraction_config(self):
        from .diffusion import ExtractionConfig
        return ExtractionConfig(
            timestep_index=int(self.flat["sd.timestep_index"]),
            total_steps=int(self.flat["sd.total_steps"]),
            layer_combine=self.flat["sd.layer_combine"],
            seed=self.seed,
            input_side=int(self.flat["sd.input_side"]),
        )

    def dataset_spec(self):
        from .datasets import DatasetSpec
        if not self.flat["dataset.id"]:
            raise ConfigurationError("dataset.id is not set")
        if not self.flat["dataset.root"]:
            raise ConfigurationError("dataset.root is not set")
        return DatasetSpec(
            id=self.flat["dataset.id"],
            root=self.flat["dataset.root"],
            split=self.flat["dataset.split"],
            class_file=self.flat["dataset.class_file"] or None,
            template_set=self.flat["text.templates"],
        )

    def weights_root(self) -> Path:
        from .weights import weights_root
        return weights_root(self.flat["weights.root"] or None)

    def hash(self) -> str:
        return config_hash(self.flat)

    def snapshot(self) -> dict:
        return dict(self.flat)
