"""Run configuration: parsing, validation, and the explicit-echo contract.

Config files are JSON with nested sections. Unknown keys are rejected with the
offending path; every effective value (including defaults) appears in the
echo, which the trainer writes into the logbook header so a run can be
reconstructed from its logbook alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import DedupConfig
from .errors import ConfigError
from .health import HealthPolicy, RecoveryConfig
from .model import ModelConfig, Preset, get_preset
from .optim import AdamWConfig, ClipConfig, PredivideConfig, ScheduleConfig
from .precision import LossScaler, PrecisionConfig

SEED_STREAMS = ("init", "data", "dropout", "validation", "eval")


@dataclass(frozen=True)
class TrainingConfig:
    seq_len: int = 64
    micro_batch: int = 8
    grad_accum: int = 1
    token_budget: int = 1_000_000
    checkpoint_cadence: int = 100
    validation_cadence: int = 50
    validation_fraction: float = 0.001
    dtype: str = "float64"  # 64-bit for tests; set float32 to train reduced
    optimizer: str = "adamw"  # "sgd" exposed for the mid-flight switch experiment
    health_tail_len: int = 200

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"training.dtype must be float64 or float32, got {self.dtype}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"training.optimizer must be adamw or sgd, got {self.optimizer}")
        for name in ("seq_len", "micro_batch", "grad_accum", "token_budget", "checkpoint_cadence", "validation_cadence"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")


@dataclass(frozen=True)
class CorpusConfig:
    tokens_path: str | None = None
    manifest_path: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    preset: Preset | None
    schedule: ScheduleConfig
    adamw: AdamWConfig
    clip: ClipConfig
    predivide: PredivideConfig
    precision: PrecisionConfig
    scaler: LossScaler
    health: HealthPolicy
    recovery: RecoveryConfig
    training: TrainingConfig
    corpus: CorpusConfig
    dedup: DedupConfig
    seeds: dict[str, int]

    @property
    def tokens_per_step(self) -> int:
        t = self.training
        return t.seq_len * t.micro_batch * t.grad_accum * self.predivide.world_size

    @property
    def total_steps(self) -> int:
        return self.training.token_budget // self.tokens_per_step

    def echo(self) -> dict:
        """Every effective value, defaults included."""
        return {
            "model": dataclasses.asdict(self.model),
            "preset": self.preset.name if self.preset else None,
            "schedule": dataclasses.asdict(self.schedule),
            "adamw": dataclasses.asdict(self.adamw),
            "clip": dataclasses.asdict(self.clip),
            "predivide": dataclasses.asdict(self.predivide),
            "precision": dataclasses.asdict(self.precision),
            "scaler": dataclasses.asdict(self.scaler),
            "health": dataclasses.asdict(self.health),
            "recovery": dataclasses.asdict(self.recovery),
            "training": dataclasses.asdict(self.training),
            "corpus": dataclasses.asdict(self.corpus),
            "dedup": dataclasses.asdict(self.dedup),
            "seeds": dict(self.seeds),
        }


def _build(section: str, cls, raw: dict, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown key")
    try:
        return cls(**{**raw, **overrides})
    except ConfigError as e:
        raise ConfigError(f"{section}: {e}") from None
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None


REQUIRED_SECTIONS = ("model", "training")
KNOWN_SECTIONS = (
    "model", "schedule", "adamw", "clip", "predivide", "precision",
    "scaler", "health", "recovery", "training", "corpus", "dedup", "seeds",
)


def build_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a raw config dict into a fully resolved RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for key in data:
        if key not in KNOWN_SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    missing = [s for s in REQUIRED_SECTIONS if s not in data]
    if missing:
        raise ConfigError(
            "missing required sections: " + ", ".join(missing)
            + f" (required: {', '.join(REQUIRED_SECTIONS)})"
        )

    model_raw = dict(data["model"])
    preset: Preset | None = None
    if "preset" in model_raw:
        preset_name = model_raw.pop("preset")
        preset = get_preset(preset_name)
        base = dataclasses.asdict(preset.config)
        for key in model_raw:
            if key not in base:
                raise ConfigError(f"model.{key}: unknown key")
        base.update(model_raw)
        try:
            model = ModelConfig(**base)
        except ConfigError as e:
            raise ConfigError(f"model: {e}") from None
    else:
        model = _build("model", ModelConfig, model_raw)

    training = _build("training", TrainingConfig, data.get("training", {}))
    predivide = _build("predivide", PredivideConfig, data.get("predivide", {}))

    tokens_per_step = (
        training.seq_len * training.micro_batch * training.grad_accum * predivide.world_size
    )
    sched_raw = dict(data.get("schedule", {}))
    if "max_lr" not in sched_raw:
        if preset is None:
            raise ConfigError("schedule.max_lr is required when no model preset is set")
        sched_raw["max_lr"] = preset.max_lr
    if "decay_horizon_tokens" not in sched_raw:
        sched_raw["decay_horizon_tokens"] = training.token_budget
    if "warmup_steps" not in sched_raw and "warmup_tokens" not in sched_raw:
        sched_raw["warmup_tokens"] = max(1, training.token_budget // 10)
    if "overrides" in sched_raw:
        sched_raw["overrides"] = tuple(tuple(o) for o in sched_raw["overrides"])
    schedule = _build(
        "schedule", ScheduleConfig, sched_raw,
        tokens_per_step=sched_raw.get("tokens_per_step", tokens_per_step),
    )

    scaler_raw = dict(data.get("scaler", {}))
    if "initial_scale" in scaler_raw:
        scaler_raw["scale"] = scaler_raw.pop("initial_scale")
    scaler = _build("scaler", LossScaler, scaler_raw)

    corpus_raw = dict(data.get("corpus", {}))
    corpus = _build("corpus", CorpusConfig, corpus_raw)
    for label, p in (("corpus.tokens_path", corpus.tokens_path), ("corpus.manifest_path", corpus.manifest_path)):
        if p is not None:
            resolved = Path(p) if base_dir is None else base_dir / p
            if not resolved.exists():
                raise ConfigError(f"{label}: path does not exist: {resolved}")

    seeds_raw = dict(data.get("seeds", {}))
    master = seeds_raw.pop("master", 0)
    for key in seeds_raw:
        if key not in SEED_STREAMS:
            raise ConfigError(f"seeds.{key}: unknown key")
    seeds = {name: seeds_raw.get(name, master * len(SEED_STREAMS) + i) for i, name in enumerate(SEED_STREAMS)}

    return RunConfig(
        model=model,
        preset=preset,
        schedule=schedule,
        adamw=_build("adamw", AdamWConfig, data.get("adamw", {})),
        clip=_build("clip", ClipConfig, data.get("clip", {})),
        predivide=predivide,
        precision=_build("precision", PrecisionConfig, data.get("precision", {})),
        scaler=scaler,
        health=_build("health", HealthPolicy, data.get("health", {})),
        recovery=_build("recovery", RecoveryConfig, data.get("recovery", {})),
        training=training,
        corpus=corpus,
        dedup=_build("dedup", DedupConfig, data.get("dedup", {})),
        seeds=seeds,
    )


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not text.strip():
        raise ConfigError(
            f"{path}: empty config; required sections: {', '.join(REQUIRED_SECTIONS)}"
        )
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return build_config(data, base_dir=path.parent)


def emit_config(config: RunConfig) -> str:
    """Serialize back to config-file form; parse(emit(c)) == c."""
    echo = config.echo()
    data = {k: v for k, v in echo.items() if k != "preset"}
    # LossScaler's live field is "scale"; the file key is "initial_scale".
    data["scaler"]["initial_scale"] = data["scaler"].pop("scale")
    data["schedule"]["overrides"] = [list(o) for o in data["schedule"]["overrides"]]
    return json.dumps(data, indent=2, sort_keys=True)
