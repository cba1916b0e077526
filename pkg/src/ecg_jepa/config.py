"""Experiment configuration: one JSON document per run, hashed canonically."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .downstream import FinetuneConfig, ProbeConfig
from .ecg import CANONICAL_LEADS
from .model import ModelConfig
from .training import TrainConfig

PROTOCOLS = ("probe", "finetune", "lowshot", "features")
TASKS = ("multiclass", "multilabel")


class ConfigError(ValueError):
    """Raised with every offending field listed, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class SynthRanges:
    """Uniform ranges for per-record synthetic parameters (inclusive bounds)."""

    heart_rate_bpm: tuple[float, float] = (50.0, 100.0)
    qrs_duration_ms: tuple[float, float] = (60.0, 140.0)
    rr_jitter_frac: tuple[float, float] = (0.05, 0.05)
    noise_std_mv: tuple[float, float] = (0.05, 0.05)
    baseline_wander_amp_mv: tuple[float, float] = (0.1, 0.1)

    def __post_init__(self):
        problems = []
        for f in fields(self):
            value = getattr(self, f.name)
            if len(value) != 2 or not value[0] <= value[1]:
                problems.append(f"synth.{f.name}: need [lo, hi] with lo <= hi, got {list(value)}")
            object.__setattr__(self, f.name, tuple(float(v) for v in value))
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None
    lead_subset: tuple[str, ...] | None = None
    synth_count: int = 256
    eval_count: int = 1000
    balanced_eval: bool = True

    def __post_init__(self):
        problems = []
        if self.lead_subset is not None:
            object.__setattr__(self, "lead_subset", tuple(self.lead_subset))
            unknown = [x for x in self.lead_subset if x not in CANONICAL_LEADS]
            if unknown or not self.lead_subset:
                problems.append(f"data.lead_subset: unknown or empty lead names {unknown}")
        if self.synth_count < 1:
            problems.append("data.synth_count must be >= 1")
        if self.eval_count < 2:
            problems.append("data.eval_count must be >= 2")
        if problems:
            raise ConfigError(problems)

    def check_paths(self) -> list[str]:
        return [f"data.{name}: {getattr(self, name)} does not exist"
                for name in ("train_dir", "eval_dir")
                if getattr(self, name) is not None and not Path(getattr(self, name)).is_dir()]


@dataclass(frozen=True)
class TaskConfig:
    protocol: str = "probe"
    task: str = "multiclass"
    label: str = "class_label"
    test_fraction: float = 0.2
    fraction: float = 0.01
    seeds: int = 3

    def __post_init__(self):
        problems = []
        if self.protocol not in PROTOCOLS:
            problems.append(f"task.protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.task not in TASKS:
            problems.append(f"task.task must be one of {TASKS}, got {self.task!r}")
        if not 0 < self.test_fraction < 1:
            problems.append("task.test_fraction must lie in (0, 1)")
        if not 0 < self.fraction <= 1:
            problems.append("task.fraction must lie in (0, 1]")
        if self.seeds < 1:
            problems.append("task.seeds must be >= 1")
        if problems:
            raise ConfigError(problems)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "finetune": FinetuneConfig,
    "synth": SynthRanges,
    "data": DataConfig,
    "task": TaskConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthRanges = field(default_factory=SynthRanges)
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError([f"top level must be a JSON object, got {type(d).__name__}"])
        problems = [f"{key}: unknown section" for key in d if key not in _SECTIONS and key != "output_dir"]
        built = {}
        for key, kind in _SECTIONS.items():
            section = d.get(key, {})
            if not isinstance(section, dict):
                problems.append(f"{key}: must be a JSON object")
                continue
            known = {f.name for f in fields(kind)}
            extra = sorted(set(section) - known)
            problems += [f"{key}.{name}: unknown field" for name in extra]
            try:
                if kind is TrainConfig:
                    built[key] = TrainConfig.from_dict({k: v for k, v in section.items() if k in known})
                else:
                    built[key] = kind(**{k: v for k, v in section.items() if k in known})
            except ConfigError as exc:
                problems += exc.problems
            except (TypeError, ValueError) as exc:
                problems.append(f"{key}: {exc}")
        output_dir = d.get("output_dir", "runs/default")
        if not isinstance(output_dir, str) or not output_dir:
            problems.append("output_dir: must be a non-empty string")
        if problems:
            raise ConfigError(problems)
        return cls(output_dir=output_dir, **built)

    def to_dict(self) -> dict:
        # json round trip turns tuples into lists so the dict compares equal to a parsed file
        return json.loads(json.dumps(asdict(self)))

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        """sha256 of the canonical form without ``output_dir``.

        Where results are written does not change what is computed, so two
        runs that differ only in their output directory share a hash.
        """
        content = self.to_dict()
        del content["output_dir"]
        return config_hash(content)

    def check_paths(self) -> None:
        problems = self.data.check_paths()
        if problems:
            raise ConfigError(problems)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc
    return ExperimentConfig.from_dict(raw)


RECIPES = ("paper_rb", "paper_mb", "desk")


def recipe_path(name: str):
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPES}")
    return resources.files("ecg_jepa") / "recipes" / f"{name}.json"


def load_recipe(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(recipe_path(name).read_text(encoding="utf-8")))
