"""Run configuration: named presets, YAML files, validation and the run manifest."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from . import __version__
from .data.distort import RAIN_LEVELS
from .data.synthetic import SyntheticSpec
from .model import PRESETS, ModelConfig
from .scoring import canonical_metric
from .training import LossWeights, TrainSchedule


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per offending field."""

    def __init__(self, problems: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


# Per-dataset scoring conventions on top of the architecture presets.
RUN_PRESETS: Dict[str, Dict[str, Any]] = {
    "ucsd_ped1": {"metric": "latent_cosine", "normalization": "video"},
    "ucsd_ped2": {"metric": "latent_cosine", "normalization": "video"},
    "avenue": {"metric": "latent_mse", "normalization": "video"},
    "shanghaitech": {"metric": "latent_cosine", "normalization": 64},
    "moving_mnist": {
        "metric": "latent_mse", "normalization": "none",
        "synthetic": {}, "n_train": 32, "n_test": 12,
        # A weaker L2 term than the full-size presets: at this scale gamma=1e-3 outweighs the
        # latent prediction gradient and decays the motion model to a constant output.
        "schedule": {"total_epochs": 20, "lr": 1e-3, "lr_decay_every": 15, "phase_switch_epoch": 10,
                     "phase1_weights": {"lambda_r": 1.0, "lambda_p": 0.001, "gamma": 1e-5},
                     "phase2_weights": {"lambda_r": 0.001, "lambda_p": 1.0, "gamma": 1e-5}},
    },
}


@dataclass
class RunConfig:
    preset: Optional[str] = None
    model: ModelConfig = field(default_factory=lambda: copy.deepcopy(PRESETS["ucsd_ped2"]))
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data_root: Optional[str] = None
    train_split: str = "train"
    test_split: str = "test"
    synthetic: Optional[SyntheticSpec] = None
    n_train: int = 32
    n_test: int = 12
    metric: str = "latent_cosine"
    normalization: Any = "video"  # "video", "none" or an int sliding-window size
    window: int = 64              # online normalisation window for streaming
    brightness: List[float] = field(default_factory=lambda: [1.0, 0.8, 0.6, 0.5])
    rain: List[str] = field(default_factory=lambda: ["none", "heavy", "torrential"])
    blur: List[float] = field(default_factory=lambda: [0.0])
    sweep_metrics: List[str] = field(default_factory=lambda: ["latent_mse", "pixel_prediction_mse"])
    d_values: List[int] = field(default_factory=lambda: [1, 2, 3, 5])
    seeds: List[int] = field(default_factory=lambda: [0])
    batch_size: int = 8
    checkpoint_every: Optional[int] = None
    max_steps_per_epoch: Optional[int] = None
    out: str = "runs/latest"

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["schedule"] = self.schedule.to_dict()
        d["synthetic"] = None if self.synthetic is None else self.synthetic.to_dict()
        return _plain(d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base: Dict, over: Dict) -> Dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(preset: Optional[str] = None, file: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Preset < config file < command-line overrides; validated as a whole."""
    raw: Dict[str, Any] = {}
    problems: List[str] = []
    if file is not None:
        try:
            loaded = yaml.safe_load(Path(file).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"config file {file}: {exc}"]) from exc
        if not isinstance(loaded, dict):
            raise ConfigError([f"config file {file}: top level must be a mapping"])
        raw = loaded
    preset = (overrides or {}).get("preset") or preset or raw.get("preset")
    base: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}"])
        base = {"preset": preset, "model": PRESETS[preset].to_dict(), **copy.deepcopy(RUN_PRESETS[preset])}
    merged = _merge(_merge(base, raw), {k: v for k, v in (overrides or {}).items() if v is not None})
    return from_dict(merged)


def from_dict(d: Dict[str, Any]) -> RunConfig:
    problems: List[str] = []
    d = dict(d)
    known = set(RunConfig.__dataclass_fields__)
    for key in sorted(set(d) - known):
        problems.append(f"{key}: unknown field")
    kwargs: Dict[str, Any] = {k: v for k, v in d.items() if k in known}

    def section(name, factory):
        val = kwargs.get(name)
        if val is None or not isinstance(val, dict):
            return val
        try:
            return factory(val)
        except (TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
            return None

    if "model" in kwargs:
        kwargs["model"] = section("model", lambda v: ModelConfig(**v))
    if "schedule" in kwargs:
        def mk_sched(v):
            v = dict(v)
            for ph in ("phase1_weights", "phase2_weights"):
                if isinstance(v.get(ph), dict):
                    v[ph] = LossWeights(**v[ph])
            return TrainSchedule(**v)
        kwargs["schedule"] = section("schedule", mk_sched)
    if kwargs.get("synthetic") is not None:
        kwargs["synthetic"] = section("synthetic", lambda v: SyntheticSpec(**v))
    kwargs = {k: v for k, v in kwargs.items() if v is not None or k in ("synthetic", "data_root",
                                                                          "checkpoint_every", "max_steps_per_epoch")}
    cfg = None
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        problems.append(str(exc))
    if cfg is not None:
        problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> List[str]:
    problems = []
    try:
        cfg.metric = canonical_metric(cfg.metric)
    except ValueError as exc:
        problems.append(f"metric: {exc}")
    for m in cfg.sweep_metrics:
        try:
            canonical_metric(m)
        except ValueError as exc:
            problems.append(f"sweep_metrics: {exc}")
    norm = cfg.normalization
    if not (norm in ("video", "none", None) or (isinstance(norm, int) and norm >= 1)):
        problems.append(f"normalization: expected 'video', 'none' or a window size >= 1, got {norm!r}")
    if cfg.window < 1:
        problems.append("window: must be >= 1")
    for b in cfg.brightness:
        if not 0 < float(b) <= 1:
            problems.append(f"brightness: {b} outside (0, 1]")
    for r in cfg.rain:
        if r not in RAIN_LEVELS:
            problems.append(f"rain: unknown level {r!r}")
    for s in cfg.blur:
        if float(s) < 0:
            problems.append(f"blur: sigma {s} < 0")
    for d in cfg.d_values:
        if int(d) < 1:
            problems.append(f"d_values: {d} < 1")
    if not cfg.seeds:
        problems.append("seeds: at least one seed required")
    if cfg.batch_size < 1:
        problems.append("batch_size: must be >= 1")
    if cfg.synthetic is not None and tuple(cfg.synthetic.canvas_size) != tuple(cfg.model.input_size):
        problems.append(f"synthetic.canvas_size {tuple(cfg.synthetic.canvas_size)} != "
                        f"model.input_size {tuple(cfg.model.input_size)}")
    return problems


def require_data(cfg: RunConfig, splits=("train",)) -> None:
    """Field-level check that the dataset exists (or that a synthetic spec is configured)."""
    if cfg.synthetic is not None and cfg.data_root is None:
        return
    if cfg.data_root is None:
        raise ConfigError(["data_root: no dataset path given (use --data or a synthetic preset)"])
    problems = []
    for split in splits:
        split_name = cfg.train_split if split == "train" else cfg.test_split
        p = Path(cfg.data_root) / split_name
        if not p.is_dir():
            problems.append(f"data_root: split directory {p} does not exist")
    if problems:
        raise ConfigError(problems)


@dataclass
class RunManifest:
    config_hash: str
    command: str
    checkpoints: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    code_version: str = __version__
    extra: Dict[str, Any] = field(default_factory=dict)

    def add(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, out_dir) -> Path:
        """Write manifest.json; call last, its presence marks a completed run."""
        self.finished = time.time()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path
