"""Run configuration: JSON file + dotted flag overrides -> validated :class:`RunConfig`.

Sections and keys are closed sets; anything unknown is rejected with its
dotted path.  Data sizes left as ``null`` are filled with per-regime defaults
by :meth:`RunConfig.resolve`, and the resolved config is what gets echoed to the
output directory.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .engine import LOCAL_OPTIMIZERS, MASKS, AdaptationConfig
from .errors import ConfigError

REGIMES = ("continual", "incremental", "unbalanced", "regression-demo", "sweep", "verify")
SWEEP_AXES = {
    "memory-capacity": "memory.capacity",
    "k-neighbours": "adaptation.k",
    "alpha_M": "adaptation.alpha_m",
    "steps": "adaptation.steps",
    "lambda": "mixture.lambda",
}


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | mnist
    mnist_dir: str | None = None
    dims: int | None = None
    classes: int | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None
    spread: float | None = None


@dataclass
class ModelConfig:
    hidden: list = None
    activation: str = "relu"
    optimizer: str = "adam"
    lr: float | None = None
    batch_size: int = 32
    embedding: str = "identity"        # identity | pretrained


@dataclass
class MemoryConfig:
    capacity: int = 100_000
    store_per_task: int | None = None
    write: str = "first_pass"          # first_pass | every_pass


@dataclass
class MixtureConfig:
    # "lambda" is a keyword; the JSON key is "lambda"
    lam: float = 0.5


@dataclass
class ContinualConfig:
    tasks: int = 2
    train_per_task: int = 2000
    epochs_per_task: float = 10.0


@dataclass
class IncrementalConfig:
    pretrain_fraction: float = 0.5
    pretrain_epochs: float = 10.0
    checkpoints: list = field(default_factory=lambda: [0.1, 0.3, 1.0, 2.0, 3.0])
    starved_fraction: float = 0.1


@dataclass
class RegressionConfig:
    n_train: int = 40
    noise: float = 0.05
    gap: list | None = None
    gap_memory_points: int = 6
    hidden: list = field(default_factory=lambda: [32])
    epochs: float = 300.0
    lr: float = 1e-2
    grid_points: int = 201
    alpha_m: float = 0.05
    steps: int = 100
    k: int = 5


@dataclass
class SweepConfig:
    axis: str = "k-neighbours"
    values: list = field(default_factory=lambda: [1, 5, 10, 25, 50])
    regime: str = "incremental"


@dataclass
class RunConfig:
    regime: str = "continual"
    seed: int = 0
    threads: int = 0                   # 0 = number of cores
    output_dir: str = "runs/default"
    eval_subset: int = 1000
    repeats: int = 1
    predictors: list | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adaptation: dict = field(default_factory=lambda: AdaptationConfig().to_dict())
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    incremental: IncrementalConfig = field(default_factory=IncrementalConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def adapt(self) -> AdaptationConfig:
        return AdaptationConfig(**self.adaptation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixture"] = {"lambda": self.mixture.lam}
        return d

    def resolve(self) -> "RunConfig":
        """Fill per-regime defaults for unset data/model fields and validate."""
        cfg = copy.deepcopy(self)
        regime = cfg.sweep.regime if cfg.regime == "sweep" else cfg.regime
        d = cfg.data
        if d.source == "mnist":
            base = dict(dims=784, classes=10, train_per_class=None, test_per_class=None, spread=None)
        elif regime in ("incremental", "unbalanced"):
            base = dict(dims=32, classes=20, train_per_class=200, test_per_class=50, spread=0.25)
        else:
            base = dict(dims=64, classes=10, train_per_class=200, test_per_class=100, spread=0.3)
        for k, v in base.items():
            if getattr(d, k) is None:
                setattr(d, k, v)
        if cfg.model.hidden is None:
            cfg.model.hidden = [100]
        if cfg.model.lr is None:
            cfg.model.lr = 1e-3
        validate(cfg)
        return cfg


_SECTIONS = {
    "data": DataConfig, "model": ModelConfig, "memory": MemoryConfig, "mixture": MixtureConfig,
    "continual": ContinualConfig, "incremental": IncrementalConfig,
    "regression": RegressionConfig, "sweep": SweepConfig,
}


def _field_names(cls):
    names = {f.name for f in fields(cls)}
    if cls is MixtureConfig:
        names = {"lambda"}
    return names


def _set_attr(obj, key, value):
    setattr(obj, "lam" if key == "lambda" and isinstance(obj, MixtureConfig) else key, value)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    cfg = RunConfig()
    top = {f.name for f in fields(RunConfig)}
    for key, value in raw.items():
        if key not in top:
            raise ConfigError(key, "unknown key")
        if key == "adaptation":
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            for k, v in value.items():
                if k not in cfg.adaptation:
                    raise ConfigError(f"adaptation.{k}", "unknown key")
                cfg.adaptation[k] = v
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            section = getattr(cfg, key)
            names = _field_names(_SECTIONS[key])
            for k, v in value.items():
                if k not in names:
                    raise ConfigError(f"{key}.{k}", "unknown key")
                _set_attr(section, k, v)
        else:
            setattr(cfg, key, value)
    return cfg


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides; string values are JSON-decoded when possible."""
    cfg = copy.deepcopy(cfg)
    for path, value in overrides.items():
        if isinstance(value, str):
            value = _parse_scalar(value)
        parts = path.split(".")
        if len(parts) == 1:
            if parts[0] not in {f.name for f in fields(RunConfig)} or parts[0] in _SECTIONS or parts[0] == "adaptation":
                raise ConfigError(path, "unknown key")
            setattr(cfg, parts[0], value)
        elif len(parts) == 2:
            sec, key = parts
            if sec == "adaptation":
                if key not in cfg.adaptation:
                    raise ConfigError(path, "unknown key")
                cfg.adaptation[key] = value
            elif sec in _SECTIONS:
                if key not in _field_names(_SECTIONS[sec]):
                    raise ConfigError(path, "unknown key")
                _set_attr(getattr(cfg, sec), key, value)
            else:
                raise ConfigError(path, "unknown key")
        else:
            raise ConfigError(path, "unknown key")
    return cfg


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(path, msg)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate(cfg: RunConfig) -> None:
    _require(cfg.regime in REGIMES, "regime", f"must be one of {REGIMES}")
    _require(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a nonnegative integer")
    _require(_is_int(cfg.threads) and cfg.threads >= 0, "threads", "must be a nonnegative integer")
    _require(isinstance(cfg.output_dir, str) and cfg.output_dir, "output_dir", "must be a non-empty string")
    _require(_is_int(cfg.eval_subset) and cfg.eval_subset >= 1, "eval_subset", "must be a positive integer")
    _require(_is_int(cfg.repeats) and cfg.repeats >= 1, "repeats", "must be a positive integer")

    a = cfg.adaptation
    _require(_is_num(a["alpha_m"]) and a["alpha_m"] >= 0, "adaptation.alpha_m", "must be >= 0")
    _require(_is_num(a["beta"]) and a["beta"] >= 0, "adaptation.beta", "must be >= 0")
    _require(_is_int(a["steps"]) and a["steps"] >= 0, "adaptation.steps", "must be an integer >= 0")
    _require(_is_int(a["k"]) and a["k"] >= 1, "adaptation.k", "must be an integer >= 1")
    _require(_is_num(a["epsilon"]) and a["epsilon"] >= 0, "adaptation.epsilon", "must be >= 0")
    _require(a["mask"] in MASKS, "adaptation.mask", f"must be one of {MASKS}")
    _require(a["local_optimizer"] in LOCAL_OPTIMIZERS, "adaptation.local_optimizer",
             f"must be one of {LOCAL_OPTIMIZERS}")

    d = cfg.data
    _require(d.source in ("synthetic", "mnist"), "data.source", "must be 'synthetic' or 'mnist'")
    for k in ("dims", "classes"):
        v = getattr(d, k)
        _require(v is None or (_is_int(v) and v >= 1), f"data.{k}", "must be a positive integer")
    for k in ("train_per_class", "test_per_class"):
        v = getattr(d, k)
        _require(v is None or (_is_int(v) and v >= 1), f"data.{k}", "must be a positive integer")
    _require(d.spread is None or (_is_num(d.spread) and d.spread > 0), "data.spread", "must be > 0")

    m = cfg.model
    _require(m.hidden is None or (isinstance(m.hidden, list) and all(_is_int(h) and h >= 1 for h in m.hidden)),
             "model.hidden", "must be a list of positive integers")
    _require(m.activation in ("relu", "tanh"), "model.activation", "must be 'relu' or 'tanh'")
    _require(m.optimizer in ("sgd", "adam", "rmsprop"), "model.optimizer", "must be sgd, adam or rmsprop")
    _require(m.lr is None or (_is_num(m.lr) and m.lr >= 0), "model.lr", "must be >= 0")
    _require(_is_int(m.batch_size) and m.batch_size >= 1, "model.batch_size", "must be a positive integer")
    _require(m.embedding in ("identity", "pretrained"), "model.embedding", "must be 'identity' or 'pretrained'")

    mem = cfg.memory
    _require(_is_int(mem.capacity) and mem.capacity >= 0, "memory.capacity", "must be an integer >= 0")
    _require(mem.store_per_task is None or (_is_int(mem.store_per_task) and mem.store_per_task >= 0),
             "memory.store_per_task", "must be null or an integer >= 0")
    _require(mem.write in ("first_pass", "every_pass"), "memory.write", "must be first_pass or every_pass")

    _require(_is_num(cfg.mixture.lam) and 0 <= cfg.mixture.lam <= 1, "mixture.lambda", "must lie in [0, 1]")

    c = cfg.continual
    _require(_is_int(c.tasks) and c.tasks >= 1, "continual.tasks", "must be a positive integer")
    _require(_is_int(c.train_per_task) and c.train_per_task >= 1, "continual.train_per_task", "must be positive")
    _require(_is_num(c.epochs_per_task) and c.epochs_per_task > 0, "continual.epochs_per_task", "must be > 0")

    inc = cfg.incremental
    _require(_is_num(inc.pretrain_fraction) and 0 < inc.pretrain_fraction < 1,
             "incremental.pretrain_fraction", "must lie in (0, 1)")
    _require(_is_num(inc.pretrain_epochs) and inc.pretrain_epochs >= 0, "incremental.pretrain_epochs", "must be >= 0")
    _require(isinstance(inc.checkpoints, list) and inc.checkpoints and all(_is_num(x) and x >= 0 for x in inc.checkpoints),
             "incremental.checkpoints", "must be a non-empty list of epoch fractions >= 0")
    _require(all(a < b for a, b in zip(inc.checkpoints, inc.checkpoints[1:])),
             "incremental.checkpoints", "must be strictly increasing")
    _require(_is_num(inc.starved_fraction) and 0 < inc.starved_fraction <= 1,
             "incremental.starved_fraction", "must lie in (0, 1]")

    r = cfg.regression
    _require(_is_int(r.n_train) and r.n_train >= 2, "regression.n_train", "must be an integer >= 2")
    _require(_is_num(r.noise) and r.noise > 0, "regression.noise", "must be > 0")
    _require(r.gap is None or (isinstance(r.gap, list) and len(r.gap) == 2 and r.gap[0] < r.gap[1]),
             "regression.gap", "must be null or [lo, hi] with lo < hi")
    _require(_is_int(r.grid_points) and r.grid_points >= 2, "regression.grid_points", "must be >= 2")
    _require(_is_num(r.alpha_m) and r.alpha_m >= 0, "regression.alpha_m", "must be >= 0")
    _require(_is_int(r.steps) and r.steps >= 0, "regression.steps", "must be >= 0")
    _require(_is_int(r.k) and r.k >= 1, "regression.k", "must be >= 1")

    s = cfg.sweep
    _require(s.axis in SWEEP_AXES, "sweep.axis", f"must be one of {sorted(SWEEP_AXES)}")
    _require(isinstance(s.values, list) and s.values, "sweep.values", "must be a non-empty list")
    _require(len(set(map(json.dumps, s.values))) == len(s.values), "sweep.values", "must be distinct")
    _require(s.regime in ("continual", "incremental", "unbalanced"), "sweep.regime",
             "must be continual, incremental or unbalanced")

    if cfg.predictors is not None:
        from .harness import PREDICTORS
        _require(isinstance(cfg.predictors, list) and all(p in PREDICTORS for p in cfg.predictors),
                 "predictors", f"entries must be among {PREDICTORS}")


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load ``path`` (JSON), apply dotted ``overrides`` and resolve defaults."""
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError("", f"cannot read config {path}: {e}") from None
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError("", f"malformed JSON in {path}: {e}") from None
    cfg = from_dict(raw)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.resolve()
