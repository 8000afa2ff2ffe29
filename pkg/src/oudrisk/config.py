"""Pipeline configuration: one INI file mapped onto the module dataclasses.

Sections and keys mirror the dataclass fields (``[lstm] units = 64``). Unknown
sections or keys are errors, and every error names the offending
``section.key``. Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .baselines import ForestParams, LogRegParams, TreeParams
from .cohort import CohortConfig
from .evaluation import Protocol
from .impute import METHODS
from .models import ModelSpec
from .neural import DenseNetConfig, LstmNetConfig, TrainParams
from .synth import SynthConfig, SynthConfigError

TABLE_KEYS = ("icd9_gem", "ndc_atc", "mme_factors", "oud_codes", "cancer_codes",
              "opioid_ingredients")
MODEL_KINDS = ("lstm", "dense", "logreg", "tree", "forest")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key {key}: {message}")
        self.key = key


@dataclass
class FeatureOptions:
    min_prevalence: float = 0.01
    window: int = 5
    impute: str = "median"
    test_frac: float = 0.2


@dataclass
class RunOptions:
    seed: int = 42
    jobs: int = 1
    models: tuple = MODEL_KINDS
    importance_model: str = ""  # empty means the first of ``models``


@dataclass
class PipelineConfig:
    source: Path
    out: Path
    cohort_file: Path | None
    tables: dict
    run: RunOptions = field(default_factory=RunOptions)
    synth: SynthConfig | None = None
    cohort: CohortConfig = field(default_factory=CohortConfig)
    features: FeatureOptions = field(default_factory=FeatureOptions)
    lstm: LstmNetConfig = field(default_factory=LstmNetConfig)
    dense: DenseNetConfig = field(default_factory=DenseNetConfig)
    train: TrainParams = field(default_factory=TrainParams)
    val_frac: float = 0.2
    logreg: LogRegParams = field(default_factory=LogRegParams)
    tree: TreeParams = field(default_factory=TreeParams)
    forest: ForestParams = field(default_factory=ForestParams)
    evaluation: Protocol = field(default_factory=Protocol)

    def model_spec(self, kind) -> ModelSpec:
        return ModelSpec(kind, self.lstm, self.dense, self.train, self.logreg, self.tree,
                         self.forest, self.val_frac)

    def stage_seed(self, stage) -> int:
        """Per-stage seed: first 4 bytes (little-endian) of sha256("<master>:<stage>")."""
        digest = hashlib.sha256(f"{self.run.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def section_hash(self, *names) -> str:
        """Stable hash of the named config sections, for stage skip decisions."""
        blob = {}
        for n in names:
            v = getattr(self, n)
            blob[n] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        text = json.dumps(blob, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


SECTIONS = {
    "run": RunOptions, "synth": SynthConfig, "cohort": CohortConfig,
    "features": FeatureOptions, "lstm": LstmNetConfig, "dense": DenseNetConfig,
    "train": TrainParams, "logreg": LogRegParams, "tree": TreeParams,
    "forest": ForestParams, "evaluation": Protocol,
}
EXTRA_KEYS = {"train": {"val_frac": float}}
# seeds fan out from run.seed; imputation is chosen under [features]
EXCLUDED_KEYS = {"train": ("seed",), "logreg": ("seed",), "tree": ("seed",),
                 "forest": ("seed",), "evaluation": ("seed", "impute")}


def _parse_value(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "on", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:  # optional int such as forest.m
            return None if raw.lower() in ("none", "auto", "") else int(raw)
        if isinstance(default, (tuple, list)):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                items = [int(x) for x in items]
            elif default and isinstance(default[0], (list, tuple)):
                items = [[p.strip() for p in x.split("=")] for x in items]
            return type(default)(items)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _section(parser, name, cls):
    exclude = EXCLUDED_KEYS.get(name, ())
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in exclude}
    values = {}
    extra = EXTRA_KEYS.get(name, {})
    for key, raw in parser.items(name):
        full = f"{name}.{key}"
        if key in extra:
            continue
        if key not in defaults:
            raise ConfigError(full, f"unknown key; expected one of {sorted(defaults)}")
        values[key] = _parse_value(full, raw, defaults[key])
    return cls(**values)


def _resolve(base, raw):
    p = Path(raw).expanduser()
    return p if p.is_absolute() else (base / p)


def load_config(path, seed=None, jobs=None, impute=None, model=None, out=None) -> PipelineConfig:
    """Parse and validate; command-line overrides win over file values."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError("--config", str(exc)) from None
    base = path.resolve().parent
    known = set(SECTIONS) | {"paths"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(name, f"unknown section; expected one of {sorted(known)}")

    paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
    for key in paths:
        if key not in ("out", "cohort") + TABLE_KEYS:
            raise ConfigError(f"paths.{key}", "unknown key")
    out_dir = out or paths.get("out")
    if not out_dir:
        raise ConfigError("paths.out", "output directory is required")
    tables = {}
    for key in TABLE_KEYS:
        if key in paths:
            p = _resolve(base, paths[key])
            if not p.is_file():
                raise ConfigError(f"paths.{key}", f"table file not found: {p}")
            tables[key] = p
    cohort_file = None
    if "cohort" in paths:
        cohort_file = _resolve(base, paths["cohort"])
        if not cohort_file.is_file():
            raise ConfigError("paths.cohort", f"patient file not found: {cohort_file}")

    out_path = Path(out) if out else _resolve(base, out_dir)
    cfg = PipelineConfig(source=path.resolve(), out=out_path.resolve(),
                         cohort_file=cohort_file, tables=tables)
    for name, cls in SECTIONS.items():
        if parser.has_section(name):
            setattr(cfg, name, _section(parser, name, cls))
    if parser.has_section("train") and parser.has_option("train", "val_frac"):
        cfg.val_frac = _parse_value("train.val_frac", parser.get("train", "val_frac"), 0.2)
    if cfg.cohort_file is None and cfg.synth is None:
        raise ConfigError("paths.cohort", "no patient file and no [synth] section to make one")

    if seed is not None:
        cfg.run = replace(cfg.run, seed=int(seed))
    if jobs is not None:
        cfg.run = replace(cfg.run, jobs=int(jobs))
    if cfg.synth is not None and not parser.has_option("synth", "seed"):
        cfg.synth = replace(cfg.synth, seed=cfg.run.seed)
    if impute is not None:
        cfg.features = replace(cfg.features, impute=impute)
    if model is not None:
        cfg.run = replace(cfg.run, models=(model,), importance_model=model)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    def need(ok, key, message):
        if not ok:
            raise ConfigError(key, message)

    need(cfg.run.jobs >= 1, "run.jobs", "must be >= 1")
    for m in cfg.run.models:
        need(m in MODEL_KINDS, "run.models", f"unknown model {m!r}; choose from {MODEL_KINDS}")
    need(len(cfg.run.models) > 0, "run.models", "at least one model is required")
    if not cfg.run.importance_model:
        cfg.run = replace(cfg.run, importance_model=cfg.run.models[0])
    need(cfg.run.importance_model in cfg.run.models, "run.importance_model",
         f"{cfg.run.importance_model!r} is not among run.models {cfg.run.models}")
    need(cfg.features.impute in METHODS, "features.impute",
         f"unknown method {cfg.features.impute!r}; choose from {METHODS}")
    need(0 <= cfg.features.min_prevalence < 1, "features.min_prevalence", "must be in [0, 1)")
    need(cfg.features.window >= 1, "features.window", "must be >= 1")
    need(0 < cfg.features.test_frac < 1, "features.test_frac", "must be in (0, 1)")
    need(cfg.cohort.min_age <= cfg.cohort.max_age, "cohort.min_age", "must be <= max_age")
    need(cfg.lstm.units >= 1, "lstm.units", "must be >= 1")
    need(cfg.lstm.layers >= 1, "lstm.layers", "must be >= 1")
    need(cfg.lstm.window == cfg.features.window, "lstm.window",
         f"must equal features.window ({cfg.features.window})")
    need(all(d >= 1 for d in cfg.dense.hidden_dims), "dense.hidden_dims", "widths must be >= 1")
    need(0 <= cfg.dense.dropout_rate < 1, "dense.dropout_rate", "must be in [0, 1)")
    need(cfg.train.lr > 0, "train.lr", "must be > 0")
    need(cfg.train.batch >= 1, "train.batch", "must be >= 1")
    need(cfg.train.epochs >= 1, "train.epochs", "must be >= 1")
    need(cfg.train.patience >= 1, "train.patience", "must be >= 1")
    need(0 < cfg.val_frac < 1, "train.val_frac", "must be in (0, 1)")
    need(cfg.logreg.l2 >= 0, "logreg.l2", "must be >= 0")
    need(cfg.tree.max_depth >= 1, "tree.max_depth", "must be >= 1")
    need(cfg.tree.min_leaf >= 1, "tree.min_leaf", "must be >= 1")
    need(cfg.forest.n_trees >= 1, "forest.n_trees", "must be >= 1")
    need(cfg.forest.m is None or cfg.forest.m >= 1, "forest.m", "must be >= 1 or auto")
    ev = cfg.evaluation
    need(ev.parts >= 1, "evaluation.parts", "must be >= 1")
    need(0 < ev.train_frac < 1, "evaluation.train_frac", "must be in (0, 1)")
    need(ev.repeats >= 1, "evaluation.repeats", "must be >= 1")
    need(ev.importance_repeats >= 1, "evaluation.importance_repeats", "must be >= 1")
    need(0 <= ev.threshold <= 1, "evaluation.threshold", "must be in [0, 1]")
    if cfg.synth is not None:
        try:
            cfg.synth.validate()
        except SynthConfigError as exc:
            raise ConfigError("synth", str(exc)) from None
