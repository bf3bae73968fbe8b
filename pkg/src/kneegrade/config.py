"""One JSON document that drives a whole run, with defaults for every field.

The document is hashed (sha256 of its fully-expanded canonical form) and the
hash is stamped onto every artifact a run produces, so evaluation can refuse
to mix predictions and reports born from different configurations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .data import SynthConfig
from .errors import ConfigurationError
from .model import ModelConfig, config_hash
from .preprocess import AugmentConfig, PreprocessConfig
from .training import TrainConfig


def _build_dataclass(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where} must be a mapping, got {type(doc).__name__}")
    allowed = {f.name for f in fields(cls)}
    extra = set(doc) - allowed
    if extra:
        raise ConfigurationError(f"{where}: unknown keys {sorted(extra)}")
    kwargs = dict(doc)
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in kwargs[f.name])
    return cls(**kwargs)


def _train_from_dict(doc, where):
    doc = dict(doc)
    aug_doc = doc.pop("aug", None)
    cfg = _build_dataclass(TrainConfig, doc, where)
    if aug_doc is not None:
        cfg = replace(cfg, aug=_build_dataclass(AugmentConfig, aug_doc, f"{where}.aug"))
    return cfg


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_folds: int = 5
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        schedule="scratch", epochs=5))
    n_bootstrap: int = 100
    ci_level: float = 0.95

    def validate(self):
        if self.n_folds < 2:
            raise ConfigurationError("n_folds must be >= 2")
        if self.n_bootstrap < 1:
            raise ConfigurationError("n_bootstrap must be >= 1")
        if not 0.5 < self.ci_level < 1.0:
            raise ConfigurationError(f"ci_level {self.ci_level} outside (0.5, 1)")
        self.preprocess.validate()
        self.model.validate()
        self.train.validate()
        self.pretrain.validate()
        if self.pretrain.schedule != "scratch":
            raise ConfigurationError("pretrain.schedule must be scratch")
        return self

    def to_dict(self):
        doc = {
            "seed": self.seed,
            "n_folds": self.n_folds,
            "synth": asdict(self.synth),
            "preprocess": asdict(self.preprocess),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "pretrain": asdict(self.pretrain),
            "n_bootstrap": self.n_bootstrap,
            "ci_level": self.ci_level,
        }
        for key in ("train", "pretrain"):
            doc[key]["scratch_drops"] = list(doc[key]["scratch_drops"])
            doc[key]["task_weights"] = [list(p) for p in doc[key]["task_weights"]]
        return doc

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("run config must be a mapping")
        allowed = {f.name for f in fields(cls)}
        extra = set(doc) - allowed
        if extra:
            raise ConfigurationError(f"run config: unknown keys {sorted(extra)}")
        kwargs = {}
        for key in ("seed", "n_folds", "n_bootstrap", "ci_level"):
            if key in doc:
                kwargs[key] = doc[key]
        if "synth" in doc:
            kwargs["synth"] = _build_dataclass(SynthConfig, doc["synth"], "synth")
        if "preprocess" in doc:
            kwargs["preprocess"] = _build_dataclass(
                PreprocessConfig, doc["preprocess"], "preprocess")
        if "model" in doc:
            kwargs["model"] = ModelConfig.from_dict(doc["model"])
        if "train" in doc:
            kwargs["train"] = _train_from_dict(doc["train"], "train")
        if "pretrain" in doc:
            kwargs["pretrain"] = _train_from_dict(doc["pretrain"], "pretrain")
        return cls(**kwargs).validate()

    def hash(self):
        return config_hash(self.to_dict())


def load_run_config(path=None, overrides=None):
    """Config file (JSON) plus optional top-level overrides, validated.

    ``path=None`` starts from the all-defaults document. ``overrides`` wins
    over the file; both go through the same unknown-key checks.
    """
    import json
    doc = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    if overrides:
        doc = _merge(doc, overrides)
    return RunConfig.from_dict(doc)


def _merge(base, extra):
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
