"""Experiment configuration stored as a flat ``dotted.key = value`` text file."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from dst_selftrain.confidence import CRITERIA, METHODS, SelectionConfig
from dst_selftrain.dialogue_data import DEFAULT_PROMPT
from dst_selftrain.models import BACKENDS, TrainSchedule
from dst_selftrain.ppaug import VARIANTS


class ConfigError(ValueError):
    pass


def _opt_str(v: str) -> Optional[str]:
    v = v.strip()
    return None if v.lower() in ("", "none", "null") else v


def _opt_int(v: str) -> Optional[int]:
    v = v.strip()
    return None if v.lower() in ("", "none", "null") else int(v)


def _key(name: str, parse: Callable[[str], Any] = str):
    return {"key": name, "parse": parse}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = field(default=0, metadata=_key("seed", int))

    corpus: Optional[str] = field(default=None, metadata=_key("data.corpus", _opt_str))
    split_dir: Optional[str] = field(default=None, metadata=_key("data.split_dir", _opt_str))
    synthetic_dialogues: Optional[int] = field(default=None, metadata=_key("data.synthetic_dialogues", _opt_int))
    labeled_fraction: float = field(default=0.1, metadata=_key("data.labeled_fraction", float))
    validation_fraction: float = field(default=0.1, metadata=_key("data.validation_fraction", float))
    test_fraction: float = field(default=0.1, metadata=_key("data.test_fraction", float))
    prompt: str = field(default=DEFAULT_PROMPT, metadata=_key("data.prompt"))

    backend: str = field(default="toy", metadata=_key("model.backend"))
    noise_rate: float = field(default=0.2, metadata=_key("model.noise_rate", float))
    fallback: str = field(default="extract", metadata=_key("model.fallback"))
    boilerplate_prob: float = field(default=0.98, metadata=_key("model.boilerplate_prob", float))
    max_len: int = field(default=128, metadata=_key("model.max_len", int))

    criterion: str = field(default="average", metadata=_key("select.criterion"))
    method: str = field(default="top_k", metadata=_key("select.method"))
    k: float = field(default=0.5, metadata=_key("select.k", float))

    # "none" disables augmentation; source "gold" augments only the initial gold data
    variant: str = field(default="mlm_maintain", metadata=_key("ppaug.variant"))
    augment_source: str = field(default="labeled", metadata=_key("ppaug.source"))
    mask_rate: float = field(default=0.2, metadata=_key("ppaug.rate", float))
    beam_width: int = field(default=1, metadata=_key("ppaug.beam_width", int))
    infiller: str = field(default="toy", metadata=_key("ppaug.infiller"))
    generator: str = field(default="toy", metadata=_key("ppaug.generator"))

    training_mode: str = field(default="separate", metadata=_key("train.mode"))
    teacher_epochs: int = field(default=20, metadata=_key("train.teacher.max_epochs", int))
    teacher_patience: int = field(default=3, metadata=_key("train.teacher.patience", int))
    pretrain_epochs: int = field(default=20, metadata=_key("train.pretrain.max_epochs", int))
    pretrain_patience: int = field(default=3, metadata=_key("train.pretrain.patience", int))
    finetune_epochs: int = field(default=10, metadata=_key("train.finetune.max_epochs", int))
    finetune_patience: int = field(default=3, metadata=_key("train.finetune.patience", int))
    batch_size: int = field(default=128, metadata=_key("train.batch_size", int))
    learning_rate: float = field(default=5e-5, metadata=_key("train.learning_rate", float))

    max_iterations: int = field(default=5, metadata=_key("st.max_iterations", int))
    st_patience: int = field(default=3, metadata=_key("st.patience", int))

    # -- derived views ----------------------------------------------------

    def selection(self, seed: int) -> SelectionConfig:
        return SelectionConfig(self.criterion, self.method, self.k, seed)

    def _schedule(self, epochs: int, patience: int) -> TrainSchedule:
        return TrainSchedule(epochs, patience, self.batch_size, self.learning_rate, self.seed)

    @property
    def teacher_schedule(self) -> TrainSchedule:
        return self._schedule(self.teacher_epochs, self.teacher_patience)

    @property
    def pretrain_schedule(self) -> TrainSchedule:
        return self._schedule(self.pretrain_epochs, self.pretrain_patience)

    @property
    def finetune_schedule(self) -> TrainSchedule:
        return self._schedule(self.finetune_epochs, self.finetune_patience)

    # -- validation -------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        problems = []
        sources = [s for s in (self.corpus, self.split_dir, self.synthetic_dialogues) if s is not None]
        if len(sources) != 1:
            problems.append("set exactly one of data.corpus, data.split_dir, data.synthetic_dialogues")
        if self.synthetic_dialogues is not None and self.synthetic_dialogues < 1:
            problems.append("data.synthetic_dialogues must be >= 1")
        if self.corpus is not None and not Path(self.corpus).is_file():
            problems.append(f"data.corpus {self.corpus!r} does not exist")
        if self.split_dir is not None and not Path(self.split_dir).is_dir():
            problems.append(f"data.split_dir {self.split_dir!r} does not exist")
        if not 0.0 < self.labeled_fraction <= 1.0:
            problems.append("data.labeled_fraction must be in (0, 1]")
        if not (0 <= self.validation_fraction and 0 <= self.test_fraction and self.validation_fraction + self.test_fraction < 1):
            problems.append("data.validation_fraction + data.test_fraction must be in [0, 1)")
        if not self.prompt.strip():
            problems.append("data.prompt must be non-empty")
        if self.backend not in BACKENDS:
            problems.append(f"model.backend must be one of {sorted(BACKENDS)}")
        if not 0.0 <= self.noise_rate <= 1.0:
            problems.append("model.noise_rate must be in [0, 1]")
        if self.fallback not in ("empty", "extract"):
            problems.append("model.fallback must be 'empty' or 'extract'")
        if not 0.0 <= self.boilerplate_prob <= 1.0:
            problems.append("model.boilerplate_prob must be in [0, 1]")
        if self.max_len < 1:
            problems.append("model.max_len must be >= 1")
        if self.criterion not in CRITERIA:
            problems.append(f"select.criterion must be one of {CRITERIA}")
        if self.method not in METHODS:
            problems.append(f"select.method must be one of {METHODS}")
        if not 0.0 < self.k <= 1.0:
            problems.append("select.k must be in (0, 1]")
        if self.variant not in VARIANTS + ("none",):
            problems.append(f"ppaug.variant must be one of {VARIANTS + ('none',)}")
        if self.augment_source not in ("labeled", "gold"):
            problems.append("ppaug.source must be 'labeled' or 'gold'")
        if not 0.0 <= self.mask_rate <= 1.0:
            problems.append("ppaug.rate must be in [0, 1]")
        if self.beam_width < 1:
            problems.append("ppaug.beam_width must be >= 1")
        if self.infiller != "toy" or self.generator != "toy":
            problems.append("only the 'toy' infiller and generator are available")
        if self.training_mode not in ("separate", "merged"):
            problems.append("train.mode must be 'separate' or 'merged'")
        for name in ("teacher_epochs", "pretrain_epochs", "finetune_epochs",
                     "teacher_patience", "pretrain_patience", "finetune_patience", "batch_size", "st_patience"):
            if getattr(self, name) < 1:
                problems.append(f"{_KEY_OF[name]} must be >= 1")
        if self.max_iterations < 0:
            problems.append("st.max_iterations must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    # -- (de)serialization ------------------------------------------------

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.metadata["key"]] = "none" if value is None else str(value)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_flat(cls, flat: dict[str, str], *, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        base = base or cls()
        by_key = {f.metadata["key"]: f for f in fields(cls)}
        updates = {}
        for key, raw in flat.items():
            f = by_key.get(key)
            if f is None:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                updates[f.name] = f.metadata["parse"](raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from None
        return replace(base, **updates)

    def override(self, **changes: Any) -> "ExperimentConfig":
        return replace(self, **changes)


_KEY_OF = {f.name: f.metadata["key"] for f in fields(ExperimentConfig)}
KEYS: tuple[str, ...] = tuple(_KEY_OF.values())


def parse_config_text(text: str) -> dict[str, str]:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = ExperimentConfig.from_flat(parse_config_text(path.read_text(encoding="utf-8")))
    # relative data paths resolve against the config file's directory
    changes = {}
    for name in ("corpus", "split_dir"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).is_absolute():
            changes[name] = str((path.parent / value).resolve())
    return cfg.override(**changes) if changes else cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
