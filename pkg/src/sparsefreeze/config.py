"""Run configuration: INI files with one section per concern.

Every key has a default (the CIFAR profile); unknown sections or keys are
rejected so that typos fail before training starts.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .dst import DstSchedule, cifar_schedule, scaled_schedule
from .errors import ConfigError
from .freeze import SCHEMES
from .model import check_sparsity, parse_arch


@dataclass
class DatasetSection:
    kind: str = "synthetic"           # synthetic | idx | cifar10
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: str = ""             # cifar10: comma-separated batch files
    test_files: str = ""
    n_train: int = 50000              # synthetic sizes
    n_test: int = 10000
    classes: int = 10
    dim: int = 3072
    spread: float = 1.0
    noise: float = 1.0
    shape: str = ""                   # e.g. 3x32x32; empty keeps flat samples
    augment: bool = False
    normalize: bool = True
    limit_train: int = 0              # 0 = use everything
    seed: int = 0                     # synthetic generator seed


@dataclass
class ModelSection:
    arch: str = "resnet32:2:100"
    first_layer_dense: bool = True
    precision: int = 32
    blocks: str = ""                  # optional comma-separated block sizes


@dataclass
class SparsitySection:
    s: float = 0.9


@dataclass
class DstSection:
    schedule: str = "cifar"           # cifar | scaled | explicit
    interval: int = 5
    phases: str = ""                  # explicit: "0:90:0.05, 90:120:0.025"


@dataclass
class TrainSection:
    epochs: int = 160
    batch_size: int = 32
    seed: int = 0
    eval_batch: int = 1024
    warmup_epochs: int = 0


@dataclass
class FreezeSection:
    scheme: str = "single_shot"
    target: float = 0.0               # FLOPs reduction fraction from freezing
    t_frz: int = 0                    # 0 = solve from the target
    frozen_layer_fraction: float = 2 / 3


@dataclass
class SieveSection:
    p: float = 0.0
    update_ratio: float = 0.30
    shuffle: str = "each"
    stop_with_search: bool = True


@dataclass
class OptimizerSection:
    lr0: float = 0.15
    lr_end: float = 4e-8
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class OutputSection:
    dir: str = "runs/default"
    checkpoint_every: int = 0         # epochs; 0 = final checkpoint only
    memory_batch: int = 64


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    sparsity: SparsitySection = field(default_factory=SparsitySection)
    dst: DstSection = field(default_factory=DstSection)
    train: TrainSection = field(default_factory=TrainSection)
    freeze: FreezeSection = field(default_factory=FreezeSection)
    sieve: SieveSection = field(default_factory=SieveSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- derived -----------------------------------------------------------

    def schedule(self) -> DstSchedule:
        d = self.dst
        if d.schedule == "cifar":
            sched = cifar_schedule(d.interval)
        elif d.schedule == "scaled":
            sched = scaled_schedule(self.train.epochs, d.interval)
        elif d.schedule == "explicit":
            sched = _parse_phases(d.phases, d.interval)
        else:
            raise ConfigError(f"unknown DST schedule {d.schedule!r}", "config")
        return sched

    def block_sizes(self):
        if not self.model.blocks.strip():
            return None
        try:
            return [int(v) for v in self.model.blocks.split(",")]
        except ValueError:
            raise ConfigError(f"bad block sizes {self.model.blocks!r}", "config") from None

    def validate(self):
        check_sparsity(self.sparsity.s, "config")
        arch = parse_arch(self.model.arch)
        if self.model.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64", "config")
        t = self.train
        if t.epochs < 0 or t.batch_size <= 0 or t.eval_batch <= 0 or t.warmup_epochs < 0:
            raise ConfigError("epochs, batch sizes and warm-up must be non-negative", "config")
        sched = self.schedule().validate(self.sparsity.s)
        if sched.search_end % sched.interval:
            raise ConfigError(f"search end {sched.search_end} is not on the {sched.interval}-epoch grid",
                              "config")
        if sched.search_end > t.epochs:
            raise ConfigError(f"DST search ends at {sched.search_end}, after the last epoch {t.epochs}",
                              "config")
        f = self.freeze
        if f.scheme not in SCHEMES:
            raise ConfigError(f"unknown freezing scheme {f.scheme!r}", "config")
        if not 0 <= f.target < 1:
            raise ConfigError(f"freeze target must be in [0, 1), got {f.target}", "config")
        if f.t_frz and not 0 < f.t_frz < t.epochs:
            raise ConfigError(f"t_frz must satisfy 0 < t_frz < epochs, got {f.t_frz}", "config")
        if not 0 < f.frozen_layer_fraction <= 1:
            raise ConfigError("frozen_layer_fraction must be in (0, 1]", "config")
        sv = self.sieve
        if not 0 <= sv.p < 1 or not 0 <= sv.update_ratio <= 1:
            raise ConfigError("sieve p must be in [0, 1) and update_ratio in [0, 1]", "config")
        if sv.shuffle not in ("each", "once"):
            raise ConfigError("sieve shuffle must be 'each' or 'once'", "config")
        o = self.optimizer
        if o.lr0 <= 0 or o.lr_end < 0 or o.lr_end > o.lr0 or not 0 <= o.momentum < 1 or o.weight_decay < 0:
            raise ConfigError("optimizer needs lr0 > 0, 0 <= lr_end <= lr0, momentum in [0, 1)", "config")
        ds = self.dataset
        if ds.kind not in ("synthetic", "idx", "cifar10"):
            raise ConfigError(f"unknown dataset kind {ds.kind!r}", "config")
        if ds.kind == "synthetic" and (ds.classes < 2 or ds.n_train <= 0 or ds.dim <= 0):
            raise ConfigError("synthetic data needs classes >= 2 and positive sizes", "config")
        sizes = self.block_sizes()
        if sizes is not None and (sum(sizes) != len(arch["layers"]) or min(sizes) <= 0):
            raise ConfigError(f"block sizes {sizes} do not partition {len(arch['layers'])} layers", "config")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse_phases(text, interval):
    phases = []
    try:
        for part in text.split(","):
            a, b, d = part.strip().split(":")
            phases.append((int(a), int(b), float(d)))
    except ValueError:
        raise ConfigError(f"bad DST phases {text!r}; expected start:end:delta, ...", "config") from None
    if not phases:
        raise ConfigError("explicit DST schedule needs phases", "config")
    return DstSchedule(tuple(phases), phases[-1][1], interval)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _convert(raw, typ, where):
    try:
        if typ in ("bool", bool):
            return _BOOL[raw.strip().lower()]
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}", "config") from None


def from_mapping(sections):
    """Build a validated ``RunConfig`` from ``{section: {key: str}}``."""
    cfg = RunConfig()
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    for sec, values in sections.items():
        if sec not in known:
            raise ConfigError(f"unknown config section [{sec}]", "config")
        obj = getattr(cfg, sec)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", "config")
            setattr(obj, key, _convert(str(raw), fields[key].type, f"[{sec}] {key}"))
    return cfg.validate()


def load_config(path, overrides=None):
    """Read an INI file; ``overrides`` is ``{section: {key: value}}`` applied on top."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}", "config") from None
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for sec, vals in (overrides or {}).items():
        sections.setdefault(sec, {}).update({k: str(v) for k, v in vals.items()})
    return from_mapping(sections)
