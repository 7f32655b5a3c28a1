"""Declarative run configuration: one INI-style file with sections per
pipeline stage, validated strictly at load (unknown sections or keys are
errors, not warnings).

Environment variables may override exactly two things: EVOSVD_MASTER_SEED
and EVOSVD_OUTPUT_DIR. Everything else comes from the file or defaults;
defaults follow the reference settings (sigma0 0.32, population 192, top
40% of singular values, rank 16).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .errors import InvalidConfig, SplitOverlap
from .fitness import DynamicPerGeneration, FixedSubset, SubsetPolicy
from .model import (
    Architecture,
    PRECISIONS,
    TaskExample,
    addition_examples,
    check_disjoint,
    load_examples,
    split_examples,
)
from .scheduler import ClusterConfig

ENV_MASTER_SEED = "EVOSVD_MASTER_SEED"
ENV_OUTPUT_DIR = "EVOSVD_OUTPUT_DIR"


@dataclass(frozen=True)
class TaskSection:
    seed: int = 1
    count: int = 8000
    a_lo: int = 1000
    a_hi: int = 8999
    b_lo: int = 1
    b_hi: int = 1
    width: int = 4
    sft_count: int = 300
    align_count: int = 1200
    sft_file: str = ""
    align_file: str = ""


@dataclass(frozen=True)
class ModelSection:
    kind: str = "transformer"
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    max_len: int = 24
    seed: int = 11
    precision: str = "f32"


@dataclass(frozen=True)
class LoraSection:
    rank: int = 16
    top_percent: float = 40.0
    init_seed: int = 2
    init_scale: float = 0.02


@dataclass(frozen=True)
class SftSection:
    steps: int = 800
    lr: float = 0.7
    batch_size: int = 32
    seed: int = 5


@dataclass(frozen=True)
class EsSection:
    population: int = 192
    sigma0: float = 0.32
    generations: int = 100
    master_seed: int = 1234
    subset: str = "dynamic"
    subset_size: int = 100
    subset_seed: int = 123
    per_candidate_subsets: bool = False


@dataclass(frozen=True)
class ClusterSection:
    workers: int = 1
    transport: str = "inproc"
    host: str = "127.0.0.1"
    port: int = 0
    generation_timeout: float = 300.0
    checkpoint_every: int = 10


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/default"


_SECTIONS = {
    "task": TaskSection,
    "model": ModelSection,
    "lora": LoraSection,
    "sft": SftSection,
    "es": EsSection,
    "cluster": ClusterSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    task: TaskSection = TaskSection()
    model: ModelSection = ModelSection()
    lora: LoraSection = LoraSection()
    sft: SftSection = SftSection()
    es: EsSection = EsSection()
    cluster: ClusterSection = ClusterSection()
    output: OutputSection = OutputSection()

    @property
    def out_dir(self) -> str:
        return self.output.dir

    def architecture(self) -> Architecture:
        m = self.model
        return Architecture(kind=m.kind, layers=m.layers, d_model=m.d_model,
                            heads=m.heads, d_ff=m.d_ff, max_len=m.max_len)

    def subset_policy(self) -> SubsetPolicy:
        if self.es.subset == "fixed":
            return FixedSubset(self.es.subset_size)
        return DynamicPerGeneration(self.es.subset_size, self.es.subset_seed)

    def cluster_config(self) -> ClusterConfig:
        c = self.cluster
        return ClusterConfig(population=self.es.population, workers=c.workers,
                             transport=c.transport, host=c.host, port=c.port,
                             generation_timeout=c.generation_timeout,
                             checkpoint_every=c.checkpoint_every)

    def validate(self) -> None:
        t, m, lo, s, e = self.task, self.model, self.lora, self.sft, self.es
        self.architecture().validate()
        if m.precision not in PRECISIONS:
            raise InvalidConfig(
                f"[model] precision must be one of {PRECISIONS}, got {m.precision!r}")
        if bool(t.sft_file) != bool(t.align_file):
            raise InvalidConfig("[task] sft_file and align_file must be set together")
        if not t.sft_file:
            if t.sft_count <= 0 or t.align_count <= 0:
                raise InvalidConfig("[task] split sizes must be positive")
            if t.sft_count + t.align_count > t.count:
                raise InvalidConfig(
                    f"[task] splits need {t.sft_count + t.align_count} examples, "
                    f"count is {t.count}")
        if lo.rank <= 0:
            raise InvalidConfig(f"[lora] rank must be positive, got {lo.rank}")
        if not 0.0 < lo.top_percent <= 100.0:
            raise InvalidConfig(
                f"[lora] top_percent must be in (0, 100], got {lo.top_percent}")
        if lo.init_scale <= 0:
            raise InvalidConfig("[lora] init_scale must be positive")
        if s.steps < 0 or s.lr <= 0 or s.batch_size <= 0:
            raise InvalidConfig("[sft] need steps >= 0, lr > 0, batch_size > 0")
        if e.population < 2:
            raise InvalidConfig(f"[es] population must be >= 2, got {e.population}")
        if e.sigma0 <= 0:
            raise InvalidConfig(f"[es] sigma0 must be positive, got {e.sigma0}")
        if e.generations < 0:
            raise InvalidConfig("[es] generations must be non-negative")
        if e.subset not in ("fixed", "dynamic"):
            raise InvalidConfig(
                f"[es] subset must be 'fixed' or 'dynamic', got {e.subset!r}")
        if e.subset_size <= 0:
            raise InvalidConfig("[es] subset_size must be positive")
        if not t.sft_file and e.subset_size > t.align_count:
            raise InvalidConfig(
                f"[es] subset_size {e.subset_size} > alignment split {t.align_count}")
        self.cluster_config().validate()
        if not self.out_dir:
            raise InvalidConfig("[output] dir must be set")


def _coerce(section: str, key: str, kind: type, raw: str):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise InvalidConfig(
            f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse, apply overrides ("section.key" strings) and env, validate.

    A missing path yields the defaults; a path that does not exist is an
    error.
    """
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    if path is not None:
        if not os.path.exists(path):
            raise InvalidConfig(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise InvalidConfig(f"{path}: {e}") from e
        for section in parser.sections():
            if section not in _SECTIONS:
                raise InvalidConfig(f"{path}: unknown section [{section}]")
            known = {f.name: f.type for f in fields(_SECTIONS[section])}
            types = {"int": int, "float": float, "bool": bool, "str": str}
            for key, raw in parser.items(section):
                if key not in known:
                    raise InvalidConfig(f"{path}: [{section}] unknown key {key!r}")
                values[section][key] = _coerce(section, key, types[known[key]], raw)
    for item in overrides or {}:
        target = (overrides or {})[item]
        if "." not in item:
            raise InvalidConfig(f"override {item!r} must look like section.key")
        section, key = item.split(".", 1)
        if section not in _SECTIONS:
            raise InvalidConfig(f"override {item!r}: unknown section [{section}]")
        known = {f.name: f.type for f in fields(_SECTIONS[section])}
        if key not in known:
            raise InvalidConfig(f"override {item!r}: unknown key {key!r}")
        types = {"int": int, "float": float, "bool": bool, "str": str}
        values[section][key] = _coerce(section, key, types[known[key]], target)
    if ENV_MASTER_SEED in os.environ:
        values["es"]["master_seed"] = _coerce("es", "master_seed", int,
                                              os.environ[ENV_MASTER_SEED])
    if ENV_OUTPUT_DIR in os.environ:
        values["output"]["dir"] = os.environ[ENV_OUTPUT_DIR]
    cfg = RunConfig(**{name: cls(**values[name]) for name, cls in _SECTIONS.items()})
    cfg.validate()
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical INI text for the snapshot written into the run directory."""
    lines = []
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(cls):
            lines.append(f"{f.name} = {getattr(section, f.name)}")
        lines.append("")
    return "\n".join(lines)


def build_dataset(task: TaskSection) -> tuple[list[TaskExample], list[TaskExample]]:
    """(sft split, alignment split), disjoint by construction or audit."""
    if task.sft_file:
        sft = load_examples(task.sft_file)
        align = load_examples(task.align_file)
        sft_prompts = {ex.prompt for ex in sft}
        shared = [ex.id for ex in align if ex.prompt in sft_prompts]
        if shared:
            raise SplitOverlap(
                f"{len(shared)} alignment prompts also appear in the SFT file "
                f"(first: {shared[0]})")
        return sft, align
    examples = addition_examples(task.seed, task.count, task.a_lo, task.a_hi,
                                 task.b_lo, task.b_hi, task.width)
    sft, align = split_examples(examples, [task.sft_count, task.align_count])
    check_disjoint(sft, align)
    return sft, align
