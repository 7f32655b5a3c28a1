"""Fitness functions: accuracy reward over dataset subsets, plus analytic
benchmark functions for optimizer validation.

Everything is maximized; the classic benchmark functions are negated so
their global optimum has reward 0. Accuracy rewards use exact string
match after whitespace normalization.

Subset selection is stateless: the index list for a generation is a pure
function of (policy, dataset size, generation id). The documented shuffle
is a Fisher-Yates permutation driven by the counter-based stream keyed
``derive_seed(seed, TAG_SUBSET, generation)``; fixed subsets use seed 0
and generation 0 so they are constant across generations.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InvalidConfig

# --- benchmark functions ----------------------------------------------------


def sphere(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return -float(x @ x)


def rosenbrock(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return -float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


def rastrigin(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    return -float(10.0 * d + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))


BENCHMARKS = {"sphere": sphere, "rosenbrock": rosenbrock, "rastrigin": rastrigin}


# --- subset policies --------------------------------------------------------


@dataclass(frozen=True)
class FixedSubset:
    size: int


@dataclass(frozen=True)
class DynamicPerGeneration:
    size: int
    seed: int


SubsetPolicy = FixedSubset | DynamicPerGeneration


def subset_select(policy: SubsetPolicy, dataset_size: int, generation_id: int) -> list[int]:
    """Index list for one generation; duplicates impossible by construction."""
    size = policy.size
    if size <= 0:
        raise InvalidConfig(f"subset size must be positive, got {size}")
    if size > dataset_size:
        raise InvalidConfig(f"subset size {size} > dataset size {dataset_size}")
    if isinstance(policy, FixedSubset):
        seed, gen = 0, 0
    else:
        seed, gen = policy.seed, generation_id
    perm = rng.permutation(rng.derive_seed(seed, rng.TAG_SUBSET, gen), dataset_size)
    return perm[:size]


def subset_hash(indices: list[int]) -> str:
    """Stable digest of an index list; logged per generation for audit."""
    raw = ",".join(str(i) for i in indices).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


# --- fitness descriptor -----------------------------------------------------


@dataclass(frozen=True)
class FitnessSpec:
    """What a reward means for this run.

    kind is one of "accuracy", "sphere", "rosenbrock", "rastrigin". For
    the accuracy kind the dataset and subset policy must be set; for the
    benchmarks the overrides argument of evaluate is the raw candidate
    vector. delay_ms injects an artificial per-evaluation delay (used by
    the scaling harness). per_candidate_subsets resamples the dynamic
    subset per candidate instead of per generation (ablation only).
    """

    kind: str
    subset_policy: SubsetPolicy | None = None
    dataset: tuple = field(default=())
    delay_ms: float = 0.0
    per_candidate_subsets: bool = False

    def describe(self) -> str:
        """Canonical string, hashed into the coordinator/worker config hash."""
        parts = [f"kind={self.kind}"]
        if self.subset_policy is not None:
            parts.append(f"policy={self.subset_policy!r}")
        parts.append(f"examples={len(self.dataset)}")
        parts.append(f"delay_ms={self.delay_ms!r}")
        parts.append(f"per_candidate={int(self.per_candidate_subsets)}")
        return " ".join(parts)


def normalize_answer(s: str) -> str:
    """Whitespace-normalized form used for exact-match scoring."""
    return " ".join(s.split())


def evaluate(spec: FitnessSpec, model, overrides, generation_id: int,
             candidate_index: int | None = None) -> float:
    """Scalar reward for one candidate; pure given its arguments."""
    if spec.delay_ms > 0:
        time.sleep(spec.delay_ms / 1000.0)
    if spec.kind in BENCHMARKS:
        return BENCHMARKS[spec.kind](overrides)
    if spec.kind != "accuracy":
        raise InvalidConfig(f"unknown fitness kind {spec.kind!r}")
    if spec.subset_policy is None:
        raise InvalidConfig("accuracy fitness needs a subset policy")
    if not spec.dataset:
        raise InvalidConfig("accuracy fitness needs a dataset")
    from .model import generate

    policy = spec.subset_policy
    gen_key = generation_id
    if spec.per_candidate_subsets and isinstance(policy, DynamicPerGeneration):
        if candidate_index is None:
            raise InvalidConfig("per-candidate subsets need a candidate index")
        gen_key = rng.derive_seed(generation_id, rng.TAG_SUBSET, candidate_index) % (1 << 32)
    indices = subset_select(policy, len(spec.dataset), gen_key)
    examples = [spec.dataset[i] for i in indices]
    max_new = max(len(ex.answer) for ex in examples) + 1
    predicted = generate(model, overrides, [ex.prompt for ex in examples], max_new)
    hits = sum(
        normalize_answer(p) == normalize_answer(ex.answer)
        for p, ex in zip(predicted, examples)
    )
    return hits / len(examples)
