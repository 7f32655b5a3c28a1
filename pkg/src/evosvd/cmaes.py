"""CMA-ES with an ask/tell interface, maximization convention, and a
fully counter-based candidate stream.

Hyperparameter defaults follow the standard tutorial formulation
(log-linear positive recombination weights, cumulative step-size
adaptation, rank-one plus rank-mu covariance update). Rewards are
MAXIMIZED: tell ranks candidates by reward descending, ties broken by
candidate index.

Candidate i of generation g is a pure function of (rng_seed, g, i), so a
worker holding a synchronized state mirror regenerates any candidate from
its seed alone; nothing about the sampling distribution ever crosses the
wire.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .binio import Reader, pack_f64_array, pack_u32, pack_u64
from .errors import (
    CorruptCheckpoint,
    IncompleteGeneration,
    InvalidConfig,
    NumericalBreakdown,
    ProtocolViolation,
)

CHECKPOINT_MAGIC = b"ESCK"
CHECKPOINT_VERSION = 1

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class CmaHyper:
    lam: int
    mu: int
    mu_eff: float
    c_m: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float


@dataclass
class CmaState:
    """Full optimizer state; serializable, mutated only by its owner."""

    dim: int
    mean: np.ndarray
    step_size: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_c: np.ndarray
    weights: np.ndarray
    generation: int
    rng_seed: int
    sigma0: float
    hyper: CmaHyper
    pending: bool = False  # an asked generation awaits its tell


@dataclass(frozen=True)
class Generation:
    """One asked population: candidates plus their wire seeds."""

    id: int
    candidates: np.ndarray          # (lam, dim)
    seeds: tuple[int, ...]
    rewards: tuple[float, ...] | None = None

    def with_rewards(self, rewards) -> "Generation":
        rewards = tuple(float(r) for r in rewards)
        if len(rewards) != self.candidates.shape[0]:
            raise IncompleteGeneration(
                f"{len(rewards)} rewards for {self.candidates.shape[0]} candidates")
        return replace(self, rewards=rewards)


def default_population(dim: int) -> int:
    return 4 + int(3 * math.log(dim))


def _hyper(dim: int, lam: int) -> tuple[CmaHyper, np.ndarray]:
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w = w / w.sum()
    mu_eff = 1.0 / float(w @ w)
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim ** 2))
    hyper = CmaHyper(lam=lam, mu=mu, mu_eff=mu_eff, c_m=1.0, c_sigma=c_sigma,
                     d_sigma=d_sigma, c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n)
    return hyper, w


def init(dim: int, sigma0: float, lam: int, seed: int,
         mean0: np.ndarray | None = None) -> CmaState:
    """Fresh optimizer state. Mean defaults to 0 (search in delta space)."""
    if dim < 1:
        raise InvalidConfig(f"dim must be >= 1, got {dim}")
    if not (sigma0 > 0):
        raise InvalidConfig(f"sigma0 must be > 0, got {sigma0}")
    if lam < 2:
        raise InvalidConfig(f"population must be >= 2, got {lam}")
    hyper, w = _hyper(dim, lam)
    mean = np.zeros(dim) if mean0 is None else np.asarray(mean0, dtype=np.float64).copy()
    if mean.shape != (dim,):
        raise InvalidConfig(f"mean0 shape {mean.shape} != ({dim},)")
    return CmaState(
        dim=dim, mean=mean, step_size=float(sigma0), cov=np.eye(dim),
        path_sigma=np.zeros(dim), path_c=np.zeros(dim), weights=w,
        generation=0, rng_seed=int(seed), sigma0=float(sigma0), hyper=hyper,
    )


def _factorize(state: CmaState) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition C = B diag(D^2) B^T; failure -> NumericalBreakdown."""
    if np.max(np.abs(state.cov - state.cov.T)) > SYMMETRY_TOL:
        raise NumericalBreakdown("covariance lost symmetry", checkpoint(state))
    try:
        eigvals, basis = np.linalg.eigh(state.cov)
    except np.linalg.LinAlgError as e:
        raise NumericalBreakdown(f"eigh failed: {e}", checkpoint(state)) from e
    if not np.all(eigvals > 0):
        raise NumericalBreakdown(
            f"covariance not positive definite (min eig {eigvals.min():.3e})",
            checkpoint(state))
    return basis, np.sqrt(eigvals)


def ask(state: CmaState) -> Generation:
    """Sample the next population: x_i = mean + sigma * B D z_i."""
    if state.pending:
        raise ProtocolViolation("ask called before telling the previous generation")
    basis, d = _factorize(state)
    lam = state.hyper.lam
    seeds = tuple(rng.candidate_seed(state.rng_seed, state.generation, i)
                  for i in range(lam))
    X = np.empty((lam, state.dim))
    for i, seed in enumerate(seeds):
        z = rng.gaussians(seed, state.dim)
        X[i] = state.mean + state.step_size * (basis @ (d * z))
    state.pending = True
    return Generation(id=state.generation, candidates=X, seeds=seeds)


def tell(state: CmaState, gen: Generation) -> CmaState:
    """Rank by reward descending and apply the distribution updates."""
    if not state.pending:
        raise ProtocolViolation("tell called without a pending ask")
    if gen.id != state.generation:
        raise ProtocolViolation(
            f"telling generation {gen.id}, state is at {state.generation}")
    hy = state.hyper
    if gen.rewards is None or len(gen.rewards) != hy.lam:
        raise IncompleteGeneration("rewards missing")
    rewards = np.asarray(gen.rewards, dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise IncompleteGeneration("non-finite rewards")

    order = sorted(range(hy.lam), key=lambda i: (-rewards[i], i))
    parents = gen.candidates[order[:hy.mu]]

    w = state.weights
    sigma = state.step_size
    old_mean = state.mean
    y_parents = (parents - old_mean) / sigma
    yw = w @ y_parents
    new_mean = old_mean + hy.c_m * sigma * yw

    basis, d = _factorize(state)
    inv_sqrt = (basis / d) @ basis.T
    cs, cc = hy.c_sigma, hy.c_c
    state.path_sigma = (1.0 - cs) * state.path_sigma + \
        math.sqrt(cs * (2.0 - cs) * hy.mu_eff) * (inv_sqrt @ yw)
    ps_norm = float(np.linalg.norm(state.path_sigma))
    decay = 1.0 - (1.0 - cs) ** (2 * (state.generation + 1))
    h_sigma = 1.0 if ps_norm / math.sqrt(decay) < (1.4 + 2.0 / (state.dim + 1.0)) * hy.chi_n else 0.0
    state.path_c = (1.0 - cc) * state.path_c + \
        h_sigma * math.sqrt(cc * (2.0 - cc) * hy.mu_eff) * yw

    rank_mu = (y_parents.T * w) @ y_parents
    cov = (1.0 - hy.c_1 - hy.c_mu) * state.cov \
        + hy.c_1 * (np.outer(state.path_c, state.path_c)
                    + (1.0 - h_sigma) * cc * (2.0 - cc) * state.cov) \
        + hy.c_mu * rank_mu
    state.cov = (cov + cov.T) / 2.0

    state.step_size = sigma * math.exp((cs / hy.d_sigma) * (ps_norm / hy.chi_n - 1.0))
    state.mean = new_mean
    state.generation += 1
    state.pending = False
    return state


def axis_scale(state: CmaState) -> float:
    """sigma * sqrt(max eigenvalue of C); the early-stop size measure."""
    eigvals = np.linalg.eigvalsh(state.cov)
    return state.step_size * math.sqrt(float(max(eigvals.max(), 0.0)))


# --- serialization ("ESCK") -------------------------------------------------
#
# Layout: magic, version u32, then u64 header words dim, lambda,
# generation, rng_seed, pending; then f64 arrays: [step_size, sigma0],
# mean[dim], C[dim*dim] row-major, path_sigma[dim], path_c[dim],
# weights[mu]. All little-endian.

def checkpoint(state: CmaState) -> bytes:
    hy = state.hyper
    parts = [
        CHECKPOINT_MAGIC, pack_u32(CHECKPOINT_VERSION),
        pack_u64(state.dim), pack_u64(hy.lam), pack_u64(state.generation),
        pack_u64(state.rng_seed), pack_u64(1 if state.pending else 0),
        pack_f64_array(np.array([state.step_size, state.sigma0])),
        pack_f64_array(state.mean), pack_f64_array(state.cov),
        pack_f64_array(state.path_sigma), pack_f64_array(state.path_c),
        pack_f64_array(state.weights),
    ]
    return b"".join(parts)


def restore(data: bytes) -> CmaState:
    r = Reader(data)
    r.expect_magic(CHECKPOINT_MAGIC)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    dim, lam, generation, rng_seed, pending = (r.u64() for _ in range(5))
    if dim < 1 or lam < 2:
        raise CorruptCheckpoint(f"bad header dim={dim} lam={lam}")
    scalars = r.f64_array((2,))
    mean = r.f64_array((dim,))
    cov = r.f64_array((dim, dim))
    path_sigma = r.f64_array((dim,))
    path_c = r.f64_array((dim,))
    hyper, w_ref = _hyper(dim, lam)
    weights = r.f64_array((hyper.mu,))
    r.done()
    if not np.allclose(weights, w_ref, atol=1e-12):
        raise CorruptCheckpoint("stored weights disagree with (dim, lambda)")
    return CmaState(
        dim=dim, mean=mean, step_size=float(scalars[0]), cov=cov,
        path_sigma=path_sigma, path_c=path_c, weights=weights,
        generation=generation, rng_seed=rng_seed, sigma0=float(scalars[1]),
        hyper=hyper, pending=bool(pending),
    )


def dump_state(state: CmaState) -> str:
    """Human-readable diagnostic dump, one key per line."""
    lines = [
        f"dim {state.dim}",
        f"lambda {state.hyper.lam}",
        f"mu {state.hyper.mu}",
        f"generation {state.generation}",
        f"rng_seed {state.rng_seed}",
        f"step_size {state.step_size!r}",
        f"sigma0 {state.sigma0!r}",
        f"pending {int(state.pending)}",
        f"mean {' '.join(repr(v) for v in state.mean)}",
        f"path_sigma {' '.join(repr(v) for v in state.path_sigma)}",
        f"path_c {' '.join(repr(v) for v in state.path_c)}",
        f"weights {' '.join(repr(v) for v in state.weights)}",
    ]
    for i, row in enumerate(state.cov):
        lines.append(f"cov[{i}] {' '.join(repr(v) for v in row)}")
    return "\n".join(lines) + "\n"


def maximize(state: CmaState, fn, generations: int, target: float | None = None,
             tol_axis: float = 0.0):
    """Drive ask/tell against a callable; returns (best_x, best_reward, gens_used).

    Convenience loop used by the benchmark suite and tests; ``fn`` maps a
    candidate vector to a scalar reward (maximized).
    """
    best_x, best_r = None, -math.inf
    used = 0
    for _ in range(generations):
        gen = ask(state)
        rewards = [float(fn(x)) for x in gen.candidates]
        tell(state, gen.with_rewards(rewards))
        used += 1
        top = int(np.argmax(rewards))
        if rewards[top] > best_r:
            best_r = rewards[top]
            best_x = gen.candidates[top].copy()
        if target is not None and best_r >= target:
            break
        if tol_axis > 0 and axis_scale(state) < tol_axis:
            break
    return best_x, best_r, used
