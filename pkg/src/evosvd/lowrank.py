"""Low-rank adapters: SVD decomposition, singular-value perturbation,
and weight reconstruction.

An adapter is the factor pair (B, A) of an additive update delta_W = B A
with B (m x r) and A (r x n). Both factors are decomposed separately by
thin SVD and the optimizer perturbs only the top slice of each factor's
singular values; everything else (U, Vt) stays frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .binio import Reader, pack_f32_array, pack_str, pack_u16, pack_u32
from .errors import (
    CorruptCheckpoint,
    DecompositionFailed,
    InvalidCandidate,
    InvalidConfig,
    InvalidMatrix,
    LayoutMismatch,
    NotDecomposed,
    ShapeError,
)

ADAPTER_MAGIC = b"ESSA"
ADAPTER_VERSION = 1

_SIGN_EPS = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD M = U diag(sigma) Vt with sigma sorted descending."""

    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    def reconstruct(self, sigma: np.ndarray | None = None) -> np.ndarray:
        s = self.sigma if sigma is None else sigma
        return (self.U * s) @ self.Vt


@dataclass(frozen=True)
class LowRankAdapter:
    """One adapter's factor pair plus (optionally) its frozen SVD factors."""

    name: str
    B: np.ndarray  # (m, r)
    A: np.ndarray  # (r, n)
    rank: int
    svd_a: SvdFactors | None = None
    svd_b: SvdFactors | None = None

    def __post_init__(self):
        m, rb = self.B.shape
        ra, n = self.A.shape
        if rb != self.rank or ra != self.rank:
            raise ShapeError(f"{self.name}: factor ranks {rb}/{ra} != {self.rank}")
        if self.rank > min(m, n):
            raise InvalidConfig(f"{self.name}: rank {self.rank} > min({m}, {n})")

    @property
    def decomposed(self) -> bool:
        return self.svd_a is not None and self.svd_b is not None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])


def adapter(name: str, B: np.ndarray, A: np.ndarray) -> LowRankAdapter:
    """Build an (undecomposed) adapter, inferring rank from the factor shapes."""
    B = _frozen(B)
    A = _frozen(A)
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ShapeError(f"{name}: incompatible factors {B.shape} x {A.shape}")
    return LowRankAdapter(name=name, B=B, A=A, rank=B.shape[1])


def _canonical_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # First element of each U column with |u| > eps is made non-negative.
    U = U.copy()
    Vt = Vt.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        nz = np.flatnonzero(np.abs(col) > _SIGN_EPS)
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
            Vt[j, :] = -Vt[j, :]
    return U, Vt


def _thin_svd(M: np.ndarray) -> SvdFactors:
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise DecompositionFailed(str(e)) from e
    U, Vt = _canonical_signs(U, Vt)
    return SvdFactors(U=_frozen(U), sigma=_frozen(s), Vt=_frozen(Vt))


def decompose(ad: LowRankAdapter) -> LowRankAdapter:
    """Populate svd_a/svd_b by thin SVD of each factor separately."""
    for tag, M in (("B", ad.B), ("A", ad.A)):
        if not np.all(np.isfinite(M)):
            raise InvalidMatrix(f"{ad.name}.{tag}: non-finite entries")
    return LowRankAdapter(
        name=ad.name, B=ad.B, A=ad.A, rank=ad.rank,
        svd_a=_thin_svd(ad.A), svd_b=_thin_svd(ad.B),
    )


def jacobi_svd(M: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> SvdFactors:
    """One-sided Jacobi SVD; the slow in-repo reference for differential tests.

    Ties among equal singular values are broken by original column index.
    Columns with zero singular value get a zero U column.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"need a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidMatrix("non-finite entries")
    transposed = M.shape[0] < M.shape[1]
    G = (M.T if transposed else M).copy()  # rows >= cols
    a, b = G.shape
    V = np.eye(b)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(b - 1):
            for q in range(p + 1, b):
                gp, gq = G[:, p], G[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                G[:, p], G[:, q] = c * gp - s * gq, s * gp + c * gq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise DecompositionFailed(f"no convergence in {max_sweeps} sweeps")
    sigma = np.linalg.norm(G, axis=0)
    order = sorted(range(b), key=lambda j: (-sigma[j], j))
    sigma = sigma[order]
    G = G[:, order]
    V = V[:, order]
    U = np.where(sigma > 0, G / np.where(sigma > 0, sigma, 1.0), 0.0)
    if transposed:
        U, V = V, U
    U, Vt = _canonical_signs(U, V.T)
    return SvdFactors(U=_frozen(U), sigma=_frozen(sigma), Vt=_frozen(Vt))


@dataclass(frozen=True)
class PerturbationLayout:
    """Flattening map from a candidate vector to per-adapter sigma slots.

    Entries are ordered adapter-name lexicographic, factor A before B,
    singular index ascending; only the top ceil(p/100 * r) indices of each
    factor appear.
    """

    entries: tuple[tuple[str, str, int], ...]
    dim: int
    top_percent: float


def top_count(rank: int, p: float) -> int:
    return math.ceil(p / 100.0 * rank)


def build_layout(adapters: Sequence[LowRankAdapter], p: float) -> PerturbationLayout:
    """Layout over the top p% singular values of every factor."""
    if not (0.0 < p <= 100.0):
        raise InvalidConfig(f"top percent must be in (0, 100], got {p}")
    names = [ad.name for ad in adapters]
    if len(set(names)) != len(names):
        raise InvalidConfig("duplicate adapter names")
    entries = []
    for ad in sorted(adapters, key=lambda a: a.name):
        if not ad.decomposed:
            raise NotDecomposed(f"{ad.name} has no SVD factors")
        count = top_count(ad.rank, p)
        for factor in ("A", "B"):
            entries.extend((ad.name, factor, i) for i in range(count))
    return PerturbationLayout(entries=tuple(entries), dim=len(entries), top_percent=p)


def apply_candidate(
    adapters: Sequence[LowRankAdapter],
    layout: PerturbationLayout,
    x: np.ndarray,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reconstruct (B', A') per adapter with additive deltas on top sigmas.

    Pure: stored adapter state is never mutated. Output order matches the
    input adapter order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layout.dim,):
        raise LayoutMismatch(f"candidate shape {x.shape} != ({layout.dim},)")
    if not np.all(np.isfinite(x)):
        raise InvalidCandidate("non-finite candidate entries")
    by_name = {ad.name: ad for ad in adapters}
    layout_names = {name for name, _, _ in layout.entries}
    if layout_names != set(by_name):
        raise LayoutMismatch("layout adapters do not match the given adapters")
    deltas: dict[tuple[str, str], dict[int, float]] = {}
    for slot, (name, factor, idx) in enumerate(layout.entries):
        deltas.setdefault((name, factor), {})[idx] = x[slot]
    out = []
    for ad in adapters:
        if not ad.decomposed:
            raise NotDecomposed(f"{ad.name} has no SVD factors")
        pair = []
        for factor, svd in (("B", ad.svd_b), ("A", ad.svd_a)):
            sigma = svd.sigma.copy()
            for idx, d in deltas.get((ad.name, factor), {}).items():
                if idx >= sigma.shape[0]:
                    raise LayoutMismatch(f"{ad.name}.{factor}: index {idx} out of range")
                sigma[idx] += d
            pair.append(svd.reconstruct(sigma))
        out.append((pair[0], pair[1]))
    return out


def delta_weight(Bp: np.ndarray, Ap: np.ndarray) -> np.ndarray:
    """The weight update B' A' (caller adds it onto the frozen base weight)."""
    Bp = np.asarray(Bp, dtype=np.float64)
    Ap = np.asarray(Ap, dtype=np.float64)
    if Bp.ndim != 2 or Ap.ndim != 2 or Bp.shape[1] != Ap.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {Bp.shape} x {Ap.shape}")
    return Bp @ Ap


# --- adapter checkpoint container ("ESSA") ----------------------------------

def save_adapters(path, adapters: Iterable[LowRankAdapter]) -> None:
    """Write the flat binary adapter container (f32, little-endian)."""
    adapters = list(adapters)
    parts = [ADAPTER_MAGIC, pack_u32(ADAPTER_VERSION), pack_u32(len(adapters))]
    for ad in adapters:
        if not ad.decomposed:
            raise NotDecomposed(f"{ad.name} has no SVD factors")
        m, n = ad.shape
        parts.append(pack_str(ad.name))
        parts.extend(pack_u32(v) for v in (m, ad.rank, n))
        for arr in (ad.B, ad.A,
                    ad.svd_a.U, ad.svd_a.sigma, ad.svd_a.Vt,
                    ad.svd_b.U, ad.svd_b.sigma, ad.svd_b.Vt):
            parts.append(pack_f32_array(arr))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_adapters(path) -> list[LowRankAdapter]:
    """Read the adapter container and re-derive SVD factors in f64.

    The stored factors are validated loosely against a fresh decomposition
    of the stored (f32) factors; the fresh f64 factors are what the run
    uses, so the reconstruction invariant holds exactly on what was loaded.
    """
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(ADAPTER_MAGIC)
    version = r.u32()
    if version != ADAPTER_VERSION:
        raise CorruptCheckpoint(f"unsupported adapter format version {version}")
    count = r.u32()
    out = []
    for _ in range(count):
        name = r.string()
        m, rank, n = r.u32(), r.u32(), r.u32()
        if rank == 0 or rank > min(m, n):
            raise CorruptCheckpoint(f"{name}: bad dims m={m} r={rank} n={n}")
        B = r.f32_array((m, rank))
        A = r.f32_array((rank, n))
        r.f32_array((rank, rank))              # U_A
        stored_sigma_a = r.f32_array((rank,))
        r.f32_array((rank, n))                 # Vt_A
        r.f32_array((m, rank))                 # U_B
        stored_sigma_b = r.f32_array((rank,))
        r.f32_array((rank, rank))              # Vt_B
        ad = decompose(adapter(name, B, A))
        if (not np.allclose(ad.svd_a.sigma, stored_sigma_a, atol=1e-3, rtol=1e-3)
                or not np.allclose(ad.svd_b.sigma, stored_sigma_b, atol=1e-3, rtol=1e-3)):
            raise CorruptCheckpoint(f"{name}: stored factors disagree with B/A")
        out.append(ad)
    r.done()
    return out


def adapters_digest(adapters: Sequence[LowRankAdapter]) -> bytes:
    """SHA-256 over the canonical (f32) encoding of the adapters."""
    import hashlib

    h = hashlib.sha256()
    for ad in sorted(adapters, key=lambda a: a.name):
        h.update(ad.name.encode())
        h.update(pack_f32_array(ad.B))
        h.update(pack_f32_array(ad.A))
    return h.digest()
