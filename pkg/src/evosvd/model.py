"""Forward-only policy model: a tiny character-level transformer (plus an
even smaller causal MLP-mixer variant) with a frozen random base and
low-rank adapters on selected linear maps.

All math runs in float64; initial weights are truncated to their nearest
f32 values so models round-trip bitwise through the f32 container. The
supervised init stage updates adapter factors only, with hand-written
backprop and plain SGD. Alignment never calls backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import rng
from .binio import Reader, pack_f32_array, pack_str, pack_u16, pack_u32
from .errors import (
    AdapterMismatch,
    AlreadyQuantized,
    CorruptCheckpoint,
    InvalidConfig,
    SplitOverlap,
    TrainingDiverged,
)
from .lowrank import LowRankAdapter, adapter, decompose, delta_weight

MODEL_MAGIC = b"ESSM"
MODEL_VERSION = 1

# --- tokenizer --------------------------------------------------------------

PAD, BOS, EOS = 0, 1, 2
CHARS = "0123456789+-*/=. "
VOCAB = 3 + len(CHARS)
_STOI = {c: i + 3 for i, c in enumerate(CHARS)}
_ITOS = {i + 3: c for i, c in enumerate(CHARS)}


def encode(text: str) -> list[int]:
    try:
        return [_STOI[c] for c in text]
    except KeyError as e:
        raise InvalidConfig(f"character {e.args[0]!r} not in vocabulary") from None


def decode(ids: Iterable[int]) -> str:
    """Characters up to the first EOS; PAD and BOS decode to nothing."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        c = _ITOS.get(i)
        if c is not None:
            out.append(c)
    return "".join(out)


# --- task examples ----------------------------------------------------------


@dataclass(frozen=True)
class TaskExample:
    id: str
    prompt: str
    answer: str


def addition_examples(seed: int, count: int, a_lo: int = 10, a_hi: int = 99,
                      b_lo: int = 10, b_hi: int = 99,
                      width: int = 3) -> list[TaskExample]:
    """Distinct a+b= prompts in dataset order given by a seeded shuffle.

    Operand ranges set the difficulty (b_lo == b_hi gives the easy
    increment-by-constant family). Answers are zero-padded to a fixed
    width so every target has the same token length.
    """
    if a_lo < 0 or b_lo < 0 or a_hi < a_lo or b_hi < b_lo:
        raise InvalidConfig(f"bad operand ranges [{a_lo}, {a_hi}] x [{b_lo}, {b_hi}]")
    if a_hi + b_hi >= 10 ** width:
        raise InvalidConfig(f"width {width} too small for sums up to {a_hi + b_hi}")
    bspan = b_hi - b_lo + 1
    total = (a_hi - a_lo + 1) * bspan
    if not 0 < count <= total:
        raise InvalidConfig(f"count must be in [1, {total}], got {count}")
    order = rng.permutation(rng.derive_seed(seed, rng.TAG_DATASET), total)
    out = []
    for j in order[:count]:
        a, b = a_lo + j // bspan, b_lo + j % bspan
        out.append(TaskExample(id=f"add-{a}-{b}", prompt=f"{a}+{b}=",
                               answer=f"{a + b:0{width}d}"))
    return out


def split_examples(examples: Sequence[TaskExample],
                   sizes: Sequence[int]) -> list[list[TaskExample]]:
    """Consecutive disjoint slices; sizes must fit inside the dataset."""
    if any(s <= 0 for s in sizes):
        raise InvalidConfig(f"split sizes must be positive, got {list(sizes)}")
    if sum(sizes) > len(examples):
        raise InvalidConfig(
            f"splits need {sum(sizes)} examples, dataset has {len(examples)}")
    splits, at = [], 0
    for s in sizes:
        splits.append(list(examples[at:at + s]))
        at += s
    check_disjoint(*splits)
    return splits


def check_disjoint(*splits: Sequence[TaskExample]) -> None:
    seen: dict[str, int] = {}
    for si, split in enumerate(splits):
        for ex in split:
            if ex.id in seen:
                raise SplitOverlap(
                    f"example {ex.id} appears in splits {seen[ex.id]} and {si}")
            seen[ex.id] = si


def save_examples(path, examples: Iterable[TaskExample]) -> None:
    """Tab-separated prompt/answer, one example per line, UTF-8."""
    lines = []
    for ex in examples:
        for part in (ex.prompt, ex.answer):
            if "\t" in part or "\n" in part:
                raise InvalidConfig(f"{ex.id}: text contains a tab or newline")
        lines.append(f"{ex.prompt}\t{ex.answer}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)


def load_examples(path) -> list[TaskExample]:
    import os

    stem = os.path.splitext(os.path.basename(str(path)))[0]
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise InvalidConfig(f"{path}:{i + 1}: expected 2 tab-separated columns")
            out.append(TaskExample(id=f"{stem}-{i:05d}", prompt=cols[0], answer=cols[1]))
    if not out:
        raise InvalidConfig(f"{path}: no examples")
    return out


# --- architecture and base weights ------------------------------------------

TRANSFORMER, MLP = "transformer", "mlp"
KINDS = (TRANSFORMER, MLP)
PRECISIONS = ("f32", "sim-int8", "sim-int4")
_QMAX = {"sim-int8": 127.0, "sim-int4": 7.0}


@dataclass(frozen=True)
class Architecture:
    kind: str = TRANSFORMER
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    max_len: int = 24
    vocab: int = VOCAB

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown model kind {self.kind!r}")
        low = min(self.layers, self.d_model, self.heads, self.d_ff,
                  self.max_len, self.vocab)
        if low <= 0:
            raise InvalidConfig("architecture sizes must be positive")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even for sinusoidal positions")
        if self.kind == TRANSFORMER and self.d_model % self.heads:
            raise InvalidConfig(
                f"d_model {self.d_model} not divisible by heads {self.heads}")


def weight_names(arch: Architecture) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list, sorted by name."""
    d, dff, v = arch.d_model, arch.d_ff, arch.vocab
    entries: dict[str, tuple[int, ...]] = {
        "embed": (v, d), "head": (v, d), "norm_f": (d,),
    }
    for l in range(arch.layers):
        p = f"layer{l}."
        entries[p + "norm1"] = (d,)
        entries[p + "fc1"] = (dff, d)
        entries[p + "fc2"] = (d, dff)
        if arch.kind == TRANSFORMER:
            entries[p + "norm2"] = (d,)
            for t in ("q", "k", "v", "o"):
                entries[p + t] = (d, d)
    return sorted(entries.items())


def adapter_targets(arch: Architecture) -> list[str]:
    """Base weights that carry adapters: attention projections, or the
    two feedforward maps for the mixer variant."""
    kinds = ("q", "k", "v", "o") if arch.kind == TRANSFORMER else ("fc1", "fc2")
    return sorted(f"layer{l}.{t}" for l in range(arch.layers) for t in kinds)


def _init_std(arch: Architecture, name: str) -> float:
    d, dff = arch.d_model, arch.d_ff
    residual = math.sqrt(2.0 * arch.layers)
    base = name.split(".")[-1]
    if base == "embed":
        return 1.0
    if base in ("q", "k", "v", "fc1", "head"):
        return d ** -0.5
    if base == "o":
        return d ** -0.5 / residual
    if base == "fc2":
        return dff ** -0.5 / residual
    raise InvalidConfig(f"no init rule for weight {name!r}")


def _f32_exact(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float32).astype(np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PolicyModel:
    """Frozen base weights plus metadata; adapters live outside the model."""

    arch: Architecture
    weights: Mapping[str, np.ndarray]
    precision: str = "f32"


def init_model(arch: Architecture = Architecture(), seed: int = 0) -> PolicyModel:
    arch.validate()
    weights = {}
    for i, (name, shape) in enumerate(weight_names(arch)):
        if len(shape) == 1:
            wgt = np.ones(shape)
        else:
            flat = rng.gaussians(rng.derive_seed(seed, rng.TAG_MODEL_INIT, i),
                                 int(np.prod(shape)))
            wgt = (flat * _init_std(arch, name)).reshape(shape)
        weights[name] = _f32_exact(wgt)
    return PolicyModel(arch=arch, weights=weights, precision="f32")


def init_adapters(model: PolicyModel, rank: int, seed: int,
                  scale: float = 0.02) -> list[LowRankAdapter]:
    """Fresh adapters: B zero, A small gaussian, on the default targets."""
    if rank <= 0:
        raise InvalidConfig(f"rank must be positive, got {rank}")
    out = []
    for i, name in enumerate(adapter_targets(model.arch)):
        m, n = model.weights[name].shape
        if rank > min(m, n):
            raise InvalidConfig(f"{name}: rank {rank} > min({m}, {n})")
        a = rng.gaussians(rng.derive_seed(seed, rng.TAG_ADAPTER_INIT, i),
                          rank * n).reshape(rank, n) * scale
        out.append(adapter(name, _f32_exact(np.zeros((m, rank))), _f32_exact(a)))
    return out


# --- quantization -----------------------------------------------------------


def quantize_dequantize(wgt: np.ndarray, qmax: float) -> np.ndarray:
    """Per-row symmetric quantize-dequantize with round-to-nearest-even.

    Rows of zeros keep scale 1 so they stay exactly zero.
    """
    amax = np.max(np.abs(wgt), axis=1, keepdims=True)
    scale = np.where(amax > 0.0, amax / qmax, 1.0)
    q = np.clip(np.rint(wgt / scale), -qmax, qmax)
    return q * scale


def quantize_base(model: PolicyModel, precision: str) -> PolicyModel:
    """Simulated low-precision base; 1-D gains and all adapters stay f32."""
    if precision not in _QMAX:
        raise InvalidConfig(f"unknown precision {precision!r}")
    if model.precision != "f32":
        raise AlreadyQuantized(f"model is already {model.precision}")
    weights = {}
    for name, wgt in model.weights.items():
        if wgt.ndim == 2:
            out = quantize_dequantize(wgt, _QMAX[precision]).astype(np.float64)
            out.flags.writeable = False
            weights[name] = out
        else:
            weights[name] = wgt
    return PolicyModel(arch=model.arch, weights=weights, precision=precision)


# --- forward / backward -----------------------------------------------------

_EPS = 1e-6
_NEG = -1e30
_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _positions(max_len: int, d: int) -> np.ndarray:
    key = (max_len, d)
    if key not in _POS_CACHE:
        t = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(0, d, 2, dtype=np.float64)[None, :]
        ang = t / np.power(10000.0, i / d)
        pos = np.zeros((max_len, d))
        pos[:, 0::2] = np.sin(ang)
        pos[:, 1::2] = np.cos(ang)
        pos.flags.writeable = False
        _POS_CACHE[key] = pos
    return _POS_CACHE[key]


def _rms(x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _EPS)
    return x * r * g, r


def _rms_back(dy, x, g, r):
    gy = dy * g
    s = np.sum(gy * x, axis=-1, keepdims=True)
    return gy * r - x * (r ** 3) * s / x.shape[-1]


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    bn, t, d = x.shape
    return x.reshape(bn, t, h, d // h).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    bn, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(bn, t, h * dh)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def effective_weights(model: PolicyModel, overrides) -> dict[str, np.ndarray]:
    """Base weights with adapter deltas added; overrides maps name -> (B, A)."""
    w = dict(model.weights)
    for name, (bp, ap) in (overrides or {}).items():
        if name not in w:
            raise AdapterMismatch(f"no base weight named {name!r}")
        dw = delta_weight(bp, ap)
        if dw.shape != w[name].shape:
            raise AdapterMismatch(f"{name}: delta {dw.shape} != base {w[name].shape}")
        w[name] = w[name] + dw
    return w


def override_map(adapters: Sequence[LowRankAdapter], pairs) -> dict:
    return {ad.name: pair for ad, pair in zip(adapters, pairs, strict=True)}


def _forward(arch: Architecture, w, ids: np.ndarray, keep_trace: bool = False):
    """Returns (logits, trace or None, per-layer cache for decoding)."""
    bn, t = ids.shape
    if t > arch.max_len:
        raise InvalidConfig(f"sequence length {t} > max_len {arch.max_len}")
    h = w["embed"][ids] + _positions(arch.max_len, arch.d_model)[:t]
    caches, layer_traces = [], []
    if arch.kind == TRANSFORMER:
        nh = arch.heads
        scale = (arch.d_model // nh) ** -0.5
        mask = np.triu(np.full((t, t), _NEG), 1)
    counts = np.arange(1.0, t + 1.0)[None, :, None]
    for l in range(arch.layers):
        p = f"layer{l}."
        n1, r1 = _rms(h, w[p + "norm1"])
        if arch.kind == TRANSFORMER:
            q = _heads(n1 @ w[p + "q"].T, nh)
            k = _heads(n1 @ w[p + "k"].T, nh)
            v = _heads(n1 @ w[p + "v"].T, nh)
            att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
            ctx = _merge(att @ v)
            h1 = h + ctx @ w[p + "o"].T
            n2, r2 = _rms(h1, w[p + "norm2"])
            pre = n2 @ w[p + "fc1"].T
            f1 = np.maximum(pre, 0.0)
            h2 = h1 + f1 @ w[p + "fc2"].T
            caches.append((k, v))
            if keep_trace:
                layer_traces.append(dict(h=h, n1=n1, r1=r1, q=q, k=k, v=v, att=att,
                                         ctx=ctx, h1=h1, n2=n2, r2=r2, pre=pre, f1=f1))
            h = h2
        else:
            cums = np.cumsum(n1, axis=1)
            mix = cums / counts
            pre = mix @ w[p + "fc1"].T
            f1 = np.maximum(pre, 0.0)
            caches.append(cums)
            if keep_trace:
                layer_traces.append(dict(h=h, n1=n1, r1=r1, mix=mix, pre=pre, f1=f1))
            h = h + f1 @ w[p + "fc2"].T
    nf, rf = _rms(h, w["norm_f"])
    logits = nf @ w["head"].T
    trace = dict(layers=layer_traces, h_out=h, rf=rf) if keep_trace else None
    return logits, trace, caches


def forward(model: PolicyModel, overrides, ids) -> np.ndarray:
    """Token logits under optional adapter overrides; pure in its inputs."""
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InvalidConfig(f"ids must be 1-D or 2-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.arch.vocab):
        raise InvalidConfig("token id out of range")
    logits, _, _ = _forward(model.arch, effective_weights(model, overrides), ids)
    return logits[0] if squeeze else logits


def _backward(arch: Architecture, w, dlogits, trace, targets: set[str]):
    """Gradients of the scalar loss w.r.t. the effective weights in targets."""
    grads: dict[str, np.ndarray] = {}
    dnf = dlogits @ w["head"]
    dh = _rms_back(dnf, trace["h_out"], w["norm_f"], trace["rf"])
    for l in reversed(range(arch.layers)):
        p = f"layer{l}."
        tr = trace["layers"][l]
        if arch.kind == TRANSFORMER:
            df2 = dh
            if p + "fc2" in targets:
                grads[p + "fc2"] = _flat(df2).T @ _flat(tr["f1"])
            dpre = (df2 @ w[p + "fc2"]) * (tr["pre"] > 0)
            if p + "fc1" in targets:
                grads[p + "fc1"] = _flat(dpre).T @ _flat(tr["n2"])
            dn2 = dpre @ w[p + "fc1"]
            dh1 = dh + _rms_back(dn2, tr["h1"], w[p + "norm2"], tr["r2"])
            dao = dh1
            if p + "o" in targets:
                grads[p + "o"] = _flat(dao).T @ _flat(tr["ctx"])
            nh = arch.heads
            scale = (arch.d_model // nh) ** -0.5
            dctx = _heads(dao @ w[p + "o"], nh)
            att, q, k, v = tr["att"], tr["q"], tr["k"], tr["v"]
            datt = dctx @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dctx
            ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
            dq = ds @ k * scale
            dk = ds.transpose(0, 1, 3, 2) @ q * scale
            dn1 = np.zeros_like(tr["n1"])
            for tag, grad in (("q", dq), ("k", dk), ("v", dv)):
                flat_grad = _merge(grad)
                if p + tag in targets:
                    grads[p + tag] = _flat(flat_grad).T @ _flat(tr["n1"])
                dn1 += flat_grad @ w[p + tag]
            dh = dh1 + _rms_back(dn1, tr["h"], w[p + "norm1"], tr["r1"])
        else:
            df2 = dh
            if p + "fc2" in targets:
                grads[p + "fc2"] = _flat(df2).T @ _flat(tr["f1"])
            dpre = (df2 @ w[p + "fc2"]) * (tr["pre"] > 0)
            if p + "fc1" in targets:
                grads[p + "fc1"] = _flat(dpre).T @ _flat(tr["mix"])
            dmix = dpre @ w[p + "fc1"]
            t = dmix.shape[1]
            counts = np.arange(1.0, t + 1.0)[None, :, None]
            dn1 = np.flip(np.cumsum(np.flip(dmix / counts, 1), 1), 1)
            dh = dh + _rms_back(dn1, tr["h"], w[p + "norm1"], tr["r1"])
    return grads


# --- loss and supervised init ----------------------------------------------


def encode_batch(examples: Sequence[TaskExample]):
    """(inputs, targets, mask): teacher-forced next-token arrays, loss
    masked to the answer tokens plus the closing EOS."""
    seqs = [[BOS] + encode(ex.prompt) + encode(ex.answer) + [EOS] for ex in examples]
    width = max(len(s) for s in seqs) - 1
    bn = len(seqs)
    inputs = np.full((bn, width), PAD, dtype=np.int64)
    targets = np.zeros((bn, width), dtype=np.int64)
    mask = np.zeros((bn, width))
    for i, (s, ex) in enumerate(zip(seqs, examples)):
        arr = np.asarray(s, dtype=np.int64)
        inputs[i, :len(s) - 1] = arr[:-1]
        targets[i, :len(s) - 1] = arr[1:]
        mask[i, len(ex.prompt):len(s) - 1] = 1.0
    return inputs, targets, mask


def _ce(logits, targets, mask, want_grad=True):
    """Masked mean cross entropy; returns (loss, dlogits or None, count)."""
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=-1, keepdims=True)
    logp = logits - m - np.log(z)
    n = float(mask.sum())
    if n == 0:
        raise InvalidConfig("empty loss mask")
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked * mask)) / n
    if not want_grad:
        return loss, None, n
    dlogits = e / z
    bi, ti = np.nonzero(mask > 0)
    dlogits[bi, ti, targets[bi, ti]] -= 1.0
    dlogits *= mask[..., None] / n
    return loss, dlogits, n


def _chunks(seq, size):
    for at in range(0, len(seq), size):
        yield seq[at:at + size]


def dataset_loss(model: PolicyModel, overrides, examples, batch_size: int = 256) -> float:
    w = effective_weights(model, overrides)
    tot = n = 0.0
    for chunk in _chunks(list(examples), batch_size):
        inputs, targets, mask = encode_batch(chunk)
        logits, _, _ = _forward(model.arch, w, inputs)
        loss, _, cnt = _ce(logits, targets, mask, want_grad=False)
        tot += loss * cnt
        n += cnt
    return tot / n


@dataclass(frozen=True)
class SftResult:
    adapters: list[LowRankAdapter]
    losses: list[float]
    initial_loss: float
    final_loss: float


def sft_train(model: PolicyModel, adapters: Sequence[LowRankAdapter],
              examples: Sequence[TaskExample], steps: int, lr: float,
              batch_size: int, seed: int) -> SftResult:
    """Plain SGD on adapter factors only; the base never changes.

    Epoch order comes from the counter-based shuffle keyed by (seed,
    epoch); a trailing partial batch rolls into the next epoch's front.
    Gradients for both factors use the pre-update values. The returned
    adapters are decomposed and f32-exact, matching what a save/load
    round trip would produce.
    """
    if steps < 0 or lr <= 0 or batch_size <= 0:
        raise InvalidConfig("need steps >= 0, lr > 0, batch_size > 0")
    if not examples:
        raise InvalidConfig("no training examples")
    examples = list(examples)
    bs = {ad.name: ad.B.copy() for ad in adapters}
    as_ = {ad.name: ad.A.copy() for ad in adapters}

    def pairs():
        return {name: (bs[name], as_[name]) for name in bs}

    initial = dataset_loss(model, pairs(), examples, batch_size=max(batch_size, 256))
    losses = []
    order: list[int] = []
    epoch = 0
    for step in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(
                rng.derive_seed(seed, rng.TAG_SFT_SHUFFLE, epoch), len(examples)))
            epoch += 1
        batch = [examples[i] for i in order[:batch_size]]
        del order[:batch_size]
        inputs, targets, mask = encode_batch(batch)
        w = effective_weights(model, pairs())
        logits, trace, _ = _forward(model.arch, w, inputs, keep_trace=True)
        loss, dlogits, _ = _ce(logits, targets, mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"step {step}: loss is {loss}")
        grads = _backward(model.arch, w, dlogits, trace, set(bs))
        for name, g in grads.items():
            gb = g @ as_[name].T
            ga = bs[name].T @ g
            bs[name] -= lr * gb
            as_[name] -= lr * ga
        losses.append(loss)
    out = [decompose(adapter(name, _f32_exact(bs[name]), _f32_exact(as_[name])))
           for name in sorted(bs)]
    final = dataset_loss(model, {ad.name: (ad.B, ad.A) for ad in out}, examples,
                         batch_size=max(batch_size, 256))
    return SftResult(adapters=out, losses=losses, initial_loss=initial, final_loss=final)


# --- greedy decoding --------------------------------------------------------


def generate(model: PolicyModel, overrides, prompts: Sequence[str],
             max_new: int) -> list[str]:
    """Batched greedy decoding; argmax ties go to the lowest token id.

    The prompt prefix runs through the full forward once; later steps
    reuse cached per-layer state, so cost per new token is independent of
    the prefix length apart from the attention reads.
    """
    if not prompts:
        return []
    if max_new <= 0:
        raise InvalidConfig(f"max_new must be positive, got {max_new}")
    arch = model.arch
    w = effective_weights(model, overrides)
    lens = np.array([len(p) + 1 for p in prompts])
    t0 = int(lens.max())
    total = t0 + max_new
    if total > arch.max_len:
        raise InvalidConfig(f"prompt plus answer length {total} > max_len {arch.max_len}")
    bn = len(prompts)
    ids = np.full((bn, total), PAD, dtype=np.int64)
    ids[:, 0] = BOS
    for i, pr in enumerate(prompts):
        ids[i, 1:1 + len(pr)] = encode(pr)
    logits0, _, cache = _forward(arch, w, ids[:, :t0])
    rows = np.arange(bn)
    if arch.kind == TRANSFORMER:
        nh, dh = arch.heads, arch.d_model // arch.heads
        ks = [np.zeros((bn, nh, total, dh)) for _ in range(arch.layers)]
        vs = [np.zeros((bn, nh, total, dh)) for _ in range(arch.layers)]
        for l, (k, v) in enumerate(cache):
            ks[l][:, :, :t0] = k
            vs[l][:, :, :t0] = v
        state = (ks, vs)
    else:
        state = [c[rows, lens - 1] for c in cache]
    pvec = lens - 1
    ids[rows, pvec + 1] = np.argmax(logits0[rows, pvec], axis=-1)
    for _ in range(1, max_new):
        pvec = pvec + 1
        logits = _decode_step(arch, w, state, ids[rows, pvec], pvec)
        ids[rows, pvec + 1] = np.argmax(logits, axis=-1)
    return [decode(ids[i, lens[i]:lens[i] + max_new]) for i in range(bn)]


def _decode_step(arch, w, state, toks, pvec):
    bn = toks.shape[0]
    x = w["embed"][toks] + _positions(arch.max_len, arch.d_model)[pvec]
    rows = np.arange(bn)
    if arch.kind == TRANSFORMER:
        ks, vs = state
        nh, dh = arch.heads, arch.d_model // arch.heads
        scale = dh ** -0.5
        width = int(pvec.max()) + 1
        blocked = np.arange(width)[None, :] > pvec[:, None]
        for l in range(arch.layers):
            p = f"layer{l}."
            n1, _ = _rms(x, w[p + "norm1"])
            q = (n1 @ w[p + "q"].T).reshape(bn, nh, dh)
            ks[l][rows, :, pvec] = (n1 @ w[p + "k"].T).reshape(bn, nh, dh)
            vs[l][rows, :, pvec] = (n1 @ w[p + "v"].T).reshape(bn, nh, dh)
            scores = np.einsum("bhd,bhwd->bhw", q, ks[l][:, :, :width]) * scale
            att = _softmax(np.where(blocked[:, None, :], _NEG, scores))
            ctx = np.einsum("bhw,bhwd->bhd", att, vs[l][:, :, :width])
            x = x + ctx.reshape(bn, arch.d_model) @ w[p + "o"].T
            n2, _ = _rms(x, w[p + "norm2"])
            x = x + np.maximum(n2 @ w[p + "fc1"].T, 0.0) @ w[p + "fc2"].T
    else:
        for l in range(arch.layers):
            p = f"layer{l}."
            n1, _ = _rms(x, w[p + "norm1"])
            state[l] = state[l] + n1
            mix = state[l] / (pvec + 1.0)[:, None]
            x = x + np.maximum(mix @ w[p + "fc1"].T, 0.0) @ w[p + "fc2"].T
    nf, _ = _rms(x, w["norm_f"])
    return nf @ w["head"].T


def accuracy(model: PolicyModel, overrides, examples, batch_size: int = 256) -> float:
    """Exact-match rate over a full example list (whitespace-normalized)."""
    from .fitness import normalize_answer

    examples = list(examples)
    if not examples:
        raise InvalidConfig("no examples to score")
    max_new = max(len(ex.answer) for ex in examples) + 1
    hits = 0
    for chunk in _chunks(examples, batch_size):
        got = generate(model, overrides, [ex.prompt for ex in chunk], max_new)
        hits += sum(normalize_answer(g) == normalize_answer(ex.answer)
                    for g, ex in zip(got, chunk))
    return hits / len(examples)


# --- model container ("ESSM") -----------------------------------------------

_KIND_CODES = {TRANSFORMER: 0, MLP: 1}
_PRECISION_CODES = {p: i for i, p in enumerate(PRECISIONS)}


def serialize_model(model: PolicyModel) -> bytes:
    arch = model.arch
    parts = [MODEL_MAGIC, pack_u32(MODEL_VERSION),
             pack_u32(_KIND_CODES[arch.kind]),
             pack_u32(_PRECISION_CODES[model.precision]),
             pack_u32(arch.layers), pack_u32(arch.d_model), pack_u32(arch.heads),
             pack_u32(arch.d_ff), pack_u32(arch.vocab), pack_u32(arch.max_len)]
    names = sorted(model.weights)
    parts.append(pack_u32(len(names)))
    for name in names:
        wgt = model.weights[name]
        parts.append(pack_str(name))
        parts.append(pack_u16(wgt.ndim))
        parts.extend(pack_u32(s) for s in wgt.shape)
        parts.append(pack_f32_array(wgt))
    return b"".join(parts)


def save_model(path, model: PolicyModel) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(model))


def load_model(path) -> PolicyModel:
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(MODEL_MAGIC)
    version = r.u32()
    if version != MODEL_VERSION:
        raise CorruptCheckpoint(f"unsupported model format version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    precisions = {v: k for k, v in _PRECISION_CODES.items()}
    kind_code, prec_code = r.u32(), r.u32()
    if kind_code not in kinds or prec_code not in precisions:
        raise CorruptCheckpoint(f"unknown kind/precision codes {kind_code}/{prec_code}")
    arch = Architecture(kind=kinds[kind_code], layers=r.u32(), d_model=r.u32(),
                        heads=r.u32(), d_ff=r.u32(), vocab=r.u32(), max_len=r.u32())
    try:
        arch.validate()
    except InvalidConfig as e:
        raise CorruptCheckpoint(str(e)) from e
    expected = weight_names(arch)
    if r.u32() != len(expected):
        raise CorruptCheckpoint("weight count does not match the architecture")
    weights = {}
    for name, shape in expected:
        got = r.string()
        if got != name:
            raise CorruptCheckpoint(f"expected weight {name!r}, found {got!r}")
        if r.u16() != len(shape):
            raise CorruptCheckpoint(f"{name}: wrong rank")
        dims = tuple(r.u32() for _ in shape)
        if dims != shape:
            raise CorruptCheckpoint(f"{name}: shape {dims} != {shape}")
        wgt = r.f32_array(shape)
        wgt.flags.writeable = False
        weights[name] = wgt
    r.done()
    return PolicyModel(arch=arch, weights=weights, precision=precisions[prec_code])


def model_digest(model: PolicyModel) -> bytes:
    import hashlib

    return hashlib.sha256(serialize_model(model)).digest()
