"""Toy policy model: tokenizer, task data, quantization, forward/backward,
SFT, decoding, and the model container."""

import os

import numpy as np
import pytest

from evosvd.errors import (
    AlreadyQuantized,
    CorruptCheckpoint,
    InvalidConfig,
    SplitOverlap,
    TrainingDiverged,
)
from evosvd import rng
from evosvd.model import (
    BOS,
    EOS,
    PAD,
    VOCAB,
    Architecture,
    TaskExample,
    _backward,
    _ce,
    _forward,
    accuracy,
    addition_examples,
    adapter_targets,
    check_disjoint,
    dataset_loss,
    decode,
    effective_weights,
    encode,
    encode_batch,
    forward,
    generate,
    init_adapters,
    init_model,
    load_examples,
    load_model,
    model_digest,
    quantize_base,
    quantize_dequantize,
    save_examples,
    save_model,
    serialize_model,
    sft_train,
    split_examples,
    weight_names,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

TINY = Architecture(kind="transformer", layers=1, d_model=32, heads=2,
                    d_ff=64, max_len=16)
TINY_MLP = Architecture(kind="mlp", layers=1, d_model=32, heads=1,
                        d_ff=64, max_len=16)


# --- tokenizer --------------------------------------------------------------


def test_vocabulary():
    assert (PAD, BOS, EOS) == (0, 1, 2)
    assert VOCAB == 20
    assert encode("0") == [3]
    assert encode("9") == [12]


def test_encode_decode_round_trip():
    for text in ("12+34=046", "0", "7*8=56. ", "99-1"):
        assert decode(encode(text)) == text


def test_decode_stops_at_eos_and_skips_specials():
    ids = [BOS, *encode("42"), EOS, *encode("99")]
    assert decode(ids) == "42"
    assert decode([PAD, PAD, *encode("1")]) == "1"


def test_encode_unknown_character():
    with pytest.raises(InvalidConfig):
        encode("1+x=")


# --- task examples ----------------------------------------------------------


def test_addition_examples_properties():
    exs = addition_examples(4, 200, a_lo=10, a_hi=99, b_lo=10, b_hi=99, width=3)
    assert len(exs) == 200
    assert len({ex.id for ex in exs}) == 200
    for ex in exs:
        a, b = (int(v) for v in ex.prompt[:-1].split("+"))
        assert ex.prompt == f"{a}+{b}="
        assert ex.answer == f"{a + b:03d}"
        assert 10 <= a <= 99 and 10 <= b <= 99


def test_addition_examples_order_oracle():
    # the dataset order is the counter-based shuffle of the operand grid
    exs = addition_examples(4, 50, a_lo=0, a_hi=9, b_lo=0, b_hi=9, width=2)
    order = rng.permutation(rng.derive_seed(4, rng.TAG_DATASET), 100)
    for ex, j in zip(exs, order[:50]):
        assert ex.id == f"add-{j // 10}-{j % 10}"


def test_addition_examples_determinism():
    a = addition_examples(7, 30)
    assert a == addition_examples(7, 30)
    assert a != addition_examples(8, 30)


def test_increment_family():
    exs = addition_examples(1, 100, a_lo=1000, a_hi=8999, b_lo=1, b_hi=1, width=4)
    assert all(ex.prompt.endswith("+1=") for ex in exs)
    assert all(len(ex.answer) == 4 for ex in exs)


def test_addition_examples_validation():
    with pytest.raises(InvalidConfig):
        addition_examples(1, 0)
    with pytest.raises(InvalidConfig):
        addition_examples(1, 101, a_lo=0, a_hi=9, b_lo=0, b_hi=9, width=2)
    with pytest.raises(InvalidConfig):
        addition_examples(1, 10, a_lo=50, a_hi=99, b_lo=50, b_hi=99, width=2)
    with pytest.raises(InvalidConfig):
        addition_examples(1, 10, a_lo=9, a_hi=5)


def test_split_examples():
    exs = addition_examples(2, 100)
    sft, align = split_examples(exs, (30, 60))
    assert sft == exs[:30] and align == exs[30:90]
    check_disjoint(sft, align)
    with pytest.raises(InvalidConfig):
        split_examples(exs, (60, 50))
    with pytest.raises(InvalidConfig):
        split_examples(exs, (0, 10))


def test_split_audit_at_scale():
    exs = addition_examples(1, 8000, a_lo=1000, a_hi=8999, b_lo=1, b_hi=1, width=4)
    sft, align = split_examples(exs, (300, 1200))
    assert (len(sft), len(align)) == (300, 1200)
    check_disjoint(sft, align)


def test_check_disjoint_flags_overlap():
    exs = addition_examples(2, 10)
    with pytest.raises(SplitOverlap):
        check_disjoint(exs[:5], exs[4:])


def test_examples_file_round_trip(tmp_path):
    exs = addition_examples(3, 25)
    path = tmp_path / "train.tsv"
    save_examples(path, exs)
    back = load_examples(path)
    assert [(e.prompt, e.answer) for e in back] == [(e.prompt, e.answer) for e in exs]
    assert back[0].id == "train-00000"
    assert back[24].id == "train-00024"


def test_examples_file_errors(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("1+2=\t3\textra\n")
    with pytest.raises(InvalidConfig):
        load_examples(path)
    path.write_text("")
    with pytest.raises(InvalidConfig):
        load_examples(path)
    with pytest.raises(InvalidConfig):
        save_examples(tmp_path / "x.tsv", [TaskExample("t", "a\tb=", "1")])


# --- architecture and initialization ----------------------------------------


def test_weight_names_transformer():
    names = weight_names(Architecture())
    assert [n for n, _ in names] == sorted(n for n, _ in names)
    d = dict(names)
    assert d["embed"] == (VOCAB, 64)
    assert d["layer0.q"] == (64, 64)
    assert d["layer1.fc1"] == (128, 64)
    assert d["norm_f"] == (64,)
    assert len(d) == 3 + 2 * 8


def test_adapter_targets():
    assert adapter_targets(Architecture()) == sorted(
        f"layer{l}.{t}" for l in range(2) for t in "qkvo")
    assert adapter_targets(TINY_MLP) == ["layer0.fc1", "layer0.fc2"]


def test_architecture_validation():
    with pytest.raises(InvalidConfig):
        Architecture(kind="rnn").validate()
    with pytest.raises(InvalidConfig):
        Architecture(d_model=63, heads=7).validate()
    with pytest.raises(InvalidConfig):
        Architecture(d_model=66, heads=4).validate()
    with pytest.raises(InvalidConfig):
        Architecture(layers=0).validate()


def test_init_model_deterministic_f32_frozen():
    m1 = init_model(TINY, seed=3)
    m2 = init_model(TINY, seed=3)
    for name in m1.weights:
        w = m1.weights[name]
        assert np.array_equal(w, m2.weights[name])
        assert np.array_equal(w, w.astype(np.float32).astype(np.float64))
        assert not w.flags.writeable
        if w.ndim == 1:
            assert np.all(w == 1.0)
    assert not np.array_equal(m1.weights["embed"], init_model(TINY, seed=4).weights["embed"])


def test_init_adapters():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9, scale=0.05)
    assert [ad.name for ad in ads] == adapter_targets(TINY)
    for ad in ads:
        assert np.all(ad.B == 0.0)
        assert ad.rank == 4
        assert 0 < np.std(ad.A) < 0.1
    assert np.array_equal(ads[0].A, init_adapters(model, 4, seed=9, scale=0.05)[0].A)
    with pytest.raises(InvalidConfig):
        init_adapters(model, 33, seed=9)
    with pytest.raises(InvalidConfig):
        init_adapters(model, 0, seed=9)


# --- quantization -----------------------------------------------------------


def test_quantize_grid_and_idempotence():
    w = np.array([[0.5, -1.0, 0.25], [2.0, 0.0, -2.0]])
    for qmax in (127.0, 7.0):
        q = quantize_dequantize(w, qmax)
        assert np.array_equal(quantize_dequantize(q, qmax), q)
        scale = np.max(np.abs(w), axis=1, keepdims=True) / qmax
        assert np.all(np.abs(q - w) <= scale / 2 + 1e-15)
        levels = np.rint(q / scale)
        assert np.array_equal(levels, np.round(levels))


def test_quantize_level_count_int4():
    w = rng.gaussians(5, 400).reshape(4, 100)
    q = quantize_dequantize(w, 7.0)
    for row_q, row_w in zip(q, w):
        scale = np.max(np.abs(row_w)) / 7.0
        assert len(np.unique(np.rint(row_q / scale))) <= 15


def test_quantize_zero_row():
    w = np.array([[0.0, 0.0], [1.0, -1.0]])
    q = quantize_dequantize(w, 7.0)
    assert np.array_equal(q[0], [0.0, 0.0])


def test_quantize_base():
    model = init_model(TINY, seed=3)
    q8 = quantize_base(model, "sim-int8")
    assert q8.precision == "sim-int8"
    assert np.array_equal(q8.weights["norm_f"], model.weights["norm_f"])
    w, qw = model.weights["layer0.q"], q8.weights["layer0.q"]
    bound = np.max(np.abs(w), axis=1, keepdims=True) / 127.0 / 2.0
    assert np.all(np.abs(qw - w) <= bound + 1e-15)
    assert not np.array_equal(qw, w)
    with pytest.raises(AlreadyQuantized):
        quantize_base(q8, "sim-int4")
    with pytest.raises(InvalidConfig):
        quantize_base(model, "f32")


# --- forward ----------------------------------------------------------------


def test_zero_adapters_match_base():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9)
    overrides = {ad.name: (ad.B, ad.A) for ad in ads}
    ids = np.array([BOS, *encode("12+34=")])
    assert np.array_equal(forward(model, overrides, ids), forward(model, None, ids))


def test_effective_weights_add_deltas():
    model = init_model(TINY, seed=3)
    b = np.full((32, 2), 0.1)
    a = np.full((2, 32), 0.2)
    w = effective_weights(model, {"layer0.q": (b, a)})
    assert np.allclose(w["layer0.q"], model.weights["layer0.q"] + b @ a, atol=1e-15)
    assert np.array_equal(w["layer0.k"], model.weights["layer0.k"])


def test_forward_purity_and_batching():
    model = init_model(TINY, seed=3)
    ids = np.array([[BOS, *encode("12+34=")], [BOS, *encode("56+78=")]])
    out1 = forward(model, None, ids)
    out2 = forward(model, None, ids)
    assert np.array_equal(out1, out2)
    assert out1.shape == (2, 7, VOCAB)
    for i in range(2):
        assert np.allclose(out1[i], forward(model, None, ids[i]), atol=1e-10)


def test_forward_validation():
    model = init_model(TINY, seed=3)
    with pytest.raises(InvalidConfig):
        forward(model, None, np.zeros((2, 2, 2), dtype=np.int64))
    with pytest.raises(InvalidConfig):
        forward(model, None, np.array([1, 99]))
    with pytest.raises(InvalidConfig):
        forward(model, None, np.full(17, BOS))


def test_causality():
    # logits at position t must ignore all later tokens
    for arch in (TINY, TINY_MLP):
        model = init_model(arch, seed=3)
        a = np.array([BOS, *encode("12+34=56")])
        b = a.copy()
        b[6:] = encode("9")[0]
        la, lb = forward(model, None, a), forward(model, None, b)
        assert np.allclose(la[:6], lb[:6], atol=1e-12)
        assert not np.allclose(la[6:], lb[6:], atol=1e-3)


def test_encode_batch_layout():
    exs = [TaskExample("t", "1+2=", "03")]
    inputs, targets, mask = encode_batch(exs)
    seq = [BOS, *encode("1+2="), *encode("03"), EOS]
    assert inputs.tolist() == [seq[:-1]]
    assert targets.tolist() == [seq[1:]]
    # loss covers the answer tokens and the closing EOS, nothing earlier
    assert mask.tolist() == [[0, 0, 0, 0, 1, 1, 1]]


def test_dataset_loss_batch_size_invariance():
    model = init_model(TINY, seed=3)
    exs = addition_examples(2, 20, a_lo=1, a_hi=99, b_lo=1, b_hi=9, width=3)
    full = dataset_loss(model, None, exs, batch_size=256)
    assert dataset_loss(model, None, exs, batch_size=3) == pytest.approx(full, abs=1e-12)


# --- gradients --------------------------------------------------------------


def fd_gradients(arch, seed):
    """Central finite differences on effective weights vs the analytic pass."""
    model = init_model(arch, seed=seed)
    ads = init_adapters(model, 2, seed=7, scale=0.05)
    pairs = {ad.name: (ad.B + 0.01, ad.A) for ad in ads}
    w = {k: v.copy() for k, v in effective_weights(model, pairs).items()}
    exs = [TaskExample("a", "12+34=", "046"), TaskExample("b", "5+6=", "011")]
    inputs, targets, mask = encode_batch(exs)
    logits, trace, _ = _forward(arch, w, inputs, keep_trace=True)
    _, dlogits, _ = _ce(logits, targets, mask)
    names = adapter_targets(arch)
    grads = _backward(arch, w, dlogits, trace, set(names))

    def loss_at(wmap):
        lg, _, _ = _forward(arch, wmap, inputs)
        return _ce(lg, targets, mask, want_grad=False)[0]

    h = 1e-5
    picks = np.random.default_rng(0)
    for name in names:
        g = grads[name]
        for _ in range(6):
            i = int(picks.integers(g.shape[0]))
            j = int(picks.integers(g.shape[1]))
            wp = dict(w)
            up = w[name].copy()
            up[i, j] += h
            wp[name] = up
            wm = dict(w)
            dn = w[name].copy()
            dn[i, j] -= h
            wm[name] = dn
            fd = (loss_at(wp) - loss_at(wm)) / (2 * h)
            assert abs(fd - g[i, j]) <= 1e-4 * max(abs(fd), abs(g[i, j])) + 1e-7, \
                (name, i, j, fd, g[i, j])


def test_gradients_match_finite_differences_transformer():
    fd_gradients(TINY, seed=3)


def test_gradients_match_finite_differences_mlp():
    fd_gradients(TINY_MLP, seed=3)


# --- supervised fine-tuning -------------------------------------------------


def test_sft_zero_steps_is_identity():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9)
    exs = addition_examples(2, 32, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)
    res = sft_train(model, ads, exs, steps=0, lr=0.5, batch_size=8, seed=1)
    assert res.losses == []
    assert res.initial_loss == res.final_loss
    for before, after in zip(ads, res.adapters):
        assert np.array_equal(before.B, after.B)
        assert np.array_equal(before.A, after.A)


def test_sft_reduces_loss():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9)
    exs = addition_examples(2, 64, a_lo=100, a_hi=899, b_lo=1, b_hi=1, width=3)
    res = sft_train(model, ads, exs, steps=500, lr=0.7, batch_size=16, seed=1)
    assert len(res.losses) == 500
    assert res.final_loss < 0.5 * res.initial_loss
    for ad in res.adapters:
        assert ad.svd_b is not None and ad.svd_a is not None
        assert np.array_equal(ad.B, ad.B.astype(np.float32).astype(np.float64))


def test_sft_base_stays_frozen():
    model = init_model(TINY, seed=3)
    before = {k: v.copy() for k, v in model.weights.items()}
    ads = init_adapters(model, 4, seed=9)
    exs = addition_examples(2, 32, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)
    sft_train(model, ads, exs, steps=20, lr=0.7, batch_size=8, seed=1)
    for name, w in model.weights.items():
        assert np.array_equal(w, before[name])


def test_sft_determinism():
    model = init_model(TINY, seed=3)
    exs = addition_examples(2, 32, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)

    def run():
        ads = init_adapters(model, 4, seed=9)
        return sft_train(model, ads, exs, steps=25, lr=0.7, batch_size=8, seed=1)

    r1, r2 = run(), run()
    assert r1.losses == r2.losses
    for a, b in zip(r1.adapters, r2.adapters):
        assert np.array_equal(a.B, b.B) and np.array_equal(a.A, b.A)


def test_sft_divergence_detected():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9)
    exs = addition_examples(2, 32, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)
    # sublayer norms absorb any finite blowup, so only an overflow to
    # non-finite values can diverge; drive one deliberately
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        sft_train(model, ads, exs, steps=5, lr=1e160, batch_size=8, seed=1)


def test_sft_validation():
    model = init_model(TINY, seed=3)
    ads = init_adapters(model, 4, seed=9)
    exs = addition_examples(2, 8)
    with pytest.raises(InvalidConfig):
        sft_train(model, ads, exs, steps=-1, lr=0.5, batch_size=8, seed=1)
    with pytest.raises(InvalidConfig):
        sft_train(model, ads, exs, steps=1, lr=0.0, batch_size=8, seed=1)
    with pytest.raises(InvalidConfig):
        sft_train(model, ads, [], steps=1, lr=0.5, batch_size=8, seed=1)


# --- decoding ---------------------------------------------------------------


def greedy_oracle(model, overrides, prompts, max_new):
    """Recompute the full forward for every new token; no cached state."""
    outs = []
    for pr in prompts:
        ids = [BOS, *encode(pr)]
        for _ in range(max_new):
            logits = forward(model, overrides, np.array(ids, dtype=np.int64))
            ids.append(int(np.argmax(logits[-1])))
        outs.append(decode(ids[1 + len(pr):]))
    return outs


def test_cached_decode_matches_recompute_oracle():
    prompts = ["12+34=", "5+6=", "987+1="]
    for arch in (TINY, TINY_MLP):
        model = init_model(arch, seed=3)
        ads = init_adapters(model, 4, seed=9)
        exs = addition_examples(2, 48, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)
        tuned = sft_train(model, ads, exs, steps=40, lr=0.7, batch_size=16, seed=1)
        overrides = {ad.name: (ad.B, ad.A) for ad in tuned.adapters}
        for ov in (None, overrides):
            got = generate(model, ov, prompts, max_new=5)
            assert got == greedy_oracle(model, ov, prompts, max_new=5)


def test_generate_validation():
    model = init_model(TINY, seed=3)
    assert generate(model, None, [], 4) == []
    with pytest.raises(InvalidConfig):
        generate(model, None, ["1+2="], 0)
    with pytest.raises(InvalidConfig):
        generate(model, None, ["123456789+1="], 8)


def test_generate_golden_tokens():
    # committed completions of the untrained seed-3 model; greedy decoding
    # makes these exact as long as forward stays bit-stable
    model = init_model(TINY, seed=3)
    with open(os.path.join(FIXTURES, "generate_golden.txt"), encoding="utf-8") as f:
        rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
    prompts = [r[0] for r in rows]
    want = [r[1] if len(r) > 1 else "" for r in rows]
    assert generate(model, None, prompts, max_new=5) == want


def test_accuracy_counts_exact_matches():
    model = init_model(TINY, seed=3)
    exs = addition_examples(2, 30, a_lo=1, a_hi=99, b_lo=1, b_hi=1, width=3)
    from evosvd.fitness import normalize_answer

    acc = accuracy(model, None, exs)
    got = generate(model, None, [ex.prompt for ex in exs], max_new=4)
    want = sum(normalize_answer(g) == normalize_answer(ex.answer)
               for g, ex in zip(got, exs)) / len(exs)
    assert acc == pytest.approx(want)
    assert 0.0 <= acc <= 1.0
    with pytest.raises(InvalidConfig):
        accuracy(model, None, [])


# --- model container --------------------------------------------------------


def test_model_file_round_trip(tmp_path):
    for arch in (TINY, TINY_MLP):
        model = init_model(arch, seed=3)
        path = tmp_path / "model.bin"
        save_model(path, model)
        back = load_model(path)
        assert back.arch == model.arch
        assert back.precision == "f32"
        for name, w in model.weights.items():
            assert np.array_equal(back.weights[name], w)
            assert not back.weights[name].flags.writeable
        assert model_digest(back) == model_digest(model)


def test_model_file_preserves_precision(tmp_path):
    model = quantize_base(init_model(TINY, seed=3), "sim-int4")
    path = tmp_path / "model.bin"
    save_model(path, model)
    assert load_model(path).precision == "sim-int4"


def test_model_file_corruption(tmp_path):
    model = init_model(TINY, seed=3)
    data = serialize_model(model)
    path = tmp_path / "model.bin"

    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        load_model(path)
    path.write_bytes(data[:4] + b"\x09\x00\x00\x00" + data[8:])
    with pytest.raises(CorruptCheckpoint):
        load_model(path)
    path.write_bytes(data[:-5])
    with pytest.raises(CorruptCheckpoint):
        load_model(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(CorruptCheckpoint):
        load_model(path)
    tampered = bytearray(data)
    tampered[8] = 7  # kind code
    path.write_bytes(bytes(tampered))
    with pytest.raises(CorruptCheckpoint):
        load_model(path)


def test_model_digest_distinguishes_seeds():
    assert model_digest(init_model(TINY, seed=3)) != model_digest(init_model(TINY, seed=4))
    assert len(model_digest(init_model(TINY, seed=3))) == 32
