"""Adapter SVD machinery: decomposition, layouts, candidate application."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evosvd import rng
from evosvd.errors import (
    CorruptCheckpoint,
    InvalidCandidate,
    InvalidConfig,
    InvalidMatrix,
    LayoutMismatch,
    NotDecomposed,
    ShapeError,
)
from evosvd.lowrank import (
    adapter,
    adapters_digest,
    apply_candidate,
    build_layout,
    decompose,
    delta_weight,
    jacobi_svd,
    load_adapters,
    save_adapters,
    top_count,
)

RANKS = (4, 8, 16, 32, 64)


def random_adapter(name, m, r, n, seed):
    B = rng.gaussians(rng.derive_seed(seed, 0), m * r).reshape(m, r)
    A = rng.gaussians(rng.derive_seed(seed, 1), r * n).reshape(r, n)
    return decompose(adapter(name, B, A))


def rel_frobenius(X, Y):
    denom = np.linalg.norm(Y)
    return np.linalg.norm(X - Y) / (denom if denom > 0 else 1.0)


# --- decompose --------------------------------------------------------------


def test_identity_decomposes_to_unit_sigma():
    ad = decompose(adapter("a", np.eye(2), np.eye(2)))
    assert np.allclose(ad.svd_a.sigma, [1.0, 1.0])
    assert np.allclose(ad.svd_a.U @ ad.svd_a.Vt, np.eye(2))


def test_diagonal_matrix_is_its_own_svd():
    ad = decompose(adapter("a", np.eye(2), np.diag([3.0, 1.0])))
    assert np.allclose(ad.svd_a.sigma, [3.0, 1.0])


def test_sigma_matches_jacobi_oracle():
    A = rng.gaussians(404, 32).reshape(4, 8)
    fast = decompose(adapter("a", np.eye(4), A)).svd_a
    slow = jacobi_svd(A)
    assert np.allclose(fast.sigma, slow.sigma, atol=1e-8, rtol=0)


def production_svd(M):
    """SVD through the public decompose path, M placed as a valid factor."""
    m, n = M.shape
    if m >= n:
        return decompose(adapter("t", M, np.eye(n))).svd_b
    return decompose(adapter("t", np.eye(m), M)).svd_a


@pytest.mark.parametrize("seed", range(8))
def test_jacobi_differential_on_random_shapes(seed):
    shapes = [(3, 5), (6, 2), (4, 4), (7, 3)]
    m, n = shapes[seed % len(shapes)]
    M = rng.gaussians(1000 + seed, m * n).reshape(m, n)
    fast = production_svd(M)
    slow = jacobi_svd(M)
    assert np.allclose(fast.sigma, slow.sigma, atol=1e-8, rtol=0)
    # compare reconstructions, not factor columns (degenerate subspaces)
    assert np.allclose(fast.reconstruct(), slow.reconstruct(), atol=1e-8)


def test_jacobi_reconstructs_input():
    M = rng.gaussians(77, 24).reshape(6, 4)
    f = jacobi_svd(M)
    assert rel_frobenius(f.reconstruct(), M) < 1e-10


def test_decompose_reconstruction_error_bound():
    for r in RANKS:
        ad = random_adapter("a", 64, r, 64, 50 + r)
        assert rel_frobenius(ad.svd_a.reconstruct(), ad.A) < 1e-6
        assert rel_frobenius(ad.svd_b.reconstruct(), ad.B) < 1e-6


def test_sigma_sorted_descending():
    ad = random_adapter("a", 16, 8, 16, 3)
    assert np.all(np.diff(ad.svd_a.sigma) <= 0)
    assert np.all(np.diff(ad.svd_b.sigma) <= 0)


def test_sign_convention_first_nonzero_u_entry_nonnegative():
    ad = random_adapter("a", 12, 8, 10, 4)
    for f in (ad.svd_a, ad.svd_b):
        for j in range(f.U.shape[1]):
            col = f.U[:, j]
            nz = np.flatnonzero(np.abs(col) > 1e-12)
            assert col[nz[0]] >= 0


def test_nonfinite_input_rejected():
    B = np.zeros((3, 2))
    A = np.array([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(InvalidMatrix):
        decompose(adapter("a", B, A))
    with pytest.raises(InvalidMatrix):
        jacobi_svd(A)


def test_adapter_shape_validation():
    with pytest.raises(ShapeError):
        adapter("a", np.zeros((3, 2)), np.zeros((3, 4)))


# --- build_layout -----------------------------------------------------------


def four_adapters(rank, m=64, n=64):
    return [random_adapter(f"l{i}", m, rank, n, 10 + i) for i in range(4)]


def test_layout_reference_dimension():
    layout = build_layout(four_adapters(16), 40.0)
    assert layout.dim == 4 * 2 * 7 == 56
    per_factor = {}
    for name, factor, _ in layout.entries:
        per_factor[(name, factor)] = per_factor.get((name, factor), 0) + 1
    assert set(per_factor.values()) == {7}


def test_layout_full_percent():
    ad = random_adapter("only", 16, 8, 16, 1)
    assert build_layout([ad], 100.0).dim == 16


def test_layout_top_one():
    ads = [random_adapter(f"a{i}", 8, 4, 8, i) for i in range(2)]
    layout = build_layout(ads, 25.0)
    assert layout.dim == 4
    assert all(idx == 0 for _, _, idx in layout.entries)


def test_layout_ordering():
    ads = [random_adapter(n, 8, 4, 8, i) for i, n in enumerate(["b", "a"])]
    layout = build_layout(ads, 50.0)
    assert layout.entries == (
        ("a", "A", 0), ("a", "A", 1), ("a", "B", 0), ("a", "B", 1),
        ("b", "A", 0), ("b", "A", 1), ("b", "B", 0), ("b", "B", 1),
    )


def test_layout_monotone_in_percent():
    ads = four_adapters(16)
    small = set(build_layout(ads, 30.0).entries)
    large = set(build_layout(ads, 70.0).entries)
    assert small < large


def test_top_count_minimum_one():
    assert top_count(8, 1.0) == 1
    assert top_count(8, 40.0) == 4
    assert top_count(16, 40.0) == 7


def test_layout_percent_bounds():
    ads = four_adapters(8)
    for bad in (0.0, -1.0, 100.5):
        with pytest.raises(InvalidConfig):
            build_layout(ads, bad)


def test_layout_requires_decomposed():
    raw = adapter("a", np.zeros((8, 4)), np.ones((4, 8)))
    with pytest.raises(NotDecomposed):
        build_layout([raw], 50.0)


def test_layout_rejects_duplicate_names():
    ads = [random_adapter("same", 8, 4, 8, i) for i in range(2)]
    with pytest.raises(InvalidConfig):
        build_layout(ads, 50.0)


# --- apply_candidate --------------------------------------------------------


def test_zero_candidate_is_identity():
    for r in RANKS:
        ad = random_adapter("a", 64, r, 64, 60 + r)
        layout = build_layout([ad], 40.0)
        (B2, A2), = apply_candidate([ad], layout, np.zeros(layout.dim))
        assert rel_frobenius(B2 @ A2, ad.B @ ad.A) < 1e-6


def test_rank1_perturbation_matches_outer_product_oracle():
    ad = random_adapter("a", 6, 1, 5, 8)
    layout = build_layout([ad], 100.0)  # entries: (a,A,0), (a,B,0)
    delta = 0.37
    x = np.zeros(2)
    x[0] = delta  # factor A slot
    (_, A2), = apply_candidate([ad], layout, x)
    u1 = ad.svd_a.U[:, 0]
    v1 = ad.svd_a.Vt[0, :]
    assert np.max(np.abs((A2 - ad.A) - delta * np.outer(u1, v1))) < 1e-8


def test_negative_sigma_accepted():
    B = np.eye(3)[:, :1]
    A = np.array([[2.0, 0.0]])
    ad = decompose(adapter("a", B, A))
    layout = build_layout([ad], 100.0)
    x = np.array([-3.0, 0.0])  # sigma_A 2.0 -> -1.0
    (_, A2), = apply_candidate([ad], layout, x)
    assert np.allclose(ad.svd_a.reconstruct(np.array([-1.0])), A2)


def test_apply_candidate_is_pure():
    ad = random_adapter("a", 16, 8, 16, 9)
    layout = build_layout([ad], 50.0)
    before_a = ad.A.copy()
    before_sigma = ad.svd_a.sigma.copy()
    x1 = rng.gaussians(1, layout.dim)
    x2 = rng.gaussians(2, layout.dim)
    r1 = apply_candidate([ad], layout, x1)
    _ = apply_candidate([ad], layout, x2)
    r1_again = apply_candidate([ad], layout, x1)
    assert np.array_equal(r1[0][0], r1_again[0][0])
    assert np.array_equal(r1[0][1], r1_again[0][1])
    assert np.array_equal(ad.A, before_a)
    assert np.array_equal(ad.svd_a.sigma, before_sigma)


def test_additivity_in_sigma():
    ad = random_adapter("a", 16, 8, 16, 12)
    layout = build_layout([ad], 50.0)
    x1 = rng.gaussians(3, layout.dim)
    x2 = rng.gaussians(4, layout.dim)
    (_, both), = apply_candidate([ad], layout, x1 + x2)
    sig = ad.svd_a.sigma.copy()
    count = top_count(8, 50.0)
    sig[:count] += x1[:count] + x2[:count]
    assert np.allclose(both, ad.svd_a.reconstruct(sig), atol=1e-12)


def test_dimension_mismatch():
    ad = random_adapter("a", 8, 4, 8, 5)
    layout = build_layout([ad], 50.0)
    with pytest.raises(LayoutMismatch):
        apply_candidate([ad], layout, np.zeros(layout.dim + 1))


def test_nonfinite_candidate():
    ad = random_adapter("a", 8, 4, 8, 5)
    layout = build_layout([ad], 50.0)
    x = np.zeros(layout.dim)
    x[0] = np.inf
    with pytest.raises(InvalidCandidate):
        apply_candidate([ad], layout, x)


def test_layout_adapter_set_must_match():
    ad = random_adapter("a", 8, 4, 8, 5)
    other = random_adapter("b", 8, 4, 8, 6)
    layout = build_layout([ad], 50.0)
    with pytest.raises(LayoutMismatch):
        apply_candidate([other], layout, np.zeros(layout.dim))


@given(st.integers(0, 2**32), st.sampled_from([4, 8, 16]), st.floats(10.0, 100.0))
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(seed, rank, percent):
    ad = random_adapter("h", 24, rank, 20, seed)
    layout = build_layout([ad], percent)
    (B2, A2), = apply_candidate([ad], layout, np.zeros(layout.dim))
    assert rel_frobenius(B2 @ A2, ad.B @ ad.A) < 1e-6


# --- delta_weight -----------------------------------------------------------


def test_delta_weight_zero_factor():
    assert np.array_equal(delta_weight(np.zeros((3, 2)), np.ones((2, 4))),
                          np.zeros((3, 4)))


def test_delta_weight_rank1_by_hand():
    B = np.array([[1.0], [0.0]])
    A = np.array([[2.0, 3.0]])
    assert np.array_equal(delta_weight(B, A), [[2.0, 3.0], [0.0, 0.0]])


def test_delta_weight_matches_triple_loop_oracle():
    B = rng.gaussians(21, 12).reshape(6, 2)
    A = rng.gaussians(22, 8).reshape(2, 4)
    want = np.zeros((6, 4))
    for i in range(6):
        for j in range(4):
            for k in range(2):
                want[i, j] += B[i, k] * A[k, j]
    assert np.max(np.abs(delta_weight(B, A) - want)) < 1e-10


def test_delta_weight_shape_mismatch():
    with pytest.raises(ShapeError):
        delta_weight(np.zeros((3, 2)), np.zeros((3, 4)))


# --- adapter container ------------------------------------------------------


def test_adapter_file_round_trip(tmp_path):
    ads = [random_adapter(f"l{i}.q", 16, 8, 12, 30 + i) for i in range(3)]
    path = tmp_path / "adapters.bin"
    save_adapters(path, ads)
    back = load_adapters(path)
    assert [a.name for a in back] == [a.name for a in ads]
    for a, b in zip(ads, back):
        # storage is f32, so round-trip through f32 precision
        assert np.array_equal(b.B, a.B.astype(np.float32).astype(np.float64))
        assert np.array_equal(b.A, a.A.astype(np.float32).astype(np.float64))
        assert b.decomposed


def test_adapter_file_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CorruptCheckpoint):
        load_adapters(path)


def test_adapter_file_truncation(tmp_path):
    ads = [random_adapter("x", 8, 4, 8, 2)]
    path = tmp_path / "adapters.bin"
    save_adapters(path, ads)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(CorruptCheckpoint):
        load_adapters(path)


def test_adapter_file_detects_factor_tampering(tmp_path):
    ads = [random_adapter("x", 8, 4, 8, 2)]
    path = tmp_path / "adapters.bin"
    save_adapters(path, ads)
    data = bytearray(path.read_bytes())
    # header is 12 + name 3 + dims 12 = 27 bytes; overwrite inside B
    data[40:44] = b"\x00\x00\x80\x7e"
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        load_adapters(path)


def test_digest_changes_with_content():
    a1 = [random_adapter("x", 8, 4, 8, 2)]
    a2 = [random_adapter("x", 8, 4, 8, 3)]
    assert adapters_digest(a1) == adapters_digest(a1)
    assert adapters_digest(a1) != adapters_digest(a2)
