import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsevit import TokenLayout, build_sparsity_pattern, export_mask, sparse_attention
from sparsevit.cost import allowed_pair_count
from sparsevit.errors import ExportTooLargeError, ShapeError
from sparsevit.numeric import AllocationMeter
from sparsevit.vit import dense_attention

# 4x4 grid + CLS with w=1, counted by brute_force_mask below before the engine existed
ORACLE_4X4_W1 = 133


def brute_force_mask(rows, cols, g, w):
    n = g + rows * cols
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i < g or j < g:
                mask[i, j] = True
            else:
                ri, ci = divmod(i - g, cols)
                rj, cj = divmod(j - g, cols)
                mask[i, j] = max(abs(ri - rj), abs(ci - cj)) <= w
    return mask


def masked_dense_oracle(q, k, v, heads, mask):
    n, d = q.shape
    dh = d // heads
    out = np.zeros((n, d))
    q, k, v = (t.astype(np.float64) for t in (q, k, v))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        s = np.where(mask, s, -np.inf)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        out[:, sl] = p @ v[:, sl]
    return out


grids = st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(0, 3), st.integers(0, 8))


def test_brute_force_oracle_value():
    assert brute_force_mask(4, 4, 1, 1).sum() == ORACLE_4X4_W1


def test_corner_patch_keys():
    pat = build_sparsity_pattern(TokenLayout(4, 4, 1), 1)
    lay = pat.layout
    corner = lay.index(0, 0)
    assert set(pat.allowed(corner)) == {0, lay.index(0, 0), lay.index(0, 1), lay.index(1, 0), lay.index(1, 1)}


def test_4x4_w1_count():
    pat = build_sparsity_pattern(TokenLayout(4, 4, 1), 1)
    assert pat.nnz == ORACLE_4X4_W1
    assert export_mask(pat).popcount == ORACLE_4X4_W1


@pytest.mark.parametrize("w", [3, 4, 20])
def test_wide_window_is_dense(w):
    assert build_sparsity_pattern(TokenLayout(4, 4, 1), w).to_dense().all()


@given(grids)
def test_pattern_matches_brute_force(params):
    rows, cols, g, w = params
    pat = build_sparsity_pattern(TokenLayout(rows, cols, g), w)
    np.testing.assert_array_equal(pat.to_dense(), brute_force_mask(rows, cols, g, w))
    for i in range(pat.total):
        assert np.all(np.diff(pat.allowed(i)) > 0)


@given(grids)
def test_pattern_symmetric_and_bounded(params):
    rows, cols, g, w = params
    pat = build_sparsity_pattern(TokenLayout(rows, cols, g), w)
    m = pat.to_dense()
    np.testing.assert_array_equal(m, m.T)
    assert m.diagonal().all()
    assert (pat.counts()[g:] <= (2 * w + 1) ** 2 + g).all()


@given(grids, st.integers(0, 8))
def test_pattern_monotone_in_window(params, extra):
    rows, cols, g, w = params
    lay = TokenLayout(rows, cols, g)
    small = build_sparsity_pattern(lay, w).to_dense()
    big = build_sparsity_pattern(lay, w + extra).to_dense()
    assert not (small & ~big).any()
    assert build_sparsity_pattern(lay, max(rows, cols) - 1).to_dense().all()


@given(grids, st.data())
def test_pattern_on_survivors(params, data):
    rows, cols, g, w = params
    lay = TokenLayout(rows, cols, g)
    patches = data.draw(st.sets(st.integers(g, lay.total - 1)))
    ids = np.array(sorted(set(range(g)) | patches), dtype=np.int64)
    pat = build_sparsity_pattern(lay, w, ids)
    # survivors keep original coordinates: the reduced mask is a submatrix
    full = brute_force_mask(rows, cols, g, w)
    np.testing.assert_array_equal(pat.to_dense(), full[np.ix_(ids, ids)])


def test_survivor_ids_validated():
    lay = TokenLayout(3, 3, 1)
    with pytest.raises(ValueError):
        build_sparsity_pattern(lay, 1, np.array([1, 2]))
    with pytest.raises(ValueError):
        build_sparsity_pattern(lay, 1, np.array([0, 3, 2]))
    with pytest.raises(ValueError):
        build_sparsity_pattern(lay, -1)


def test_w0_rows_are_self_plus_globals():
    for g in (1, 2):
        pat = build_sparsity_pattern(TokenLayout(5, 3, g), 0)
        assert (pat.counts()[g:] == 1 + g).all()


def test_export_mask_shape_and_cap():
    pat = build_sparsity_pattern(TokenLayout(6, 6, 1), 1)
    mx = export_mask(pat).matrix
    assert mx.diagonal().all() and mx[0].all() and mx[:, 0].all()
    pixels = export_mask(pat).to_pgm_pixels()
    assert set(np.unique(pixels)) <= {0, 255}
    with pytest.raises(ExportTooLargeError):
        export_mask(pat, cap=36)


def _qkv(rng, n, d):
    return [rng.standard_normal((n, d)).astype(np.float32) for _ in range(3)]


def test_sparse_equals_masked_oracle_17_tokens(rng):
    lay = TokenLayout(4, 4, 1)
    pat = build_sparsity_pattern(lay, 1)
    q, k, v = _qkv(rng, 17, 16)
    out, _ = sparse_attention(q, k, v, 4, pat)
    np.testing.assert_allclose(out, masked_dense_oracle(q, k, v, 4, brute_force_mask(4, 4, 1, 1)), atol=1e-5)


def test_sparse_dense_window_matches_dense(rng):
    pat = build_sparsity_pattern(TokenLayout(5, 5, 1), 8)
    q, k, v = _qkv(rng, 26, 16)
    sparse, _ = sparse_attention(q, k, v, 2, pat)
    dense, _ = dense_attention(q, k, v, 2)
    np.testing.assert_allclose(sparse, dense, atol=1e-6)


def test_sparse_single_token(rng):
    pat = build_sparsity_pattern(TokenLayout(1, 1, 1), 0)
    pat_only_cls = type(pat)(pat.layout, 0, np.array([0]), np.array([0, 1]), np.array([0]))
    q, k, v = _qkv(rng, 1, 8)
    out, _ = sparse_attention(q, k, v, 2, pat_only_cls)
    np.testing.assert_allclose(out, v, atol=1e-7)


@given(grids, st.integers(1, 3), st.integers(0, 2**31))
def test_sparse_matches_masked_oracle_property(params, heads, seed):
    rows, cols, g, w = params
    lay = TokenLayout(rows, cols, g)
    pat = build_sparsity_pattern(lay, w)
    q, k, v = _qkv(np.random.default_rng(seed), lay.total, 4 * heads)
    out, _ = sparse_attention(q, k, v, heads, pat)
    np.testing.assert_allclose(out, masked_dense_oracle(q, k, v, heads, pat.to_dense()), atol=1e-5)


def test_captured_global_rows_are_probabilities(rng):
    lay = TokenLayout(3, 4, 2)
    pat = build_sparsity_pattern(lay, 1)
    q, k, v = _qkv(rng, lay.total, 8)
    _, rows = sparse_attention(q, k, v, 2, pat, capture_globals=2)
    _, dense_rows = dense_attention(q, k, v, 2, capture_globals=2)
    assert rows.shape == (2, 2, lay.total)
    np.testing.assert_allclose(rows, dense_rows, atol=1e-6)
    with pytest.raises(ValueError):
        sparse_attention(q, k, v, 2, pat, capture_globals=3)


def test_sparse_shape_errors(rng):
    pat = build_sparsity_pattern(TokenLayout(2, 2, 1), 1)
    q, k, v = _qkv(rng, 5, 8)
    with pytest.raises(ShapeError):
        sparse_attention(q[:4], k[:4], v[:4], 2, pat)
    with pytest.raises(ShapeError):
        sparse_attention(q, k, v, 3, pat)


def test_sparse_workspace_has_no_square_term(rng):
    # workspace is bounded by heads * N * max|allowed| floats, far below N^2
    lay = TokenLayout(24, 24, 1)
    pat = build_sparsity_pattern(lay, 2)
    q, k, v = _qkv(rng, lay.total, 16)
    meter = AllocationMeter()
    with meter.phase("a"):
        out, _ = sparse_attention(q, k, v, 4, pat, meter)
    n, widest = lay.total, int(pat.counts().max())
    assert meter.phase_peaks["a"] <= 4 * (n * 16 + 2 * 4 * n * widest)
    assert meter.phase_peaks["a"] < 4 * 4 * n * n
    assert pat.nnz == allowed_pair_count(lay, 2)
