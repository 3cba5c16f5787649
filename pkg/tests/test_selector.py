import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsc.errors import ContractError
from cmsc.nn import check_module, sigmoid
from cmsc.scene import FeatureMap
from cmsc.selector import (Gather, ImportanceMap, Selector, SparseFeaturePack, importance, num_selected,
                           pack_from_bytes, pack_to_bytes, scatter, scatter_rows, select, topk_indices)

LAMBDAS = (0.01, 0.05, 0.1, 0.25, 0.3, 0.5, 0.75, 0.9, 1.0)


def _std(x):
    return FeatureMap(x, "standard")


def test_zero_selector_gives_half():
    sel = Selector(4)
    sel.conv.params["weight"][:] = 0
    sel.conv.params["bias"][:] = 0
    imp = importance(_std(np.random.default_rng(0).standard_normal((5, 5, 4))), sel)
    np.testing.assert_array_equal(imp.values, 0.5)


def test_saturated_bias_gives_one():
    sel = Selector(4)
    sel.conv.params["weight"][:] = 0
    sel.conv.params["bias"][:] = 10.0
    imp = importance(_std(np.zeros((3, 3, 4))), sel)
    assert np.all(np.abs(imp.values - 1.0) < 1e-4)


def test_importance_matches_dot_product_oracle():
    rng = np.random.default_rng(1)
    sel = Selector(6, rng=rng)
    x = rng.standard_normal((4, 5, 6))
    w = sel.conv.params["weight"].reshape(6)
    b = sel.conv.params["bias"][0]
    oracle = 1 / (1 + np.exp(-(np.einsum("hwc,c->hw", x, w) + b)))
    np.testing.assert_allclose(importance(_std(x), sel).values, oracle, rtol=1e-12)


def test_importance_requires_standard_space():
    with pytest.raises(ContractError):
        importance(FeatureMap(np.zeros((2, 2, 4)), "lidar"), Selector(4))


def test_k_examples():
    assert num_selected(0.06, 32, 32) == 62
    assert num_selected(0.5, 2, 2) == 2
    assert num_selected(1.0, 7, 3) == 21
    # product exactly integral in decimal but not in binary
    assert num_selected(0.1, 10, 10) == 10


@pytest.mark.parametrize("lam", [0.0, -0.1, 1.0001, np.nan])
def test_lambda_out_of_range(lam):
    with pytest.raises(ContractError):
        num_selected(lam, 4, 4)
    with pytest.raises(ContractError):
        select(_std(np.zeros((2, 2, 1))), ImportanceMap(np.full((2, 2), 0.5)), lam)


def test_2x2_example():
    imp = ImportanceMap(np.array([[0.9, 0.1], [0.5, 0.7]]))
    _, pack = select(_std(np.ones((2, 2, 3))), imp, 0.5)
    assert pack.k == 2 and pack.indices.tolist() == [0, 3]


def test_lambda_one_keeps_everything():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 2))
    imp = ImportanceMap(rng.uniform(0.01, 0.99, (3, 4)))
    masked, pack = select(_std(x), imp, 1.0)
    np.testing.assert_allclose(masked.tensor, x * imp.values[..., None], rtol=0, atol=0)
    restored = scatter(pack, pack.features)
    np.testing.assert_array_equal(restored.tensor, masked.tensor)


def _all_grids():
    for h in range(2, 9):
        for w in range(2, 9):
            yield h, w


def test_selection_contracts_exhaustive_grids():
    rng = np.random.default_rng(3)
    for h, w in _all_grids():
        x = rng.standard_normal((h, w, 3))
        vals = rng.uniform(0.01, 0.99, (h, w))
        # quantize scores to create plenty of ties
        vals = np.round(vals * 4) / 4 * 0.98 + 0.01
        imp = ImportanceMap(vals)
        prev = None
        for lam in LAMBDAS:
            masked, pack = select(_std(x), imp, lam)
            k = int(np.ceil(round(lam * h * w, 9)))
            assert pack.k == k
            assert np.count_nonzero(np.any(masked.tensor != 0, axis=-1)) == k
            assert np.all(np.diff(pack.indices) > 0)
            # scatter o gather is the masked map on the support, zero elsewhere
            np.testing.assert_array_equal(scatter(pack, pack.features).tensor, masked.tensor)
            # tie-breaking: lowest linear index among equal scores
            flat = vals.ravel()
            thresh = np.sort(flat)[::-1][k - 1]
            above = np.nonzero(flat > thresh)[0]
            ties = np.nonzero(flat == thresh)[0][:k - above.size]
            assert set(pack.indices.tolist()) == set(above.tolist()) | set(ties.tolist())
            if prev is not None:
                assert prev <= set(pack.indices.tolist())
            prev = set(pack.indices.tolist())


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_nestedness_property(h, w, seed, l1, l2):
    lo, hi = sorted((l1, l2))
    vals = np.random.default_rng(seed).integers(1, 5, (h, w)) / 6.0
    a = topk_indices(vals.ravel(), num_selected(lo, h, w))
    b = topk_indices(vals.ravel(), num_selected(hi, h, w))
    assert set(a.tolist()) <= set(b.tolist())


def test_topk_deterministic_on_all_equal():
    assert topk_indices(np.full(9, 0.3), 4).tolist() == [0, 1, 2, 3]


def test_scatter_errors_and_zero_rows():
    pack = SparseFeaturePack(np.ones((2, 3)), [1, 3], (2, 2), 0.5)
    with pytest.raises(ContractError):
        scatter(pack, np.ones((3, 3)))
    assert not scatter(pack, np.zeros((2, 3))).tensor.any()
    with pytest.raises(ContractError):
        scatter_rows(np.ones((1, 1, 1)), np.array([[9]]), (2, 2))


def test_pack_validation():
    with pytest.raises(ContractError):
        SparseFeaturePack(np.ones((2, 1)), [3, 1], (2, 2), 0.5)
    with pytest.raises(ContractError):
        SparseFeaturePack(np.ones((2, 1)), [1, 4], (2, 2), 0.5)
    with pytest.raises(ContractError):
        SparseFeaturePack(np.ones((3, 1)), [1, 2], (2, 2), 0.5)


def test_pack_serialization_round_trip():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 6, 4))
    _, pack = select(_std(x), ImportanceMap(rng.uniform(0.1, 0.9, (6, 6))), 0.3)
    back = pack_from_bytes(pack_to_bytes(pack))
    np.testing.assert_array_equal(back.features, pack.features)
    np.testing.assert_array_equal(back.indices, pack.indices)
    assert back.shape == pack.shape and back.lam == pack.lam
    with pytest.raises(ContractError):
        pack_from_bytes(b"nonsense" + bytes(30))


def test_gather_matches_select():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 5, 5, 3))
    imp = sigmoid(rng.standard_normal((2, 5, 5)))
    rows, idx = Gather().forward((x, imp, 7))
    for n in range(2):
        _, pack = select(_std(x[n]), ImportanceMap(imp[n]), 7 / 25)
        np.testing.assert_array_equal(rows[n], pack.features)
        np.testing.assert_array_equal(idx[n], pack.indices)


def test_gather_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 4, 4, 3))
    imp = rng.uniform(0.1, 0.9, (2, 4, 4))
    g = Gather()
    rows, _ = g.forward((x, imp, 5))
    w = rng.standard_normal(rows.shape)
    gx, gi = g.backward(w)
    eps = 1e-6
    for arr, grad in ((x, gx), (imp, gi)):
        for pos in itertools.islice(np.ndindex(arr.shape), 0, None, 7):
            old = arr[pos]
            arr[pos] = old + eps
            up = np.sum(Gather().forward((x, imp, 5))[0] * w)
            arr[pos] = old - eps
            dn = np.sum(Gather().forward((x, imp, 5))[0] * w)
            arr[pos] = old
            assert grad[pos] == pytest.approx((up - dn) / (2 * eps), abs=1e-7)


def test_selector_gradcheck():
    rng = np.random.default_rng(8)
    errs = check_module(Selector(4, rng=rng), rng.standard_normal((2, 3, 3, 4)))
    assert max(errs.values()) < 1e-4
