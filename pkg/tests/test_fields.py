"""Parameter store, grids, MLP heads, and the slow/fast weight machinery."""

from __future__ import annotations

import numpy as np
import pytest

import liftfield.autodiff as ad
from liftfield.fields import (
    COLOR_GRID,
    DENSITY_GRID,
    INSTANCE_FAST,
    INSTANCE_SLOW,
    SEMANTIC_MLP,
    SLICE_ORDER,
    FieldConfig,
    FieldModel,
    ema_update,
    freq_encode,
    resize_model,
    upsample_grid,
)

from .conftest import micro_field_config


def test_store_views_alias_flat_data(micro_model):
    store = micro_model.store
    grid = store.view(DENSITY_GRID, "values")
    grid[0, 0, 0] = 7.0
    lo, _ = store.slice_range(DENSITY_GRID)
    assert store.data[lo] == 7.0


def test_slice_order_and_sizes(micro_model):
    store = micro_model.store
    assert store.slice_names == SLICE_ORDER
    total = sum(store.slice_values(s).size for s in SLICE_ORDER)
    assert total == store.size == store.data.size


def test_trainable_mask_excludes_slow(micro_model):
    store = micro_model.store
    mask = store.trainable_mask()
    lo, hi = store.slice_range(INSTANCE_SLOW)
    assert not mask[lo:hi].any()
    assert mask[:lo].all() and mask[hi:].all()
    assert INSTANCE_SLOW not in store.trainable_slices()


def test_slow_starts_as_a_copy_of_fast(micro_model):
    store = micro_model.store
    np.testing.assert_array_equal(store.slice_values(INSTANCE_FAST), store.slice_values(INSTANCE_SLOW))


def test_copy_slice_and_slice_of_index(micro_model):
    store = micro_model.store
    store.slice_values(INSTANCE_FAST)[:] = 3.25
    store.copy_slice(INSTANCE_FAST, INSTANCE_SLOW)
    assert (store.slice_values(INSTANCE_SLOW) == 3.25).all()
    lo, _ = store.slice_range(SEMANTIC_MLP)
    assert store.slice_of_index(lo) == SEMANTIC_MLP
    assert store.slice_of_index(0) == SLICE_ORDER[0]


def test_ema_update_hand_case(micro_model):
    store = micro_model.store
    store.slice_values(INSTANCE_FAST)[:] = 1.0
    store.slice_values(INSTANCE_SLOW)[:] = 0.0
    ema_update(store, momentum=0.9)
    np.testing.assert_allclose(store.slice_values(INSTANCE_SLOW), 0.1)
    np.testing.assert_allclose(store.slice_values(INSTANCE_FAST), 1.0)


def test_ema_converges_to_fast(micro_model):
    store = micro_model.store
    store.slice_values(INSTANCE_FAST)[:] = 2.0
    store.slice_values(INSTANCE_SLOW)[:] = 0.0
    for _ in range(200):
        ema_update(store, momentum=0.9)
    np.testing.assert_allclose(store.slice_values(INSTANCE_SLOW), 2.0, atol=1e-8)


def test_freq_encode_order_zero_is_identity():
    d = np.array([[0.1, -0.2, 0.9]])
    np.testing.assert_array_equal(freq_encode(d, 0), d)


def test_freq_encode_hand_values():
    d = np.array([[0.5, 0.0, 1.0]])
    enc = freq_encode(d, 2)
    assert enc.shape == (1, 3 + 6 * 2)
    np.testing.assert_allclose(enc[0, :3], [0.5, 0.0, 1.0])
    # sin(pi * d), sin(2 pi * d), cos(pi * d), cos(2 pi * d)
    np.testing.assert_allclose(enc[0, 3:6], np.sin(np.pi * d[0]), atol=1e-15)
    np.testing.assert_allclose(enc[0, 6:9], np.sin(2 * np.pi * d[0]), atol=1e-15)
    np.testing.assert_allclose(enc[0, 9:12], np.cos(np.pi * d[0]), atol=1e-15)
    np.testing.assert_allclose(enc[0, 12:15], np.cos(2 * np.pi * d[0]), atol=1e-15)


def test_create_is_deterministic():
    cfg = micro_field_config()
    a = FieldModel.create(cfg, seed=9)
    b = FieldModel.create(cfg, seed=9)
    np.testing.assert_array_equal(a.store.data, b.store.data)
    c = FieldModel.create(cfg, seed=10)
    assert not np.array_equal(a.store.data, c.store.data)


def test_density_is_nonnegative_and_zero_outside_cube(micro_model):
    pts = np.array([[0.0, 0.0, 0.0], [0.5, -0.5, 0.2], [1.5, 0.0, 0.0], [0.0, 0.0, -1.01]])
    sigma = micro_model.eval_density(pts)
    assert (sigma >= 0.0).all()
    assert sigma[2] == 0.0 and sigma[3] == 0.0
    assert sigma[0] > 0.0


def test_color_output_lives_in_unit_interval(micro_model):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(20, 3))
    dirs = rng.normal(size=(20, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rgb = micro_model.eval_color(pts, dirs)
    assert rgb.shape == (20, 3)
    assert (rgb > 0.0).all() and (rgb < 1.0).all()


def test_semantic_probs_sum_to_one(micro_model):
    pts = np.random.default_rng(1).uniform(-1, 1, size=(9, 3))
    leaves = micro_model.leaves(frozenset())
    probs = micro_model.semantic_probs_at(leaves, pts).value
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-12)


def test_zero_final_layer_collapses_embeddings(micro_model):
    """With an all-zero output layer every point must embed to the origin."""
    store = micro_model.store
    names = [n for n, _ in store.params_in(INSTANCE_FAST)]
    last = sorted(n for n in names if n.endswith("w1"))[-1]
    store.view(INSTANCE_FAST, last)[...] = 0.0
    pts = np.random.default_rng(2).uniform(-1, 1, size=(8, 3))
    leaves = micro_model.leaves(frozenset())
    emb = micro_model.instance_at(leaves, pts, "fast").value
    np.testing.assert_array_equal(emb, np.zeros_like(emb))


def test_fresh_embeddings_form_a_tight_but_nondegenerate_clump(micro_model):
    pts = np.random.default_rng(3).uniform(-1, 1, size=(32, 3))
    leaves = micro_model.leaves(frozenset())
    emb = micro_model.instance_at(leaves, pts, "fast").value
    spread = emb.max(axis=0) - emb.min(axis=0)
    assert (np.abs(emb) < 0.5).all()
    assert spread.max() > 0.0  # coincident embeddings would stall training


def test_leaves_respect_grad_slices(micro_model):
    leaves = micro_model.leaves(frozenset({DENSITY_GRID}))
    for (slice_name, _), var in leaves.items():
        want = slice_name == DENSITY_GRID
        assert var.requires == want


def test_slow_leaves_never_require_grad(micro_model):
    leaves = micro_model.leaves(None)
    assert all(not v.requires for (s, _), v in leaves.items() if s == INSTANCE_SLOW)


def test_gradient_flows_from_density_to_grid(micro_model):
    leaves = micro_model.leaves(frozenset({DENSITY_GRID}))
    pts = np.random.default_rng(4).uniform(-0.9, 0.9, size=(16, 3))
    root = ad.vsum(micro_model.density_at(leaves, pts))
    grads = ad.backward(root, wanted=[leaves[(DENSITY_GRID, "values")]])
    assert np.abs(grads[leaves[(DENSITY_GRID, "values")]]).sum() > 0.0


def test_upsample_grid_identity_and_node_preservation():
    rng = np.random.default_rng(5)
    values = rng.normal(size=(4, 4, 4, 2))
    np.testing.assert_array_equal(upsample_grid(values, 4), values)
    up = upsample_grid(values, 7)  # doubling lands new nodes on old ones
    np.testing.assert_allclose(up[::2, ::2, ::2], values, atol=1e-12)


def test_upsample_grid_constant_stays_constant():
    values = np.full((3, 3, 3), 1.75)
    np.testing.assert_allclose(upsample_grid(values, 8), 1.75)


def test_resize_model_keeps_mlps_and_function_values(micro_model):
    bigger = resize_model(micro_model, density_res=5, color_res=5)
    assert bigger.cfg.density_res == 5
    for name, view in micro_model.store.params_in(INSTANCE_FAST):
        np.testing.assert_array_equal(view, bigger.store.view(INSTANCE_FAST, name))
    # Grid corners are original nodes, so density there must be unchanged.
    corner = np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]) * 0.999
    np.testing.assert_allclose(bigger.eval_density(corner), micro_model.eval_density(corner), rtol=1e-6)


def test_field_config_round_trip_and_unknown_key():
    cfg = micro_field_config()
    assert FieldConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        FieldConfig.from_dict({"embed_dim": 3, "nope": 1})
