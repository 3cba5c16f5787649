from dataclasses import replace

import numpy as np
import pytest

from cmsc.errors import ContractError
from cmsc.losses import mse_loss
from cmsc.system import (METHODS, CMSCModel, collab_backward, collab_forward, detection_loss, make_batch,
                         reconstruction_loss)
from conftest import tiny_config


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    cfg = replace(cfg, scene=replace(cfg.scene, height=6, width=6, channels=2, num_cavs=1,
                                     min_objects=1, max_objects=2, min_size=1.5, max_size=2.5,
                                     cav_min_distance=1.5, cav_max_distance=2.5, sensing_range=4.0),
                  model=replace(cfg.model, se_reduction=2, convnext_kernel=3))
    model = CMSCModel(cfg)
    model.eval()
    batch = make_batch([3, 4], "camera", [["lidar"], ["camera"]], cfg)
    return cfg, model, batch


def _loss(model, batch, method, target=None, grads=False):
    """Detection + reconstruction loss; the reconstruction target is held fixed (detached)."""
    rng = np.random.default_rng(11)
    raw, state = collab_forward(model, batch, method, 0.3, "rayleigh", np.array([8.0, 15.0]), rng)
    cls, reg, g_cls, g_reg = detection_loss(raw, batch)
    if target is None:
        target = state.rows.copy()
    diff = state.decoded - target
    rec = float(np.sum(diff * diff) / diff[0].size / batch.n)
    if grads:
        _, g_rec = reconstruction_loss(state, batch.n)
        model.zero_grad()
        collab_backward(model, batch, state, g_cls + 2.0 * g_reg, g_rec)
    return cls + 2.0 * reg + rec, target


@pytest.mark.parametrize("method", ["cmsc", "baseline_jscc"])
def test_collab_pass_gradcheck(setup, method):
    _, model, batch = setup
    _, target = _loss(model, batch, method, grads=True)
    analytic = model.grads()
    rng = np.random.default_rng(0)
    prefixes = ("converter.", "selector.", "encoder.", "decoder.") if method == "cmsc" else ("baseline.",)
    checked = 0
    params = {}
    for prefix, mod in model.modules().items():
        params.update(dict(mod.named_parameters(f"{prefix}.")))
    for name, p in params.items():
        if not name.startswith(prefixes):
            continue
        for flat in rng.choice(p.size, size=min(3, p.size), replace=False):
            pos = np.unravel_index(flat, p.shape)
            old = p[pos]
            p[pos] = old + 1e-6
            up = _loss(model, batch, method, target)[0]
            p[pos] = old - 1e-6
            dn = _loss(model, batch, method, target)[0]
            p[pos] = old
            num = (up - dn) / 2e-6
            assert analytic[name][pos] == pytest.approx(num, rel=1e-3, abs=1e-7), name
            checked += 1
    assert checked > 20


def test_every_method_runs(setup):
    _, model, batch = setup
    for method in METHODS:
        raw, _ = collab_forward(model, batch, method, 0.3, "awgn", 20.0, np.random.default_rng(0))
        assert raw.shape == (2, 6, 6, 5) and np.isfinite(raw).all()
    with pytest.raises(ContractError):
        collab_forward(model, batch, "analog", 0.3, "awgn", 20.0, np.random.default_rng(0))


def test_upper_bound_ignores_channel(setup):
    _, model, batch = setup
    a, _ = collab_forward(model, batch, "upper_bound", 0.3, "awgn", 0.0, np.random.default_rng(0))
    b, _ = collab_forward(model, batch, "upper_bound", 0.3, "rayleigh", 20.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_recon_needs_jscc_pass(setup):
    _, model, batch = setup
    _, state = collab_forward(model, batch, "upper_bound", 0.3, "awgn", 0.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        reconstruction_loss(state, batch.n)


def test_recon_is_sum_of_per_pack_mse(setup):
    _, model, batch = setup
    _, state = collab_forward(model, batch, "cmsc", 0.3, "awgn", 10.0, np.random.default_rng(1))
    value, _ = reconstruction_loss(state, batch.n)
    per = [mse_loss(state.decoded[i], state.rows[i])[0] for i in range(state.decoded.shape[0])]
    assert value == pytest.approx(sum(per) / batch.n, rel=1e-12)


def test_make_batch_rejects_unknown_modality(setup):
    cfg = setup[0]
    with pytest.raises(ContractError):
        make_batch([1], "radar", ["lidar"], cfg)
    with pytest.raises(ContractError):
        make_batch([1], "lidar", ["sonar"], cfg)
