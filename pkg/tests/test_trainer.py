import numpy as np
import pytest

from cmsc.errors import ContractError
from cmsc.io import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, state_dict
from cmsc.nn import ParamStore
from cmsc.system import CMSCModel, make_batch
from cmsc.trainer import (LOG_COLUMNS, Trainer, config_digest, load_model, make_stage1_batch,
                          read_loss_log, save_model, stage1_step, stage2_step, train_or_load)
from conftest import tiny_config


def _snapshot(model):
    return {k: arr.copy() for k, (_, arr) in state_dict(model.modules()).items()}


def _changed(before, model):
    after = _snapshot(model)
    return {k for k in before if not np.array_equal(before[k], after[k])}


# which parameter groups each stage may touch
STAGE_SCOPE = {
    "pretrain": ("head.",),
    "stage1": ("converter.",),
    "stage2": ("selector.", "encoder.", "decoder."),
    "stage3": ("converter.", "head.", "selector.", "encoder.", "decoder."),
    "baseline": ("baseline.",),
    "upper": ("upper.",),
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("run")
    trainer = Trainer(cfg, log_path=out / "loss.csv", checkpoint_dir=out)
    changes = {}
    for stage in ("pretrain", "stage1", "stage2", "stage3", "baseline", "upper"):
        before = _snapshot(trainer.model)
        getattr(trainer, stage)()
        changes[stage] = _changed(before, trainer.model)
    return trainer, changes, out


@pytest.mark.parametrize("stage", list(STAGE_SCOPE))
def test_frozen_parameters_bit_identical(trained, stage):
    _, changes, _ = trained
    allowed = STAGE_SCOPE[stage]
    # only trainable parameters may move (buffers such as BN running stats aside)
    moved = {k for k in changes[stage] if not k.endswith(("running_mean", "running_var"))}
    assert moved, f"{stage} updated nothing"
    assert all(k.startswith(allowed) for k in moved), sorted(k for k in moved if not k.startswith(allowed))


def test_stage1_never_touches_lidar_head(trained):
    assert not any(k.startswith("head.") for k in trained[1]["stage1"])


def test_loss_reports_compose_exactly(trained):
    trainer = trained[0]
    assert len(trainer.reports) == 2 * 7
    for r in trainer.reports:
        assert r.total == r.weighted_sum()
    stages = [r.stage for r in trainer.reports]
    assert stages == ["pretrain"] * 2 + ["stage1"] * 2 + ["stage2"] * 2 + ["stage3"] * 2 + \
        ["baseline2"] * 2 + ["baseline3"] * 2 + ["upper"] * 2


def test_loss_log_matches_reports(trained):
    trainer, _, out = trained
    rows = read_loss_log(out / "loss.csv")
    assert list(rows[0]) == list(LOG_COLUMNS)
    assert [r["total"] for r in rows] == [rep.total for rep in trainer.reports]
    assert rows[2]["align"] is not None and rows[0]["align"] is None
    for stage in ("pretrain", "stage1", "stage2", "stage3", "baseline2", "baseline3", "upper"):
        assert (out / f"{stage}.ckpt").is_file()


def test_upper_heads_start_from_tuned_heads(tiny_cfg):
    trainer = Trainer(tiny_config(upper_steps=0))
    trainer.upper()
    for m in ("lidar", "camera"):
        a = dict(trainer.model.heads[m].named_parameters())
        b = dict(trainer.model.upper_heads[m].named_parameters())
        assert all(np.array_equal(a[k], b[k]) and a[k] is not b[k] for k in a)


def test_stage1_rejects_mixed_batch(tiny_cfg):
    model = CMSCModel(tiny_cfg)
    batch = make_stage1_batch([1, 2], "camera", [0, 1], tiny_cfg)
    batch.modalities[1] = "lidar"
    with pytest.raises(ContractError):
        stage1_step(batch, model, ParamStore.from_modules(model.modules()), tiny_cfg)


def test_stage2_requires_frozen_converters(tiny_cfg):
    model = CMSCModel(tiny_cfg)
    store = ParamStore.from_modules(model.modules())
    store.set_frozen(None, False)
    batch = make_batch([1, 2], "lidar", ["camera", "lidar"], tiny_cfg)
    with pytest.raises(ContractError):
        stage2_step(batch, model, store, tiny_cfg, 0.1, np.full(4, 10.0), np.random.default_rng(0))


def test_training_is_deterministic(tiny_cfg):
    a = Trainer(tiny_cfg)
    a.pretrain()
    b = Trainer(tiny_cfg)
    b.pretrain()
    assert [r.total for r in a.reports] == [r.total for r in b.reports]


def test_config_digest_tracks_training_fields(tiny_cfg):
    from dataclasses import replace

    assert config_digest(tiny_cfg) == config_digest(tiny_config())
    assert config_digest(tiny_cfg) != config_digest(replace(tiny_cfg, train=replace(tiny_cfg.train, seed=1)))


def test_save_load_model_round_trip(trained, tmp_path):
    trainer = trained[0]
    save_model(tmp_path / "m.ckpt", trainer)
    model, cfg, meta = load_model(tmp_path / "m.ckpt")
    assert cfg == trainer.cfg and meta["digest"] == config_digest(trainer.cfg)
    before = _snapshot(trainer.model)
    after = _snapshot(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_train_or_load_reuses_cache(tmp_path):
    cfg = tiny_config(pretrain_steps=1, stage1_steps=1, stage2_steps=1, stage3_steps=1, upper_steps=1)
    m1, meta1, run_dir = train_or_load(cfg, tmp_path)
    stamp = (run_dir / "final.ckpt").stat().st_mtime_ns
    m2, meta2, _ = train_or_load(cfg, tmp_path)
    assert (run_dir / "final.ckpt").stat().st_mtime_ns == stamp
    assert meta1 == meta2 and set(meta1["timings"]) >= {"pretrain", "stage1", "stage2", "stage3", "upper"}


def test_checkpoint_format(tmp_path, tiny_cfg):
    model = CMSCModel(tiny_cfg)
    data = checkpoint_bytes(model.modules(), {"k": 1})
    meta, entries = parse_checkpoint(data)
    assert meta == {"k": 1} and set(entries) == set(state_dict(model.modules()))
    with pytest.raises(ContractError):
        parse_checkpoint(data[:-3])
    with pytest.raises(ContractError):
        parse_checkpoint(data + b"\0")
    with pytest.raises(ContractError):
        parse_checkpoint(b"NOTACKPT" + data[8:])
    save_checkpoint(tmp_path / "c.ckpt", model.modules())
    other = CMSCModel(tiny_cfg)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "missing.ckpt", other.modules())
    load_checkpoint(tmp_path / "c.ckpt", other.modules())
