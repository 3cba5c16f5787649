"""Three-stage training: converter alignment, selector/codec training over a
fading channel, then end-to-end fine-tuning.

A detection-head bootstrap on clean homogeneous scenes runs first so that the
perception term of the stage-1 loss is informative, and the Baseline-JSCC
selector/codec is trained last against the final (frozen) heads.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmsc.config import MODALITIES, Config, parse_config
from cmsc.errors import ContractError
from cmsc.io import load_checkpoint, parse_checkpoint, save_checkpoint, state_dict
from cmsc.losses import LossReport, compose, mse_loss
from cmsc.nn import ParamStore, adam_step
from cmsc.scene import ground_truth_targets, render_features, sample_scene
from cmsc.system import (Batch, CMSCModel, collab_backward, collab_forward, detection_loss,
                         homogeneous_forward, make_batch, noise_seed, reconstruction_loss)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "cls", "reg", "align", "inverse", "cycle", "recon", "total")
STAGES = ("pretrain", "stage1", "stage2", "stage3", "baseline2", "baseline3", "upper")
CMSC_CODEC = ("selector.", "encoder.", "decoder.")
BASELINE_CODEC = ("baseline.",)


@dataclass
class Stage1Batch:
    """Single-vehicle maps of one modality plus their LiDAR-rendered anchors."""

    modality: str
    maps: np.ndarray  # M_m, (N, H, W, C)
    anchor: np.ndarray  # M_s, (N, H, W, C)
    modalities: np.ndarray  # per-map modality, must all equal ``modality``
    objectness: np.ndarray
    regression: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.objectness > 0.5


def make_stage1_batch(scene_seeds, modality: str, vehicles, cfg: Config | None = None) -> Stage1Batch:
    cfg = cfg or Config()
    maps, anchors, obj, reg = [], [], [], []
    for seed, veh in zip(scene_seeds, vehicles):
        sc = sample_scene(int(seed), cfg.scene)
        ns = noise_seed(sc.seed, 1)
        maps.append(render_features(sc, modality, ns, int(veh), cfg.scene).tensor)
        anchors.append(render_features(sc, "lidar", ns, int(veh), cfg.scene).tensor)
        t = ground_truth_targets(sc)
        obj.append(t.objectness)
        reg.append(t.regression)
    n = len(maps)
    return Stage1Batch(modality, np.stack(maps), np.stack(anchors), np.array([modality] * n, dtype=object),
                       np.stack(obj), np.stack(reg))


def stage1_step(batch: Stage1Batch, model: CMSCModel, store: ParamStore, cfg: Config,
                step: int = 0) -> LossReport:
    """One converter update on a homogeneous batch of modality ``m``.

    The LiDAR head and everything else stay frozen; the perception loss
    still backpropagates through the frozen head into the converter.
    """
    if np.any(batch.modalities != batch.modality):
        msg = f"stage-1 batch must be homogeneous, got modalities {sorted(set(batch.modalities))}"
        raise ContractError(msg)
    tc = cfg.train
    pair = model.converters[batch.modality]
    head = model.heads["lidar"]
    model.zero_grad()
    n = batch.maps.shape[0]

    z = pair.to_std.forward(batch.maps)  # M_{m->s}
    back = pair.from_std.forward(np.concatenate([batch.anchor, z]))
    s2m, cyc = back[:n], back[n:]  # M_{s->m}, M_{m->s->m}
    raw = head.forward(z[None])
    cls, reg, g_cls, g_reg = detection_loss(raw, batch)
    align, g_align = mse_loss(z, batch.anchor)
    inverse, g_inv = mse_loss(s2m, batch.maps)
    cycle, g_cyc = mse_loss(cyc, batch.maps)

    g_z = head.backward(g_cls + tc.eta * g_reg)[0] + tc.alpha * g_align
    g_back = pair.from_std.backward(np.concatenate([tc.beta * g_inv, tc.gamma * g_cyc]))
    pair.to_std.backward(g_z + g_back[n:])
    adam_step(store, model.grads(), tc.lr_stage1)
    return compose({"cls": cls, "reg": reg, "align": align, "inverse": inverse, "cycle": cycle},
                   {"cls": 1.0, "reg": tc.eta, "align": tc.alpha, "inverse": tc.beta, "cycle": tc.gamma},
                   "stage1", step)


def _collab_step(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config, method: str,
                 lam: float, snrs: np.ndarray, rng: np.random.Generator, lr: float, stage: str,
                 step: int, through_converters: bool) -> LossReport:
    tc = cfg.train
    model.zero_grad()
    raw, state = collab_forward(model, batch, method, lam, tc.stage2_channel, snrs, rng)
    cls, reg, g_cls, g_reg = detection_loss(raw, batch)
    recon, g_rec = reconstruction_loss(state, batch.n)
    collab_backward(model, batch, state, g_cls + tc.eta * g_reg, tc.mu * g_rec,
                    through_converters=through_converters)
    adam_step(store, model.grads(), lr)
    return compose({"cls": cls, "reg": reg, "recon": recon}, {"cls": 1.0, "reg": tc.eta, "recon": tc.mu},
                   stage, step)


def _require_frozen(store: ParamStore, prefix: str, stage: str) -> None:
    thawed = [n for n, f in store.frozen.items() if n.startswith(prefix) and not f]
    if thawed:
        msg = f"{stage}: {prefix.rstrip('.')} parameters must be frozen (e.g. {thawed[0]})"
        raise ContractError(msg)


def stage2_step(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config, lam: float,
                snrs: np.ndarray, rng: np.random.Generator, step: int = 0) -> LossReport:
    """Selector and codec update over Rayleigh fading with the converters frozen."""
    _require_frozen(store, "converter.", "stage2")
    return _collab_step(batch, model, store, cfg, "cmsc", lam, snrs, rng, cfg.train.lr_stage2,
                        "stage2", step, through_converters=False)


def stage3_finetune(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config, lam: float,
                    snrs: np.ndarray, rng: np.random.Generator, step: int = 0) -> LossReport:
    """End-to-end step with every CMSC parameter trainable at the reduced rate."""
    return _collab_step(batch, model, store, cfg, "cmsc", lam, snrs, rng, cfg.train.lr_stage3,
                        "stage3", step, through_converters=True)


def baseline_step(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config, lam: float,
                  snrs: np.ndarray, rng: np.random.Generator, lr: float, stage: str,
                  step: int = 0) -> LossReport:
    """Baseline-JSCC: the same selector/codec path with the converters bypassed."""
    return _collab_step(batch, model, store, cfg, "baseline_jscc", lam, snrs, rng, lr, stage, step,
                        through_converters=False)


def upper_step(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config,
               step: int = 0) -> LossReport:
    """Upper-bound converter and head update on complete, losslessly shared CAV maps."""
    tc = cfg.train
    model.zero_grad()
    raw, state = collab_forward(model, batch, "upper_bound", 1.0, "awgn", 0.0, None)
    cls, reg, g_cls, g_reg = detection_loss(raw, batch)
    collab_backward(model, batch, state, g_cls + tc.eta * g_reg)
    adam_step(store, model.grads(), tc.lr_upper)
    return compose({"cls": cls, "reg": reg}, {"cls": 1.0, "reg": tc.eta}, "upper", step)


def pretrain_step(batch: Batch, model: CMSCModel, store: ParamStore, cfg: Config,
                  step: int = 0) -> LossReport:
    """Fusion + detection head update on a clean homogeneous batch."""
    tc = cfg.train
    model.zero_grad()
    head = model.heads[batch.ego_modality]
    raw = homogeneous_forward(model, batch)
    cls, reg, g_cls, g_reg = detection_loss(raw, batch)
    head.backward(g_cls + tc.eta * g_reg)
    adam_step(store, model.grads(), tc.lr_pretrain)
    return compose({"cls": cls, "reg": reg}, {"cls": 1.0, "reg": tc.eta}, "pretrain", step)


def config_digest(cfg: Config) -> str:
    """Short hash of everything that affects training."""
    text = "\n".join(f"{k}={v}" for k, v in sorted(vars(cfg.scene).items()))
    text += "\n" + "\n".join(f"{k}={v}" for k, v in sorted(vars(cfg.model).items()))
    text += "\n" + "\n".join(f"{k}={v}" for k, v in sorted(vars(cfg.train).items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Trainer:
    """Runs every stage in order, logging losses and checkpointing at stage boundaries."""

    cfg: Config
    model: CMSCModel | None = None
    log_path: Path | None = None
    checkpoint_dir: Path | None = None
    reports: list[LossReport] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.model = self.model or CMSCModel(self.cfg)
        self.store = ParamStore.from_modules(self.model.modules())
        self._log_file = None
        if self.log_path is not None:
            self.log_path = Path(self.log_path)
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def _rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.train.seed, STAGES.index(stage), 0xC115C])

    def _record(self, report: LossReport) -> None:
        report.check()
        self.reports.append(report)
        if self.log_path is not None:
            row = [report.step, report.stage]
            row += [repr(report.components[c]) if c in report.components else "" for c in LOG_COLUMNS[2:-1]]
            row.append(repr(report.total))
            with self.log_path.open("a", newline="") as fh:
                csv.writer(fh).writerow(row)

    def _freeze_all_but(self, prefixes: tuple[str, ...]) -> None:
        self.store.set_frozen(None, True)
        self.store.set_frozen(prefixes, False)

    def _checkpoint(self, stage: str) -> None:
        if self.checkpoint_dir is not None:
            save_checkpoint(Path(self.checkpoint_dir) / f"{stage}.ckpt", self.model.modules(),
                            {"stage": stage, "config": config_digest(self.cfg)})

    def _scene_seeds(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, 2**62, size=n)

    def _collab_batch(self, rng: np.random.Generator) -> tuple[Batch, float, np.ndarray]:
        tc, n, v = self.cfg.train, self.cfg.train.batch_size, self.cfg.scene.num_cavs
        seeds = self._scene_seeds(rng, n)
        ego = MODALITIES[rng.integers(len(MODALITIES))]
        cav = np.asarray(MODALITIES, dtype=object)[rng.integers(len(MODALITIES), size=(n, v))]
        lam = float(tc.train_lambdas[rng.integers(len(tc.train_lambdas))])
        snrs = rng.uniform(tc.train_snr_min, tc.train_snr_max, size=n * v)
        return make_batch(seeds, ego, cav, self.cfg), lam, snrs

    def pretrain(self) -> None:
        tc = self.cfg.train
        rng = self._rng("pretrain")
        self._freeze_all_but(("head.",))
        self.model.train()
        for step in range(tc.pretrain_steps):
            m = MODALITIES[step % len(MODALITIES)]
            batch = make_batch(self._scene_seeds(rng, tc.batch_size), m, [m] * self.cfg.scene.num_cavs,
                               self.cfg)
            self._record(pretrain_step(batch, self.model, self.store, self.cfg, step))
        self._checkpoint("pretrain")

    def stage1(self) -> None:
        tc = self.cfg.train
        rng = self._rng("stage1")
        self._freeze_all_but(("converter.",))
        self.model.train()
        for step in range(tc.stage1_steps):
            m = MODALITIES[step % len(MODALITIES)]  # alternate lidar / camera batches
            seeds = self._scene_seeds(rng, tc.batch_size)
            vehicles = rng.integers(0, self.cfg.scene.num_cavs + 1, size=tc.batch_size)
            batch = make_stage1_batch(seeds, m, vehicles, self.cfg)
            self._record(stage1_step(batch, self.model, self.store, self.cfg, step))
        self._checkpoint("stage1")

    def stage2(self) -> None:
        rng = self._rng("stage2")
        self._freeze_all_but(CMSC_CODEC)
        self.model.train()
        for step in range(self.cfg.train.stage2_steps):
            batch, lam, snrs = self._collab_batch(rng)
            self._record(stage2_step(batch, self.model, self.store, self.cfg, lam, snrs, rng, step))
        self._checkpoint("stage2")

    def stage3(self) -> None:
        rng = self._rng("stage3")
        self._freeze_all_but(("converter.", "head.") + CMSC_CODEC)
        self.model.train()
        for step in range(self.cfg.train.stage3_steps):
            batch, lam, snrs = self._collab_batch(rng)
            self._record(stage3_finetune(batch, self.model, self.store, self.cfg, lam, snrs, rng, step))
        self._checkpoint("stage3")

    def baseline(self) -> None:
        tc = self.cfg.train
        self._freeze_all_but(BASELINE_CODEC)
        self.model.train()
        for stage, steps, lr in (("baseline2", tc.stage2_steps, tc.lr_stage2),
                                 ("baseline3", tc.stage3_steps, tc.lr_stage3)):
            rng = self._rng(stage)
            for step in range(steps):
                batch, lam, snrs = self._collab_batch(rng)
                self._record(baseline_step(batch, self.model, self.store, self.cfg, lam, snrs, rng,
                                           lr, stage, step))
            self._checkpoint(stage)

    def upper(self) -> None:
        """Tune the upper-bound converters and heads, starting from the fine-tuned CMSC ones."""
        rng = self._rng("upper")
        for m in MODALITIES:
            for src_mod, dst_mod in ((self.model.heads[m], self.model.upper_heads[m]),
                                     (self.model.converters[m], self.model.upper_converters[m])):
                src = state_dict({"x": src_mod})
                for name, (_, dst) in state_dict({"x": dst_mod}).items():
                    dst[...] = src[name][1]
        self._freeze_all_but(("upper.",))
        self.model.train()
        for step in range(self.cfg.train.upper_steps):
            batch, _, _ = self._collab_batch(rng)
            self._record(upper_step(batch, self.model, self.store, self.cfg, step))
        self._checkpoint("upper")

    def run(self) -> CMSCModel:
        plan = [("pretrain", self.pretrain), ("stage1", self.stage1), ("stage2", self.stage2),
                ("stage3", self.stage3)]
        if self.cfg.train.train_baseline_jscc:
            plan.append(("baseline", self.baseline))
        plan.append(("upper", self.upper))
        for name, fn in plan:
            t0 = time.perf_counter()
            fn()
            self.timings[name] = time.perf_counter() - t0
            log.info("%s done in %.1f s", name, self.timings[name])
        self.store.set_frozen(None, True)
        self.model.eval()
        return self.model


def read_loss_log(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["step"] = int(r["step"])
        for c in LOG_COLUMNS[2:]:
            r[c] = float(r[c]) if r[c] != "" else None
    return rows


def save_model(path: str | Path, trainer: Trainer) -> None:
    """Final checkpoint; its metadata carries the full config and stage timings."""
    meta = {"stage": "final", "digest": config_digest(trainer.cfg), "config": trainer.cfg.to_text(),
            "timings": trainer.timings}
    save_checkpoint(path, trainer.model.modules(), meta)


def load_model(path: str | Path, cfg: Config | None = None) -> tuple[CMSCModel, Config, dict]:
    """Rebuild a trained model; ``cfg`` defaults to the config stored in the checkpoint."""
    path = Path(path)
    if not path.is_file():
        msg = f"checkpoint not found: {path}"
        raise ContractError(msg)
    meta, _ = parse_checkpoint(path.read_bytes())
    if cfg is None:
        if "config" not in meta:
            msg = f"{path} carries no config; pass one explicitly"
            raise ContractError(msg)
        cfg = parse_config(meta["config"])
    model = CMSCModel(cfg)
    load_checkpoint(path, model.modules())
    model.eval()
    return model, cfg, meta


def train_or_load(cfg: Config, cache_dir: str | Path) -> tuple[CMSCModel, dict, Path]:
    """Load ``<cache_dir>/<digest>/final.ckpt`` if present, else train and write it.

    Returns the model, the checkpoint metadata and the run directory (which also
    holds ``loss.csv`` and the per-stage checkpoints).
    """
    run_dir = Path(cache_dir) / config_digest(cfg)
    final = run_dir / "final.ckpt"
    if final.is_file():
        model, _, meta = load_model(final, cfg)
        return model, meta, run_dir
    trainer = Trainer(cfg, log_path=run_dir / "loss.csv", checkpoint_dir=run_dir)
    trainer.run()
    save_model(final, trainer)
    model, _, meta = load_model(final, cfg)
    return model, meta, run_dir
