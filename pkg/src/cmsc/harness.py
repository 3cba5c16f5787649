"""Experiment orchestration: sensor matrix, SNR sweep, lambda sweep and CSV output."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from cmsc.channel import CHANNEL_MODELS, seed_stream
from cmsc.config import MODALITIES, Config, ExperimentConfig
from cmsc.errors import ContractError
from cmsc.perception import average_precision, decode_detections
from cmsc.phy import classic_symbol_count, parity_lambda
from cmsc.scene import sample_scene
from cmsc.selector import check_lambda, num_selected
from cmsc.system import METHODS, QAM_ORDER, Batch, CMSCModel, collab_forward, make_batch

CSV_HEADER = ("method", "channel", "snr_db", "lambda", "ego_modality", "cav_modalities", "ap50", "ap70",
              "channel_uses", "seed", "scenes")
SENSOR_MATRIX = (("lidar", "lidar"), ("lidar", "camera"), ("camera", "camera"), ("camera", "lidar"))
_SHORT = {"lidar": "L", "camera": "C"}


@dataclass
class ResultRow:
    method: str
    channel: str
    snr_db: float
    lam: float
    ego_modality: str
    cav_modalities: str
    ap50: float
    ap70: float
    channel_uses: float
    seed: int
    scenes: int

    def __post_init__(self):
        for name in ("ap50", "ap70"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                msg = f"{name} = {v} outside [0, 1]"
                raise ContractError(msg)
        if self.channel_uses <= 0:
            msg = f"channel_uses must be positive, got {self.channel_uses}"
            raise ContractError(msg)

    def as_csv(self) -> list[str]:
        return [self.method, self.channel, f"{self.snr_db:g}", f"{self.lam:g}", self.ego_modality,
                self.cav_modalities, f"{self.ap50:.4f}", f"{self.ap70:.4f}", f"{self.channel_uses:g}",
                str(self.seed), str(self.scenes)]


def channel_uses_for(method: str, lam: float, shape: tuple[int, int, int]) -> float:
    """Complex symbols one CAV actually sends (padding included)."""
    h, w, c = shape
    if method == "upper_bound":
        return float(h * w * c)
    if method in QAM_ORDER:
        k = num_selected(parity_lambda(lam, QAM_ORDER[method]), h, w)
        return float(classic_symbol_count(k * c, QAM_ORDER[method]))
    return float(num_selected(lam, h, w) * c)


def _check_experiment(exp: ExperimentConfig) -> None:
    if exp.scenes <= 0:
        msg = f"scenes must be positive, got {exp.scenes}"
        raise ContractError(msg)
    if exp.channel not in CHANNEL_MODELS:
        msg = f"unknown channel {exp.channel!r}; expected one of {CHANNEL_MODELS}"
        raise ContractError(msg)
    for m in exp.methods:
        if m not in METHODS:
            msg = f"unknown method {m!r}; expected one of {METHODS}"
            raise ContractError(msg)
    if exp.ego_modality not in MODALITIES + ("random",):
        msg = f"ego modality must be lidar, camera or random, got {exp.ego_modality!r}"
        raise ContractError(msg)


def _cav_spec(exp: ExperimentConfig, num_cavs: int) -> list[str] | None:
    """Fixed CAV modality list, or None for per-scene random assignment."""
    spec = exp.cav_modalities
    if spec == "random":
        return None
    mods = [m.strip() for m in spec.replace(";", ",").replace("+", ",").split(",") if m.strip()]
    if len(mods) == 1:
        mods = mods * num_cavs
    if len(mods) != num_cavs or any(m not in MODALITIES for m in mods):
        msg = f"cav_modalities must be 'random' or {num_cavs} of {MODALITIES}, got {spec!r}"
        raise ContractError(msg)
    return mods


class Evaluator:
    """Evaluates one trained model over a fixed scene set, reusing renders across sweep points."""

    def __init__(self, model: CMSCModel, cfg: Config, exp: ExperimentConfig | None = None):
        self.model = model
        self.cfg = cfg
        self.exp = exp or cfg.experiment
        _check_experiment(self.exp)
        model.eval()
        self._batches: list[Batch] | None = None

    def _assign(self) -> tuple[list[int], list[str], np.ndarray]:
        exp, v = self.exp, self.cfg.scene.num_cavs
        fixed = _cav_spec(exp, v)
        seeds, egos, cavs = [], [], []
        for i in range(exp.scenes):
            ss = seed_stream(exp.seed, 0xE7A1, i)
            seeds.append(int(ss.generate_state(1, np.uint64)[0] >> 2) | (1 << 62))
            rng = np.random.default_rng(seed_stream(exp.seed, 0x30D, i))
            ego = exp.ego_modality if exp.ego_modality != "random" else MODALITIES[rng.integers(2)]
            egos.append(ego)
            cavs.append(fixed if fixed is not None else [MODALITIES[j] for j in rng.integers(2, size=v)])
        return seeds, egos, np.asarray(cavs, dtype=object)

    def batches(self) -> list[Batch]:
        """Scene chunks, grouped by ego modality in first-seen order."""
        if self._batches is None:
            seeds, egos, cavs = self._assign()
            out = []
            for ego in dict.fromkeys(egos):
                idx = [i for i, e in enumerate(egos) if e == ego]
                for start in range(0, len(idx), self.exp.eval_batch):
                    part = idx[start:start + self.exp.eval_batch]
                    scenes = [sample_scene(seeds[i], self.cfg.scene) for i in part]
                    out.append(make_batch(None, ego, cavs[part], self.cfg, scenes=scenes))
            self._batches = out
        return self._batches

    def point(self, method: str, lam: float, channel: str, snr_db: float) -> tuple[float, float]:
        """Mean per-scene (AP@0.5, AP@0.7) at one sweep point."""
        if method not in METHODS:
            msg = f"unknown method {method!r}; expected one of {METHODS}"
            raise ContractError(msg)
        check_lambda(lam)
        mc = self.cfg.model
        ap50, ap70 = [], []
        for b, batch in enumerate(self.batches()):
            rng = np.random.default_rng(seed_stream(
                self.exp.seed, METHODS.index(method), CHANNEL_MODELS.index(channel),
                int(round(snr_db * 1000)), int(round(lam * 1e6)), b))
            raw, _ = collab_forward(self.model, batch, method, lam, channel, snr_db, rng)
            for i, scene in enumerate(batch.scenes):
                dets = decode_detections(raw[i], score_threshold=mc.score_threshold, nms_iou=mc.nms_iou)
                ap50.append(average_precision(dets, scene, 0.5))
                ap70.append(average_precision(dets, scene, 0.7))
        return float(np.mean(ap50)), float(np.mean(ap70))

    def row(self, method: str, lam: float, channel: str, snr_db: float) -> ResultRow:
        ap50, ap70 = self.point(method, lam, channel, snr_db)
        shape = (self.cfg.scene.height, self.cfg.scene.width, self.cfg.scene.channels)
        return ResultRow(method, channel, float(snr_db), float(lam), self.exp.ego_modality,
                         self.exp.cav_modalities, ap50, ap70, channel_uses_for(method, lam, shape),
                         self.exp.seed, self.exp.scenes)


def run_sensor_matrix(model: CMSCModel, cfg: Config, *, method: str = "cmsc",
                      snr_db: float = 20.0) -> list[ResultRow]:
    """AP for every (ego, CAV) modality pair at the configured lambda over AWGN."""
    exp = cfg.experiment
    _check_experiment(exp)
    rows = []
    for ego, cav in SENSOR_MATRIX:
        sub = replace(exp, ego_modality=ego, cav_modalities=cav, channel="awgn")
        rows.append(Evaluator(model, cfg, sub).row(method, exp.lambda_, "awgn", snr_db))
    return rows


def run_snr_sweep(model: CMSCModel, cfg: Config, evaluator: Evaluator | None = None) -> list[ResultRow]:
    """One row per (method, SNR), methods in config order."""
    exp = cfg.experiment
    ev = evaluator or Evaluator(model, cfg, exp)
    rows = []
    for method in exp.methods:
        if method == "upper_bound":
            # no channel in the path: evaluate once and report it at every SNR
            base = ev.row(method, exp.lambda_, exp.channel, exp.snr_list[0])
            rows += [replace(base, snr_db=float(s)) for s in exp.snr_list]
            continue
        rows += [ev.row(method, exp.lambda_, exp.channel, float(s)) for s in exp.snr_list]
    return rows


def run_lambda_sweep(model: CMSCModel, cfg: Config, *, method: str = "cmsc",
                     evaluator: Evaluator | None = None) -> list[ResultRow]:
    """One row per (lambda, SNR) for ``method``."""
    exp = cfg.experiment
    for lam in exp.lambda_list:
        check_lambda(lam)
    ev = evaluator or Evaluator(model, cfg, exp)
    return [ev.row(method, float(lam), exp.channel, float(s)) for lam in exp.lambda_list for s in exp.snr_list]


def rows_to_csv(rows: list[ResultRow]) -> str:
    if not rows:
        msg = "emit_csv: no rows to write"
        raise ContractError(msg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.as_csv())
    return buf.getvalue()


def emit_csv(rows: list[ResultRow], path: str | Path) -> Path:
    text = rows_to_csv(rows)
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        msg = f"cannot write {path}: {exc}"
        raise ContractError(msg) from exc
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def pair_label(ego: str, cav: str) -> str:
    return f"{_SHORT[ego]}/{_SHORT[cav]}"

