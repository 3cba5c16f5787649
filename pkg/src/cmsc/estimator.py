"""scikit-learn style wrapper: ``fit`` trains the pipeline, ``predict``/``score`` detect.

Samples are scene seeds.  The transmission setting (method, lambda, channel,
SNR, ego and CAV modalities) is held in the estimator's parameters, so a
grid search over them is an ordinary ``GridSearchCV``-style loop.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from cmsc.config import MODALITIES, Config
from cmsc.errors import ContractError
from cmsc.perception import DetectionSet, average_precision, decode_detections
from cmsc.system import METHODS, collab_forward, make_batch
from cmsc.trainer import Trainer, train_or_load


class CMSCEstimator(BaseEstimator):
    """Trains the staged pipeline once and evaluates detection on scene seeds."""

    def __init__(self, config: Config | None = None, method: str = "cmsc", lam: float = 0.06,
                 channel: str = "awgn", snr_db: float = 20.0, ego_modality: str = "lidar",
                 cav_modality: str | None = None, iou_threshold: float = 0.7,
                 cache_dir: str | Path | None = None, random_state: int = 0):
        self.config = config
        self.method = method
        self.lam = lam
        self.channel = channel
        self.snr_db = snr_db
        self.ego_modality = ego_modality
        self.cav_modality = cav_modality
        self.iou_threshold = iou_threshold
        self.cache_dir = cache_dir
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Run every training stage (or load the cached run).  ``X`` and ``y`` are ignored."""
        cfg = self.config or Config()
        if self.cache_dir is not None:
            self.model_, self.meta_, _ = train_or_load(cfg, self.cache_dir)
        else:
            trainer = Trainer(cfg)
            self.model_ = trainer.run()
            self.meta_ = {"timings": dict(trainer.timings)}
        self.config_ = cfg
        return self

    def _check_params(self) -> None:
        if self.method not in METHODS:
            msg = f"unknown method {self.method!r}; expected one of {METHODS}"
            raise ContractError(msg)
        if self.ego_modality not in MODALITIES:
            msg = f"ego modality must be one of {MODALITIES}, got {self.ego_modality!r}"
            raise ContractError(msg)

    def _raw(self, seeds: np.ndarray) -> tuple[np.ndarray, list]:
        check_is_fitted(self, "model_")
        self._check_params()
        seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
        if seeds.size == 0:
            msg = "no scene seeds given"
            raise ContractError(msg)
        v = self.config_.scene.num_cavs
        rng = np.random.default_rng(self.random_state)
        if self.cav_modality is None:
            cav = np.asarray(MODALITIES, dtype=object)[rng.integers(len(MODALITIES), size=(seeds.size, v))]
        else:
            cav = [self.cav_modality] * v
        batch = make_batch(seeds, self.ego_modality, cav, self.config_)
        raw, _ = collab_forward(self.model_, batch, self.method, self.lam, self.channel, self.snr_db, rng)
        return raw, batch.scenes

    def predict(self, X) -> list[DetectionSet]:
        """Detections for each scene seed in ``X``."""
        raw, _ = self._raw(X)
        mc = self.config_.model
        return [decode_detections(r, score_threshold=mc.score_threshold, nms_iou=mc.nms_iou) for r in raw]

    def score(self, X, y=None) -> float:
        """Mean per-scene AP at ``iou_threshold`` over the scene seeds in ``X``."""
        raw, scenes = self._raw(X)
        mc = self.config_.model
        aps = [average_precision(decode_detections(r, score_threshold=mc.score_threshold, nms_iou=mc.nms_iou),
                                 sc, self.iou_threshold) for r, sc in zip(raw, scenes)]
        return float(np.mean(aps))
