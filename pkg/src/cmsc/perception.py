"""Max fusion, the per-cell detection head, NMS and AP evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmsc.config import ModelConfig
from cmsc.errors import ContractError
from cmsc.nn import Conv2d, Module, ReLU, sigmoid
from cmsc.scene import Box, FeatureMap, Scene, box_iou

REG_DIMS = 4
MAX_LOG_SIZE = 4.0


@dataclass
class DetectionSet:
    boxes: list[Box] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def to_text(self) -> str:
        return "".join(f"{s:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n"
                       for b, s in zip(self.boxes, self.scores))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "DetectionSet":
        out = cls()
        for line in text.splitlines():
            if line.strip():
                s, cx, cy, w, h = (float(v) for v in line.split())
                out.boxes.append(Box(cx, cy, w, h))
                out.scores.append(s)
        return out


class Fusion(Module):
    """Element-wise max over ``(V, N, H, W, C)`` vehicle maps, then 3x3 conv + ReLU."""

    kind = "fusion"

    def __init__(self, channels: int, *, rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.conv = self.add("conv", Conv2d(channels, channels, 3, padding=1, rng=rng))
        self.act = self.add("act", ReLU())

    def forward(self, stack):
        stack = np.asarray(stack)
        if stack.ndim != 5:
            msg = f"fusion: expected (V, N, H, W, C) maps, got {stack.shape}"
            raise ContractError(msg)
        winner = np.argmax(stack, axis=0)
        fused = np.take_along_axis(stack, winner[None], axis=0)[0]
        self._cache = (stack.shape, winner)
        return self.act(self.conv(fused))

    def backward(self, grad):
        shape, winner = self._need_cache()
        g = self.conv.backward(self.act.backward(grad))
        out = np.zeros(shape)
        np.put_along_axis(out, winner[None], g[None], axis=0)
        return out


class Detector(Module):
    """1x1 conv to per-cell (objectness logit, dx, dy, log w, log h)."""

    kind = "detector"

    def __init__(self, channels: int, *, rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = self.add("conv", Conv2d(channels, 1 + REG_DIMS, 1, rng=rng))
        self.conv.params["weight"] *= 0.1
        self.conv.params["bias"][0] = -2.0
        self.conv.params["bias"][3:] = np.log(3.0)

    def forward(self, x):
        self._cache = True
        return self.conv(x)

    def backward(self, grad):
        self._need_cache()
        return self.conv.backward(grad)


class PerceptionHead(Module):
    """Fusion and detection networks for one ego modality."""

    kind = "perception-head"

    def __init__(self, channels: int, *, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fusion = self.add("fusion", Fusion(channels, rng=rng))
        self.detector = self.add("detector", Detector(channels, rng=rng))

    def forward(self, stack):
        self._cache = True
        return self.detector(self.fusion(stack))

    def backward(self, grad):
        self._need_cache()
        return self.fusion.backward(self.detector.backward(grad))


def fuse(ego: FeatureMap, collab: list[FeatureMap], head: PerceptionHead) -> np.ndarray:
    """Fused map ``(H, W, C)`` of the ego map and already-aligned collaborator maps."""
    for m in collab:
        if m.shape != ego.shape:
            msg = f"fuse: collaborator map {m.shape} does not match ego map {ego.shape}"
            raise ContractError(msg)
    stack = np.stack([ego.tensor, *(m.tensor for m in collab)])[:, None]
    return head.fusion.forward(stack)[0]


def iou(a: Box, b: Box) -> float:
    return box_iou(a, b)


def _iou_matrix(boxes: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` arrays of (x0, y0, x1, y1)."""
    ix0 = np.maximum(boxes[:, None, 0], other[None, :, 0])
    iy0 = np.maximum(boxes[:, None, 1], other[None, :, 1])
    ix1 = np.minimum(boxes[:, None, 2], other[None, :, 2])
    iy1 = np.minimum(boxes[:, None, 3], other[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (other[:, 2] - other[:, 0]) * (other[:, 3] - other[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _corners(boxes: list[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.corners for b in boxes])


def _nms_corners(corners: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    c = corners[order]
    area = (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])
    alive = np.ones(order.size, dtype=bool)
    keep: list[int] = []
    for r in range(order.size):
        if not alive[r]:
            continue
        keep.append(int(order[r]))
        iw = np.clip(np.minimum(c[r, 2], c[:, 2]) - np.maximum(c[r, 0], c[:, 0]), 0, None)
        ih = np.clip(np.minimum(c[r, 3], c[:, 3]) - np.maximum(c[r, 1], c[:, 1]), 0, None)
        inter = iw * ih
        alive &= ~(inter > iou_threshold * (area[r] + area - inter))
    return keep


def nms(boxes: list[Box], scores: list[float], iou_threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    return _nms_corners(_corners(boxes), np.asarray(scores, dtype=np.float64), iou_threshold)


def decode_detections(raw: np.ndarray, *, score_threshold: float = 0.1,
                      nms_iou: float = 0.5) -> DetectionSet:
    """Turn a ``(H, W, 5)`` raw head output into an NMS-filtered detection set."""
    scores = sigmoid(raw[..., 0])
    rows, cols = np.nonzero(scores > score_threshold)
    if rows.size == 0:
        return DetectionSet()
    dx, dy, lw, lh = raw[rows, cols, 1:].T
    cx, cy = cols + 0.5 + dx, rows + 0.5 + dy
    w = np.exp(np.clip(lw, -MAX_LOG_SIZE, MAX_LOG_SIZE))
    h = np.exp(np.clip(lh, -MAX_LOG_SIZE, MAX_LOG_SIZE))
    corners = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    s = scores[rows, cols]
    keep = _nms_corners(corners, s, nms_iou)
    return DetectionSet([Box(float(cx[i]), float(cy[i]), float(w[i]), float(h[i])) for i in keep],
                        [float(s[i]) for i in keep])


def detect(fused: np.ndarray, head: PerceptionHead, cfg: ModelConfig | None = None
           ) -> tuple[np.ndarray, DetectionSet]:
    """Run the detection network on a fused ``(H, W, C)`` map."""
    cfg = cfg or ModelConfig()
    raw = head.detector.forward(fused[None])[0]
    return raw, decode_detections(raw, score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou)


def average_precision(dets: DetectionSet, gt: Scene | list[Box], iou_thr: float = 0.5) -> float:
    """All-point interpolated AP with greedy score-ordered matching.

    With no ground truth, AP is 1.0 when there are also no detections and 0.0
    otherwise.
    """
    gt_boxes = gt.objects if isinstance(gt, Scene) else list(gt)
    if not gt_boxes:
        return 1.0 if len(dets) == 0 else 0.0
    if len(dets) == 0:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets.scores[i], i))
    ious = _iou_matrix(_corners([dets.boxes[i] for i in order]), _corners(gt_boxes))
    matched = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(order))
    for rank in range(len(order)):
        cand = np.where(~matched & (ious[rank] >= iou_thr), ious[rank], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0.0:
            matched[j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gt_boxes)
    precision = ctp / np.arange(1, len(order) + 1)
    # precision envelope, then area under the step curve
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
