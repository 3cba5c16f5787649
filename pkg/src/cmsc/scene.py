"""Synthetic traffic scenes, per-vehicle modality renders and detection targets.

Coordinates are in cell units: ``x`` runs along the width (columns), ``y``
along the height (rows), and cell ``(r, c)`` has its center at
``(c + 0.5, r + 0.5)``.  Feature maps are ``(H, W, C)`` arrays.

The renderer stands in for a trained BEV backbone.  Each vehicle observes the
objects within its sensing range as a 5-channel latent map (occupancy plus
occupancy-weighted center offsets and log-sizes), which a fixed
modality-specific channel mixing and ``tanh`` turn into ``C`` feature
channels.  Camera renders stretch every blob along the line of sight,
displace the perceived center along it (depth error), and carry more noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from cmsc.config import MODALITIES, SceneConfig
from cmsc.errors import ContractError

LATENT_CHANNELS = 5
_LOG_SIZE_CENTER = math.log(3.0)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            msg = f"box extent must be positive, got w={self.w}, h={self.h}"
            raise ContractError(msg)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class Scene:
    objects: list[Box]
    bounds: tuple[int, int]  # (H, W)
    seed: int = 0
    vehicles: list[tuple[float, float]] = field(default_factory=list)  # ego first

    @property
    def num_cavs(self) -> int:
        return max(len(self.vehicles) - 1, 0)


@dataclass
class FeatureMap:
    tensor: np.ndarray  # (H, W, C)
    modality: str
    vehicle_id: int = 0

    def __post_init__(self):
        if self.modality not in (*MODALITIES, "standard"):
            msg = f"unknown modality {self.modality!r}"
            raise ContractError(msg)
        if self.tensor.ndim != 3:
            msg = f"feature map must be (H, W, C), got {self.tensor.shape}"
            raise ContractError(msg)
        if not np.all(np.isfinite(self.tensor)):
            msg = "feature map contains non-finite values"
            raise ContractError(msg)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


def box_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _overlaps(a: Box, b: Box, max_iou: float) -> bool:
    if max_iou <= 0.0:
        ax0, ay0, ax1, ay1 = a.corners
        bx0, by0, bx1, by1 = b.corners
        return min(ax1, bx1) > max(ax0, bx0) and min(ay1, by1) > max(ay0, by0)
    return box_iou(a, b) >= max_iou


def _place_vehicles(rng: np.random.Generator, cfg: SceneConfig) -> list[tuple[float, float]]:
    ego = (cfg.width / 2.0, cfg.height / 2.0)
    vehicles = [ego]
    for _ in range(cfg.num_cavs):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(cfg.cav_min_distance, cfg.cav_max_distance)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            x, y = ego[0] + r * np.cos(theta), ego[1] + r * np.sin(theta)
            if 0.0 <= x <= cfg.width and 0.0 <= y <= cfg.height:
                break
        else:
            msg = "cannot place CAV inside the map; reduce cav_max_distance"
            raise ContractError(msg)
        vehicles.append((float(x), float(y)))
    return vehicles


def sample_scene(seed: int, cfg: SceneConfig | None = None) -> Scene:
    """Draw a scene deterministically from ``seed``.

    Boxes are rejection-sampled so that every pair stays below ``cfg.max_gt_iou``
    (``0`` means no overlap at all); placement gives up with a
    :class:`ContractError` after ``cfg.max_retries`` failed attempts per object.
    """
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5CE7E]))
    vehicles = _place_vehicles(rng, cfg)
    hi = max(cfg.max_objects, 0)
    n = int(rng.integers(min(cfg.min_objects, hi), hi + 1)) if hi > 0 else 0
    objects: list[Box] = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
            if w > cfg.width or h > cfg.height:
                msg = f"object size range up to {cfg.max_size} exceeds bounds"
                raise ContractError(msg)
            cx = rng.uniform(w / 2, cfg.width - w / 2)
            cy = rng.uniform(h / 2, cfg.height - h / 2)
            box = Box(float(cx), float(cy), float(w), float(h))
            if not any(_overlaps(box, o, cfg.max_gt_iou) for o in objects):
                objects.append(box)
                break
        else:
            msg = (f"could not place object {len(objects) + 1} of {n} after "
                   f"{cfg.max_retries} tries; config is infeasible")
            raise ContractError(msg)
    return Scene(objects, (cfg.height, cfg.width), int(seed), vehicles)


@lru_cache(maxsize=8)
def _cell_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


@lru_cache(maxsize=8)
def mixing_matrix(modality: str, channels: int, scale: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed latent-to-feature mixing ``(LATENT_CHANNELS, C)`` and bias ``(C,)``."""
    idx = MODALITIES.index(modality)
    rng = np.random.default_rng([seed, idx])
    weight = rng.standard_normal((LATENT_CHANNELS, channels)) * scale
    bias = rng.standard_normal(channels) * 0.1
    weight.setflags(write=False)
    bias.setflags(write=False)
    return weight, bias


def _vehicle_position(scene: Scene, vehicle: int, cfg: SceneConfig) -> tuple[float, float]:
    if scene.vehicles:
        if not 0 <= vehicle < len(scene.vehicles):
            msg = f"scene has {len(scene.vehicles)} vehicles, asked for vehicle {vehicle}"
            raise ContractError(msg)
        return scene.vehicles[vehicle]
    return scene.bounds[1] / 2.0, scene.bounds[0] / 2.0


def render_latent(scene: Scene, modality: str, rng: np.random.Generator, vehicle: int = 0,
                  cfg: SceneConfig | None = None) -> np.ndarray:
    """Per-vehicle latent map ``(H, W, 5)`` as seen through ``modality``."""
    cfg = cfg or SceneConfig()
    h, w = scene.bounds
    xs, ys = _cell_centers(h, w)
    vx, vy = _vehicle_position(scene, vehicle, cfg)
    occ = np.zeros((h, w))
    fields = np.zeros((h, w, 4))
    camera = modality == "camera"
    sigma = cfg.camera_sigma if camera else cfg.lidar_sigma
    for box in scene.objects:
        dist = math.hypot(box.cx - vx, box.cy - vy)
        arg = (dist - cfg.sensing_range) / cfg.visibility_softness
        # draw the depth error even for unseen objects so streams stay aligned
        depth_err = rng.standard_normal() * cfg.camera_depth_std if camera else 0.0
        if arg > 30.0:
            continue
        vis = 1.0 / (1.0 + math.exp(arg))
        ux, uy = ((box.cx - vx) / dist, (box.cy - vy) / dist) if dist > 1e-9 else (1.0, 0.0)
        cx, cy = box.cx + depth_err * ux, box.cy + depth_err * uy
        sx2, sy2 = (sigma * box.w / 2) ** 2, (sigma * box.h / 2) ** 2
        cxx, cyy, cxy = sx2, sy2, 0.0
        if camera:
            r2 = cfg.camera_sigma_range ** 2
            cxx, cyy, cxy = cxx + r2 * ux * ux, cyy + r2 * uy * uy, r2 * ux * uy
        det = cxx * cyy - cxy * cxy
        dx, dy = xs - cx, ys - cy
        maha = (cyy * dx * dx - 2 * cxy * dx * dy + cxx * dy * dy) / det
        g = vis * np.exp(-0.5 * maha)
        own = g > occ
        occ = np.where(own, g, occ)
        fields[own] = np.stack([
            -dx[own] / 2.0,
            -dy[own] / 2.0,
            np.full(own.sum(), (math.log(box.w) - _LOG_SIZE_CENTER) / 0.5),
            np.full(own.sum(), (math.log(box.h) - _LOG_SIZE_CENTER) / 0.5),
        ], axis=-1)
    return np.concatenate([occ[..., None], occ[..., None] * fields], axis=-1)


def render_features(scene: Scene, modality: str, noise_seed: int, vehicle: int = 0,
                    cfg: SceneConfig | None = None) -> FeatureMap:
    """BEV feature map of ``scene`` observed by ``vehicle`` with ``modality``."""
    if modality not in MODALITIES:
        msg = f"render_features: modality must be one of {MODALITIES}, got {modality!r}"
        raise ContractError(msg)
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed) & (2**64 - 1), vehicle,
                                                        MODALITIES.index(modality)]))
    latent = render_latent(scene, modality, rng, vehicle, cfg)
    weight, bias = mixing_matrix(modality, cfg.channels, cfg.latent_mixing_scale, cfg.mixing_seed)
    feats = np.tanh(latent @ weight + bias)
    std = cfg.camera_noise if modality == "camera" else cfg.lidar_noise
    if std > 0:
        feats = feats + rng.standard_normal(feats.shape) * std
    return FeatureMap(feats, modality, vehicle)


@dataclass
class Targets:
    objectness: np.ndarray  # (H, W) in {0, 1}
    regression: np.ndarray  # (H, W, 4): dx, dy, log w, log h
    box_index: np.ndarray  # (H, W), -1 where negative

    @property
    def positive(self) -> np.ndarray:
        return self.objectness > 0.5


def ground_truth_targets(scene: Scene, grid: tuple[int, int] | None = None) -> Targets:
    """Per-cell objectness and box regression targets.

    A cell is positive iff its center lies strictly inside a box; a cell inside
    several boxes takes the one whose center is nearest.
    """
    h, w = grid or scene.bounds
    xs, ys = _cell_centers(h, w)
    obj = np.zeros((h, w))
    reg = np.zeros((h, w, 4))
    idx = np.full((h, w), -1)
    best = np.full((h, w), np.inf)
    for k, box in enumerate(scene.objects):
        dx, dy = box.cx - xs, box.cy - ys
        inside = (np.abs(dx) < box.w / 2) & (np.abs(dy) < box.h / 2)
        d2 = dx * dx + dy * dy
        take = inside & (d2 < best)
        best[take] = d2[take]
        obj[take] = 1.0
        idx[take] = k
        reg[take] = np.stack([dx[take], dy[take], np.full(take.sum(), math.log(box.w)),
                              np.full(take.sum(), math.log(box.h))], axis=-1)
    return Targets(obj, reg, idx)


def encode_box(box: Box, row: int, col: int) -> np.ndarray:
    return np.array([box.cx - (col + 0.5), box.cy - (row + 0.5), math.log(box.w), math.log(box.h)])


def decode_box(reg: np.ndarray, row: int, col: int) -> Box:
    return Box(float(col + 0.5 + reg[0]), float(row + 0.5 + reg[1]),
               float(math.exp(reg[2])), float(math.exp(reg[3])))


def scene_to_text(scene: Scene) -> str:
    lines = [f"# bounds {scene.bounds[0]} {scene.bounds[1]}", f"# seed {scene.seed}"]
    lines += [f"# vehicle {x!r} {y!r}" for x, y in scene.vehicles]
    lines += [f"{b.cx!r} {b.cy!r} {b.w!r} {b.h!r} {b.class_id}" for b in scene.objects]
    return "\n".join(lines) + "\n"


def scene_from_text(text: str, bounds: tuple[int, int] = (32, 32)) -> Scene:
    objects, vehicles, seed = [], [], 0
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["bounds"]:
                bounds = (int(parts[1]), int(parts[2]))
            elif parts[:1] == ["seed"]:
                seed = int(parts[1])
            elif parts[:1] == ["vehicle"]:
                vehicles.append((float(parts[1]), float(parts[2])))
            continue
        cx, cy, w, h, cls = line.split()
        objects.append(Box(float(cx), float(cy), float(w), float(h), int(cls)))
    return Scene(objects, bounds, seed, vehicles)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(scene_to_text(scene))


def load_scene(path: str | Path) -> Scene:
    return scene_from_text(Path(path).read_text())
