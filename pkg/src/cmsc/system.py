"""The collaborative-perception system: model bundle, batches and the
forward/backward graph that chains converters, selector, codec, channel and
the perception head.

Every module caches exactly one forward pass, so each step calls a module at
most once; maps that go through the same module are concatenated first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cmsc.channel import apply_channel, seed_stream, zero_force
from cmsc.codec import Decoder, Encoder, to_complex, to_interleaved
from cmsc.config import MODALITIES, Config
from cmsc.converter import ConverterPair
from cmsc.errors import ContractError
from cmsc.losses import focal_cls_loss, smooth_l1_reg_loss
from cmsc.nn import Module
from cmsc.perception import PerceptionHead
from cmsc.phy import parity_lambda, transmit_classic_batch
from cmsc.scene import Scene, ground_truth_targets, render_features, sample_scene
from cmsc.selector import Gather, Selector, num_selected, scatter_rows, scatter_rows_backward

METHODS = ("cmsc", "baseline_jscc", "baseline_16qam", "baseline_256qam", "upper_bound")
QAM_ORDER = {"baseline_16qam": 16, "baseline_256qam": 256}


class CMSCModel:
    """All trainable networks.

    Converters and detection heads exist per modality.  The CMSC selector and
    codec are shared by every CAV; Baseline-JSCC owns a second selector and
    codec of the same classes, trained without converters.  The upper-bound
    mode fuses complete maps, so it owns copies of the converters and heads
    fine-tuned for that link.
    """

    def __init__(self, cfg: Config | None = None):
        cfg = cfg or Config()
        self.cfg = cfg
        c = cfg.scene.channels
        rng = np.random.default_rng(cfg.model.init_seed)
        mc = cfg.model
        self.converters = {m: ConverterPair(m, c, mc, rng=rng) for m in MODALITIES}
        self.heads = {m: PerceptionHead(c, rng=rng) for m in MODALITIES}
        self.selector = Selector(c, rng=rng)
        self.encoder = Encoder(c, kernel=mc.codec_kernel, rng=rng)
        self.decoder = Decoder(c, kernel=mc.codec_kernel, symbol_clip=mc.symbol_clip, rng=rng)
        self.jscc_selector = Selector(c, rng=rng)
        self.jscc_encoder = Encoder(c, kernel=mc.codec_kernel, rng=rng)
        self.jscc_decoder = Decoder(c, kernel=mc.codec_kernel, symbol_clip=mc.symbol_clip, rng=rng)
        self.upper_heads = {m: PerceptionHead(c, rng=rng) for m in MODALITIES}
        self.upper_converters = {m: ConverterPair(m, c, mc, rng=rng) for m in MODALITIES}

    def modules(self) -> dict[str, Module]:
        out: dict[str, Module] = {}
        for m in MODALITIES:
            out[f"converter.{m}"] = self.converters[m]
        for m in MODALITIES:
            out[f"head.{m}"] = self.heads[m]
        out.update({
            "selector": self.selector, "encoder": self.encoder, "decoder": self.decoder,
            "baseline.selector": self.jscc_selector, "baseline.encoder": self.jscc_encoder,
            "baseline.decoder": self.jscc_decoder,
        })
        for m in MODALITIES:
            out[f"upper.converter.{m}"] = self.upper_converters[m]
        for m in MODALITIES:
            out[f"upper.head.{m}"] = self.upper_heads[m]
        return out

    def converters_for(self, method: str) -> dict[str, ConverterPair]:
        return self.upper_converters if method == "upper_bound" else self.converters

    def head_for(self, method: str, ego_modality: str) -> PerceptionHead:
        heads = self.upper_heads if method == "upper_bound" else self.heads
        return heads[ego_modality]

    def codec_for(self, method: str) -> tuple[Selector, Encoder, Decoder]:
        if method == "baseline_jscc":
            return self.jscc_selector, self.jscc_encoder, self.jscc_decoder
        return self.selector, self.encoder, self.decoder

    def train(self, mode: bool = True) -> None:
        for mod in self.modules().values():
            mod.train(mode)

    def eval(self) -> None:
        self.train(False)

    def zero_grad(self) -> None:
        for mod in self.modules().values():
            mod.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.modules().items():
            out.update(dict(mod.named_grads(f"{prefix}.")))
        return out


@dataclass
class Batch:
    """Ego plus CAV feature maps of ``N`` scenes and their detection targets."""

    scenes: list[Scene]
    ego_modality: str
    ego: np.ndarray  # (N, H, W, C)
    cav: np.ndarray  # (N, V, H, W, C)
    cav_modalities: np.ndarray  # (N, V) of modality names
    objectness: np.ndarray  # (N, H, W)
    regression: np.ndarray  # (N, H, W, 4)

    @property
    def n(self) -> int:
        return self.ego.shape[0]

    @property
    def num_cavs(self) -> int:
        return self.cav.shape[1]

    @property
    def positive(self) -> np.ndarray:
        return self.objectness > 0.5

    def subset(self, rows: np.ndarray) -> "Batch":
        return Batch([self.scenes[i] for i in rows], self.ego_modality, self.ego[rows], self.cav[rows],
                     self.cav_modalities[rows], self.objectness[rows], self.regression[rows])


def noise_seed(scene_seed: int, salt: int = 0) -> int:
    return int(seed_stream(scene_seed, 0x4E015E, salt).generate_state(1, np.uint64)[0])


def make_batch(scene_seeds, ego_modality: str, cav_modalities, cfg: Config | None = None, *,
               scenes: list[Scene] | None = None) -> Batch:
    """Render a batch; ``cav_modalities`` is ``(N, V)`` (or one row for every scene)."""
    cfg = cfg or Config()
    if ego_modality not in MODALITIES:
        msg = f"ego modality must be one of {MODALITIES}, got {ego_modality!r}"
        raise ContractError(msg)
    if scenes is None:
        scenes = [sample_scene(int(s), cfg.scene) for s in scene_seeds]
    n = len(scenes)
    if n == 0:
        msg = "make_batch: no scenes"
        raise ContractError(msg)
    mods = np.asarray(cav_modalities, dtype=object)
    if mods.ndim == 1:
        mods = np.tile(mods, (n, 1))
    v = mods.shape[1]
    for m in mods.ravel():
        if m not in MODALITIES:
            msg = f"CAV modality must be one of {MODALITIES}, got {m!r}"
            raise ContractError(msg)
    ego, cav, obj, reg = [], [], [], []
    for i, sc in enumerate(scenes):
        if sc.num_cavs < v:
            msg = f"scene has {sc.num_cavs} CAVs, batch needs {v}"
            raise ContractError(msg)
        ns = noise_seed(sc.seed)
        ego.append(render_features(sc, ego_modality, ns, 0, cfg.scene).tensor)
        cav.append([render_features(sc, mods[i, j], ns, j + 1, cfg.scene).tensor for j in range(v)])
        t = ground_truth_targets(sc)
        obj.append(t.objectness)
        reg.append(t.regression)
    return Batch(scenes, ego_modality, np.stack(ego), np.asarray(cav, dtype=np.float64).reshape(
        n, v, *np.shape(ego[0])), mods, np.stack(obj), np.stack(reg))


def detection_loss(raw: np.ndarray, batch) -> tuple[float, float, np.ndarray, np.ndarray]:
    """``(L_cls, L_reg, dL_cls/draw, dL_reg/draw)`` for a ``(N, H, W, 5)`` head output.

    ``batch`` is anything with ``objectness``, ``regression`` and ``positive``.
    """
    cls, gc = focal_cls_loss(raw[..., 0], batch.objectness)
    reg, gr = smooth_l1_reg_loss(raw[..., 1:], batch.regression, batch.positive)
    g_cls = np.zeros_like(raw)
    g_cls[..., 0] = gc
    g_reg = np.zeros_like(raw)
    g_reg[..., 1:] = gr
    return cls, reg, g_cls, g_reg


def to_standard_batch(converters: dict[str, ConverterPair], cav: np.ndarray,
                      mods: np.ndarray) -> tuple[np.ndarray, dict]:
    """Convert ``(P, H, W, C)`` maps of mixed modality, one converter call per modality."""
    out = np.zeros_like(cav)
    groups = {}
    for m in MODALITIES:
        idx = np.nonzero(mods == m)[0]
        if idx.size:
            out[idx] = converters[m].to_std.forward(cav[idx])
            groups[m] = idx
    return out, groups


def to_standard_backward(converters: dict[str, ConverterPair], grad: np.ndarray, groups: dict) -> None:
    for m, idx in groups.items():
        converters[m].to_std.backward(grad[idx])


@dataclass
class CollabState:
    """Intermediates of one collaborative forward pass, kept for backward."""

    method: str
    lam: float
    k: int
    groups: dict = field(default_factory=dict)
    gather: Gather | None = None
    rows: np.ndarray | None = None
    decoded: np.ndarray | None = None
    idx: np.ndarray | None = None
    erased: np.ndarray | None = None
    shape: tuple = ()


def _channel_pass(r: np.ndarray, channel: str, snrs: np.ndarray, rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pack channel and ZF equalization on interleaved ``(P, K, 2C)`` symbols."""
    c = to_complex(r)
    out = np.empty_like(c)
    erased = np.zeros(c.shape, dtype=bool)
    for p in range(c.shape[0]):
        y, h, _ = apply_channel(c[p], channel, float(snrs[p]), rng)
        out[p], erased[p] = zero_force(y, h)
    return to_interleaved(out), erased


def collab_forward(model: CMSCModel, batch: Batch, method: str, lam: float, channel: str,
                   snrs, rng: np.random.Generator) -> tuple[np.ndarray, CollabState]:
    """Raw head output ``(N, H, W, 5)`` of the ego after fusing received CAV maps.

    ``snrs`` is a scalar or one SNR (dB) per CAV pack in ``(N * V)`` order.
    """
    if method not in METHODS:
        msg = f"unknown method {method!r}; expected one of {METHODS}"
        raise ContractError(msg)
    n, v = batch.n, batch.num_cavs
    h, w, c = batch.ego.shape[1:]
    p = n * v
    cav = batch.cav.reshape(p, h, w, c)
    mods = batch.cav_modalities.reshape(p)
    snrs = np.broadcast_to(np.asarray(snrs, dtype=np.float64), (p,))
    state = CollabState(method, float(lam), num_selected(lam, h, w), shape=(p, h, w, c))
    converters = model.converters_for(method)
    ego_pair = converters[batch.ego_modality]

    if method == "baseline_jscc":
        std = cav
    else:
        std, state.groups = to_standard_batch(converters, cav, mods)

    if method == "upper_bound":
        dense = std
    elif method in QAM_ORDER:
        order = QAM_ORDER[method]
        k = num_selected(parity_lambda(lam, order), h, w)
        state.k = k
        imp = model.selector.forward(std)
        rows, idx = Gather().forward((std, imp, k))
        dec, _ = transmit_classic_batch(rows, order, channel, snrs, rng)
        dense = scatter_rows(dec, idx, (h, w))
    else:
        selector, encoder, decoder = model.codec_for(method)
        imp = selector.forward(std)
        state.gather = Gather()
        rows, idx = state.gather.forward((std, imp, state.k))
        sym = encoder.forward(rows)
        recv, state.erased = _channel_pass(sym, channel, snrs, rng)
        dec = decoder.forward(recv)
        state.rows, state.decoded, state.idx = rows, dec, idx
        dense = scatter_rows(dec, idx, (h, w))

    aligned = dense if method == "baseline_jscc" else ego_pair.from_std.forward(dense)
    stack = np.concatenate([batch.ego[None], aligned.reshape(n, v, h, w, c).transpose(1, 0, 2, 3, 4)])
    raw = model.head_for(method, batch.ego_modality).forward(stack)
    return raw, state


def reconstruction_loss(state: CollabState, n_scenes: int) -> tuple[float, np.ndarray]:
    """``sum_i MSE(F_hat_i, F_i)`` over CAV packs, averaged over scenes.

    The selected features ``F_i`` act as a fixed target.
    """
    if state.decoded is None:
        msg = "reconstruction loss needs a JSCC forward pass"
        raise ContractError(msg)
    per = state.decoded[0].size
    diff = state.decoded - state.rows
    value = float(np.sum(diff * diff) / per / n_scenes)
    return value, 2.0 * diff / per / n_scenes


def collab_backward(model: CMSCModel, batch: Batch, state: CollabState, g_raw: np.ndarray,
                    g_decoded: np.ndarray | None = None, *, through_converters: bool = True) -> None:
    """Accumulate parameter gradients for a cmsc, baseline_jscc or upper_bound pass."""
    if state.method not in ("cmsc", "baseline_jscc", "upper_bound"):
        msg = f"backward is only defined for learned or lossless transmission, not {state.method!r}"
        raise ContractError(msg)
    p, h, w, c = state.shape
    converters = model.converters_for(state.method)
    g_stack = model.head_for(state.method, batch.ego_modality).backward(g_raw)
    g_aligned = g_stack[1:].transpose(1, 0, 2, 3, 4).reshape(p, h, w, c)
    if state.method == "baseline_jscc":
        g_dense = g_aligned
    else:
        g_dense = converters[batch.ego_modality].from_std.backward(g_aligned)
    if state.method == "upper_bound":
        if through_converters:
            to_standard_backward(converters, g_dense, state.groups)
        return
    g_dec = scatter_rows_backward(g_dense, state.idx)
    if g_decoded is not None:
        g_dec = g_dec + g_decoded
    selector, encoder, decoder = model.codec_for(state.method)
    g_recv = decoder.backward(g_dec)
    # ZF output is c + n / h, so the channel passes gradients through unchanged
    erased = np.repeat(state.erased, 2, axis=-1)
    g_sym = np.where(erased, 0.0, g_recv)
    g_rows = encoder.backward(g_sym)
    g_std, g_imp = state.gather.backward(g_rows)
    g_std = g_std + selector.backward(g_imp)
    if state.method == "cmsc" and through_converters:
        to_standard_backward(converters, g_std, state.groups)


def homogeneous_forward(model: CMSCModel, batch: Batch) -> np.ndarray:
    """Head output when every vehicle shares the ego modality and maps arrive intact."""
    if np.any(batch.cav_modalities != batch.ego_modality):
        msg = "homogeneous pass needs every CAV in the ego modality"
        raise ContractError(msg)
    stack = np.concatenate([batch.ego[None], batch.cav.transpose(1, 0, 2, 3, 4)])
    return model.heads[batch.ego_modality].forward(stack)
