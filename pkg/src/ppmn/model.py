"""SC-PPMN, CTM-PPMN and MC-PPMN assembled from encoders, pyramid modules and the fusion head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, concat, cross_entropy, flatten, relu, softmax2
from .config import ConfigError, ModelConfig
from .ctm import extract_batch
from .encoders import CTMEncoder, SCEncoder
from .layers import Dense
from .params import CheckpointError, ParamStore, load_checkpoint, read_checkpoint
from .pyramid import CorrespondenceMaps, PyramidMatch

FUSED_SITES = 5 * 3

CHANNELS = {"sc": ("sc",), "ctm": ("ctm",), "mc": ("sc", "ctm")}


@dataclass
class Views:
    """A batch of images in both input forms: RGB (N,3,160,80) and CTM stacks (N,64,40,20)."""

    rgb: np.ndarray | None = None
    ctm: np.ndarray | None = None

    @classmethod
    def from_images(cls, images, channels=("sc", "ctm")) -> "Views":
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        rgb = np.ascontiguousarray(images.transpose(0, 3, 1, 2)) if "sc" in channels else None
        ctm = extract_batch(images) if "ctm" in channels else None
        return cls(rgb, ctm)

    def __len__(self) -> int:
        arr = self.rgb if self.rgb is not None else self.ctm
        return 0 if arr is None else arr.shape[0]

    def take(self, index) -> "Views":
        return Views(
            None if self.rgb is None else self.rgb[index],
            None if self.ctm is None else self.ctm[index],
        )


@dataclass
class PairScore:
    p: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    maps: dict[str, CorrespondenceMaps] = field(default_factory=dict)


class PPMN:
    """Pair-matching network; ``cfg.variant`` picks which channels are built."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore()
        self.channels = CHANNELS[cfg.variant]
        rng = np.random.default_rng(seed)
        self.encoders = {}
        self.pyramids = {}
        for ch in self.channels:
            # per-channel generators keep a channel's init independent of the variant
            ch_rng = np.random.default_rng([seed, 1 if ch == "sc" else 2])
            if ch == "sc":
                enc = SCEncoder(self.store, "sc.enc", cfg.sc_widths, cfg.sc_channels, ch_rng)
            else:
                enc = CTMEncoder(self.store, "ctm.enc", cfg.ctm_widths, cfg.ctm_channels, ch_rng)
            self.encoders[ch] = enc
            self.pyramids[ch] = PyramidMatch(self.store, f"{ch}.pyr", enc.out_channels,
                                             cfg.branch_channels, cfg.fuse_channels, ch_rng)
        in_dim = len(self.channels) * cfg.fuse_channels * FUSED_SITES
        self.fc1 = Dense(self.store, "head.fc1", in_dim, cfg.head_width, rng)
        self.fc2 = Dense(self.store, "head.fc2", cfg.head_width, cfg.head_width, rng)
        self.out = Dense(self.store, "head.out", cfg.head_width, 2, rng)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    # -- stages -----------------------------------------------------------

    def encode(self, views: Views) -> dict[str, Tensor]:
        reps = {}
        for ch in self.channels:
            arr = views.rgb if ch == "sc" else views.ctm
            if arr is None:
                raise ValueError(f"{self.variant} model needs {ch} inputs")
            reps[ch] = self.encoders[ch](Tensor(arr))
        return reps

    def match(self, reps_a: dict[str, Tensor], reps_b: dict[str, Tensor]) -> dict[str, CorrespondenceMaps]:
        return {ch: self.pyramids[ch](reps_a[ch], reps_b[ch]) for ch in self.channels}

    def head(self, fused: dict[str, Tensor]) -> Tensor:
        """Two-unit scores from the fused maps, flattened in SC-then-CTM order."""
        flat = [flatten(fused[ch]) for ch in self.channels]
        x = flat[0] if len(flat) == 1 else concat(flat, axis=1)
        x = relu(self.fc1(x))
        x = relu(self.fc2(x))
        return self.out(x)

    def units(self, views_a: Views, views_b: Views) -> tuple[Tensor, dict[str, CorrespondenceMaps]]:
        maps = self.match(self.encode(views_a), self.encode(views_b))
        return self.head({ch: m.fused for ch, m in maps.items()}), maps

    # -- public API ---------------------------------------------------------

    def forward(self, views_a: Views, views_b: Views) -> PairScore:
        units, maps = self.units(views_a, views_b)
        p = softmax2(units)
        return PairScore(p.data.copy(), units.data[:, 0].copy(), units.data[:, 1].copy(), maps)

    def forward_pair(self, img_a: np.ndarray, img_b: np.ndarray) -> PairScore:
        """Score one probe/gallery image pair (160x80x3 arrays in [0, 1])."""
        va = Views.from_images(img_a, self.channels)
        vb = Views.from_images(img_b, self.channels)
        return self.forward(va, vb)

    def loss(self, views_a: Views, views_b: Views, labels) -> Tensor:
        """Mean cross-entropy; call inside an active :class:`Tape` to get gradients."""
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("loss on an empty batch")
        units, _ = self.units(views_a, views_b)
        return cross_entropy(softmax2(units), labels)

    def loss_and_grads(self, views_a: Views, views_b: Views, labels) -> float:
        self.store.zero_grad()
        with Tape() as tape:
            loss = self.loss(views_a, views_b, labels)
        if len(tape):
            tape.backward(loss)
        return float(loss.data)

    def score_matrix(self, probes: Views, gallery: Views, chunk: int = 256) -> np.ndarray:
        """p for every (probe, gallery) pair, probe always first; shape (P, G)."""
        reps_p = self.encode(probes)
        reps_g = self.encode(gallery)
        n_p, n_g = len(probes), len(gallery)
        ii, jj = np.meshgrid(np.arange(n_p), np.arange(n_g), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        out = np.empty(ii.size)
        for start in range(0, ii.size, chunk):
            sl = slice(start, start + chunk)
            ra = {ch: Tensor(r.data[ii[sl]]) for ch, r in reps_p.items()}
            rb = {ch: Tensor(r.data[jj[sl]]) for ch, r in reps_g.items()}
            maps = self.match(ra, rb)
            out[sl] = softmax2(self.head({ch: m.fused for ch, m in maps.items()})).data
        return out.reshape(n_p, n_g)

    def load(self, path) -> None:
        load_checkpoint(self.store, path)


def assemble_mc(sc_model: PPMN, ctm_model: PPMN, seed: int = 0) -> PPMN:
    """MC model whose channel parameters are copies of the donors', frozen; only the head trains."""
    if sc_model.variant != "sc" or ctm_model.variant != "ctm":
        raise ConfigError("assemble_mc needs an SC-PPMN and a CTM-PPMN donor")
    a, b = sc_model.cfg, ctm_model.cfg
    if (a.branch_channels, a.fuse_channels) != (b.branch_channels, b.fuse_channels):
        raise ConfigError("SC and CTM donors must share branch_channels and fuse_channels")
    cfg = dataclasses.replace(
        a, variant="mc", ctm_widths=b.ctm_widths, ctm_channels=b.ctm_channels,
    )
    mc = PPMN(cfg, seed=seed)
    for donor, prefix in ((sc_model, "sc."), (ctm_model, "ctm.")):
        for p in donor.store.group(prefix):
            target = mc.store[p.name]
            if target.shape != p.shape:
                raise CheckpointError(f"parameter {p.name}: donor shape {p.shape} vs {target.shape}")
            target.assign(p.data)
            target.frozen = True
    return mc


def assemble_mc_from_checkpoints(cfg: ModelConfig, sc_path, ctm_path, seed: int = 0) -> PPMN:
    """Build an MC model from two channel checkpoints, checking shapes against ``cfg``."""
    mc = PPMN(dataclasses.replace(cfg, variant="mc"), seed=seed)
    for path, prefix in ((sc_path, "sc."), (ctm_path, "ctm.")):
        names = {name for name, _, _ in read_checkpoint(path)}
        if not any(n.startswith(prefix) for n in names):
            raise CheckpointError(f"{path}: holds no {prefix.rstrip('.')} channel parameters")
        load_checkpoint(mc.store, path, prefix_map={prefix: prefix}, keep_frozen_flags=False)
    mc.store.freeze("sc.")
    mc.store.freeze("ctm.")
    return mc
