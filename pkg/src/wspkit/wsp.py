"""Relative-depth pre-training network.

Backbone (strided convs, then transposed convs back to heatmap resolution)
yields features F of shape (D, H, W).  A 1x1 conv predicts J joint heatmaps M.
Per person, the features are masked by each joint's heatmap and averaged over
that person's box, giving a (J, D) matrix.  For N randomly chosen joints the
two persons' vectors are concatenated and classified by a small MLP:
P(person A at most as deep as person B).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .anno import PersonInstance
from .metrics import auc as auc_score, binary_metrics
from .pairs import PairSample, crop_pixels, letterbox

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class WspConfig:
    num_joints: int = 17
    num_selected: int = 4
    heatmap_sigma: float = 2.0
    alpha: float = 50.0
    input_size: int = 64
    heatmap_size: int = 16
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 32, 32)
    deconv_channels: tuple[int, ...] = (32, 32)
    rd_hidden: int = 32

    def __post_init__(self):
        if not 1 <= self.num_selected < self.num_joints:
            raise ValueError("need 1 <= N < J")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.input_size % self.heatmap_size:
            raise ValueError("heatmap_size must divide input_size")
        if self.heatmap_sigma <= 0:
            raise ValueError("heatmap_sigma must be positive")
        bottom = self.input_size / 2 ** len(self.stage_channels)
        if bottom * 2 ** len(self.deconv_channels) != self.heatmap_size:
            raise ValueError(f"{len(self.stage_channels)} stride-2 stages and {len(self.deconv_channels)} "
                             f"upsampling layers do not map {self.input_size} to {self.heatmap_size}")

    @property
    def feature_dim(self) -> int:
        return self.deconv_channels[-1]

    @property
    def stride(self) -> int:
        return self.input_size // self.heatmap_size

    @classmethod
    def resnet50_shape(cls) -> "WspConfig":
        """Full-size tensor shapes (256 input, 64 heatmap, 2048-wide trunk); weights are not pre-trained."""
        return cls(input_size=256, heatmap_size=64, in_channels=3,
                   stage_channels=(64, 256, 512, 1024, 2048), deconv_channels=(256, 256, 256), rd_hidden=256)


def trunk_layers(cfg: WspConfig) -> list[nn.LayerSpec]:
    layers: list[nn.LayerSpec] = []
    cin = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels):
        layers += [nn.conv2d(f"trunk.conv{i + 1}", cin, c, 3, 2, 1), nn.relu()]
        cin = c
    for i, c in enumerate(cfg.deconv_channels):
        layers += [nn.transposed_conv2d(f"trunk.deconv{i + 1}", cin, c, 4, 2, 1), nn.relu()]
        cin = c
    return layers


def heatmap_head(cfg: WspConfig) -> list[nn.LayerSpec]:
    return [nn.conv2d("hm.conv", cfg.feature_dim, cfg.num_joints, 1, 1, 0)]


def rd_head(cfg: WspConfig) -> list[nn.LayerSpec]:
    d = cfg.feature_dim
    return [nn.fully_connected("rd.fc1", 2 * d, cfg.rd_hidden), nn.relu(),
            nn.fully_connected("rd.fc2", cfg.rd_hidden, 1), nn.sigmoid()]


# ---------------------------------------------------------------------------
# ground-truth heatmaps


def render_gaussian_stack(joints_hm: np.ndarray, present: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """(J, size, size) unnormalised Gaussians; joint coordinates are heatmap pixel indices."""
    idx = np.arange(size, dtype=np.float64)
    gx = np.exp(-0.5 * ((idx[None, :] - joints_hm[:, 0:1]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((idx[None, :] - joints_hm[:, 1:2]) / sigma) ** 2)
    stack = gy[:, :, None] * gx[:, None, :]
    stack[~np.asarray(present, dtype=bool)] = 0.0
    return stack


def render_gt_heatmaps(persons: Sequence[tuple[np.ndarray, np.ndarray]], cfg: WspConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-person stacks plus their element-wise max.

    ``persons`` holds (joints in heatmap pixel indices (J, 2), presence mask (J,)).
    """
    stacks = [render_gaussian_stack(j, m, cfg.heatmap_size, cfg.heatmap_sigma) for j, m in persons]
    merged = np.maximum.reduce(stacks) if stacks else np.zeros((cfg.num_joints, cfg.heatmap_size, cfg.heatmap_size))
    return stacks, merged


# ---------------------------------------------------------------------------
# masked pooling


def region_weights(bbox: tuple[float, float, float, float], h: int, w: int) -> np.ndarray:
    """(H, W) map equal to 1/area on the heatmap cells the box touches, 0 elsewhere."""
    x, y, bw, bh = bbox
    r0, r1 = max(0, math.floor(y)), min(h, math.ceil(y + bh))
    c0, c1 = max(0, math.floor(x)), min(w, math.ceil(x + bw))
    if r0 >= r1 or c0 >= c1:
        raise ValueError(f"box {bbox} does not intersect the {h}x{w} map")
    out = np.zeros((h, w))
    out[r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
    return out


def pool_batch(feats: np.ndarray, hm: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """feats (B, D, H, W), hm (B, J, H, W), weights (B, H, W) -> (B, J, D)."""
    fw = feats * weights[:, None]
    b, d = feats.shape[:2]
    j = hm.shape[1]
    return np.matmul(hm.reshape(b, j, -1), fw.reshape(b, d, -1).transpose(0, 2, 1))


def pool_batch_backward(feats, hm, weights, dpooled) -> tuple[np.ndarray, np.ndarray]:
    b, d, h, w = feats.shape
    j = hm.shape[1]
    dfw = np.matmul(dpooled.transpose(0, 2, 1), hm.reshape(b, j, -1)).reshape(b, d, h, w)
    dfeats = dfw * weights[:, None]
    dhm = np.matmul(dpooled, (feats * weights[:, None]).reshape(b, d, -1)).reshape(b, j, h, w)
    return dfeats, dhm


def masked_keypoint_pooling(feats: np.ndarray, hm: np.ndarray, bbox: tuple[float, float, float, float]) -> np.ndarray:
    """Single sample: F (D, H, W) masked by each M^j (J, H, W), averaged over ``bbox`` -> (J, D)."""
    if feats.shape[1:] != hm.shape[1:]:
        raise ValueError(f"feature map {feats.shape[1:]} and heatmap {hm.shape[1:]} differ")
    wts = region_weights(bbox, *feats.shape[1:])
    return pool_batch(feats[None], hm[None], wts[None])[0]


# ---------------------------------------------------------------------------
# loss


def select_keypoints(num_joints: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if n >= num_joints:
        raise ValueError(f"cannot select {n} of {num_joints} joints (need N < J)")
    return rng.choice(num_joints, size=n, replace=False)


@dataclass
class PretrainLoss:
    total: float
    hm: float
    rd: float
    d_hm: np.ndarray
    d_rd: np.ndarray
    clamped: int = 0


def pretrain_loss(pred_hm: np.ndarray, gt_hm: np.ndarray, pred_rd: np.ndarray, gt_rd: np.ndarray,
                  cfg: WspConfig, num_persons: int = 2) -> PretrainLoss:
    """L = L_hm + alpha * L_rd for a batch.

    L_hm: squared L2 heatmap error summed over pixels, divided by J * persons,
    averaged over the batch.  L_rd: binary cross-entropy averaged over the
    batch and the selected joints (pred_rd has shape (B, N); gt_rd (B,)).
    """
    if pred_hm.shape != gt_hm.shape:
        raise ValueError(f"heatmap shapes differ: {pred_hm.shape} vs {gt_hm.shape}")
    b, j = pred_hm.shape[:2]
    diff = pred_hm - gt_hm
    norm = b * j * num_persons
    l_hm = float((diff * diff).sum()) / norm
    d_hm = 2.0 * diff / norm

    p = np.asarray(pred_rd, dtype=np.float64)
    y = np.broadcast_to(np.asarray(gt_rd, dtype=np.float64).reshape(-1, *([1] * (p.ndim - 1))), p.shape)
    clamped = int(np.count_nonzero((p < PROB_CLAMP) | (p > 1 - PROB_CLAMP)))
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    l_rd = float(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean())
    d_rd = (pc - y) / (pc * (1 - pc)) / p.size
    return PretrainLoss(l_hm + cfg.alpha * l_rd, l_hm, l_rd, d_hm, (cfg.alpha * d_rd).astype(pred_rd.dtype), clamped)


# ---------------------------------------------------------------------------
# model


@dataclass
class PairBatch:
    images: np.ndarray  # (B, C, S, S)
    heatmaps: np.ndarray  # (B, J, h, w) merged ground truth
    weights_a: np.ndarray  # (B, h, w) pooling weights
    weights_b: np.ndarray
    labels: np.ndarray  # (B,)
    delta_s: np.ndarray | None = None
    ankle_masked: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PairBatch":
        pick = lambda a: None if a is None else a[idx]
        return PairBatch(self.images[idx], self.heatmaps[idx], self.weights_a[idx], self.weights_b[idx],
                         self.labels[idx], pick(self.delta_s), pick(self.ankle_masked))


class WspModel:
    def __init__(self, cfg: WspConfig, seed: int = 0, dtype=np.float64, params: nn.ParamStore | None = None):
        self.cfg = cfg
        self.trunk = trunk_layers(cfg)
        self.hm_head = heatmap_head(cfg)
        self.rd_head = rd_head(cfg)
        if params is None:
            params = nn.ParamStore(seed=seed)
            for i, net in enumerate((self.trunk, self.hm_head, self.rd_head)):
                nn.init_params(net, seed * 1000 + i, dtype, params)
        self.params = params

    def features(self, x: np.ndarray):
        feats, t_trunk = nn.forward(self.trunk, self.params, x)
        hm, t_hm = nn.forward(self.hm_head, self.params, feats)
        return feats, hm, t_trunk, t_hm

    def _pair_inputs(self, pooled_a, pooled_b, selected):
        b = np.arange(len(pooled_a))[:, None]
        fa, fb = pooled_a[b, selected], pooled_b[b, selected]  # (B, N, D)
        return np.concatenate([fa, fb], axis=-1).reshape(-1, 2 * self.cfg.feature_dim)

    def loss_and_grads(self, batch: PairBatch, selected: np.ndarray) -> PretrainLoss:
        """Forward + backward on one batch; gradients accumulate into ``self.params``."""
        cfg = self.cfg
        feats, hm, t_trunk, t_hm = self.features(batch.images)
        pa = pool_batch(feats, hm, batch.weights_a)
        pb = pool_batch(feats, hm, batch.weights_b)
        z = self._pair_inputs(pa, pb, selected)
        probs, t_rd = nn.forward(self.rd_head, self.params, z)
        bsz, n = selected.shape
        res = pretrain_loss(hm, batch.heatmaps, probs.reshape(bsz, n), batch.labels, cfg)

        dz = nn.backward(t_rd, res.d_rd.reshape(-1, 1), self.params).reshape(bsz, n, 2, -1)
        dpa = np.zeros_like(pa)
        dpb = np.zeros_like(pb)
        rows = np.arange(bsz)[:, None]
        np.add.at(dpa, (rows, selected), dz[:, :, 0])
        np.add.at(dpb, (rows, selected), dz[:, :, 1])
        df_a, dhm_a = pool_batch_backward(feats, hm, batch.weights_a, dpa)
        df_b, dhm_b = pool_batch_backward(feats, hm, batch.weights_b, dpb)
        dhm = res.d_hm.astype(hm.dtype) + dhm_a + dhm_b
        dfeats = nn.backward(t_hm, dhm, self.params) + df_a + df_b
        nn.backward(t_trunk, dfeats, self.params)
        return res

    def predict(self, images: np.ndarray, weights_a: np.ndarray, weights_b: np.ndarray) -> np.ndarray:
        """Pair score: mean over all J joints of P(A at most as deep as B)."""
        feats, hm, _, _ = self.features(images)
        pa = pool_batch(feats, hm, weights_a)
        pb = pool_batch(feats, hm, weights_b)
        allj = np.tile(np.arange(self.cfg.num_joints), (len(images), 1))
        probs, _ = nn.forward(self.rd_head, self.params, self._pair_inputs(pa, pb, allj))
        return probs.reshape(len(images), -1).mean(axis=1)

    def predict_batch(self, batch: PairBatch, batch_size: int = 64) -> np.ndarray:
        out = []
        for s in range(0, len(batch), batch_size):
            sl = slice(s, s + batch_size)
            out.append(self.predict(batch.images[sl], batch.weights_a[sl], batch.weights_b[sl]))
        return np.concatenate(out) if out else np.zeros(0)


def rd_head_forward(fa: np.ndarray, fb: np.ndarray, params: nn.ParamStore, cfg: WspConfig) -> float:
    """sigmoid(MLP(fa ++ fb)) for one pair of pooled joint vectors."""
    fa, fb = np.asarray(fa), np.asarray(fb)
    if fa.shape != (cfg.feature_dim,) or fb.shape != (cfg.feature_dim,):
        raise ValueError(f"expected two vectors of length {cfg.feature_dim}, got {fa.shape} and {fb.shape}")
    y, _ = nn.forward(rd_head(cfg), params, np.concatenate([fa, fb])[None])
    return float(y[0, 0])


# ---------------------------------------------------------------------------
# data assembly


def _heatmap_coords(p: PersonInstance, lb, stride: int) -> np.ndarray:
    # input pixel u -> heatmap index (cell centres at integer indices)
    return lb.apply(p.joints) / stride - 0.5


def assemble_pairs(samples: Sequence[PairSample], load_image: Callable[[str], np.ndarray], cfg: WspConfig,
                   dtype=np.float32) -> PairBatch:
    """Crop, letterbox and render targets for every pair sample."""
    n, s, h = len(samples), cfg.input_size, cfg.heatmap_size
    images = np.zeros((n, cfg.in_channels, s, s), dtype=dtype)
    heatmaps = np.zeros((n, cfg.num_joints, h, h), dtype=dtype)
    wa = np.zeros((n, h, h), dtype=dtype)
    wb = np.zeros((n, h, h), dtype=dtype)
    cache: dict[str, np.ndarray] = {}
    for i, smp in enumerate(samples):
        if smp.pixels is not None:
            crop = smp.pixels
        else:
            if smp.image_ref not in cache:
                cache.clear()
                cache[smp.image_ref] = load_image(smp.image_ref)
            crop = crop_pixels(cache[smp.image_ref], smp)
        img, lb = letterbox(crop, s)
        images[i, :] = img
        persons = [(_heatmap_coords(p, lb, cfg.stride), p.visibility > 0) for p in (smp.person_a, smp.person_b)]
        heatmaps[i] = render_gt_heatmaps(persons, cfg)[1]
        for dst, p in ((wa, smp.person_a), (wb, smp.person_b)):
            x, y, bw, bh = lb.apply_box(p.bbox)
            dst[i] = region_weights((x / cfg.stride, y / cfg.stride, bw / cfg.stride, bh / cfg.stride), h, h)
    labels = np.array([smp.label for smp in samples], dtype=dtype)
    ds = np.array([np.nan if smp.delta_s is None else smp.delta_s for smp in samples])
    masked = np.array([smp.ankle_masked for smp in samples], dtype=bool)
    return PairBatch(images, heatmaps, wa, wb, labels, ds, masked)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (20, 25)
    lr_decay_factor: float = 0.1
    seed: int = 0
    dtype: str = "float64"

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** sum(epoch >= e for e in self.lr_decay_epochs)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: nn.ParamStore, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


def format_record(rec: dict) -> str:
    """One JSON line with ``repr``-exact floats (stable across identical runs)."""
    return json.dumps(rec, separators=(",", ":"))


def evaluate_rd(model: WspModel, batch: PairBatch) -> dict:
    scores = model.predict_batch(batch)
    labels = batch.labels.astype(int)
    res = binary_metrics(scores, labels)
    out = {"val_acc": res.accuracy}
    out["val_auc"] = auc_score(scores, labels) if 0 < labels.sum() < len(labels) else float("nan")
    return out


def train_pretrain(model: WspModel, train: PairBatch, val: PairBatch, tcfg: TrainConfig,
                   on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """SGD over pair batches; returns one metrics record per epoch."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("pre-training needs non-empty train and validation sets")
    rng = np.random.default_rng(tcfg.seed)
    history = []
    last_good = model.params.copy()
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        for start in range(0, len(order), tcfg.batch_size):
            idx = np.sort(order[start:start + tcfg.batch_size])
            batch = train.subset(idx)
            selected = np.stack([select_keypoints(model.cfg.num_joints, model.cfg.num_selected, rng) for _ in idx])
            res = model.loss_and_grads(batch, selected)
            if not math.isfinite(res.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, history)
            try:
                nn.sgd_step(model.params, lr, tcfg.momentum)
            except nn.NumericError as e:
                raise TrainingDiverged(f"{e} at epoch {epoch}", last_good, history) from None
            sums += np.array([res.total, res.hm, res.rd]) * len(idx)
        sums /= len(train)
        rec = {"epoch": epoch, "lr": lr, "loss": float(sums[0]), "loss_hm": float(sums[1]),
               "loss_rd": float(sums[2])}
        rec.update(evaluate_rd(model, val))
        history.append(rec)
        last_good = model.params.copy()
        log.info("epoch %d loss %.4f hm %.4f rd %.4f val_auc %.4f", epoch, rec["loss"], rec["loss_hm"],
                 rec["loss_rd"], rec["val_auc"])
        if on_epoch is not None:
            on_epoch(rec)
    return history
