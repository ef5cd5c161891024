"""3D pose head: volumetric heatmaps, soft-argmax integration and L1 fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import nn
from .metrics import mpjpe, pa_mpjpe
from .poses import Pose3D
from .wsp import WspConfig, trunk_layers, TrainingDiverged

log = logging.getLogger(__name__)

AXES = ("x", "y", "z")


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    """Voxel index -> millimetres, per axis (x, y, z): mm = scale * index + offset."""
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def for_crop(cls, heatmap_size: int, depth_bins: int, crop_mm: float, depth_window_mm: float) -> "Calibration":
        """x/y span ``crop_mm`` across the map; z spans +-``depth_window_mm`` around the root."""
        sxy = crop_mm / heatmap_size
        sz = 2.0 * depth_window_mm / depth_bins
        oxy = (0.5 - heatmap_size / 2.0) * sxy
        return cls((sxy, sxy, sz), (oxy, oxy, -depth_window_mm + 0.5 * sz))

    def to_mm(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(idx) * np.array(self.scale) + np.array(self.offset)


@dataclass
class Heatmap3D:
    data: np.ndarray  # (J, Dz, H, W) pre-softmax scores
    calibration: Calibration = Calibration()


def _softmax_volumes(logits: np.ndarray) -> np.ndarray:
    flat = logits.reshape(*logits.shape[:-3], -1)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(logits.shape)


def integral_3d(logits: np.ndarray, axis_order: Sequence[str] = ("z", "y", "x")) -> tuple[np.ndarray, np.ndarray]:
    """Soft-argmax over (..., Dz, H, W) volumes.

    Each joint volume is softmax-normalised, then every coordinate is the
    probability-weighted mean voxel index along its axis.  The marginal for an
    axis is formed by summing out the other two axes in ``axis_order``.
    Returns (coords (..., 3) as x, y, z voxel indices; probabilities).
    """
    if sorted(axis_order) != sorted(AXES):
        raise ValueError(f"axis_order must be a permutation of {AXES}")
    probs = _softmax_volumes(logits)
    lead = probs.ndim - 3
    coords = []
    for name in AXES:
        marg = probs
        remaining = ["z", "y", "x"]  # volume layout (Dz, H, W)
        for other in axis_order:
            if other == name:
                continue
            marg = marg.sum(axis=lead + remaining.index(other))
            remaining.remove(other)
        idx = np.arange(marg.shape[-1], dtype=probs.dtype)
        coords.append(marg @ idx)
    return np.stack(coords, axis=-1), probs


def integral_3d_backward(probs: np.ndarray, coords: np.ndarray, dcoords: np.ndarray) -> np.ndarray:
    """Gradient of the coordinates w.r.t. the pre-softmax volumes."""
    dz, h, w = probs.shape[-3:]
    iz = np.arange(dz, dtype=probs.dtype)[:, None, None]
    iy = np.arange(h, dtype=probs.dtype)[None, :, None]
    ix = np.arange(w, dtype=probs.dtype)[None, None, :]
    e = lambda a: a[..., None, None, None]
    g = (e(dcoords[..., 0]) * (ix - e(coords[..., 0])) + e(dcoords[..., 1]) * (iy - e(coords[..., 1]))
         + e(dcoords[..., 2]) * (iz - e(coords[..., 2])))
    return probs * g


def integrate_heatmap(hm: Heatmap3D) -> Pose3D:
    """Voxel-unit pose from a single (J, Dz, H, W) heatmap."""
    coords, _ = integral_3d(hm.data)
    return Pose3D(coords)


def l1_pose_loss(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over valid joints of the per-joint L1 norm; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    valid = np.ones(pred.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid joints")
    d = (pred - gt) * valid[..., None]
    return float(np.abs(d).sum() / n), (np.sign(d) / n).astype(pred.dtype)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (17, 21)
    lr_decay_factor: float = 0.1
    depth_bins: int = 16
    depth_window_mm: float = 1000.0
    crop_mm: float = 2200.0
    seed: int = 0
    dtype: str = "float64"

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** sum(epoch >= e for e in self.lr_decay_epochs)


def head3d_layers(wcfg: WspConfig, depth_bins: int) -> list[nn.LayerSpec]:
    return [nn.conv2d("head3d.conv", wcfg.feature_dim, wcfg.num_joints * depth_bins, 1, 1, 0)]


class Pose3DModel:
    def __init__(self, wcfg: WspConfig, fcfg: FinetuneConfig, params: nn.ParamStore | None = None):
        self.wcfg, self.fcfg = wcfg, fcfg
        self.trunk = trunk_layers(wcfg)
        self.head = head3d_layers(wcfg, fcfg.depth_bins)
        self.calibration = Calibration.for_crop(wcfg.heatmap_size, fcfg.depth_bins, fcfg.crop_mm, fcfg.depth_window_mm)
        if params is None:
            dtype = np.dtype(fcfg.dtype)
            params = nn.ParamStore(seed=fcfg.seed)
            nn.init_params(self.trunk, fcfg.seed * 1000, dtype, params)
            nn.init_params(self.head, fcfg.seed * 1000 + 7, dtype, params)
        self.params = params

    def _volumes(self, logits: np.ndarray) -> np.ndarray:
        b, _, h, w = logits.shape
        return logits.reshape(b, self.wcfg.num_joints, self.fcfg.depth_bins, h, w)

    def forward(self, x: np.ndarray):
        feats, t_trunk = nn.forward(self.trunk, self.params, x)
        logits, t_head = nn.forward(self.head, self.params, feats)
        coords, probs = integral_3d(self._volumes(logits))
        return self.calibration.to_mm(coords).astype(x.dtype), (t_trunk, t_head, coords, probs)

    def loss_and_grads(self, x: np.ndarray, target: np.ndarray, valid: np.ndarray | None = None) -> float:
        pred, (t_trunk, t_head, coords, probs) = self.forward(x)
        loss, dpred = l1_pose_loss(pred, target, valid)
        dcoords = dpred * np.array(self.calibration.scale, dtype=dpred.dtype)
        dvol = integral_3d_backward(probs, coords, dcoords)
        dfeats = nn.backward(t_head, dvol.reshape(t_head.out_shape), self.params)
        nn.backward(t_trunk, dfeats, self.params)
        return loss

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[s:s + batch_size])[0] for s in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.wcfg.num_joints, 3))


def predict_pose(model: Pose3DModel, crop: np.ndarray) -> Pose3D:
    """Root-relative pose (mm) for one network-ready crop (C, S, S)."""
    expect = (model.wcfg.in_channels, model.wcfg.input_size, model.wcfg.input_size)
    crop = np.asarray(crop)
    if crop.ndim == 2:
        crop = crop[None]
    if crop.shape != expect:
        raise ValueError(f"crop shape {crop.shape} != expected {expect}")
    dtype = next(iter(model.params.params.values())).dtype
    return Pose3D(model.forward(crop[None].astype(dtype))[0][0])


def load_trunk(model: Pose3DModel, tensors: dict[str, np.ndarray]) -> None:
    """Copy trunk tensors from a pre-training checkpoint; raises listing every mismatch."""
    problems = []
    for name in model.params.names():
        if not name.startswith("trunk."):
            continue
        if name not in tensors:
            problems.append(f"{name}: missing")
        elif tensors[name].shape != model.params[name].shape:
            problems.append(f"{name}: shape {tensors[name].shape} != {model.params[name].shape}")
    for name in tensors:
        if name.startswith("trunk.") and name not in model.params:
            problems.append(f"{name}: unexpected")
    if problems:
        raise IncompatibleCheckpoint("checkpoint does not match the configured backbone:\n  " + "\n  ".join(problems))
    for name in model.params.names():
        if name.startswith("trunk."):
            model.params.params[name][...] = tensors[name]


# ---------------------------------------------------------------------------
# data


@dataclass
class Pose3DSet:
    images: np.ndarray  # (N, C, S, S)
    targets: np.ndarray  # (N, J, 3) root-relative mm
    valid: np.ndarray  # (N, J)

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "Pose3DSet":
        return Pose3DSet(self.images[idx], self.targets[idx], self.valid[idx])


def sample_square(image: np.ndarray, cx: float, cy: float, side: float, size: int) -> np.ndarray:
    """Resample the square of ``side`` pixels centred on (cx, cy) to size x size; outside is zero."""
    scale = size / side
    src = image.astype(np.float64)
    if scale < 1.0:
        src = ndimage.gaussian_filter(src, sigma=0.5 * (1.0 / scale - 1.0), mode="constant")
    t = cx - side / 2 + (np.arange(size) + 0.5) / scale - 0.5
    u = cy - side / 2 + (np.arange(size) + 0.5) / scale - 0.5
    gy, gx = np.meshgrid(u, t, indexing="ij")
    return ndimage.map_coordinates(src, [gy, gx], order=1, mode="constant", cval=0.0)


def person_crop_side(focal: float, root_depth: float, crop_mm: float) -> float:
    return focal * crop_mm / root_depth


def train_finetune(model: Pose3DModel, train: Pose3DSet, val: Pose3DSet, fcfg: FinetuneConfig,
                   on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fine-tuning needs non-empty train and validation sets")
    rng = np.random.default_rng(fcfg.seed)
    history = []
    last_good = model.params.copy()
    for epoch in range(fcfg.epochs):
        lr = fcfg.lr_at(epoch)
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), fcfg.batch_size):
            idx = np.sort(order[start:start + fcfg.batch_size])
            loss = model.loss_and_grads(train.images[idx], train.targets[idx], train.valid[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, history)
            try:
                nn.sgd_step(model.params, lr, fcfg.momentum)
            except nn.NumericError as e:
                raise TrainingDiverged(f"{e} at epoch {epoch}", last_good, history) from None
            total += loss * len(idx)
        rec = {"epoch": epoch, "lr": lr, "loss": total / len(train)}
        rec.update(evaluate_3d(model, val))
        history.append(rec)
        last_good = model.params.copy()
        log.info("epoch %d loss %.2f val_mpjpe %.2f (z %.2f)", epoch, rec["loss"], rec["val_mpjpe"], rec["val_mpjpe_z"])
        if on_epoch is not None:
            on_epoch(rec)
    return history


def evaluate_3d(model: Pose3DModel, data: Pose3DSet) -> dict:
    pred = model.predict(data.images).astype(np.float64)
    m = mpjpe(pred, data.targets, data.valid)
    return {"val_mpjpe": m.total, "val_mpjpe_x": m.x, "val_mpjpe_y": m.y, "val_mpjpe_z": m.z,
            "val_pa_mpjpe": pa_mpjpe(pred, data.targets, data.valid)}


def person_crops(image: np.ndarray, poses: Sequence[np.ndarray], camera, wcfg: WspConfig, fcfg: FinetuneConfig,
                 root_joint: int = 0) -> Pose3DSet:
    """One network-ready crop per person from a rendered image.

    ``poses`` are camera-frame joints (mm) and ``camera`` the intrinsics at the
    image's resolution.  The square crop is centred on the projected root and
    covers ``crop_mm`` at the root depth, so millimetres near the root map to a
    fixed heatmap scale.
    """
    images, targets = [], []
    for pose in poses:
        pose = np.asarray(pose, dtype=np.float64)
        root = pose[root_joint]
        u = camera.focal * root[0] / root[2] + camera.cx
        v = camera.focal * root[1] / root[2] + camera.cy
        side = person_crop_side(camera.focal, root[2], fcfg.crop_mm)
        images.append(sample_square(image, u, v, side, wcfg.input_size))
        targets.append(pose - root)
    n, j, s = len(targets), wcfg.num_joints, wcfg.input_size
    imgs = np.repeat(np.array(images, dtype=np.float32).reshape(n, 1, s, s), wcfg.in_channels, axis=1)
    return Pose3DSet(imgs, np.array(targets, dtype=np.float64).reshape(n, j, 3), np.ones((n, j), dtype=bool))


def concat_sets(sets: Sequence[Pose3DSet]) -> Pose3DSet:
    return Pose3DSet(np.concatenate([s.images for s in sets]), np.concatenate([s.targets for s in sets]),
                     np.concatenate([s.valid for s in sets]))
