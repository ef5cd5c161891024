"""Relative-depth classification metrics and 3D pose errors."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

PCK_THRESHOLDS_MM = (100.0, 110.0, 120.0, 130.0, 140.0, 150.0)


class DegeneratePoseError(ValueError):
    pass


@dataclass
class BinaryEvalResult:
    accuracy: float
    precision: float | None  # None when no positive predictions
    recall: float | None  # None when no positive labels
    f1: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def binary_metrics(scores, labels, threshold: float = 0.5) -> BinaryEvalResult:
    """Confusion-matrix metrics with prediction = (score >= threshold)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.size == 0:
        raise ValueError("binary_metrics needs at least one sample")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return BinaryEvalResult((tp + tn) / s.size, precision, recall, f1, tp, fp, tn, fn)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_binary(scores, labels, threshold: float = 0.5) -> BinaryEvalResult:
    res = binary_metrics(scores, labels, threshold)
    y = np.asarray(labels).ravel().astype(int)
    if 0 < y.sum() < y.size:
        res.auc = auc(scores, labels)
    return res


# ---------------------------------------------------------------------------
# 3D pose errors; poses are arrays (P, J, 3) or (J, 3) with optional validity (P, J)


def _prep(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    pred, gt = pred.reshape(-1, pred.shape[-2], 3), gt.reshape(-1, gt.shape[-2], 3)
    if valid is None:
        valid = np.ones(pred.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(pred.shape[:2])
    if not valid.any():
        raise ValueError("no valid joints to evaluate")
    return pred, gt, valid


@dataclass
class MpjpeResult:
    total: float
    x: float
    y: float
    z: float


def mpjpe(pred, gt, valid=None) -> MpjpeResult:
    """Mean Euclidean joint error plus mean absolute error per axis (mm)."""
    pred, gt, valid = _prep(pred, gt, valid)
    d = (pred - gt)[valid]
    per_axis = np.abs(d).mean(axis=0)
    return MpjpeResult(float(np.linalg.norm(d, axis=1).mean()), *map(float, per_axis))


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform (rotation with det +1, uniform scale, translation) of ``pred`` onto ``gt``."""
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    sv_g = np.linalg.svd(g0, compute_uv=False)
    if len(sv_g) < 2 or sv_g[1] <= 1e-9 * max(sv_g[0], 1e-300):
        raise DegeneratePoseError("Procrustes needs at least 3 non-collinear ground-truth joints")
    spread = float((p0 * p0).sum())
    if spread == 0.0:
        # a collapsed prediction is still scored: best scale is zero
        return np.broadcast_to(mu_g, gt.shape).copy()
    u, s, vt = np.linalg.svd(p0.T @ g0)
    sign = np.sign(np.linalg.det(u @ vt)) or 1.0
    d = np.array([1.0, 1.0, sign])
    rot = (u * d) @ vt  # applied as row-vector @ rot
    scale = float((s * d).sum() / spread)
    return scale * p0 @ rot + mu_g


def pa_mpjpe(pred, gt, valid=None) -> float:
    """MPJPE after per-pose similarity Procrustes alignment on the valid joints."""
    pred, gt, valid = _prep(pred, gt, valid)
    aligned = np.array(pred)
    for i in range(len(pred)):
        v = valid[i]
        if v.sum() < 3:
            if v.any():
                raise DegeneratePoseError("Procrustes needs at least 3 valid joints")
            continue
        aligned[i, v] = procrustes_align(pred[i, v], gt[i, v])
    return mpjpe(aligned, gt, valid).total


def pck3d(pred, gt, threshold: float = 150.0, valid=None) -> float:
    """Percentage of valid joints with Euclidean error strictly below ``threshold`` mm."""
    pred, gt, valid = _prep(pred, gt, valid)
    err = np.linalg.norm(pred - gt, axis=-1)[valid]
    return float(100.0 * np.mean(err < threshold))


@dataclass
class PoseEvalResult:
    mpjpe_total: float
    mpjpe_x: float
    mpjpe_y: float
    mpjpe_z: float
    pa_mpjpe: float
    pck3d: dict[float, float]

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["pck3d"] = {f"{k:g}": v for k, v in self.pck3d.items()}
        return rec

    def format(self) -> str:
        head = f"{'MPJPE':>8} {'X':>8} {'Y':>8} {'Z':>8} {'PA-MPJPE':>9}"
        head += "".join(f" {f'{t:g}mm':>7}" for t in self.pck3d)
        row = (f"{self.mpjpe_total:8.2f} {self.mpjpe_x:8.2f} {self.mpjpe_y:8.2f} {self.mpjpe_z:8.2f} "
               f"{self.pa_mpjpe:9.2f}")
        row += "".join(f" {v:7.2f}" for v in self.pck3d.values())
        return head + "\n" + row


def evaluate_poses(pred, gt, valid=None, thresholds: Sequence[float] = PCK_THRESHOLDS_MM) -> PoseEvalResult:
    m = mpjpe(pred, gt, valid)
    return PoseEvalResult(m.total, m.x, m.y, m.z, pa_mpjpe(pred, gt, valid),
                          {float(t): pck3d(pred, gt, t, valid) for t in thresholds})


# ---------------------------------------------------------------------------
# relative-depth protocol table


@dataclass
class RdCell:
    protocol: str  # "plain" | "ankle_masked"
    threshold: float
    n: int
    result: BinaryEvalResult | None  # None when the bucket is empty


def rd_protocol_report(scores, labels, delta_s, ankle_masked, thresholds=(1.0, 0.5, 0.3, 0.1)) -> list[RdCell]:
    """Metrics for every (protocol, scale-gap bucket) cell."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    delta_s = np.asarray(delta_s, dtype=np.float64)
    masked = np.asarray(ankle_masked, dtype=bool)
    if np.any(np.isnan(delta_s)):
        raise ValueError("every pair needs a scale gap ratio")
    cells = []
    for name, sel in (("plain", ~masked), ("ankle_masked", masked)):
        if not sel.any():
            continue
        for t in thresholds:
            m = sel & (delta_s <= t)
            res = evaluate_binary(scores[m], labels[m]) if m.any() else None
            cells.append(RdCell(name, float(t), int(m.sum()), res))
    return cells


def _pct(v) -> str:
    return "    n/a" if v is None else f"{100 * v:7.2f}"


def format_rd_report(cells: Sequence[RdCell]) -> str:
    lines = [f"{'protocol':<13} {'dS<=':>5} {'n':>6} {'AUC':>7} {'Acc':>7} {'P':>7} {'R':>7} {'F1':>7}"]
    for c in cells:
        r = c.result
        vals = (None,) * 5 if r is None else (r.auc, r.accuracy, r.precision, r.recall, r.f1)
        lines.append(f"{c.protocol:<13} {c.threshold:>5.1f} {c.n:>6d} " + " ".join(_pct(v) for v in vals))
    return "\n".join(lines)


def rd_report_records(cells: Sequence[RdCell]) -> list[dict]:
    out = []
    for c in cells:
        rec = {"protocol": c.protocol, "delta_s_max": c.threshold, "n": c.n}
        if c.result is None:
            rec.update(auc=None, accuracy=None, precision=None, recall=None, f1=None)
        else:
            r = c.result
            rec.update(auc=r.auc, accuracy=r.accuracy, precision=r.precision, recall=r.recall, f1=r.f1)
        out.append(rec)
    return out


def dump_records(records: Sequence[Mapping]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)
