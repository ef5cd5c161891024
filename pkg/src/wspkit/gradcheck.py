"""Finite-difference checks of the full pre-training and fine-tuning objectives on toy shapes."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import nn, pose3d, wsp

TOY_WSP = wsp.WspConfig(num_joints=5, num_selected=3, input_size=16, heatmap_size=4,
                        stage_channels=(3, 4, 4), deconv_channels=(4,), rd_hidden=6)


def _jitter_biases(params: nn.ParamStore, rng: np.random.Generator, scale: float = 0.1) -> None:
    # zero biases put ReLU inputs exactly on the kink wherever a window sees only zeros
    for name, v in params.params.items():
        if name.endswith(".bias"):
            v[...] = rng.normal(0.0, scale, size=v.shape)


def pretrain_problem(seed: int, cfg: wsp.WspConfig = TOY_WSP, batch: int = 2):
    """(objective, params) for the combined heatmap + relative-depth loss on random data."""
    rng = np.random.default_rng(seed)
    model = wsp.WspModel(cfg, seed=seed, dtype=np.float64)
    _jitter_biases(model.params, rng)
    h, s = cfg.heatmap_size, cfg.input_size
    images = rng.normal(size=(batch, cfg.in_channels, s, s))
    heatmaps = rng.uniform(0, 1, size=(batch, cfg.num_joints, h, h))
    wa = np.stack([wsp.region_weights((0.0, 0.0, h / 2, h), h, h)] * batch)
    wb = np.stack([wsp.region_weights((h / 4, h / 4, 3 * h / 4, 3 * h / 4), h, h)] * batch)
    labels = rng.integers(0, 2, size=batch).astype(np.float64)
    pb = wsp.PairBatch(images, heatmaps, wa, wb, labels)
    selected = np.stack([wsp.select_keypoints(cfg.num_joints, cfg.num_selected, rng) for _ in range(batch)])

    def objective(params: nn.ParamStore) -> float:
        model.params = params
        return model.loss_and_grads(pb, selected).total

    return objective, model.params


def finetune_problem(seed: int, cfg: wsp.WspConfig = TOY_WSP, batch: int = 2):
    """(objective, params) for the integral-regression L1 loss; targets sit far from the predictions."""
    rng = np.random.default_rng(seed)
    fcfg = pose3d.FinetuneConfig(depth_bins=4, seed=seed, dtype="float64")
    model = pose3d.Pose3DModel(cfg, fcfg)
    _jitter_biases(model.params, rng)
    x = rng.normal(size=(batch, cfg.in_channels, cfg.input_size, cfg.input_size))
    target = rng.normal(0.0, 400.0, size=(batch, cfg.num_joints, 3))

    def objective(params: nn.ParamStore) -> float:
        model.params = params
        return model.loss_and_grads(x, target)

    return objective, model.params


def run_gradchecks(seed: int = 0, which: Sequence[str] = ("pretrain", "finetune"),
                   max_entries: int | None = 40) -> dict[str, nn.GradCheckReport]:
    problems = {"pretrain": pretrain_problem, "finetune": finetune_problem}
    out = {}
    for name in which:
        objective, params = problems[name](seed)
        out[name] = nn.grad_check(objective, params, max_entries=max_entries, seed=seed)
    return out
