"""Toy BEV segmentation with and without a learned prior.

Noisy per-cell "sensor" features are fused with prior features through
``conv_fuse`` and classified by a 1x1 head. A sensor-only baseline uses the
same fusion op with a zero-channel prior. The fused model trains with random
patch masking so it can fall back to the sensor path when the prior is
missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..fusion import ConvFuseWeights, conv_fuse_backward, conv_fuse_forward
from ..geo import GridSpec, Pose2, apply_pose, make_ego_grid, patch_mask
from ..prior_store import PriorModel
from ..tensor_nn import AdamW, MlpWeights, lr_at, mlp_backward, mlp_forward, weighted_cross_entropy
from .raster import RasterMap
from .synth import synth_map


@dataclass
class ToyFusionConfig:
    seed: int = 0
    world_m: float = 256.0
    grid: int = 32
    sensor_channels: int = 8
    sensor_noise: float = 1.5
    prior_table_size: int = 2**12
    prior_widths: tuple[int, ...] = (32, 32, 16)
    mask_ratio: float = 0.25
    mask_patch: int = 8
    steps: int = 800
    lr: float = 5e-3
    table_lr: float = 1e-2
    warmup_steps: int = 50
    eval_samples: int = 64
    margin_m: float = 24.0


def _lookup(raster: RasterMap, pts: np.ndarray) -> np.ndarray:
    c = np.clip((pts[..., 0] / raster.meters_per_cell).astype(np.int64), 0, raster.width - 1)
    r = np.clip((pts[..., 1] / raster.meters_per_cell).astype(np.int64), 0, raster.height - 1)
    return raster.data[r, c]


class _Scenes:
    """Draws posed ego crops with labels and noisy sensor features."""

    def __init__(self, raster: RasterMap, cfg: ToyFusionConfig, seed: int):
        self.raster = raster
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.ego = make_ego_grid(GridSpec(cfg.grid, cfg.grid, float(cfg.grid)))

    def draw(self):
        cfg, rng = self.cfg, self.rng
        lo, hi = cfg.margin_m, cfg.world_m - cfg.margin_m
        pose = Pose2.from_angle(rng.uniform(-math.pi, math.pi), *rng.uniform(lo, hi, size=2))
        pts = apply_pose(self.ego, pose)
        labels = _lookup(self.raster, pts).astype(np.int64)
        sensor = rng.normal(0.0, cfg.sensor_noise, size=(cfg.grid, cfg.grid, cfg.sensor_channels))
        sensor[..., :self.raster.classes] += np.eye(self.raster.classes)[labels]
        return pts, labels, sensor


class _FusionNet:
    def __init__(self, cfg: ToyFusionConfig, classes: int, prior: PriorModel | None, rng):
        g, cs = cfg.grid, cfg.sensor_channels
        self.prior = prior
        cp = prior.out_dim if prior is not None else 0
        self.fuse = ConvFuseWeights.init(g, g, cs, cp, rng)
        self.head = MlpWeights.init([cs, classes], rng)
        self.mask_token = np.zeros(cp)
        self.params = {**self.fuse.named("fuse"), **self.head.named("head")}
        if prior is not None:
            self.params.update(prior.named())
            self.params["mask_token"] = self.mask_token

    def forward(self, pts, sensor, mask=None):
        g = sensor.shape[0]
        if self.prior is None:
            x_prior, pcache = np.zeros((g, g, 0)), None
        else:
            feats, pcache = self.prior.forward(pts.reshape(-1, 2))
            x_prior = feats.reshape(g, g, -1)
            if mask is not None:
                x_prior = np.where(mask[..., None], self.mask_token, x_prior)
        fused, fcache = conv_fuse_forward(sensor, x_prior, self.fuse)
        logits, hcache = mlp_forward(fused, self.head)
        return logits, (pcache, fcache, hcache, mask)

    def backward(self, cache, g_logits):
        pcache, fcache, hcache, mask = cache
        g_fused, grads = mlp_backward(self.head, hcache, g_logits, "head")
        _, g_prior, fgrads = conv_fuse_backward(self.fuse, fcache, g_fused, "fuse")
        grads.update(fgrads)
        if self.prior is not None:
            if mask is not None:
                grads["mask_token"] = g_prior[mask].sum(axis=0)
                g_prior = np.where(mask[..., None], 0.0, g_prior)
            else:
                grads["mask_token"] = np.zeros_like(self.mask_token)
            grads.update(self.prior.backward(pcache, g_prior.reshape(-1, g_prior.shape[-1])))
        return grads


def _train(net: _FusionNet, scenes: _Scenes, cfg: ToyFusionConfig, classes: int, masking: bool):
    tables = [k for k in net.params if k.startswith("table.")]
    opt = AdamW(
        net.params, lr=cfg.lr, param_lr={k: cfg.table_lr for k in tables},
        param_decay={k: 0.0 for k in tables},
    )
    weights = np.ones(classes)
    for step in range(cfg.steps):
        pts, labels, sensor = scenes.draw()
        mask = None
        if masking and net.prior is not None:
            mask = patch_mask(cfg.grid, cfg.grid, cfg.mask_ratio, cfg.seed * 100003 + step, cfg.mask_patch)
        logits, cache = net.forward(pts, sensor, mask)
        _, g_logits = weighted_cross_entropy(logits, labels, weights)
        opt.step(net.backward(cache, g_logits), lr_scale=lr_at(step, cfg.steps, cfg.warmup_steps, 1.0))


def _accuracy(net: _FusionNet, samples, full_mask: bool) -> float:
    correct = total = 0
    for pts, labels, sensor in samples:
        mask = np.ones(labels.shape, dtype=bool) if full_mask else None
        logits, _ = net.forward(pts, sensor, mask)
        correct += int((logits.argmax(axis=-1) == labels).sum())
        total += labels.size
    return correct / total


def toy_fusion_experiment(cfg: ToyFusionConfig | None = None) -> dict[str, float]:
    """Held-out accuracy of the fused model (with and without its prior) and of the baseline."""
    cfg = cfg or ToyFusionConfig()
    raster = synth_map(cfg.seed, area_m=cfg.world_m, meters_per_cell=1.0, n_roads=4, road_width=(6.0, 12.0))
    rng = np.random.default_rng(cfg.seed)
    prior = PriorModel.create(
        raster.coverage, table_size=cfg.prior_table_size, mlp_widths=cfg.prior_widths, rng=rng
    )
    fused = _FusionNet(cfg, raster.classes, prior, rng)
    baseline = _FusionNet(cfg, raster.classes, None, rng)
    _train(fused, _Scenes(raster, cfg, cfg.seed + 1), cfg, raster.classes, masking=True)
    _train(baseline, _Scenes(raster, cfg, cfg.seed + 1), cfg, raster.classes, masking=False)
    held_out = _Scenes(raster, cfg, cfg.seed + 7919)
    samples = [held_out.draw() for _ in range(cfg.eval_samples)]
    return {
        "with_prior": _accuracy(fused, samples, full_mask=False),
        "without_prior": _accuracy(baseline, samples, full_mask=False),
        "fully_masked_prior": _accuracy(fused, samples, full_mask=True),
    }
