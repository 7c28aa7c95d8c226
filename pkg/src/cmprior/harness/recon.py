"""Prior-only semantic map reconstruction.

Trains the hash tables, the projection MLP and a small probe jointly on
(cell center -> class) pairs, then scores every cell of the raster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from ..prior_store import PriorModel
from ..tensor_nn import AdamW, MlpWeights, lr_at, mlp_backward, mlp_forward, weighted_cross_entropy
from .metrics import miou
from .raster import RasterMap

log = logging.getLogger(__name__)


@dataclass
class ReconstructionConfig:
    table_size: int = 2**12
    n_levels: int = 4
    feature_dim: int = 8
    s_min: float = 1.0
    s_max: float = 25.0
    mlp_widths: tuple[int, ...] = (32, 32, 128)
    probe_hidden: int = 64
    binarized: bool = True
    clip_ste: bool = False
    epochs: int = 8
    steps_per_epoch: int = 250
    batch_size: int = 4096
    lr: float = 5e-3
    table_lr: float = 1e-2
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    dtype: str = "float32"
    eval_chunk: int = 1 << 16

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class ReconstructionResult:
    model: PriorModel
    probe: MlpWeights
    ious: np.ndarray
    miou: float
    epoch_losses: list[float] = field(default_factory=list)


def inverse_frequency_weights(raster: RasterMap, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """``1 / (K * frequency)`` per class, clipped to ``[lo, hi]``."""
    freq = raster.class_fractions()
    with np.errstate(divide="ignore"):
        w = 1.0 / (raster.classes * freq)
    return np.clip(w, lo, hi)


def predict_raster(model, probe: MlpWeights, raster: RasterMap, chunk: int = 1 << 16) -> np.ndarray:
    """Argmax class for every cell; ``model`` may be live or a frozen store."""
    n = raster.width * raster.height
    out = np.empty(n, dtype=np.uint8)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        feats, _ = model.forward(raster.cell_centers(idx))
        out[idx] = mlp_forward(feats, probe)[0].argmax(axis=1)
    return out.reshape(raster.height, raster.width)


def train_reconstruction(raster: RasterMap, cfg: ReconstructionConfig) -> ReconstructionResult:
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    model = PriorModel.create(
        raster.coverage, cfg.n_levels, cfg.table_size, cfg.feature_dim, cfg.s_min, cfg.s_max,
        cfg.mlp_widths, cfg.binarized, rng, dtype,
    )
    model.clip_ste = cfg.clip_ste
    probe = MlpWeights.init([model.out_dim, cfg.probe_hidden, raster.classes], rng, dtype)
    params = {**model.named(), **probe.named("probe")}
    tables = [k for k in params if k.startswith("table.")]
    opt = AdamW(
        params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
        param_lr={k: cfg.table_lr for k in tables}, param_decay={k: 0.0 for k in tables},
    )
    weights = (
        np.asarray(cfg.class_weights, dtype=dtype) if cfg.class_weights is not None
        else inverse_frequency_weights(raster).astype(dtype)
    )
    labels_flat = raster.data.reshape(-1)
    n_cells = labels_flat.size
    epoch_losses = []
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            idx = rng.integers(0, n_cells, size=cfg.batch_size)
            feats, cache = model.forward(raster.cell_centers(idx))
            logits, probe_cache = mlp_forward(feats, probe)
            loss, g_logits = weighted_cross_entropy(logits, labels_flat[idx], weights)
            if not np.isfinite(loss):
                raise TrainingError("reconstruction loss diverged", step)
            g_feats, grads = mlp_backward(probe, probe_cache, g_logits, "probe")
            grads.update(model.backward(cache, g_feats))
            scale = lr_at(step, cfg.total_steps, cfg.warmup_steps, 1.0)
            opt.step(grads, lr_scale=scale)
            total += loss
            step += 1
        epoch_losses.append(total / cfg.steps_per_epoch)
        log.info("epoch %d loss %.4f", epoch, epoch_losses[-1])
    pred = predict_raster(model, probe, raster, cfg.eval_chunk)
    ious, mean = miou(pred, raster.data, raster.classes)
    return ReconstructionResult(model, probe, ious, mean, epoch_losses)
