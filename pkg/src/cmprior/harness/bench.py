"""Latency of prior sampling and of a toy end-to-end BEV forward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..fusion import ConvFuseWeights, conv_fuse
from ..geo import GridSpec, Pose2, apply_pose, make_ego_grid
from ..prior_store import prior_features
from ..tensor_nn import MlpWeights, conv3x3_apply, mlp_apply


@dataclass(frozen=True)
class Timing:
    mean_ms: float
    std_ms: float
    runs: int


def _time(fn, runs: int, warmup: int = 2) -> Timing:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    s = np.asarray(samples)
    return Timing(float(s.mean()), float(s.std()), runs)


def _center_pose(store) -> Pose2:
    min_x, min_y, max_x, max_y = store.coverage
    return Pose2.from_angle(0.3, (min_x + max_x) / 2, (min_y + max_y) / 2)


def bench_prior_sampling(store, grid: int = 128, extent: float = 102.4, runs: int = 100) -> Timing:
    """Time a full ``grid x grid`` prior query at the coverage center."""
    pts = apply_pose(make_ego_grid(GridSpec(grid, grid, extent)), _center_pose(store))
    return _time(lambda: prior_features(store, pts), runs)


def bench_end_to_end(
    store, grid: int = 128, extent: float = 102.4, runs: int = 10, width: int = 128,
    encoder_layers: int = 4, classes: int = 10, seed: int = 0,
) -> tuple[Timing, Timing]:
    """Time a toy BEV network (conv encoder, prior sampling, conv fusion, head).

    Returns ``(end_to_end, prior_sampling)`` timings taken over the same runs.
    """
    rng = np.random.default_rng(seed)
    pts = apply_pose(make_ego_grid(GridSpec(grid, grid, extent)), _center_pose(store))
    sensor_in = rng.normal(size=(grid, grid, width)).astype(np.float32)
    enc = [
        (rng.normal(0, 0.05, (3, 3, width, width)).astype(np.float32), np.zeros(width, np.float32))
        for _ in range(encoder_layers)
    ]
    fuse = ConvFuseWeights.init(grid, grid, width, store.out_dim, rng, np.float32)
    head = MlpWeights.init([width, classes], rng, np.float32)
    sampling = []

    def forward():
        x = sensor_in
        for k, b in enc:
            x = np.maximum(conv3x3_apply(x, k, b), 0)
        t0 = time.perf_counter()
        x_prior = prior_features(store, pts)
        sampling.append((time.perf_counter() - t0) * 1e3)
        return mlp_apply(conv_fuse(x, x_prior, fuse), head)

    total = _time(forward, runs, warmup=1)
    s = np.asarray(sampling[-runs:])
    return total, Timing(float(s.mean()), float(s.std()), runs)
