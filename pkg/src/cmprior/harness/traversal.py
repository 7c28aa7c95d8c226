"""Trajectory-fragment merging and traversal counting."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MERGE_TIME_S = 10.0
MERGE_DIST_M = 10.0
TRAVERSAL_RADIUS_M = 50.0


@dataclass(frozen=True)
class TrajectorySample:
    timestamp: float
    position: tuple[float, float]
    scene_id: str


@dataclass
class Scene:
    scene_id: str
    samples: list[TrajectorySample]
    members: tuple[str, ...] = field(default=())

    @property
    def start(self) -> TrajectorySample:
        return self.samples[0]

    @property
    def end(self) -> TrajectorySample:
        return self.samples[-1]


def group_scenes(samples) -> list[Scene]:
    by_scene = defaultdict(list)
    for s in samples:
        by_scene[s.scene_id].append(s)
    return [
        Scene(sid, sorted(v, key=lambda s: s.timestamp), (sid,))
        for sid, v in sorted(by_scene.items())
    ]


def _continues(a: Scene, b: Scene, max_gap: float, max_dist: float) -> bool:
    gap = b.start.timestamp - a.end.timestamp
    if not 0 <= gap < max_gap:
        return False
    return float(np.hypot(*np.subtract(b.start.position, a.end.position))) < max_dist


def merge_trajectories(
    scenes, max_gap: float = MERGE_TIME_S, max_dist: float = MERGE_DIST_M
) -> list[Scene]:
    """Merge fragments where one starts shortly after, and close to, another's end.

    Merging is transitive. Each merged scene is named after the smallest
    member id, so the result does not depend on input order.
    """
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    parent = list(range(len(scenes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, a in enumerate(scenes):
        for j, b in enumerate(scenes):
            if i != j and _continues(a, b, max_gap, max_dist):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups = defaultdict(list)
    for i in range(len(scenes)):
        groups[find(i)].append(scenes[i])
    merged = []
    for members in groups.values():
        ids = tuple(sorted(m for s in members for m in s.members))
        samples = sorted(
            (x for s in members for x in s.samples), key=lambda x: (x.timestamp, x.scene_id)
        )
        merged.append(Scene(ids[0], samples, ids))
    return sorted(merged, key=lambda s: s.scene_id)


class TraversalIndex:
    """Spatial index over the samples of a set of (merged) training scenes."""

    def __init__(self, scenes):
        pts, owners = [], []
        self.scene_ids = [s.scene_id for s in scenes]
        for k, s in enumerate(scenes):
            for x in s.samples:
                pts.append(x.position)
                owners.append(k)
        self.owners = np.asarray(owners, dtype=np.int64)
        self.tree = cKDTree(np.asarray(pts, dtype=np.float64).reshape(-1, 2)) if pts else None

    def count(self, position, radius: float = TRAVERSAL_RADIUS_M) -> int:
        if self.tree is None:
            return 0
        # nudge below the radius: the count uses a strict inequality
        hits = self.tree.query_ball_point(position, np.nextafter(radius, 0))
        return len(np.unique(self.owners[hits]))


def traversal_count(query: TrajectorySample, training_scenes, radius: float = TRAVERSAL_RADIUS_M) -> int:
    """Distinct training scenes with any sample strictly within ``radius``."""
    return TraversalIndex(training_scenes).count(query.position, radius)


def read_samples(path):
    """Read ``scene_id,timestamp,x,y[,split]`` rows; returns ``(samples, split_of_scene)``."""
    samples, splits = [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["scene_id"]
            samples.append(TrajectorySample(float(row["timestamp"]), (float(row["x"]), float(row["y"])), sid))
            splits[sid] = row.get("split") or "train"
    return samples, splits


def traversal_histogram(samples, splits, query_split: str = "val", radius: float = TRAVERSAL_RADIUS_M):
    """Merge per split, then count training traversals for every query-split sample.

    Returns ``(merged_train, merged_query, histogram)`` with the histogram a
    dict ``count -> number of samples``. When no sample belongs to
    ``query_split``, the training samples themselves are queried.
    """
    scenes = group_scenes(samples)
    train = merge_trajectories([s for s in scenes if splits[s.scene_id] == "train"])
    query_scenes = [s for s in scenes if splits[s.scene_id] == query_split]
    query = merge_trajectories(query_scenes) if query_scenes else train
    index = TraversalIndex(train)
    hist = defaultdict(int)
    for s in query:
        for x in s.samples:
            hist[index.count(x.position, radius)] += 1
    return train, query, dict(sorted(hist.items()))
