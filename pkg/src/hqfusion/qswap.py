"""Interactive swap sampling between related queries.

Each query predicts a base set of deformable sampling points on every BEV
grid.  Swap sampling then lets a query import high-score points from its
neighbors: neighbors are the top-affinity partners from the shared
self-attention, kept only when their BEV distance falls inside a radius
that adapts to the query's predicted footprint.  Imported points are
ranked by the neighbor's own score plus a log-affinity prior, accepted
greedily under per-neighbor and total caps, and either appended to the base
set or swapped in for its weakest base points.  Point scores are then
normalized jointly so aggregation sees a single weighting per set.

Swap sampling applies to the BEV grids only; perspective-view sampling is
too sensitive to geometric perturbation to benefit from shared points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

IMG_BEV = "img_bev"
RAD_BEV = "rad_bev"
BEV_KINDS = (IMG_BEV, RAD_BEV)

ORIGIN_BASE = 0
ORIGIN_SHARED = 1


@dataclass
class QSwapConfig:
    radius_factor: float = 1.5     # scales the footprint-adaptive radius
    prior_strength: float = 1.0    # weight of the log-affinity term
    n_neighbors: int = 4           # top-affinity partners considered
    k_base: int = 20               # base sampling points per query per grid
    k_per: int = 2                 # max points imported from one neighbor
    k_extra: int = 4               # max imported points in total
    mode: str = "append"           # "append" grows the set, "replace" keeps k_base
    affinity_floor: float = 1e-8   # floor before the log (affinities can underflow)

    def validate(self):
        if self.mode not in ("append", "replace"):
            raise ConfigError(f"unknown swap mode {self.mode!r}")
        if self.k_per > self.k_extra:
            raise ConfigError("k_per must not exceed k_extra")
        if min(self.k_base, self.k_per, self.k_extra, self.n_neighbors) < 0:
            raise ConfigError("swap caps must be non-negative")
        if self.affinity_floor <= 0.0:
            raise ConfigError("affinity_floor must be positive")


@dataclass
class SamplePoint:
    """One sampling point, view onto a SampleSet row."""

    offset: np.ndarray
    score: float
    owner: int
    origin: int
    source: int
    grid_kind: str


@dataclass
class SampleSet:
    """Ordered sampling points of one query on one grid."""

    owner: int
    grid_kind: str
    offsets: np.ndarray              # (K, 2) metric offsets from the owner position
    scores: np.ndarray               # (K,) raw logits; imported points carry s-tilde
    origins: np.ndarray              # (K,) ORIGIN_BASE / ORIGIN_SHARED
    sources: np.ndarray              # (K,) query id the point came from
    weights: np.ndarray | None = None  # set after joint normalization

    @property
    def size(self) -> int:
        return self.offsets.shape[0]

    def points(self) -> list[SamplePoint]:
        return [
            SamplePoint(self.offsets[k], float(self.scores[k]), self.owner,
                        int(self.origins[k]), int(self.sources[k]), self.grid_kind)
            for k in range(self.size)
        ]

    def shared_count(self) -> int:
        return int((self.origins == ORIGIN_SHARED).sum())


def base_sample_set(owner: int, grid_kind: str, offsets: np.ndarray,
                    scores: np.ndarray) -> SampleSet:
    k = offsets.shape[0]
    return SampleSet(owner, grid_kind, np.asarray(offsets, dtype=np.float64),
                     np.asarray(scores, dtype=np.float64),
                     np.full(k, ORIGIN_BASE, dtype=np.uint8),
                     np.full(k, owner, dtype=np.int64))


def predict_base_samples(embedding: np.ndarray, head_w: np.ndarray,
                         head_b: np.ndarray, range_scale: float,
                         k_base: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear head: embedding -> k_base (dx, dy, score) rows per grid.

    Offsets are scaled by the per-layer metric range parameter; scores stay
    raw logits.
    """
    raw = (embedding @ head_w.T + head_b).reshape(-1, k_base, 3)
    offsets = raw[..., :2] * range_scale
    scores = raw[..., 2]
    if embedding.ndim == 1:
        return offsets[0], scores[0]
    return offsets, scores


def adaptive_radius(width: float, length: float, radius_factor: float) -> float:
    return radius_factor * math.hypot(width, length)


def select_neighbors(i: int, affinity_row: np.ndarray, boxes_wl: np.ndarray,
                     positions_bev: np.ndarray, cfg: QSwapConfig) -> np.ndarray:
    """Top-affinity partners of query i inside its adaptive radius.

    affinity_row is the head-averaged shared self-attention row for i; the
    self entry is ignored.  Ties in affinity resolve to the lower id.
    """
    a = np.asarray(affinity_row, dtype=np.float64)
    ids = np.arange(a.shape[0])
    ids = ids[ids != i]
    top = ids[np.argsort(-a[ids], kind="stable")][:cfg.n_neighbors]
    r = adaptive_radius(boxes_wl[i, 0], boxes_wl[i, 1], cfg.radius_factor)
    dist = np.linalg.norm(positions_bev[top] - positions_bev[i], axis=1)
    return top[dist <= r]


def score_shared_points(score, affinity, prior_strength: float,
                        affinity_floor: float = 1e-8):
    """Import ranking: neighbor score plus scaled log-affinity prior."""
    return score + prior_strength * np.log(np.maximum(affinity, affinity_floor))


def swap_samples(base_sets: list[SampleSet], neighbor_lists: list[np.ndarray],
                 affinities: np.ndarray, positions_bev: np.ndarray,
                 cfg: QSwapConfig) -> list[SampleSet]:
    """Exchange sampling points between neighbors, one grid at a time.

    The candidate pool of query i holds every base point of its valid
    neighbors, ranked by descending s-tilde (ties: lower neighbor id, then
    lower point index).  Acceptance is greedy under the per-neighbor and
    total caps.  Imported points keep their absolute BEV position and are
    re-expressed as offsets from the receiving query.
    """
    cfg.validate()
    n = len(base_sets)
    out: list[SampleSet] = []
    for i in range(n):
        base = base_sets[i]
        cands = []
        for j in neighbor_lists[i]:
            j = int(j)
            nb = base_sets[j]
            st = score_shared_points(nb.scores, affinities[i, j],
                                     cfg.prior_strength, cfg.affinity_floor)
            absolute = positions_bev[j] + nb.offsets
            cands.extend((float(st[k]), j, k, absolute[k]) for k in range(nb.size))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))

        accepted = []
        taken_per: dict[int, int] = {}
        for st, j, k, abs_xy in cands:
            if len(accepted) >= cfg.k_extra:
                break
            if taken_per.get(j, 0) >= cfg.k_per:
                continue
            taken_per[j] = taken_per.get(j, 0) + 1
            accepted.append((st, j, abs_xy - positions_bev[i]))

        if not accepted:
            out.append(replace(base))
            continue

        m = len(accepted)
        new_offsets = np.array([a[2] for a in accepted])
        new_scores = np.array([a[0] for a in accepted])
        new_sources = np.array([a[1] for a in accepted], dtype=np.int64)
        if cfg.mode == "append":
            out.append(SampleSet(
                base.owner, base.grid_kind,
                np.concatenate([base.offsets, new_offsets]),
                np.concatenate([base.scores, new_scores]),
                np.concatenate([base.origins,
                                np.full(m, ORIGIN_SHARED, dtype=np.uint8)]),
                np.concatenate([base.sources, new_sources]),
            ))
        else:
            # overwrite the m weakest base points (ties: lower point index)
            victims = np.argsort(base.scores, kind="stable")[:m]
            offsets = base.offsets.copy()
            scores = base.scores.copy()
            origins = base.origins.copy()
            sources = base.sources.copy()
            offsets[victims] = new_offsets
            scores[victims] = new_scores
            origins[victims] = ORIGIN_SHARED
            sources[victims] = new_sources
            out.append(SampleSet(base.owner, base.grid_kind, offsets, scores,
                                 origins, sources))
    return out


def normalize_sample_scores(sample_set: SampleSet) -> np.ndarray:
    """Joint softmax over base scores and imported s-tilde values."""
    s = sample_set.scores
    e = np.exp(s - s.max())
    return e / e.sum()
