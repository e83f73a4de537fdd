"""Instance detections from network outputs.

Two pipelines:

* SGPN: each row of the embedding similarity matrix proposes the points
  closer than K1; proposals are scored, then greedy NMS drops any proposal
  overlapping a better one by IoU > 0.5.
* DBSCAN: drop points whose background probability exceeds 1/3, cluster the
  rest in (x, y, w_v * doppler, w_t * time) and score clusters with the same
  rule, confidence fixed to 1.

Both work on de-duplicated points (one row per origin index), so reported
point sets refer to the accumulated cloud, not the resampled one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .nnet import similarity_matrix, softmax

MIN_POINTS = 3
BG_PROB_LIMIT = 1.0 / 3.0


@dataclass(frozen=True)
class Detection:
    point_indices: frozenset
    cls: int
    score: float

    def __post_init__(self):
        if len(self.point_indices) < MIN_POINTS:
            raise ValueError("a detection needs at least three points")
        if not np.isfinite(self.score):
            raise ValueError("non-finite detection score")


@dataclass(frozen=True)
class Proposal:
    seed: int
    members: np.ndarray  # sorted row indices
    confidence: float


@dataclass(frozen=True)
class DBSCANParams:
    eps: float = 1.2
    min_pts: int = 2
    w_doppler: float = 0.6
    w_time: float = 2.0

    def to_dict(self) -> dict:
        return {"eps": self.eps, "min_pts": self.min_pts, "w_doppler": self.w_doppler, "w_time": self.w_time}


def sgpn_propose(S: np.ndarray, confidence: np.ndarray, K1: float = 1.0) -> list[Proposal]:
    """One proposal per row: {j : S_ij < K1}; proposals under three points are dropped."""
    mask = np.asarray(S) < K1
    sizes = mask.sum(axis=1)
    return [Proposal(i, np.flatnonzero(mask[i]), float(confidence[i]))
            for i in np.flatnonzero(sizes >= MIN_POINTS)]


def point_iou(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def nms(proposals: list, scores, iou_threshold: float = 0.5) -> list[int]:
    """Greedy NMS over point sets; returns kept positions into ``proposals``.

    Candidates are visited by descending score (ties: lower seed index first)
    and dropped when their IoU with an already kept proposal exceeds the
    threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    seeds = np.array([p.seed for p in proposals])
    order = np.lexsort((seeds, -scores)) if len(proposals) else np.zeros(0, int)
    kept: list[int] = []
    if not len(proposals):
        return kept
    sets = [np.unique(np.asarray(p.members, dtype=np.int64)) for p in proposals]
    n = max(int(m.max()) for m in sets) + 1
    K = np.zeros((len(proposals), n), dtype=np.float32)
    sizes = np.zeros(len(proposals))
    seen: set[bytes] = set()
    for i in order:
        members = sets[i]
        key = members.tobytes()
        if iou_threshold < 1.0:
            if key in seen:
                continue  # identical to a better-ranked set: IoU 1 suppresses it either way
            seen.add(key)
        nk = len(kept)
        if nk:
            inter = K[:nk, members].sum(axis=1)
            union = sizes[:nk] + len(members) - inter
            if np.any(inter / union > iou_threshold):
                continue
        K[nk, members] = 1.0
        sizes[nk] = len(members)
        kept.append(int(i))
    return kept


def classify_instance(members, probs: np.ndarray, confidence) -> tuple[int, float]:
    """Majority vote over per-point best foreground class; score = mean prob * mean confidence.

    ``probs`` holds softmax probabilities including background in column 0.
    Vote ties go to the class with the higher mean probability.
    """
    members = np.asarray(sorted(members) if isinstance(members, (set, frozenset)) else members)
    p = probs[members]
    votes = np.bincount(np.argmax(p[:, 1:], axis=1) + 1, minlength=p.shape[1])
    votes[0] = -1
    mean_p = p.mean(axis=0)
    best = np.flatnonzero(votes == votes.max())
    cls = int(best[np.argmax(mean_p[best])])
    conf = np.asarray(confidence, dtype=np.float64)
    conf_mean = float(conf[members].mean()) if conf.ndim else float(conf)
    return cls, float(mean_p[cls] * conf_mean)


def _score_proposals(props: list[Proposal], probs: np.ndarray, conf: np.ndarray):
    """Vectorized ``classify_instance`` over many proposals."""
    if not props:
        return np.zeros(0, int), np.zeros(0)
    n, c = probs.shape
    M = np.zeros((len(props), n))
    for r, p in enumerate(props):
        M[r, p.members] = 1.0
    size = M.sum(axis=1)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), np.argmax(probs[:, 1:], axis=1) + 1] = 1.0
    votes = M @ onehot
    votes[:, 0] = -1
    mean_p = (M @ probs) / size[:, None]
    top = votes == votes.max(axis=1, keepdims=True)
    cls = np.argmax(np.where(top, mean_p, -np.inf), axis=1)
    score = mean_p[np.arange(len(props)), cls] * ((M @ conf) / size)
    return cls, score


def sgpn_pipeline(logits: np.ndarray, embeddings: np.ndarray, confidence: np.ndarray, origin_index: np.ndarray,
                  K1: float = 1.0, iou_threshold: float = 0.5) -> list[Detection]:
    """Proposals from embeddings -> scores -> NMS, on de-duplicated rows."""
    rows = _unique_rows(origin_index)
    probs = softmax(np.asarray(logits)[rows])
    conf = np.asarray(confidence, dtype=np.float64)[rows]
    S = similarity_matrix(np.asarray(embeddings)[rows])
    props = sgpn_propose(S, conf, K1)
    cls, score = _score_proposals(props, probs, conf)
    keep = nms(props, score, iou_threshold)
    origin = np.asarray(origin_index)[rows]
    return [Detection(frozenset(origin[props[i].members].tolist()), int(cls[i]), float(score[i])) for i in keep]


def _unique_rows(origin_index) -> np.ndarray:
    _, first = np.unique(np.asarray(origin_index), return_index=True)
    return np.sort(first)


def dbscan_cluster(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Standard DBSCAN; returns labels 0..k-1 in discovery order, -1 for noise.

    A point is core if at least ``min_pts`` points (itself included) lie
    within distance ``eps``.  Points are visited in input order, so border
    points reachable from several clusters join the first one discovered.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neigh = cKDTree(pts).query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in sorted(neigh[j]):
                if labels[q] == -1:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    queue.append(q)
        cluster += 1
    return labels


def dbscan_pipeline(logits: np.ndarray, xy: np.ndarray, doppler: np.ndarray, rel_timestamp: np.ndarray,
                    origin_index: np.ndarray, params: DBSCANParams = DBSCANParams()) -> list[Detection]:
    rows = _unique_rows(origin_index)
    probs = softmax(np.asarray(logits)[rows])
    fg = np.flatnonzero(probs[:, 0] <= BG_PROB_LIMIT)
    if len(fg) == 0:
        return []
    r = rows[fg]
    feats = np.column_stack([np.asarray(xy)[r], params.w_doppler * np.asarray(doppler)[r],
                             params.w_time * np.asarray(rel_timestamp)[r]])
    labels = dbscan_cluster(feats, params.eps, params.min_pts)
    origin = np.asarray(origin_index)[rows]
    dets = []
    for c in range(labels.max() + 1 if len(labels) else 0):
        members = fg[labels == c]
        if len(members) < MIN_POINTS:
            continue
        cls, score = classify_instance(members, probs, 1.0)
        dets.append(Detection(frozenset(origin[members].tolist()), cls, score))
    return dets
