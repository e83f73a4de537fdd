"""Per-point network with semantic, embedding and confidence heads.

The featurizer is two k-nearest-neighbour blocks followed by one trunk layer::

    h1 = relu(X W1 + b1);        o1 = [h1, mean_knn(h1)]
    h2 = relu(o1 W2 + b2);       o2 = [h2, mean_knn(h2)]
    t  = relu(o2 W3 + b3)
    logits = t Wc + bc;  emb = t We + be;  conf = sigmoid(t Wf + bf)

Neighbourhoods are computed in (x, y) and include the point itself, so the
network is equivariant to point permutations.  Gradients are written out by
hand (numpy only) and checked against finite differences in the tests.

Losses:

* ``semantic_loss``: class-balanced cross entropy, weights s = 1 / (c * share).
* ``similarity_loss``: double-hinge loss on pairwise embedding distances with
  background/foreground pair rules and pair-category balancing.
* ``confidence_loss``: squared error against the IoU between each point's
  proposal and its ground-truth instance.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence as Seq

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .core import IGNORE, ClassConfig

log = logging.getLogger(__name__)

MODEL_FORMAT = "radarghosts-model"
MODEL_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wc", "bc", "We", "be", "Wf", "bf")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_classes: int  # including background
    hidden: int = 64
    embed_dim: int = 16
    k: int = 16
    in_dim: int = 5


@dataclass(frozen=True)
class LossWeights:
    class_weights: tuple[float, ...]
    K1: float = 1.0
    K2: float = 2.0
    alpha: float = 2.0
    semantic: float = 1.0
    similarity: float = 1.0
    confidence: float = 1.0

    def __post_init__(self):
        if not self.K2 > self.K1 > 0:
            raise ValueError("need K2 > K1 > 0")


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h, e, c = cfg.hidden, cfg.embed_dim, cfg.n_classes

    def he(fan_in, fan_out):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))

    return {
        "W1": he(cfg.in_dim, h), "b1": np.zeros(h),
        "W2": he(2 * h, h), "b2": np.zeros(h),
        "W3": he(2 * h, h), "b3": np.zeros(h),
        "Wc": he(h, c) * 0.5, "bc": np.zeros(c),
        "We": he(h, e) * 0.5, "be": np.zeros(e),
        "Wf": he(h, 1) * 0.5, "bf": np.zeros(1),
    }


def zero_params(cfg: NetConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}


def class_weights(counts: Seq[float]) -> np.ndarray:
    """Frequency balancing: s_l = 1 / (c * share_l)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        missing = [i for i, v in enumerate(counts) if v <= 0]
        raise ValueError(f"classes {missing} do not occur in the training split")
    share = counts / counts.sum()
    return 1.0 / (len(counts) * share)


def knn_operator(coords: np.ndarray, k: int) -> sparse.csr_matrix:
    """Sparse row-stochastic matrix averaging each point's k nearest neighbours."""
    n = len(coords)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates")
    _, idx = cKDTree(coords).query(coords, k=k)
    idx = idx.reshape(n, k)
    rows = np.repeat(np.arange(n), k)
    return sparse.csr_matrix((np.full(n * k, 1.0 / k), (rows, idx.ravel())), shape=(n, n))


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(params: dict, features: np.ndarray, coords: np.ndarray | None = None, k: int = 16,
            knn: sparse.csr_matrix | None = None, keep_cache: bool = False) -> dict:
    """Network outputs ``logits`` (N, C+1), ``embeddings`` (N, E), ``confidence`` (N,)."""
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    if knn is None:
        knn = knn_operator(np.asarray(coords, dtype=np.float64), k)
    p = params
    z1 = x @ p["W1"] + p["b1"]
    h1 = _relu(z1)
    o1 = np.concatenate([h1, knn @ h1], axis=1)
    z2 = o1 @ p["W2"] + p["b2"]
    h2 = _relu(z2)
    o2 = np.concatenate([h2, knn @ h2], axis=1)
    z3 = o2 @ p["W3"] + p["b3"]
    t = _relu(z3)
    logits = t @ p["Wc"] + p["bc"]
    emb = t @ p["We"] + p["be"]
    conf = _sigmoid(t @ p["Wf"] + p["bf"])[:, 0]
    out = {"logits": logits, "embeddings": emb, "confidence": conf}
    if keep_cache:
        out["_cache"] = (x, knn, z1, h1, o1, z2, h2, o2, z3, t)
    return out


def backward(params: dict, out: dict, d_logits=None, d_emb=None, d_conf=None) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients w.r.t. the three head outputs."""
    x, knn, z1, h1, o1, z2, h2, o2, z3, t = out["_cache"]
    p = params
    n, hdim = t.shape
    g = {}
    d_t = np.zeros_like(t)
    if d_logits is None:
        d_logits = np.zeros_like(out["logits"])
    if d_emb is None:
        d_emb = np.zeros_like(out["embeddings"])
    if d_conf is None:
        d_conf = np.zeros(n)
    conf = out["confidence"]
    d_zf = (d_conf * conf * (1.0 - conf))[:, None]
    for w, b, d in (("Wc", "bc", d_logits), ("We", "be", d_emb), ("Wf", "bf", d_zf)):
        g[w] = t.T @ d
        g[b] = d.sum(axis=0)
        d_t += d @ p[w].T
    d_z3 = d_t * (z3 > 0)
    g["W3"], g["b3"] = o2.T @ d_z3, d_z3.sum(axis=0)
    d_o2 = d_z3 @ p["W3"].T
    d_h2 = d_o2[:, :hdim] + knn.T @ d_o2[:, hdim:]
    d_z2 = d_h2 * (z2 > 0)
    g["W2"], g["b2"] = o1.T @ d_z2, d_z2.sum(axis=0)
    d_o1 = d_z2 @ p["W2"].T
    d_h1 = d_o1[:, :hdim] + knn.T @ d_o1[:, hdim:]
    d_z1 = d_h1 * (z1 > 0)
    g["W1"], g["b1"] = x.T @ d_z1, d_z1.sum(axis=0)
    return g


# --- losses ------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def semantic_loss(logits: np.ndarray, target: np.ndarray, weights: Seq[float], grad: bool = False):
    """Mean over non-ignored points of ``weight[target] * cross_entropy``."""
    target = np.asarray(target)
    w = np.asarray(weights, dtype=np.float64)
    valid = target != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return (0.0, np.zeros_like(logits)) if grad else 0.0
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    t = np.where(valid, target, 0)
    s = np.where(valid, w[t], 0.0)
    loss = float(-(s * logp[np.arange(len(t)), t]).sum() / n_valid)
    if not grad:
        return loss
    d = np.exp(logp)
    d[np.arange(len(t)), t] -= 1.0
    d *= (s / n_valid)[:, None]
    return loss, d


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    return cdist(e, e)


@dataclass(frozen=True)
class PairTargets:
    instance_id: np.ndarray
    target: np.ndarray  # class index, 0 = background, IGNORE

    def subset(self, idx) -> "PairTargets":
        return PairTargets(self.instance_id[idx], self.target[idx])


def _pair_terms(S, tg: PairTargets, K1, K2, alpha):
    valid = tg.target != IGNORE
    fg = valid & (tg.target > 0)
    bg = valid & (tg.target == 0)
    off = ~np.eye(len(S), dtype=bool)
    ff = fg[:, None] & fg[None, :] & off
    bf = (bg[:, None] & fg[None, :]) | (fg[:, None] & bg[None, :])
    same_inst = ff & (tg.instance_id[:, None] == tg.instance_id[None, :])
    same_cls = ff & ~same_inst & (tg.target[:, None] == tg.target[None, :])
    diff_cls = ff & ~same_inst & ~same_cls
    return ff, bf, same_inst, same_cls, diff_cls


def similarity_loss(S: np.ndarray, targets: PairTargets, K1: float = 1.0, K2: float = 2.0, alpha: float = 2.0,
                    grad: bool = False):
    """Balanced double-hinge loss over unordered point pairs.

    Same instance: pull distance to 0.  Same class, other instance:
    ``alpha * max(0, K1 - d)``.  Different class, or exactly one background
    point: ``max(0, K2 - d)``.  Background/background pairs and any pair with
    an ignored point contribute nothing.  (fg, fg) and (bg, fg) pairs are each
    weighted by ``1 / (2 * count)``.
    """
    S = np.asarray(S, dtype=np.float64)
    ff, bf, same_inst, same_cls, diff_cls = _pair_terms(S, targets, K1, K2, alpha)
    # masks are symmetric; every unordered pair appears twice
    n_ff = ff.sum() / 2
    n_bf = bf.sum() / 2
    w = np.zeros_like(S)
    if n_ff:
        w[ff] = 1.0 / (2.0 * n_ff)
    if n_bf:
        w[bf] = 1.0 / (2.0 * n_bf)
    hinge1 = np.maximum(K1 - S, 0.0)
    hinge2 = np.maximum(K2 - S, 0.0)
    ell = np.where(same_inst, S, 0.0) + np.where(same_cls, alpha * hinge1, 0.0) \
        + np.where(diff_cls | bf, hinge2, 0.0)
    loss = float((w * ell).sum() / 2)
    if not grad:
        return loss
    dS = np.where(same_inst, 1.0, 0.0) - np.where(same_cls & (S < K1), alpha, 0.0) \
        - np.where((diff_cls | bf) & (S < K2), 1.0, 0.0)
    # d loss / d S_ij for the full symmetric matrix (each entry carries half)
    return loss, 0.5 * w * dS


def embedding_grad(embeddings: np.ndarray, S: np.ndarray, dS: np.ndarray) -> np.ndarray:
    """Chain rule through S_ij = |e_i - e_j| for a gradient given on all entries."""
    G = dS + dS.T
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(S > 0, G / S, 0.0)
    return G.sum(axis=1)[:, None] * embeddings - G @ embeddings


def confidence_targets(S: np.ndarray, targets: PairTargets, K1: float = 1.0) -> np.ndarray:
    """IoU between each foreground point's proposal {j : S_ij < K1} and its instance."""
    valid = targets.target != IGNORE
    fg = valid & (targets.target > 0)
    prop = (S < K1) & valid[None, :]
    gt = (targets.instance_id[:, None] == targets.instance_id[None, :]) & fg[None, :]
    inter = (prop & gt).sum(axis=1)
    union = (prop | gt).sum(axis=1)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return np.where(fg, iou, 0.0)


def confidence_loss(conf: np.ndarray, target: np.ndarray, valid: np.ndarray | None = None, grad: bool = False):
    conf = np.asarray(conf, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(conf), dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return (0.0, np.zeros_like(conf)) if grad else 0.0
    r = np.where(valid, conf - target, 0.0)
    loss = float((r ** 2).sum() / n)
    return (loss, 2.0 * r / n) if grad else loss


# --- combined objective --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainSample:
    features: np.ndarray  # (N, 5), already standardized if stats are used
    coords: np.ndarray  # (N, 2)
    target: np.ndarray
    instance_id: np.ndarray


def loss_and_grads(params: dict, sample: TrainSample, lw: LossWeights, k: int, subset: np.ndarray | None = None):
    """Weighted loss sum, its parts, and parameter gradients for one cloud."""
    out = forward(params, sample.features, sample.coords, k=k, keep_cache=True)
    sem, d_logits = semantic_loss(out["logits"], sample.target, lw.class_weights, grad=True)
    idx = np.arange(len(sample.target)) if subset is None else subset
    tg = PairTargets(sample.instance_id[idx], sample.target[idx])
    emb = out["embeddings"][idx]
    S = similarity_matrix(emb)
    sim, dS = similarity_loss(S, tg, lw.K1, lw.K2, lw.alpha, grad=True)
    ct = confidence_targets(S, tg, lw.K1)
    conf, d_conf_sub = confidence_loss(out["confidence"][idx], ct, tg.target != IGNORE, grad=True)
    d_emb = np.zeros_like(out["embeddings"])
    d_emb[idx] = lw.similarity * embedding_grad(emb, S, dS)
    d_conf = np.zeros(len(sample.target))
    d_conf[idx] = lw.confidence * d_conf_sub
    grads = backward(params, out, lw.semantic * d_logits, d_emb, d_conf)
    total = lw.semantic * sem + lw.similarity * sim + lw.confidence * conf
    return total, {"semantic": sem, "similarity": sim, "confidence": conf}, grads


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 1
    pairs: int = 1024  # points per step for similarity/confidence losses
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in PARAM_NAMES:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(params: dict, dataset: Seq[TrainSample], lw: LossWeights, cfg: TrainConfig, k: int = 16,
          callback: Callable[[int, dict], None] | None = None) -> tuple[dict, list[dict]]:
    """Adam on the weighted loss sum; returns new params and the per-step loss curve."""
    if not dataset:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = {k_: v.copy() for k_, v in params.items()}
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        picks = rng.integers(0, len(dataset), cfg.batch)
        grads = {k_: np.zeros_like(v) for k_, v in params.items()}
        parts_sum = {"total": 0.0, "semantic": 0.0, "similarity": 0.0, "confidence": 0.0}
        for i in picks:
            s = dataset[int(i)]
            n = len(s.target)
            subset = np.sort(rng.choice(n, cfg.pairs, replace=False)) if n > cfg.pairs else None
            total, parts, g = loss_and_grads(params, s, lw, k, subset)
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}: {parts}")
            parts_sum["total"] += total / cfg.batch
            for key, v in parts.items():
                parts_sum[key] += v / cfg.batch
            for key in grads:
                grads[key] += g[key] / cfg.batch
        opt.step(params, grads)
        curve.append(parts_sum)
        if callback is not None:
            callback(step, parts_sum)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            window = curve[-cfg.log_every:]
            log.info("step %d  loss %.4f  sem %.4f  sim %.4f  conf %.4f  (%.1fs)", step + 1,
                     *(np.mean([c[key] for c in window]) for key in ("total", "semantic", "similarity", "confidence")),
                     time.perf_counter() - t0)
    return params, curve


# --- checkpoints -----------------------------------------------------------------

@dataclass
class Model:
    params: dict
    net: NetConfig
    loss: LossWeights
    class_config: ClassConfig
    feature_stats: dict | None = None  # FeatureStats.to_dict()
    dbscan: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def predict(self, features: np.ndarray, coords: np.ndarray) -> dict:
        return forward(self.params, features, coords, k=self.net.k)


def save_model(model: Model, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "class_config": model.class_config.to_dict(),
        "net": asdict(model.net),
        "loss": {**asdict(model.loss), "class_weights": list(model.loss.class_weights)},
        "feature_stats": model.feature_stats,
        "dbscan": model.dbscan,
        "meta": model.meta,
        "params": {k: {"shape": list(model.params[k].shape), "data": model.params[k].ravel().tolist()}
                   for k in PARAM_NAMES},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), allow_nan=False), encoding="utf-8")


def load_model(path) -> Model:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a version-{MODEL_VERSION} model checkpoint")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    loss = dict(doc["loss"])
    loss["class_weights"] = tuple(loss["class_weights"])
    return Model(params, NetConfig(**doc["net"]), LossWeights(**loss), ClassConfig.from_dict(doc["class_config"]),
                 doc.get("feature_stats"), doc.get("dbscan", {}), doc.get("meta", {}))
