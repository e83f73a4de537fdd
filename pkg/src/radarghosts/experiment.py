"""Experiment plumbing: configs, dataset suites, training, inference and scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import nnet
from .core import (IGNORE, ClassConfig, Granularity, LabelSet, Sequence, Split, dumps_line, map_label_array,
                   read_sequence, write_sequence)
from .detect import DBSCANParams, Detection, dbscan_pipeline, sgpn_pipeline
from .evaluate import build_truth, evaluate_detections, f1_semantic
from .preprocess import FeatureStats, FixedCloud, featurize, resample, sequence_clouds
from .simulate import Scenario, ScenarioError, find_overlay, generate_sequence

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class OverlayConfig:
    count: dict = field(default_factory=lambda: {"TRAIN": 4, "VAL": 0, "TEST": 2})
    min_sources: int = 2
    max_sources: int = 3
    out_len: int = 100
    min_separation: float = 1.0
    seed: int = 0
    max_tries: int = 50  # offset draws per source selection
    max_draws: int = 20  # source selections


@dataclass(frozen=True)
class PreprocessConfig:
    num_cycles: int = 3
    num_points: int = 2560
    train_stride: int = 1
    eval_stride: int = 1
    standardize: bool = False


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    embed_dim: int = 16
    k: int = 16
    K1: float = 1.0
    K2: float = 2.0
    alpha: float = 2.0
    semantic: float = 1.0
    similarity: float = 1.0
    confidence: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1500
    lr: float = 1e-3
    batch: int = 1
    pairs: int = 1024
    seed: int = 0
    log_every: int = 250


@dataclass(frozen=True)
class DetectorConfig:
    nms_iou: float = 0.5
    dbscan: dict = field(default_factory=lambda: DBSCANParams().to_dict())
    # grid searched on the validation split; an empty grid keeps ``dbscan`` as is
    dbscan_grid: dict = field(default_factory=lambda: {
        "eps": [0.8, 1.2, 1.6], "min_pts": [2, 3], "w_doppler": [0.6], "w_time": [2.0]})


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.3, 0.5)
    eleven_point: bool = False
    per_frame: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    recordings: tuple = ()
    class_config: ClassConfig = ClassConfig()
    overlays: OverlayConfig = OverlayConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    model: ModelConfig = ModelConfig()
    train: TrainSettings = TrainSettings()
    detector: DetectorConfig = DetectorConfig()
    eval: EvalConfig = EvalConfig()
    out_dir: str = "runs"

    def scenarios(self) -> list[Scenario]:
        out = []
        for i, rec in enumerate(self.recordings):
            try:
                out.append(Scenario.from_dict(rec))
            except (ScenarioError, ValueError) as exc:
                raise ConfigError(f"recordings[{i}]: {exc}") from exc
        return out

    def validate(self) -> None:
        scs = self.scenarios()
        if not scs:
            raise ConfigError("recordings: at least one recording required")
        names = [s.name or f"{s.scenario_id}-s{s.seed}" for s in scs]
        if len(set(names)) != len(names):
            raise ConfigError("recordings: names (or scenario_id/seed pairs) must be unique")
        by_id: dict[str, set] = {}
        walls: dict[str, tuple] = {}
        for i, s in enumerate(scs):
            by_id.setdefault(s.scenario_id, set()).add(s.split)
            if walls.setdefault(s.scenario_id, s.walls) != s.walls:
                raise ConfigError(f"recordings[{i}]: scenario {s.scenario_id!r} recorded with different walls")
        for sid, splits in by_id.items():
            if len(splits) > 1:
                raise ConfigError(f"recordings: scenario {sid!r} appears in several splits "
                                  f"({', '.join(sorted(x.value for x in splits))})")
        if not any(s.split == Split.TRAIN for s in scs):
            raise ConfigError("recordings: no TRAIN recording")
        ov = self.overlays
        if not 2 <= ov.min_sources <= ov.max_sources <= 5:
            raise ConfigError("overlays: need 2 <= min_sources <= max_sources <= 5")
        if ov.out_len < 10:
            raise ConfigError("overlays.out_len: must be at least 10")
        for key in ov.count:
            if key not in Split.__members__:
                raise ConfigError(f"overlays.count: unknown split {key!r}")
        pp = self.preprocess
        if pp.num_cycles < 1 or pp.num_points < 1 or pp.train_stride < 1 or pp.eval_stride < 1:
            raise ConfigError("preprocess: num_cycles, num_points and strides must be positive")
        if self.train.steps < 0 or self.train.lr <= 0 or self.train.batch < 1 or self.train.pairs < 2:
            raise ConfigError("train: need steps >= 0, lr > 0, batch >= 1, pairs >= 2")
        if not self.model.K2 > self.model.K1 > 0:
            raise ConfigError("model: need K2 > K1 > 0")
        if not 0 < self.detector.nms_iou <= 1:
            raise ConfigError("detector.nms_iou: must lie in (0, 1]")
        if not self.eval.iou_thresholds or not all(0 <= t < 1 for t in self.eval.iou_thresholds):
            raise ConfigError("eval.iou_thresholds: values in [0, 1) required")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["recordings"] = list(self.recordings)
        d["class_config"] = self.class_config.to_dict()
        for key in ("overlays", "preprocess", "model", "train", "detector", "eval"):
            d[key] = asdict(getattr(self, key))
        d["eval"]["iou_thresholds"] = list(self.eval.iou_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown field(s): {', '.join(sorted(extra))}")
        kw: dict[str, Any] = {}
        sub = {"overlays": OverlayConfig, "preprocess": PreprocessConfig, "model": ModelConfig,
               "train": TrainSettings, "detector": DetectorConfig, "eval": EvalConfig}
        for key, value in d.items():
            if key in sub:
                kw[key] = _sub_config(key, sub[key], value)
            elif key == "class_config":
                try:
                    kw[key] = ClassConfig.from_dict(value)
                except (KeyError, ValueError) as exc:
                    raise ConfigError(f"class_config: {exc}") from exc
            elif key == "recordings":
                if not isinstance(value, list):
                    raise ConfigError("recordings: expected a list")
                kw[key] = tuple(value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def with_class_config(self, cc: ClassConfig) -> "ExperimentConfig":
        return replace(self, class_config=cc)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))


def _sub_config(name: str, cls, value: dict):
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for k in value:
        if k not in known:
            raise ConfigError(f"{name}.{k}: unknown field")
    kw = dict(value)
    if "iou_thresholds" in kw:
        kw["iou_thresholds"] = tuple(kw["iou_thresholds"])
    for k, v in kw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{name}.{k}: expected true/false")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k}: expected a number")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{name}.{k}: expected an integer")
    return cls(**kw)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(doc)


def corridor_suite(n_frames: int = 200, seed: int = 0) -> tuple[dict, ...]:
    """Nine corridor recordings: 6 train, 1 val, 2 test, split by scenario (wall placement)."""
    plan = [
        # scenario id, wall offset, split, (lateral, speed, class) per recording
        ("corridor-a", 5.0, "TRAIN", [(1.0, 1.5, "PEDESTRIAN"), (-1.5, 4.0, "CYCLIST"), (2.0, 1.2, "PEDESTRIAN")]),
        ("corridor-b", -4.0, "TRAIN", [(0.5, 1.4, "PEDESTRIAN"), (-1.0, 3.5, "CYCLIST"), (1.5, 4.5, "CYCLIST")]),
        ("corridor-c", 4.5, "VAL", [(0.0, 1.6, "PEDESTRIAN")]),
        ("corridor-d", -5.0, "TEST", [(1.0, 1.3, "PEDESTRIAN"), (-2.0, 4.0, "CYCLIST")]),
    ]
    out = []
    k = 0
    for sid, wall, split, recs in plan:
        for j, (lat, speed, cls) in enumerate(recs):
            out.append({"preset": "corridor",
                        "preset_args": {"lateral": lat, "speed": speed, "wall_offset": wall, "object_class": cls,
                                        "seed": seed * 100 + k, "scenario_id": sid, "n_frames": n_frames,
                                        "split": split, "name": f"{sid}-{j}"}})
            k += 1
    return tuple(out)


def default_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(name="corridor", recordings=corridor_suite(),
                           preprocess=PreprocessConfig(eval_stride=2, standardize=True))
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# --- dataset suite ---------------------------------------------------------------

@dataclass
class Suite:
    sequences: dict  # name -> Sequence, insertion order = generation order
    overlays: dict  # name -> source description

    def split(self, split: Split, originals_only: bool = False) -> list[Sequence]:
        return [s for n, s in self.sequences.items()
                if s.split == split and not (originals_only and n in self.overlays)]


def build_suite(cfg: ExperimentConfig) -> Suite:
    """Simulate every recording, then draw the configured overlays per split."""
    seqs: dict[str, Sequence] = {}
    for sc in cfg.scenarios():
        s = generate_sequence(sc)
        seqs[s.name] = s
    overlays: dict[str, dict] = {}
    ov = cfg.overlays
    for si, split in enumerate(Split):
        n = int(ov.count.get(split.name, 0))
        pool = [s for s in list(seqs.values()) if s.split == split and len(s) >= ov.out_len]
        by_scenario: dict[str, list[Sequence]] = {}
        for s in pool:
            by_scenario.setdefault(s.scenario_id, []).append(s)
        ids = sorted(by_scenario)
        if n and not ids:
            raise ConfigError(f"overlays.count.{split.name}: no recording of that split has {ov.out_len} frames")
        for i in range(n):
            rng = np.random.default_rng([ov.seed, si, i])
            sid = ids[int(rng.integers(len(ids)))]
            members = by_scenario[sid]
            for attempt in range(ov.max_draws):
                k = int(rng.integers(ov.min_sources, ov.max_sources + 1))
                picks = [members[int(j)] for j in rng.integers(0, len(members), k)]
                try:
                    merged, offsets = find_overlay(picks, rng, ov.out_len, ov.min_separation, ov.max_tries)
                    break
                except ScenarioError:
                    if attempt == ov.max_draws - 1:
                        raise
            name = f"overlay-{split.name.lower()}-{i}"
            merged = Sequence(merged.scenario_id, merged.walls, merged.frames, merged.split, merged.sensor, name)
            seqs[name] = merged
            overlays[name] = {"sources": [p.name for p in picks], "offsets": offsets}
    return Suite(seqs, overlays)


SUITE_FILE = "suite.json"


def save_suite(suite: Suite, directory) -> list[Path]:
    """One JSONL file per sequence plus an index; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    index = []
    for name, seq in suite.sequences.items():
        path = d / f"{name}.jsonl"
        write_sequence(seq, path)
        written.append(path)
        index.append({"name": name, "file": path.name, "split": seq.split.value, "scenario_id": seq.scenario_id,
                      "frames": len(seq), "overlay": suite.overlays.get(name)})
    idx = d / SUITE_FILE
    idx.write_text(json.dumps({"format": "radarghosts-suite", "version": 1, "sequences": index}, indent=1,
                              sort_keys=True) + "\n", encoding="utf-8")
    return [idx] + written


def load_suite(directory, splits=None) -> Suite:
    d = Path(directory)
    try:
        doc = json.loads((d / SUITE_FILE).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{d}: no {SUITE_FILE}; create the data with 'simulate'") from exc
    seqs, overlays = {}, {}
    for entry in doc["sequences"]:
        if splits is not None and Split(entry["split"]) not in splits:
            continue
        seq = read_sequence(d / entry["file"])
        seqs[entry["name"]] = replace(seq, name=entry["name"]) if seq.name != entry["name"] else seq
        if entry.get("overlay"):
            overlays[entry["name"]] = entry["overlay"]
    return Suite(seqs, overlays)


# --- samples -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CloudItem:
    sequence: str
    cycle: int
    cloud: Any  # preprocess.Cloud
    fixed: FixedCloud


def cloud_items(seq: Sequence, pp: PreprocessConfig, cc: ClassConfig, stride: int) -> list[CloudItem]:
    dt = seq.sensor.cycle_time
    return [CloudItem(seq.name, cl.newest_cycle, cl, resample(cl, pp.num_points, cc))
            for _, cl in sequence_clouds(seq.frames, pp.num_cycles, dt, stride)]


def to_sample(item: CloudItem, stats: FeatureStats | None) -> nnet.TrainSample:
    fx = item.fixed
    return nnet.TrainSample(featurize(fx, stats), fx.xy, fx.target, fx.instance_id)


def _stats_for(items: list[CloudItem], pp: PreprocessConfig) -> FeatureStats:
    if not pp.standardize:
        return FeatureStats.identity()
    return FeatureStats.fit([featurize(it.fixed) for it in items])


# --- training ----------------------------------------------------------------------

def train_model(cfg: ExperimentConfig, suite: Suite, progress=None) -> nnet.Model:
    cc, pp, mc, ts = cfg.class_config, cfg.preprocess, cfg.model, cfg.train
    items = [it for s in suite.split(Split.TRAIN) for it in cloud_items(s, pp, cc, pp.train_stride)]
    if not items:
        raise nnet.TrainingError("no training clouds")
    stats = _stats_for(items, pp)
    samples = [to_sample(it, stats) for it in items]
    targets = np.concatenate([s.target for s in samples])
    counts = np.bincount(targets[targets != IGNORE], minlength=cc.num_classes)
    weights = tuple(nnet.class_weights(counts).tolist())
    net = nnet.NetConfig(cc.num_classes, mc.hidden, mc.embed_dim, mc.k)
    lw = nnet.LossWeights(weights, mc.K1, mc.K2, mc.alpha, mc.semantic, mc.similarity, mc.confidence)
    params = nnet.init_params(net, np.random.default_rng([ts.seed, 1]))
    tcfg = nnet.TrainConfig(lr=ts.lr, steps=ts.steps, batch=ts.batch, pairs=ts.pairs, seed=ts.seed,
                            log_every=ts.log_every)
    t0 = time.perf_counter()
    params, curve = nnet.train(params, samples, lw, tcfg, k=mc.k, callback=progress)
    elapsed = time.perf_counter() - t0
    tail = curve[-min(len(curve), 100):]
    final = {k: float(np.mean([c[k] for c in tail])) for k in tail[0]} if tail else {}
    model = nnet.Model(params, net, lw, cc, stats.to_dict(), dict(cfg.detector.dbscan),
                       {"train_clouds": len(samples), "class_counts": counts.tolist(), "final_loss": final,
                        "seed": ts.seed, "steps": ts.steps})
    val = suite.split(Split.VAL)
    if val and cfg.detector.dbscan_grid:
        model.dbscan = tune_dbscan(model, val, cfg)
    # wall-clock time stays out of the checkpoint so reruns are byte-identical
    log.info("trained %s in %.1fs", cc.tag, elapsed)
    return model


# --- inference ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Inference:
    item: CloudItem
    logits: np.ndarray
    embeddings: np.ndarray
    confidence: np.ndarray


def infer(model: nnet.Model, seqs, pp: PreprocessConfig, stride: int | None = None) -> list[Inference]:
    stats = FeatureStats.from_dict(model.feature_stats) if model.feature_stats else None
    out = []
    for seq in seqs:
        for it in cloud_items(seq, pp, model.class_config, pp.eval_stride if stride is None else stride):
            o = model.predict(featurize(it.fixed, stats), it.fixed.xy)
            out.append(Inference(it, o["logits"], o["embeddings"], o["confidence"]))
    return out


def detect(model: nnet.Model, inferences: list[Inference], method: str = "sgpn", nms_iou: float = 0.5,
           dbscan: DBSCANParams | None = None) -> list[tuple[tuple[str, int], Detection]]:
    dets = []
    for inf in inferences:
        fx = inf.item.fixed
        key = (inf.item.sequence, inf.item.cycle)
        if method == "sgpn":
            found = sgpn_pipeline(inf.logits, inf.embeddings, inf.confidence, fx.origin_index,
                                  model.loss.K1, nms_iou)
        elif method == "dbscan":
            p = dbscan or DBSCANParams(**model.dbscan)
            found = dbscan_pipeline(inf.logits, fx.xy, fx.features[:, 1], fx.features[:, 2], fx.origin_index, p)
        else:
            raise ValueError(f"unknown detector {method!r}")
        dets += [(key, d) for d in found]
    return dets


def truths_for(items, cc: ClassConfig) -> dict:
    return {(it.sequence, it.cycle): build_truth(it.cloud, np.unique(it.fixed.origin_index), cc) for it in items}


def score(dets, items, cc: ClassConfig, ev: EvalConfig) -> dict:
    truths = truths_for(items, cc)
    if not ev.per_frame:
        return evaluate_detections(dets, truths, cc, ev.iou_thresholds, ev.eleven_point)
    # per-frame variant: AP averaged over frames that contain ground truth of the class
    per: dict = {}
    for key, truth in truths.items():
        d = [x for x in dets if x[0] == key]
        m = evaluate_detections(d, {key: truth}, cc, ev.iou_thresholds, ev.eleven_point)
        for thr, aps in m["ap"].items():
            for name, v in aps.items():
                if not np.isnan(v):
                    per.setdefault(thr, {}).setdefault(name, []).append(v)
    pooled = evaluate_detections(dets, truths, cc, ev.iou_thresholds, ev.eleven_point)
    for thr in pooled["ap"]:
        pooled["ap"][thr] = {n: float(np.mean(per.get(thr, {}).get(n, [np.nan]))) for n in pooled["ap"][thr]}
        vals = [v for v in pooled["ap"][thr].values() if not np.isnan(v)]
        pooled["map"][thr] = float(np.mean(vals)) if vals else float("nan")
    return pooled


def semantic_f1(inferences: list[Inference], cc: ClassConfig) -> dict:
    preds, targets = [], []
    for inf in inferences:
        fx = inf.item.fixed
        rows = fx.unique_rows
        cl = inf.item.cloud
        ev = map_label_array(cl.label, cl.object_class, cl.sketchy, cc, evaluation=True)
        preds.append(np.argmax(inf.logits[rows], axis=1))
        targets.append(ev[fx.origin_index[rows]])
    out = f1_semantic(np.concatenate(preds), np.concatenate(targets), cc.num_classes)
    out["class_names"] = cc.class_names
    return out


def tune_dbscan(model: nnet.Model, val: list[Sequence], cfg: ExperimentConfig) -> dict:
    """Grid search of the DBSCAN parameters for the best validation mAP at the first IoU threshold."""
    inferences = infer(model, val, cfg.preprocess)
    items = [inf.item for inf in inferences]
    g = {**DBSCANParams().to_dict(), **{k: v[0] for k, v in cfg.detector.dbscan_grid.items()}}
    grid = cfg.detector.dbscan_grid
    keys = sorted(grid)
    best, best_map = dict(cfg.detector.dbscan), -1.0
    thr = cfg.eval.iou_thresholds[0]
    for combo in np.array(np.meshgrid(*[grid[k] for k in keys], indexing="ij")).reshape(len(keys), -1).T:
        p = dict(g)
        p.update({k: (int(v) if k == "min_pts" else float(v)) for k, v in zip(keys, combo)})
        dets = detect(model, inferences, "dbscan", dbscan=DBSCANParams(**p))
        m = score(dets, items, model.class_config, replace(cfg.eval, iou_thresholds=(thr,)))["map"][str(thr)]
        if not np.isnan(m) and m > best_map:
            best, best_map = p, m
    log.info("dbscan tuned to %s (val mAP %.3f)", best, best_map)
    return best


# --- serialization helpers -----------------------------------------------------------

def detections_doc(dets, model: nnet.Model, method: str, pp: PreprocessConfig) -> list[str]:
    names = model.class_config.class_names
    header = {"format": "radarghosts-detections", "version": 1, "method": method,
              "class_config": model.class_config.to_dict(), "preprocess": asdict(pp)}
    lines = [dumps_line(header)]
    for (seq, cycle), d in dets:
        lines.append(dumps_line({"sequence": seq, "frame": cycle, "point_indices": sorted(d.point_indices),
                                 "class": names[d.cls], "score": d.score}))
    return lines


def read_detections(path) -> tuple[dict, list]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty detections file")
    header = json.loads(lines[0])
    if header.get("format") != "radarghosts-detections":
        raise ValueError(f"{path}: not a detections file")
    names = ClassConfig.from_dict(header["class_config"]).class_names
    dets = []
    for ln in lines[1:]:
        r = json.loads(ln)
        dets.append(((r["sequence"], int(r["frame"])),
                     Detection(frozenset(r["point_indices"]), names.index(r["class"]), float(r["score"]))))
    return header, dets


__all__ = [
    "ConfigError", "ExperimentConfig", "OverlayConfig", "PreprocessConfig", "ModelConfig", "TrainSettings",
    "DetectorConfig", "EvalConfig", "Suite", "build_suite", "corridor_suite", "default_config", "load_config",
    "config_hash", "save_suite", "load_suite", "train_model", "infer", "detect", "score", "semantic_f1", "tune_dbscan", "detections_doc",
    "read_detections", "Granularity", "LabelSet",
]
