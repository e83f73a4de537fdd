"""Point-set detection metrics: matching, average precision, F1, FP attribution.

Detections and ground truth live in the index space of one accumulated
cloud (origin indices).  Average precision pools detections of a class over
all evaluated clouds, VOC style: greedy by descending score, one match per
ground-truth instance, all-point interpolation unless ``eleven_point``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence as Seq

import numpy as np

from .core import BACKGROUND_CLASS, IGNORE, ClassConfig, Label, ObjectClass, map_label_array
from .detect import MIN_POINTS, Detection
from .preprocess import Cloud

TP, FP, IGNORED = "TP", "FP", "IGNORED"
FP_CATEGORIES = ("BG", "IntraClass", "MP12", "MP22", "MP23", "OMP")
# tie priority when several categories share the majority
_PRIORITY = ("MP12", "MP22", "MP23", "OMP", "IntraClass", "Localization", "BG")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GTInstance:
    instance_id: int
    cls: int
    points: frozenset


@dataclass(frozen=True, eq=False)
class FrameTruth:
    instances: tuple[GTInstance, ...]
    ignore: frozenset
    # per origin index: raw label, eval class, instance id
    label: dict
    eval_class: dict
    instance_of: dict


def point_iou(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def build_truth(cloud: Cloud, present, cfg: ClassConfig, min_points: int = MIN_POINTS) -> FrameTruth:
    """Ground-truth instances among the ``present`` origin indices of a cloud.

    Instances with fewer than ``min_points`` points are treated as ignore regions.
    """
    present = np.unique(np.asarray(list(present), dtype=np.int64))
    ev = map_label_array(cloud.label, cloud.object_class, cloud.sketchy, cfg, evaluation=True)[present]
    inst = cloud.instance_id[present]
    ignore = set(present[ev == IGNORE].tolist())
    instances = []
    fg = ev > 0
    for iid in np.unique(inst[fg]):
        m = fg & (inst == iid)
        pts = present[m]
        cls = Counter(ev[m].tolist()).most_common(1)[0][0]
        if len(pts) < min_points:
            ignore.update(pts.tolist())
            continue
        instances.append(GTInstance(int(iid), int(cls), frozenset(pts.tolist())))
    return FrameTruth(
        instances=tuple(instances),
        ignore=frozenset(ignore),
        label=dict(zip(present.tolist(), cloud.label[present].tolist())),
        eval_class=dict(zip(present.tolist(), ev.tolist())),
        instance_of=dict(zip(present.tolist(), inst.tolist())),
    )


def _on_ignore(det: Detection, truth: FrameTruth) -> bool:
    return 2 * len(det.point_indices & truth.ignore) > len(det.point_indices)


def match_detections(dets: Seq[tuple[Hashable, Detection]], truths: dict, iou_threshold: float, cls: int):
    """Match class-``cls`` detections against same-class ground truth.

    Returns ``(flags, scores, n_gt)`` where ``flags[i]`` is TP, FP or IGNORED
    for ``dets[i]`` (detections of other classes get None).  A detection is a
    TP when its best-overlapping GT has IoU strictly above the threshold and
    has not been claimed by a higher-scoring detection.
    """
    flags: list[str | None] = [None] * len(dets)
    idx = [i for i, (_, d) in enumerate(dets) if d.cls == cls]
    order = sorted(idx, key=lambda i: -dets[i][1].score)  # stable: input order breaks ties
    claimed: set = set()
    for i in order:
        key, det = dets[i]
        truth = truths[key]
        if _on_ignore(det, truth):
            flags[i] = IGNORED
            continue
        best, best_iou = None, 0.0
        for g in truth.instances:
            if g.cls != cls:
                continue
            iou = point_iou(det.point_indices, g.points)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou > iou_threshold and (key, best.instance_id) not in claimed:
            claimed.add((key, best.instance_id))
            flags[i] = TP
        else:
            flags[i] = FP
    n_gt = sum(1 for t in truths.values() for g in t.instances if g.cls == cls)
    scores = [d.score for _, d in dets]
    return flags, scores, n_gt


@dataclass
class PRCurve:
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: int
    fp: int
    fn: int


def pr_curve(tp_flags: Seq[bool], scores: Seq[float], n_gt: int) -> PRCurve:
    """Precision/recall after each detection in descending-score order."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    recall = ctp / n_gt if n_gt else np.zeros(len(t))
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    ntp = int(ctp[-1]) if len(t) else 0
    return PRCurve(s, precision, recall, ntp, int(cfp[-1]) if len(t) else 0, n_gt - ntp)


def average_precision(tp_flags: Seq[bool], scores: Seq[float], n_gt: int, eleven_point: bool = False) -> float:
    """Area under the interpolated precision/recall curve."""
    if n_gt < 1:
        raise EvaluationError("average precision needs at least one ground-truth instance")
    c = pr_curve(tp_flags, scores, n_gt)
    if eleven_point:
        ap = 0.0
        for r in np.arange(0.0, 1.1, 0.1):
            p = c.precision[c.recall >= r]
            ap += (p.max() if len(p) else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], c.recall, [1.0]])
    mpre = np.concatenate([[0.0], c.precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def best_f1_threshold(curve: PRCurve) -> float:
    """Score at the point of the PR curve with the highest F1."""
    if len(curve.scores) == 0:
        raise EvaluationError("no detections, no precision/recall curve")
    p, r = curve.precision, curve.recall
    f1 = np.where(p + r > 0, 2 * p * r / np.maximum(p + r, 1e-300), 0.0)
    return float(curve.scores[int(np.argmax(f1))])


def f1_semantic(pred: np.ndarray, target: np.ndarray, n_classes: int) -> dict:
    """Per-class point F1 (IGNORE targets excluded) and the foreground macro average."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    valid = target != IGNORE
    pred, target = pred[valid], target[valid]
    per = []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (target == c)))
        fp = int(np.sum((pred == c) & (target != c)))
        fn = int(np.sum((pred != c) & (target == c)))
        per.append(float("nan") if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    fg = [v for v in per[1:] if not np.isnan(v)]
    return {"per_class": per, "macro": float(np.mean(fg)) if fg else float("nan")}


def _prefix(cfg: ClassConfig, cls: int) -> int:
    per = len(cfg.class_names[1:]) // (2 if cfg.granularity.value == "PED_CYCL" else 1)
    return (cls - 1) // per


def attribute_fp(det: Detection, truth: FrameTruth, cfg: ClassConfig) -> str:
    """Cause of one false positive by majority ground-truth label of its points.

    Returns one of FP_CATEGORIES, or "Localization" when the majority lies on
    an object of the detection's own class (a duplicate or badly localized
    hit rather than a confusion with something else).
    """
    votes: Counter = Counter()
    for p in det.point_indices:
        if p in truth.ignore:
            continue
        lab = Label(truth.label[p])
        ev = truth.eval_class[p]
        if lab in (Label.MP12, Label.MP22, Label.MP23, Label.OMP):
            cat = "Localization" if ev == det.cls else lab.name
        elif lab == Label.REAL and ev > 0:
            cat = "Localization" if ev == det.cls else "IntraClass"
        else:
            cat = "BG"
        votes[cat] += 1
    if not votes:
        return "BG"
    top = max(votes.values())
    return next(c for c in _PRIORITY if votes.get(c, 0) == top)


def fp_attribution(fps: Iterable[tuple[Hashable, Detection]], truths: dict, cfg: ClassConfig) -> dict:
    """Fractions of false positives per cause; localization errors are counted apart."""
    counts = Counter({c: 0 for c in FP_CATEGORIES})
    localization = 0
    for key, det in fps:
        cat = attribute_fp(det, truths[key], cfg)
        if cat == "Localization":
            localization += 1
        else:
            counts[cat] += 1
    total = sum(counts.values())
    fractions = {c: (counts[c] / total if total else 0.0) for c in FP_CATEGORIES}
    return {"fractions": fractions, "counts": dict(counts), "n_fp": total, "localization": localization,
            "empty": total == 0}


def evaluate_detections(dets: Seq[tuple[Hashable, Detection]], truths: dict, cfg: ClassConfig,
                        iou_thresholds: Seq[float] = (0.3, 0.5), eleven_point: bool = False,
                        attribution_iou: float = 0.3) -> dict:
    """Per-class AP at each IoU threshold plus FP attribution at ``attribution_iou``."""
    names = cfg.class_names
    out: dict = {"class_names": names, "ap": {}, "map": {}, "n_gt": {}, "pr": {}}
    attribution_fps = []
    thresholds = {}
    for thr in list(iou_thresholds) + ([attribution_iou] if attribution_iou not in iou_thresholds else []):
        aps = {}
        for c in range(1, len(names)):
            flags, scores, n_gt = match_detections(dets, truths, thr, c)
            out["n_gt"][names[c]] = n_gt
            keep = [i for i, f in enumerate(flags) if f in (TP, FP)]
            tp = [flags[i] == TP for i in keep]
            sc = [scores[i] for i in keep]
            if thr in iou_thresholds:
                aps[names[c]] = average_precision(tp, sc, n_gt, eleven_point) if n_gt else float("nan")
            if thr == attribution_iou and keep:
                curve = pr_curve(tp, sc, n_gt)
                th = best_f1_threshold(curve) if n_gt else float("inf")
                thresholds[names[c]] = th
                attribution_fps += [dets[i] for i, t in zip(keep, tp) if not t and scores[i] >= th]
        if thr in iou_thresholds:
            out["ap"][str(thr)] = aps
            vals = [v for v in aps.values() if not np.isnan(v)]
            out["map"][str(thr)] = float(np.mean(vals)) if vals else float("nan")
    out["score_thresholds"] = thresholds
    out["fp_attribution"] = fp_attribution(attribution_fps, truths, cfg)
    return out


# --- text tables ---------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:.2f}"


def format_ap_table(rows: Seq[tuple[str, dict]]) -> str:
    """Aligned AP table; ``rows`` pairs a label with an ``evaluate_detections`` result."""
    cols: list[str] = []
    for _, m in rows:
        for name in m["class_names"][1:]:
            if name not in cols:
                cols.append(name)
    thr_list = sorted({t for _, m in rows for t in m["ap"]}, key=float)
    header = ["IoU", "Model"] + [c.capitalize() for c in cols] + ["Average"]
    lines = []
    for thr in thr_list:
        for label, m in rows:
            aps = m["ap"].get(thr, {})
            lines.append([thr, label] + [_fmt(aps.get(c)) for c in cols] + [_fmt(m["map"].get(thr))])
    return _render(header, lines)


def format_f1_table(rows: Seq[tuple[str, dict]]) -> str:
    cols: list[str] = []
    for _, f in rows:
        for name in f["class_names"][1:]:
            if name not in cols:
                cols.append(name)
    header = ["Model"] + [c.capitalize() for c in cols] + ["Average"]
    lines = []
    for label, f in rows:
        per = dict(zip(f["class_names"], f["per_class"]))
        lines.append([label] + [_fmt(per.get(c)) for c in cols] + [_fmt(f["macro"])])
    return _render(header, lines)


def format_fp_table(rows: Seq[tuple[str, dict]]) -> str:
    header = ["Model"] + list(FP_CATEGORIES)
    lines = []
    for label, att in rows:
        if att["empty"]:
            lines.append([label] + ["(no FPs)"] + [""] * (len(FP_CATEGORIES) - 1))
        else:
            lines.append([label] + [f"{100 * att['fractions'][c]:.2f}%" for c in FP_CATEGORIES])
    return _render(header, lines)


def _render(header: list[str], lines: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(v).rjust(w) for v, w in zip(r, widths))  # noqa: E731
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule] + [fmt(r) for r in lines])
