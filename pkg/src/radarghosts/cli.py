"""Command-line entry point: simulate, overlay, ghosts, train, detect, evaluate, report, sweep, rerun."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__, experiment as ex, geometry, nnet
from .core import ClassConfig, DatasetError, Split, read_sequence, write_sequence
from .evaluate import format_ap_table, format_f1_table, format_fp_table
from .report import bev_svg
from .simulate import Scenario, ScenarioError, find_overlay, generate_sequence, overlay_sequences

log = logging.getLogger("radarghosts")


class CLIError(Exception):
    pass


# --- helpers -------------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CLIError(f"{path}: no such file") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, doc) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return p


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_experiment(path, seed: int | None = None) -> ex.ExperimentConfig:
    cfg = ex.load_config(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def _parse_iou(text: str | None, default) -> tuple:
    if not text:
        return tuple(default)
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise CLIError(f"--iou: expected comma-separated numbers, got {text!r}") from exc


def _splits(name: str) -> list[Split]:
    try:
        return [Split[name.upper()]]
    except KeyError as exc:
        raise CLIError(f"--split: expected train, val or test, got {name!r}") from exc


def write_manifest(out, args: argparse.Namespace, config: dict | None, outputs: list, inputs: list = ()) -> Path:
    """Sidecar describing how ``out`` was produced; enough to re-run the stage."""
    doc = {
        "command": args.command,
        "argv": args.argv,
        "cwd": os.getcwd(),
        "seed": getattr(args, "seed", None),
        "config_hash": ex.config_hash(config) if config is not None else None,
        "config": config,
        "versions": {"radarghosts": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = Path(str(out).rstrip("/") + ".manifest.json")
    return _write_json(path, doc)


# --- subcommands ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    doc = _read_json(args.config)
    if "recordings" in doc:
        cfg = ex.ExperimentConfig.from_dict(doc)
        if args.seed is not None:
            cfg = reseed_recordings(cfg, args.seed)
        suite = ex.build_suite(cfg)
        outputs = ex.save_suite(suite, args.out)
        for name, seq in suite.sequences.items():
            log.info("%s: %d frames (%s)", name, len(seq), seq.split.value)
        write_manifest(args.out, args, cfg.to_dict(), outputs, [args.config])
        print(f"wrote {len(suite.sequences)} sequences to {args.out}")
        return 0
    try:
        sc = Scenario.from_dict(doc)
    except ScenarioError as exc:
        raise CLIError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    seq = generate_sequence(sc)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_sequence(seq, args.out)
    write_manifest(args.out, args, sc.to_dict(), [args.out], [args.config])
    print(f"wrote {len(seq)} frames to {args.out}")
    return 0


def reseed_recordings(cfg: ex.ExperimentConfig, seed: int) -> ex.ExperimentConfig:
    recs = []
    for i, r in enumerate(cfg.recordings):
        r = json.loads(json.dumps(r))
        if "preset_args" in r:
            r["preset_args"]["seed"] = seed * 1000 + i
        else:
            r["seed"] = seed * 1000 + i
        recs.append(r)
    return replace(cfg, recordings=tuple(recs), overlays=replace(cfg.overlays, seed=seed))


def cmd_overlay(args) -> int:
    seqs = [read_sequence(p) for p in args.inputs]
    if args.offsets:
        if len(args.offsets) != len(seqs):
            raise CLIError("--offsets: one offset per input required")
        merged = overlay_sequences(seqs, args.offsets, args.min_separation, args.length)
        offsets = list(args.offsets)
    else:
        if args.length is None:
            raise CLIError("--length is required when offsets are drawn at random")
        rng = np.random.default_rng(0 if args.seed is None else args.seed)
        merged, offsets = find_overlay(seqs, rng, args.length, args.min_separation)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_sequence(merged, args.out)
    write_manifest(args.out, args, {"offsets": offsets, "min_separation": args.min_separation}, [args.out],
                   args.inputs)
    print(f"overlay of {len(seqs)} sequences at offsets {offsets}: {len(merged)} frames -> {args.out}")
    return 0


def cmd_ghosts(args) -> int:
    try:
        sc = Scenario.from_dict(_read_json(args.config))
    except ScenarioError as exc:
        raise CLIError(f"{args.config}: {exc}") from exc
    times = [args.time] if args.time is not None else [
        i * sc.sensor.cycle_time for i in range(0, sc.num_frames, max(1, args.every))]
    rows = []
    for t in times:
        obj = sc.state(t)
        rows.append({"t": t, "kind": "REAL", "surface": None, "range": math.hypot(*obj.pos),
                     "bearing_deg": math.degrees(math.atan2(obj.pos[1], obj.pos[0])),
                     "x": obj.pos[0], "y": obj.pos[1], "doppler": geometry.real_doppler((0.0, 0.0), obj),
                     "valid": True})
        for w in sc.walls:
            try:
                preds = geometry.ghost_detections((0.0, 0.0), obj, w)
            except geometry.GeometryError:
                continue
            for g in preds:
                rows.append({"t": t, "kind": g.kind.name, "surface": w.id, "range": g.range,
                             "bearing_deg": math.degrees(g.bearing), "x": g.pos[0], "y": g.pos[1],
                             "doppler": g.doppler, "valid": g.valid})
    header = f"{'t':>6}  {'kind':<5} {'wall':>4} {'range':>8} {'bearing':>8} {'x':>8} {'y':>8} {'doppler':>8}  valid"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['t']:6.2f}  {r['kind']:<5} {'' if r['surface'] is None else r['surface']:>4} "
                     f"{r['range']:8.3f} {r['bearing_deg']:8.2f} {r['x']:8.3f} {r['y']:8.3f} {r['doppler']:8.3f}  "
                     f"{'yes' if r['valid'] else 'no'}")
    print("\n".join(lines))
    if args.out:
        _write_json(args.out, {"scenario": sc.scenario_id, "rows": rows})
        write_manifest(args.out, args, sc.to_dict(), [args.out], [args.config])
    return 0


def _train_one(cfg: ex.ExperimentConfig, suite: ex.Suite, out) -> nnet.Model:
    t0 = time.perf_counter()
    model = ex.train_model(cfg, suite)
    log.info("training took %.1f s", time.perf_counter() - t0)
    model.meta["config_hash"] = ex.config_hash(cfg.to_dict())
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    nnet.save_model(model, out)
    return model


def _suite_for(args, cfg: ex.ExperimentConfig) -> ex.Suite:
    if args.data:
        return ex.load_suite(args.data)
    log.info("no --data given, simulating the configured suite in memory")
    return ex.build_suite(cfg)


def _class_override(cfg: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    cc = cfg.class_config
    try:
        if getattr(args, "granularity", None):
            cc = ClassConfig(ex.Granularity(args.granularity), cc.labelset)
        if getattr(args, "labelset", None):
            cc = ClassConfig(cc.granularity, ex.LabelSet(args.labelset))
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    return cfg.with_class_config(cc)


def cmd_train(args) -> int:
    cfg = _class_override(_load_experiment(args.config, args.seed), args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    suite = _suite_for(args, cfg)
    model = _train_one(cfg, suite, args.out)
    inputs = [args.config] + ([Path(args.data) / ex.SUITE_FILE] if args.data else [])
    write_manifest(args.out, args, cfg.to_dict(), [args.out], inputs)
    print(f"model {model.class_config.tag} -> {args.out}; final loss {model.meta['final_loss']}")
    return 0


def cmd_detect(args) -> int:
    model = nnet.load_model(args.model)
    cfg = _preprocess_from(args)
    suite = ex.load_suite(args.data, _splits(args.split))
    inferences = ex.infer(model, list(suite.sequences.values()), cfg)
    dets = ex.detect(model, inferences, args.method, args.nms_iou)
    lines = ex.detections_doc(dets, model, args.method, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(args.out, args, {"method": args.method, "preprocess": asdict(cfg), "nms_iou": args.nms_iou},
                   [args.out], [args.model])
    print(f"{len(dets)} detections on {len(inferences)} clouds -> {args.out}")
    return 0


def _preprocess_from(args) -> ex.PreprocessConfig:
    cfg = ex.load_config(args.config).preprocess if getattr(args, "config", None) else ex.PreprocessConfig()
    if getattr(args, "stride", None):
        cfg = replace(cfg, eval_stride=args.stride)
    return cfg


def cmd_evaluate(args) -> int:
    header, dets = ex.read_detections(args.detections)
    pp = ex.PreprocessConfig(**header["preprocess"])
    cc = ClassConfig.from_dict(header["class_config"])
    suite = ex.load_suite(args.data, _splits(args.split))
    seqs = list(suite.sequences.values())
    items = [it for s in seqs for it in ex.cloud_items(s, pp, cc, pp.eval_stride)]
    known = {(it.sequence, it.cycle) for it in items}
    stray = sorted({k for k, _ in dets if k not in known})
    if stray:
        raise CLIError(f"detections refer to clouds not in the {args.split} data, e.g. {stray[0]}")
    ev = ex.EvalConfig(_parse_iou(args.iou, (0.3, 0.5)), args.eleven_point, args.per_frame)
    metrics = ex.score(dets, items, cc, ev)
    metrics["method"] = header.get("method")
    if args.model:
        model = nnet.load_model(args.model)
        originals = [s for n, s in suite.sequences.items() if n not in suite.overlays]
        metrics["semantic_f1"] = ex.semantic_f1(ex.infer(model, originals, pp), cc)
    text = render_tables([(args.label or cc.tag, metrics)])
    print(text)
    _write_json(args.out, metrics)
    Path(str(args.out) + ".txt").write_text(text + "\n", encoding="utf-8")
    write_manifest(args.out, args, {"eval": asdict(ev)}, [args.out, str(args.out) + ".txt"],
                   [args.detections] + ([args.model] if args.model else []))
    return 0


def render_tables(rows) -> str:
    blocks = ["Average precision (%)", format_ap_table(rows)]
    f1 = [(label, m["semantic_f1"]) for label, m in rows if m.get("semantic_f1")]
    if f1:
        blocks += ["", "Semantic segmentation F1 (%)", format_f1_table(f1)]
    blocks += ["", "False positives by cause (best-F1 score threshold)",
               format_fp_table([(label, m["fp_attribution"]) for label, m in rows])]
    return "\n".join(blocks)


def cmd_report(args) -> int:
    rows = []
    for p in args.metrics:
        m = _read_json(p)
        rows.append((Path(p).stem, m))
    outputs = []
    text = render_tables(rows) if rows else ""
    if text:
        print(text)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        outputs.append(args.out)
    if args.svg:
        if not args.sequence:
            raise CLIError("--svg needs --sequence")
        seq = read_sequence(args.sequence)
        pos = args.frame if args.frame is not None else len(seq) // 2
        if not 0 <= pos < len(seq):
            raise CLIError(f"--frame: sequence has {len(seq)} frames")
        dets = _frame_detections(args.detections, seq, pos) if args.detections else []
        Path(args.svg).parent.mkdir(parents=True, exist_ok=True)
        Path(args.svg).write_text(bev_svg(seq, pos, dets), encoding="utf-8")
        outputs.append(args.svg)
    if not outputs:
        raise CLIError("nothing to report: give --metrics and/or --svg")
    write_manifest(outputs[0], args, None, outputs, list(args.metrics))
    return 0


def _frame_detections(path, seq, pos: int) -> list:
    """Detections of the cloud ending at ``pos``, mapped to indices of that frame's points."""
    header, dets = ex.read_detections(path)
    n_cycles = header["preprocess"]["num_cycles"]
    start = max(0, pos - n_cycles + 1)
    offset = sum(len(seq.frames[i]) for i in range(start, pos))
    cycle = seq.frames[pos].cycle_index
    out = []
    for (name, c), d in dets:
        if name == seq.name and c == cycle:
            own = {i - offset for i in d.point_indices if i >= offset}
            if own:
                out.append(own)
    return out


def cmd_sweep(args) -> int:
    """Train, detect and evaluate all six class configurations."""
    base = _load_experiment(args.config, args.seed)
    if args.steps is not None:
        base = replace(base, train=replace(base.train, steps=args.steps))
    suite = _suite_for(args, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = suite.split(Split.TEST)
    originals = [s for n, s in suite.sequences.items() if s.split == Split.TEST and n not in suite.overlays]
    rows, dbscan_rows, outputs = [], [], []
    for cc in ClassConfig.all():
        cfg = base.with_class_config(cc)
        model_path = out / f"model-{cc.tag}.json"
        model = _train_one(cfg, suite, model_path)
        inferences = ex.infer(model, test, cfg.preprocess)
        items = [inf.item for inf in inferences]
        for method, bucket in (("sgpn", rows), ("dbscan", dbscan_rows)):
            dets = ex.detect(model, inferences, method, cfg.detector.nms_iou)
            m = ex.score(dets, items, cc, cfg.eval)
            if method == "sgpn":
                m["semantic_f1"] = ex.semantic_f1([i for i in inferences if i.item.sequence in
                                                   {s.name for s in originals}], cc)
            m["method"] = method
            path = _write_json(out / f"metrics-{cc.tag}-{method}.json", m)
            outputs += [model_path, path] if method == "sgpn" else [path]
            bucket.append((cc.tag, m))
        log.info("%s done", cc.tag)
    text = "\n\n".join(["SGPN", render_tables(rows), "DBSCAN", render_tables(dbscan_rows)])
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    outputs.append(out / "summary.txt")
    print(text)
    write_manifest(out, args, base.to_dict(), outputs, [args.config])
    return 0


def cmd_rerun(args) -> int:
    """Re-execute the stage recorded in a manifest and compare output hashes."""
    man = _read_json(args.manifest)
    if "argv" not in man or "outputs" not in man:
        raise CLIError(f"{args.manifest}: not a run manifest")
    cwd = os.getcwd()
    try:
        os.chdir(man.get("cwd") or cwd)
        recorded = dict(man["outputs"])
        code = main(man["argv"])
        if code != 0:
            return code
        mismatched = [p for p, h in recorded.items() if not Path(p).exists() or _sha256(p) != h]
    finally:
        os.chdir(cwd)
    for p in mismatched:
        print(f"DIFFERS: {p}")
    print("identical" if not mismatched else f"{len(mismatched)} output(s) differ")
    return 0 if not mismatched else 3


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radarghosts", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a sequence (scenario config) or a full suite (experiment config)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="sequence file, or directory for an experiment suite")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("overlay", help="overlay recordings of one scenario")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--offsets", type=int, nargs="+")
    p.add_argument("--length", type=int)
    p.add_argument("--min-separation", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("ghosts", help="tabulate predicted ghost detections along a scenario trajectory")
    p.add_argument("--config", required=True)
    p.add_argument("--time", type=float)
    p.add_argument("--every", type=int, default=10, help="frame step of the table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ghosts)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="suite directory written by 'simulate'")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--granularity", choices=[g.value for g in ex.Granularity])
    p.add_argument("--labelset", choices=[v.value for v in ex.LabelSet])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a model over a split and write detections")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="experiment config for preprocessing settings")
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["sgpn", "dbscan"], default="sgpn")
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--model", help="also report semantic F1 of this model")
    p.add_argument("--iou", help="comma-separated IoU thresholds, default 0.3,0.5")
    p.add_argument("--eleven-point", action="store_true")
    p.add_argument("--per-frame", action="store_true")
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render metric tables and an optional BEV snapshot")
    p.add_argument("--metrics", nargs="*", default=[])
    p.add_argument("--sequence")
    p.add_argument("--frame", type=int)
    p.add_argument("--detections")
    p.add_argument("--svg")
    p.add_argument("--out", default="report.txt")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="train and evaluate all six class configurations")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rerun", help="repeat a stage from its manifest and check the outputs are identical")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("RADARGHOSTS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (CLIError, ex.ConfigError, DatasetError, ScenarioError, nnet.TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
