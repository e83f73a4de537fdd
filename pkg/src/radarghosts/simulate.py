"""Detection-level radar simulator and multi-sequence overlay synthesis.

A scenario is a single VRU walking (or riding) out and back along a path
next to reflective walls, seen by a stationary sensor at the origin.  Each
frame contains the real object cluster, ghost clusters at the positions the
specular geometry predicts, sparse higher-order (OMP) returns, and
stationary clutter.  CFAR is abstracted as per-kind detection probabilities.

Frames get their own RNG derived from ``(seed, cycle_index)``, so any subset
of frames can be generated in any order with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence as Seq

import numpy as np

from . import geometry
from .core import (
    NO_SURFACE,
    Frame,
    Label,
    ObjectClass,
    SensorSpec,
    Sequence,
    Split,
    WallSegment,
    validate_sequence,
)

DEFAULT_POINTS_PER_FRAME = {Label.REAL: 12.0, Label.MP12: 4.0, Label.MP22: 4.0, Label.MP23: 4.0, Label.OMP: 3.0}
DEFAULT_DETECTION_PROB = {Label.REAL: 1.0, Label.MP12: 0.7, Label.MP22: 0.7, Label.MP23: 0.5, Label.OMP: 0.05}
_BOUNCE_ORDER = {Label.REAL: 1, Label.MP12: 2, Label.MP22: 2, Label.MP23: 3, Label.OMP: 4}
_KIND_SLOT = {Label.MP12: 0, Label.MP22: 1, Label.MP23: 2, Label.OMP: 3}


class ScenarioError(ValueError):
    pass


class OverlapError(ValueError):
    def __init__(self, frame: int, pair: tuple[int, int], distance: float):
        self.frame, self.pair, self.distance = frame, pair, distance
        super().__init__(f"instances {pair[0]} and {pair[1]} are {distance:.3f} m apart in frame {frame}")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    walls: tuple[WallSegment, ...]
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 1.5
    object_class: ObjectClass = ObjectClass.PEDESTRIAN
    n_frames: int | None = None  # None: one full out-and-back traversal
    points_per_frame_mean: dict = field(default_factory=lambda: dict(DEFAULT_POINTS_PER_FRAME))
    detection_prob: dict = field(default_factory=lambda: dict(DEFAULT_DETECTION_PROB))
    spatial_sigma: float = 0.2
    along_track_sigma: float = 0.0  # extra spread along the heading (cyclists)
    doppler_sigma: float = 0.1
    clutter_rate: float = 600.0
    clutter_doppler_sigma: float = 0.1
    wall_clutter_density: float = 1.0  # stationary returns per metre of wall per frame
    amplitude_ref: float = 80.0  # dB at 1 m for a direct return
    clutter_amplitude_ref: float = 75.0
    clutter_amplitude_sigma: float = 6.0
    amplitude_sigma: float = 2.0
    bounce_loss_db: float = 10.0
    omp_extra_range: tuple[float, float] = (0.5, 4.0)
    indistinguishable_radius: float = 0.5
    sketchy_radius: float = 0.4
    seed: int = 0
    split: Split = Split.TRAIN
    name: str = ""
    sensor: SensorSpec = SensorSpec()

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "waypoints", tuple((float(x), float(y)) for x, y in self.waypoints))
        object.__setattr__(self, "points_per_frame_mean", {Label(k): float(v) for k, v in self.points_per_frame_mean.items()})
        object.__setattr__(self, "detection_prob", {Label(k): float(v) for k, v in self.detection_prob.items()})
        self.validate()

    def validate(self) -> None:
        if len(self.waypoints) < 2:
            raise ScenarioError("trajectory needs at least two waypoints")
        if self.speed <= 0:
            raise ScenarioError("speed must be positive")
        for k, p in self.detection_prob.items():
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"detection probability for {k.name} outside [0, 1]")
        for k, m in self.points_per_frame_mean.items():
            if m < 0:
                raise ScenarioError(f"negative point mean for {k.name}")
        if self.clutter_rate < 0 or self.wall_clutter_density < 0:
            raise ScenarioError("clutter rates must be non-negative")
        if self.n_frames is not None and self.n_frames < 1:
            raise ScenarioError("n_frames must be positive")
        x0, y0 = self.waypoints[0]
        r0 = math.hypot(x0, y0)
        if not (self.sensor.range_min <= r0 <= self.sensor.range_max
                and abs(math.degrees(math.atan2(y0, x0))) <= self.sensor.azimuth_fov):
            raise ScenarioError("trajectory must start inside the field of view")

    @property
    def path_length(self) -> float:
        w = np.asarray(self.waypoints)
        return float(np.sum(np.hypot(*np.diff(w, axis=0).T)))

    @property
    def num_frames(self) -> int:
        if self.n_frames is not None:
            return self.n_frames
        return int(round(2.0 * self.path_length / self.speed / self.sensor.cycle_time)) + 1

    def state(self, t: float) -> geometry.MovingPoint:
        """Object position/velocity at time ``t`` on the out-and-back path."""
        w = np.asarray(self.waypoints)
        seg = np.diff(w, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        total = float(seg_len.sum())
        phase = math.fmod(self.speed * t, 2.0 * total)
        outbound = phase <= total
        s = phase if outbound else 2.0 * total - phase
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
        u = seg[i] / seg_len[i]
        pos = w[i] + (s - cum[i]) * u
        vel = (1.0 if outbound else -1.0) * self.speed * u
        return geometry.MovingPoint((float(pos[0]), float(pos[1])), (float(vel[0]), float(vel[1])))

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "walls": [w.to_dict() for w in self.walls],
            "waypoints": [list(p) for p in self.waypoints],
            "speed": self.speed,
            "object_class": self.object_class.name,
            "n_frames": self.n_frames,
            "points_per_frame_mean": {k.name: v for k, v in self.points_per_frame_mean.items()},
            "detection_prob": {k.name: v for k, v in self.detection_prob.items()},
            "spatial_sigma": self.spatial_sigma,
            "along_track_sigma": self.along_track_sigma,
            "doppler_sigma": self.doppler_sigma,
            "clutter_rate": self.clutter_rate,
            "clutter_doppler_sigma": self.clutter_doppler_sigma,
            "wall_clutter_density": self.wall_clutter_density,
            "amplitude_ref": self.amplitude_ref,
            "clutter_amplitude_ref": self.clutter_amplitude_ref,
            "clutter_amplitude_sigma": self.clutter_amplitude_sigma,
            "amplitude_sigma": self.amplitude_sigma,
            "bounce_loss_db": self.bounce_loss_db,
            "omp_extra_range": list(self.omp_extra_range),
            "indistinguishable_radius": self.indistinguishable_radius,
            "sketchy_radius": self.sketchy_radius,
            "seed": self.seed,
            "split": self.split.value,
            "name": self.name,
            "sensor": self.sensor.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        try:
            if "preset" in d:
                preset = d.pop("preset")
                base = PRESETS[preset](**d.pop("preset_args", {}))
                return replace(base, **_decode_fields(d)) if d else base
            return cls(**_decode_fields(d))
        except KeyError as exc:
            raise ScenarioError(f"unknown scenario field or preset: {exc}") from exc
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc


def _decode_fields(d: dict) -> dict:
    out = dict(d)
    if "walls" in out:
        out["walls"] = tuple(w if isinstance(w, WallSegment) else WallSegment.from_dict(w) for w in out["walls"])
    if "object_class" in out and isinstance(out["object_class"], str):
        out["object_class"] = ObjectClass[out["object_class"]]
    for key in ("points_per_frame_mean", "detection_prob"):
        if key in out:
            out[key] = {Label[k] if isinstance(k, str) else Label(k): v for k, v in out[key].items()}
    if "split" in out and isinstance(out["split"], str):
        out["split"] = Split(out["split"])
    if "sensor" in out and isinstance(out["sensor"], dict):
        out["sensor"] = SensorSpec.from_dict(out["sensor"])
    if "omp_extra_range" in out:
        out["omp_extra_range"] = tuple(out["omp_extra_range"])
    return out


# --- presets -------------------------------------------------------------------

def corridor(lateral: float = 1.0, speed: float = 1.5, wall_offset: float = 5.0, depth: float = 30.0,
             object_class: str | ObjectClass = "PEDESTRIAN", seed: int = 0, scenario_id: str = "corridor",
             n_frames: int | None = None, split: str | Split = "TRAIN", name: str = "") -> Scenario:
    """A wall parallel to the walking direction at ``wall_offset`` metres to the side.

    The object walks along +x at lateral offset ``lateral`` out to ``depth`` metres
    and back.  A negative ``wall_offset`` puts the wall on the right.
    """
    cls = ObjectClass[object_class] if isinstance(object_class, str) else object_class
    wall = WallSegment(0, (0.5, wall_offset), (depth + 25.0, wall_offset))
    cyclist = cls == ObjectClass.CYCLIST
    return Scenario(
        scenario_id=scenario_id,
        walls=(wall,),
        waypoints=((2.0, lateral), (depth, lateral)),
        speed=speed,
        object_class=cls,
        n_frames=n_frames,
        spatial_sigma=0.2,
        along_track_sigma=0.45 if cyclist else 0.0,
        seed=seed,
        split=Split(split) if isinstance(split, str) else split,
        name=name,
    )


PRESETS = {"corridor": corridor}


# --- frame generation ------------------------------------------------------------

def frame_rng(seed: int, cycle_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(cycle_index)])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


class _Parts:
    def __init__(self):
        self.cols: dict[str, list[np.ndarray]] = {k: [] for k in
                                                  ("x", "y", "doppler", "amplitude", "instance_id", "label",
                                                   "object_class", "surface_id", "sketchy")}

    def add(self, x, y, doppler, amplitude, instance_id, label, object_class, surface_id, sketchy):
        n = len(x)
        self.cols["x"].append(np.asarray(x, float))
        self.cols["y"].append(np.asarray(y, float))
        self.cols["doppler"].append(np.asarray(doppler, float))
        self.cols["amplitude"].append(np.asarray(amplitude, float))
        for key, val in (("instance_id", instance_id), ("label", int(label)), ("object_class", int(object_class)),
                         ("surface_id", surface_id), ("sketchy", sketchy)):
            self.cols[key].append(np.full(n, val))

    def stacked(self) -> dict[str, np.ndarray]:
        return {k: np.concatenate(v) if v else np.zeros(0) for k, v in self.cols.items()}


def _amplitude(sc: Scenario, rng, r: np.ndarray, order: int) -> np.ndarray:
    return (sc.amplitude_ref - 40.0 * np.log10(np.maximum(r, sc.sensor.range_min))
            - sc.bounce_loss_db * (order - 1) + rng.normal(0.0, sc.amplitude_sigma, len(r)))


def _cluster(sc: Scenario, rng, center, heading, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian scatter around ``center``, optionally elongated along ``heading``."""
    pts = np.asarray(center, float) + rng.normal(0.0, sc.spatial_sigma, (n, 2))
    if sc.along_track_sigma > 0 and n:
        h = np.asarray(heading, float)
        norm = math.hypot(h[0], h[1])
        if norm > 0:
            pts += np.outer(rng.normal(0.0, sc.along_track_sigma, n), h / norm)
    return pts[:, 0], pts[:, 1]


def ghost_instance_id(wall_index: int, kind: Label) -> int:
    """Stable per-sequence instance id; the real object is 1."""
    return 2 + 4 * wall_index + _KIND_SLOT[kind]


def _quantize_and_gate(cols: dict[str, np.ndarray], sensor: SensorSpec) -> np.ndarray:
    r = np.hypot(cols["x"], cols["y"])
    az = np.degrees(np.arctan2(cols["y"], cols["x"]))
    rq = np.round(r / sensor.res_range) * sensor.res_range
    azq = np.round(az / sensor.res_azimuth) * sensor.res_azimuth
    dq = np.round(cols["doppler"] / sensor.res_doppler) * sensor.res_doppler
    keep = ((rq >= sensor.range_min) & (rq <= sensor.range_max)
            & (np.abs(azq) <= sensor.azimuth_fov) & (np.abs(dq) <= sensor.doppler_max))
    cols["x"] = rq * np.cos(np.radians(azq))
    cols["y"] = rq * np.sin(np.radians(azq))
    cols["doppler"] = dq
    return keep


def generate_frame(sc: Scenario, t: float, rng: np.random.Generator | None = None) -> Frame:
    """Simulate one radar cycle at time ``t`` (seconds from sequence start)."""
    sensor = sc.sensor
    cycle = int(round(t / sensor.cycle_time))
    if rng is None:
        rng = frame_rng(sc.seed, cycle)
    origin = (0.0, 0.0)
    obj = sc.state(t)
    o = np.asarray(obj.pos)
    parts = _Parts()
    obj_cls = sc.object_class
    mean = sc.points_per_frame_mean
    prob = sc.detection_prob

    def present(kind: Label) -> int:
        # draw order fixed per kind so outputs do not depend on which branches fire
        hit = rng.random() < prob.get(kind, 0.0)
        n = int(rng.poisson(mean.get(kind, 0.0)))
        return n if hit else 0

    occluded = any(_segments_intersect(origin, obj.pos, w.a, w.b) for w in sc.walls)
    n_real = present(Label.REAL)
    if occluded:
        n_real = 0
    xs, ys = _cluster(sc, rng, obj.pos, obj.vel, n_real)
    if n_real:
        u = np.stack([xs, ys], 1)
        u = u / np.maximum(np.hypot(u[:, 0], u[:, 1]), 1e-9)[:, None]
        dop = u @ np.asarray(obj.vel) + rng.normal(0.0, sc.doppler_sigma, n_real)
        parts.add(xs, ys, dop, _amplitude(sc, rng, np.hypot(xs, ys), 1), 1, Label.REAL, obj_cls, NO_SURFACE, False)

    for wi, wall in enumerate(sc.walls):
        if not geometry.same_side(origin, obj.pos, wall):
            continue
        preds = {p.kind: p for p in geometry.ghost_detections(origin, obj, wall)}
        mp22, mp23 = preds[Label.MP22], preds[Label.MP23]
        indist = math.dist(mp22.pos, mp23.pos) < sc.indistinguishable_radius
        for kind in (Label.MP12, Label.MP22, Label.MP23):
            pred = preds[kind]
            n = present(kind)
            if not pred.valid or (kind != Label.MP23 and occluded):
                n = 0
            gx, gy = _cluster(sc, rng, pred.pos, obj.vel, n)
            if not n:
                continue
            dop = pred.doppler + rng.normal(0.0, sc.doppler_sigma, n)
            label = Label.INDISTINGUISHABLE if indist and kind != Label.MP12 else kind
            sketchy = math.dist(pred.pos, obj.pos) < sc.sketchy_radius
            parts.add(gx, gy, dop, _amplitude(sc, rng, np.full(n, pred.range), _BOUNCE_ORDER[kind]),
                      ghost_instance_id(wi, kind), label, obj_cls, wall.id, sketchy)
        # higher-order returns scattered behind the wall along the mirrored bearing
        n = present(Label.OMP)
        if not mp23.valid:
            n = 0
        if n:
            rng_omp = mp23.range + rng.uniform(*sc.omp_extra_range, n)
            bearing = mp23.bearing + rng.normal(0.0, sc.spatial_sigma / max(mp23.range, 1.0), n)
            dop = mp23.doppler + rng.normal(0.0, 3 * sc.doppler_sigma, n)
            parts.add(rng_omp * np.cos(bearing), rng_omp * np.sin(bearing), dop,
                      _amplitude(sc, rng, rng_omp, _BOUNCE_ORDER[Label.OMP]),
                      ghost_instance_id(wi, Label.OMP), Label.OMP, obj_cls, NO_SURFACE, False)

    n_clutter = int(rng.poisson(sc.clutter_rate))
    fov = math.radians(sensor.azimuth_fov)
    r = sensor.range_max * np.sqrt(rng.uniform((sensor.range_min / sensor.range_max) ** 2, 1.0, n_clutter))
    az = rng.uniform(-fov, fov, n_clutter)
    amp = (sc.clutter_amplitude_ref - 40.0 * np.log10(r)
           + rng.normal(0.0, sc.clutter_amplitude_sigma, n_clutter))
    parts.add(r * np.cos(az), r * np.sin(az), rng.normal(0.0, sc.clutter_doppler_sigma, n_clutter), amp,
              0, Label.BACKGROUND, ObjectClass.NONE, NO_SURFACE, False)

    for wall in sc.walls:
        a, b = np.asarray(wall.a), np.asarray(wall.b)
        n = int(rng.poisson(sc.wall_clutter_density * float(np.hypot(*(b - a)))))
        s = rng.uniform(0.0, 1.0, n)
        pts = a + np.outer(s, b - a) + rng.normal(0.0, 0.1, (n, 2))
        rr = np.hypot(pts[:, 0], pts[:, 1])
        amp = (sc.clutter_amplitude_ref + 5.0 - 40.0 * np.log10(np.maximum(rr, sensor.range_min))
               + rng.normal(0.0, sc.clutter_amplitude_sigma, n))
        parts.add(pts[:, 0], pts[:, 1], rng.normal(0.0, sc.clutter_doppler_sigma, n), amp,
                  0, Label.BACKGROUND, ObjectClass.NONE, NO_SURFACE, False)

    cols = parts.stacked()
    keep = _quantize_and_gate(cols, sensor)
    return Frame(cycle, cycle * sensor.cycle_time, **{k: v[keep] for k, v in cols.items()})


def generate_sequence(sc: Scenario) -> Sequence:
    dt = sc.sensor.cycle_time
    frames = tuple(generate_frame(sc, i * dt, frame_rng(sc.seed, i)) for i in range(sc.num_frames))
    seq = Sequence(sc.scenario_id, sc.walls, frames, sc.split, sc.sensor, sc.name or f"{sc.scenario_id}-s{sc.seed}")
    validate_sequence(seq)
    return seq


# --- overlays --------------------------------------------------------------------

def _centroids(frame: Frame) -> dict[int, np.ndarray]:
    out = {}
    for iid in np.unique(frame.instance_id):
        if iid == 0:
            continue
        m = frame.instance_id == iid
        out[int(iid)] = np.array([frame.x[m].mean(), frame.y[m].mean()])
    return out


def overlay_sequences(seqs: Seq[Sequence], offsets: Seq[int], min_separation: float = 1.0,
                      out_len: int | None = None) -> Sequence:
    """Union of several recordings of one scenario, each shifted by a frame offset.

    Instance ids are re-mapped to be unique across sources.  Raises
    OverlapError if instances from different sources ever come closer than
    ``min_separation`` (centroid distance).
    """
    if not 2 <= len(seqs) <= 5:
        raise ScenarioError("overlay needs between two and five sequences")
    if len(offsets) != len(seqs):
        raise ScenarioError("one offset per sequence required")
    if len({s.scenario_id for s in seqs}) != 1:
        raise ScenarioError("overlaid sequences must come from the same scenario")
    if len({s.split for s in seqs}) != 1:
        raise ScenarioError("overlaid sequences must belong to the same split")
    if any(o < 0 for o in offsets):
        raise ScenarioError("offsets must be non-negative")
    available = min(len(s) - o for s, o in zip(seqs, offsets))
    if out_len is None:
        out_len = available
    if out_len < 10:
        raise ScenarioError("overlays must span at least ten frames")
    if out_len > available:
        raise ScenarioError(f"requested {out_len} frames but only {available} overlap")

    id_maps: list[dict[int, int]] = []
    next_id = 1
    for s, off in zip(seqs, offsets):
        ids = sorted({int(i) for f in s.frames[off:off + out_len] for i in np.unique(f.instance_id) if i != 0})
        id_maps.append({i: next_id + k for k, i in enumerate(ids)})
        next_id += len(ids)

    dt = seqs[0].sensor.cycle_time
    frames = []
    for k in range(out_len):
        parts = []
        cents = []
        for src, (s, off, idm) in enumerate(zip(seqs, offsets, id_maps)):
            f = s.frames[off + k]
            new_ids = np.array([idm.get(int(i), 0) for i in f.instance_id], dtype=np.int64)
            g = f.with_instance_ids(new_ids)
            parts.append(g)
            cents.append(_centroids(g))
        for a in range(len(cents)):
            for b in range(a + 1, len(cents)):
                for ia, ca in cents[a].items():
                    for ib, cb in cents[b].items():
                        d = float(np.hypot(*(ca - cb)))
                        if d < min_separation:
                            raise OverlapError(k, (ia, ib), d)
        frames.append(Frame.concat(k, k * dt, parts))
    name = "overlay(" + ",".join(f"{s.name}@{o}" for s, o in zip(seqs, offsets)) + ")"
    return Sequence(seqs[0].scenario_id, seqs[0].walls, tuple(frames), seqs[0].split, seqs[0].sensor, name)


def find_overlay(seqs: Seq[Sequence], rng: np.random.Generator, out_len: int, min_separation: float = 1.0,
                 max_tries: int = 200) -> tuple[Sequence, list[int]]:
    """Draw random frame offsets until the overlay passes the separation check."""
    limit = [len(s) - out_len for s in seqs]
    if min(limit) < 0:
        raise ScenarioError(f"a source sequence is shorter than {out_len} frames")
    last: Exception | None = None
    for _ in range(max_tries):
        offsets = [int(rng.integers(0, m + 1)) for m in limit]
        try:
            return overlay_sequences(seqs, offsets, min_separation, out_len), offsets
        except OverlapError as exc:
            last = exc
    raise ScenarioError(f"no overlap-free offsets found in {max_tries} tries (last: {last})")
