"""Data model, label taxonomy and JSONL dataset serialization.

Frames are stored column-wise (one numpy array per point field) because a
sequence holds a few hundred thousand detections; ``Frame.points`` gives the
per-point ``RadarPoint`` view when that is more convenient.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np

FORMAT_NAME = "radarghosts-sequence"
FORMAT_VERSION = 1

IGNORE = -1
BACKGROUND_CLASS = 0
NO_SURFACE = -1


class Label(enum.IntEnum):
    REAL = 0
    MP12 = 1
    MP22 = 2
    MP23 = 3
    OMP = 4
    INDISTINGUISHABLE = 5
    BACKGROUND = 6
    IGNORE = 7


class ObjectClass(enum.IntEnum):
    PEDESTRIAN = 0
    CYCLIST = 1
    CAR = 2
    TRUCK = 3
    MOTORBIKE = 4
    NONE = 5


class Split(enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class Granularity(enum.Enum):
    PED_CYCL = "PED_CYCL"
    MERGED = "MERGED"


class LabelSet(enum.Enum):
    REAL_ONLY = "REAL_ONLY"
    DETAILED_MP = "DETAILED_MP"
    GHOST_MERGED = "GHOST_MERGED"


GHOST_LABELS = (Label.MP12, Label.MP22, Label.MP23)
VRU_CLASSES = (ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST)


class DatasetError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


@dataclass(frozen=True)
class SensorSpec:
    carrier_frequency: float = 77.0  # GHz
    range_min: float = 0.15
    range_max: float = 153.0
    azimuth_fov: float = 70.0  # deg, half-angle
    doppler_max: float = 44.3
    res_range: float = 0.15
    res_azimuth: float = 1.8  # deg
    res_doppler: float = 0.087
    cycle_time: float = 0.1

    def __post_init__(self):
        if min(self.res_range, self.res_azimuth, self.res_doppler, self.cycle_time) <= 0:
            raise ValueError("sensor resolutions must be positive")
        if not self.range_min < self.range_max:
            raise ValueError("range_min must be below range_max")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class WallSegment:
    id: int
    a: tuple[float, float]
    b: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "a", (float(self.a[0]), float(self.a[1])))
        object.__setattr__(self, "b", (float(self.b[0]), float(self.b[1])))
        if math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1]) == 0.0:
            raise ValueError(f"wall {self.id} has zero length")

    def to_dict(self) -> dict:
        return {"id": self.id, "a": list(self.a), "b": list(self.b)}

    @classmethod
    def from_dict(cls, d: dict) -> "WallSegment":
        return cls(int(d["id"]), tuple(d["a"]), tuple(d["b"]))


@dataclass(frozen=True)
class Annotation:
    instance_id: int = 0
    label: Label = Label.BACKGROUND
    object_class: ObjectClass = ObjectClass.NONE
    surface_id: int | None = None
    sketchy: bool = False

    def __post_init__(self):
        if self.label in (Label.BACKGROUND, Label.IGNORE):
            if self.instance_id != 0 or self.object_class != ObjectClass.NONE:
                raise ValueError(f"{self.label.name} points carry no instance or class")
        if self.label in GHOST_LABELS and self.surface_id is None:
            raise ValueError(f"{self.label.name} requires a surface_id")


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    doppler: float
    amplitude: float
    cycle_index: int
    annotation: Annotation = Annotation()

    @property
    def range(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def azimuth(self) -> float:
        return math.atan2(self.y, self.x)


_FLOAT_COLS = ("x", "y", "doppler", "amplitude")
_INT_COLS = ("instance_id", "label", "object_class", "surface_id")
POINT_COLUMNS = _FLOAT_COLS + _INT_COLS + ("sketchy",)


def _column(name: str, values) -> np.ndarray:
    if name in _FLOAT_COLS:
        arr = np.array(values, dtype=np.float64)
    elif name == "sketchy":
        arr = np.array(values, dtype=bool)
    else:
        arr = np.array(values, dtype=np.int64)
    arr = arr.reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Frame:
    """One radar cycle, stored as parallel per-point columns."""

    cycle_index: int
    timestamp: float
    x: np.ndarray = field(default_factory=lambda: _column("x", []))
    y: np.ndarray = field(default_factory=lambda: _column("y", []))
    doppler: np.ndarray = field(default_factory=lambda: _column("doppler", []))
    amplitude: np.ndarray = field(default_factory=lambda: _column("amplitude", []))
    instance_id: np.ndarray = field(default_factory=lambda: _column("instance_id", []))
    label: np.ndarray = field(default_factory=lambda: _column("label", []))
    object_class: np.ndarray = field(default_factory=lambda: _column("object_class", []))
    surface_id: np.ndarray = field(default_factory=lambda: _column("surface_id", []))
    sketchy: np.ndarray = field(default_factory=lambda: _column("sketchy", []))

    def __post_init__(self):
        n = None
        for name in POINT_COLUMNS:
            col = _column(name, getattr(self, name))
            object.__setattr__(self, name, col)
            if n is None:
                n = len(col)
            elif len(col) != n:
                raise ValueError(f"column {name} has {len(col)} entries, expected {n}")

    def __len__(self) -> int:
        return len(self.x)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.cycle_index == other.cycle_index
            and self.timestamp == other.timestamp
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in POINT_COLUMNS)
        )

    @property
    def range(self) -> np.ndarray:
        return np.hypot(self.x, self.y)

    @property
    def points(self) -> list[RadarPoint]:
        out = []
        for i in range(len(self)):
            sid = int(self.surface_id[i])
            ann = Annotation(
                int(self.instance_id[i]),
                Label(int(self.label[i])),
                ObjectClass(int(self.object_class[i])),
                None if sid == NO_SURFACE else sid,
                bool(self.sketchy[i]),
            )
            out.append(RadarPoint(float(self.x[i]), float(self.y[i]), float(self.doppler[i]),
                                  float(self.amplitude[i]), self.cycle_index, ann))
        return out

    @classmethod
    def from_points(cls, cycle_index: int, timestamp: float, points: Iterable[RadarPoint]) -> "Frame":
        pts = list(points)
        return cls(
            cycle_index,
            timestamp,
            x=[p.x for p in pts],
            y=[p.y for p in pts],
            doppler=[p.doppler for p in pts],
            amplitude=[p.amplitude for p in pts],
            instance_id=[p.annotation.instance_id for p in pts],
            label=[int(p.annotation.label) for p in pts],
            object_class=[int(p.annotation.object_class) for p in pts],
            surface_id=[NO_SURFACE if p.annotation.surface_id is None else p.annotation.surface_id for p in pts],
            sketchy=[p.annotation.sketchy for p in pts],
        )

    def select(self, mask) -> "Frame":
        return Frame(self.cycle_index, self.timestamp, **{c: getattr(self, c)[mask] for c in POINT_COLUMNS})

    def with_instance_ids(self, ids: np.ndarray) -> "Frame":
        cols = {c: getattr(self, c) for c in POINT_COLUMNS}
        cols["instance_id"] = ids
        return Frame(self.cycle_index, self.timestamp, **cols)

    @staticmethod
    def concat(cycle_index: int, timestamp: float, frames: Seq["Frame"]) -> "Frame":
        cols = {c: np.concatenate([getattr(f, c) for f in frames]) if frames else [] for c in POINT_COLUMNS}
        return Frame(cycle_index, timestamp, **cols)


@dataclass(frozen=True, eq=False)
class Sequence:
    scenario_id: str
    walls: tuple[WallSegment, ...]
    frames: tuple[Frame, ...]
    split: Split = Split.TRAIN
    sensor: SensorSpec = SensorSpec()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "frames", tuple(self.frames))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sequence):
            return NotImplemented
        return (
            self.scenario_id == other.scenario_id
            and self.walls == other.walls
            and self.split == other.split
            and self.sensor == other.sensor
            and self.name == other.name
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    def __len__(self) -> int:
        return len(self.frames)


# --- class configuration -----------------------------------------------------

_PREFIXES = {Granularity.PED_CYCL: ("ped", "cycl"), Granularity.MERGED: ("obj",)}
_SUFFIXES = {
    LabelSet.REAL_ONLY: ("",),
    LabelSet.DETAILED_MP: ("", "-12", "-22", "-23"),
    LabelSet.GHOST_MERGED: ("", "-ghost"),
}


@dataclass(frozen=True)
class ClassConfig:
    granularity: Granularity = Granularity.MERGED
    labelset: LabelSet = LabelSet.GHOST_MERGED

    @property
    def class_names(self) -> list[str]:
        """Index 0 is background, foreground classes follow prefix-major."""
        names = ["bg"]
        for p in _PREFIXES[self.granularity]:
            names += [p + s for s in _SUFFIXES[self.labelset]]
        return names

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def tag(self) -> str:
        return f"{self.granularity.value}-{self.labelset.value}"

    def to_dict(self) -> dict:
        return {"granularity": self.granularity.value, "labelset": self.labelset.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassConfig":
        return cls(Granularity(d["granularity"]), LabelSet(d["labelset"]))

    @classmethod
    def all(cls) -> list["ClassConfig"]:
        return [cls(g, l) for g in Granularity for l in LabelSet]

    def prefix_index(self, object_class: ObjectClass) -> int | None:
        if object_class not in VRU_CLASSES:
            return None
        return 0 if self.granularity == Granularity.MERGED else VRU_CLASSES.index(object_class)

    def suffix_index(self, label: Label) -> int | None:
        if label == Label.REAL:
            return 0
        if label not in GHOST_LABELS:
            return None
        if self.labelset == LabelSet.DETAILED_MP:
            return 1 + GHOST_LABELS.index(label)
        if self.labelset == LabelSet.GHOST_MERGED:
            return 1
        return None

    def class_index(self, label: Label, object_class: ObjectClass) -> int | None:
        p, s = self.prefix_index(object_class), self.suffix_index(label)
        if p is None or s is None:
            return None
        return 1 + p * len(_SUFFIXES[self.labelset]) + s


def _target(label: Label, object_class: ObjectClass, sketchy: bool, cfg: ClassConfig, evaluation: bool) -> int:
    if sketchy or label == Label.IGNORE:
        return IGNORE
    if label == Label.BACKGROUND:
        return BACKGROUND_CLASS
    if evaluation:
        if label == Label.INDISTINGUISHABLE:
            return IGNORE
        if label == Label.REAL and object_class not in VRU_CLASSES:
            return IGNORE
    idx = cfg.class_index(label, object_class)
    if idx is not None:
        return idx
    # untrained kinds: no loss during training, false-positive material in evaluation
    return BACKGROUND_CLASS if evaluation else IGNORE


def map_labels(ann: Annotation, cfg: ClassConfig) -> int:
    """Training target for one annotation: class index, or IGNORE."""
    return _target(ann.label, ann.object_class, ann.sketchy, cfg, evaluation=False)


def eval_label(ann: Annotation, cfg: ClassConfig) -> int:
    """Evaluation target: untrained ghost/OMP kinds count as background.

    Detections on them are false positives, which is what the confusion
    analysis measures.
    """
    return _target(ann.label, ann.object_class, ann.sketchy, cfg, evaluation=True)


def map_label_array(label, object_class, sketchy, cfg: ClassConfig, evaluation: bool = False) -> np.ndarray:
    """Vectorized ``map_labels`` (or ``eval_label``) over point columns."""
    table = np.empty((len(Label), len(ObjectClass), 2), dtype=np.int64)
    for lab in Label:
        for cls in ObjectClass:
            for sk in (0, 1):
                table[lab, cls, sk] = _target(lab, cls, bool(sk), cfg, evaluation)
    return table[np.asarray(label), np.asarray(object_class), np.asarray(sketchy).astype(np.int64)]


# --- validation --------------------------------------------------------------

_TOL = 1e-9


def validate_frame(frame: Frame, sensor: SensorSpec) -> None:
    """Raise DatasetError if any point violates the sensor envelope or label rules."""
    if len(frame) == 0:
        return
    r = frame.range
    az = np.degrees(np.arctan2(frame.y, frame.x))
    if np.any(r < sensor.range_min - _TOL) or np.any(r > sensor.range_max + _TOL):
        raise DatasetError(f"frame {frame.cycle_index}: point outside range limits")
    if np.any(np.abs(az) > sensor.azimuth_fov + _TOL):
        raise DatasetError(f"frame {frame.cycle_index}: point outside field of view")
    if np.any(np.abs(frame.doppler) > sensor.doppler_max + _TOL):
        raise DatasetError(f"frame {frame.cycle_index}: doppler outside limits")
    if not np.all(np.isfinite(frame.amplitude)):
        raise DatasetError(f"frame {frame.cycle_index}: non-finite amplitude")
    unlabeled = np.isin(frame.label, [Label.BACKGROUND, Label.IGNORE])
    if np.any(frame.instance_id[unlabeled] != 0) or np.any(frame.object_class[unlabeled] != ObjectClass.NONE):
        raise DatasetError(f"frame {frame.cycle_index}: background point carries an instance")
    ghost = np.isin(frame.label, list(GHOST_LABELS))
    if np.any(frame.surface_id[ghost] == NO_SURFACE):
        raise DatasetError(f"frame {frame.cycle_index}: multi-path point without surface")


def validate_sequence(seq: Sequence) -> None:
    for i, f in enumerate(seq.frames):
        validate_frame(f, seq.sensor)
        if i and not math.isclose(f.timestamp - seq.frames[i - 1].timestamp, seq.sensor.cycle_time,
                                  rel_tol=1e-9, abs_tol=1e-9):
            raise DatasetError(f"frame {f.cycle_index}: timestamps not spaced by the cycle time")
        if i and f.cycle_index != seq.frames[i - 1].cycle_index + 1:
            raise DatasetError(f"frame {f.cycle_index}: cycle indices not consecutive")


# --- JSONL serialization -----------------------------------------------------

def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _frame_record(f: Frame) -> dict:
    return {
        "cycle": f.cycle_index,
        "timestamp": f.timestamp,
        "points": {
            "x": f.x.tolist(),
            "y": f.y.tolist(),
            "doppler": f.doppler.tolist(),
            "amplitude": f.amplitude.tolist(),
            "instance_id": f.instance_id.tolist(),
            "label": [Label(v).name for v in f.label.tolist()],
            "class": [ObjectClass(v).name for v in f.object_class.tolist()],
            "surface_id": [None if v == NO_SURFACE else v for v in f.surface_id.tolist()],
            "sketchy": f.sketchy.tolist(),
        },
    }


def _frame_from_record(rec: dict) -> Frame:
    p = rec["points"]
    try:
        return Frame(
            int(rec["cycle"]),
            float(rec["timestamp"]),
            x=p["x"],
            y=p["y"],
            doppler=p["doppler"],
            amplitude=p["amplitude"],
            instance_id=p["instance_id"],
            label=[Label[v] for v in p["label"]],
            object_class=[ObjectClass[v] for v in p["class"]],
            surface_id=[NO_SURFACE if v is None else v for v in p["surface_id"]],
            sketchy=p["sketchy"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed frame record: {exc}") from exc


def sequence_header(seq: Sequence) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "scenario_id": seq.scenario_id,
        "name": seq.name,
        "split": seq.split.value,
        "sensor": seq.sensor.to_dict(),
        "walls": [w.to_dict() for w in seq.walls],
        "n_frames": len(seq.frames),
    }


def write_sequence(seq: Sequence, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(dumps_line(sequence_header(seq)) + "\n")
        for f in seq.frames:
            fh.write(dumps_line(_frame_record(f)) + "\n")


def read_header(path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    _check_header(header, path)
    return header


def _check_header(header: dict, path) -> None:
    if header.get("format") != FORMAT_NAME:
        raise DatasetError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: schema version {header.get('version')} != {FORMAT_VERSION}")


def read_sequence(path, validate: bool = True) -> Sequence:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DatasetError(f"{path}: empty file")
        header = json.loads(first)
        _check_header(header, path)
        frames = [_frame_from_record(json.loads(line)) for line in fh if line.strip()]
    if len(frames) != header["n_frames"]:
        raise DatasetError(f"{path}: header announces {header['n_frames']} frames, found {len(frames)}")
    seq = Sequence(
        scenario_id=header["scenario_id"],
        walls=tuple(WallSegment.from_dict(w) for w in header["walls"]),
        frames=tuple(frames),
        split=Split(header["split"]),
        sensor=SensorSpec.from_dict(header["sensor"]),
        name=header.get("name", ""),
    )
    if validate:
        validate_sequence(seq)
    return seq
