"""Multi-cycle accumulation, fixed-size resampling and per-point features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence as Seq

import numpy as np

from .core import POINT_COLUMNS, ClassConfig, Frame, map_label_array

DEFAULT_NUM_POINTS = 2560
DEFAULT_NUM_CYCLES = 3
FEATURE_NAMES = ("x", "y", "amplitude", "doppler", "rel_timestamp")


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Cloud:
    """Points of several consecutive frames, oldest frame first."""

    x: np.ndarray
    y: np.ndarray
    doppler: np.ndarray
    amplitude: np.ndarray
    instance_id: np.ndarray
    label: np.ndarray
    object_class: np.ndarray
    surface_id: np.ndarray
    sketchy: np.ndarray
    rel_timestamp: np.ndarray
    cycle: np.ndarray
    newest_cycle: int

    def __len__(self) -> int:
        return len(self.x)


def accumulate(frames: Seq[Frame], cycle_time: float = 0.1) -> Cloud:
    """Union of consecutive frames; the newest gets relative timestamp 0."""
    if not frames:
        raise PreprocessError("nothing to accumulate")
    for a, b in zip(frames, frames[1:]):
        if b.cycle_index != a.cycle_index + 1:
            raise PreprocessError(f"frames {a.cycle_index} and {b.cycle_index} are not consecutive")
    newest = frames[-1].cycle_index
    cols = {c: np.concatenate([getattr(f, c) for f in frames]) for c in POINT_COLUMNS}
    cycle = np.concatenate([np.full(len(f), f.cycle_index, dtype=np.int64) for f in frames])
    rel = -(newest - cycle) * cycle_time
    return Cloud(**cols, rel_timestamp=rel.astype(np.float64), cycle=cycle, newest_cycle=newest)


def resample_indices(doppler: np.ndarray, cycle: np.ndarray, n: int = DEFAULT_NUM_POINTS) -> np.ndarray:
    """Indices into the accumulation that make up a cloud of exactly ``n`` points.

    Upsampling appends duplicates of the largest-|doppler| points (cycling
    through that ranking); downsampling drops oldest-cycle points first and,
    within a cycle, the smallest |doppler| first.  Ties go to the newer cycle,
    then to the earlier input index.
    """
    m = len(doppler)
    if m == 0:
        raise PreprocessError("cannot resample an empty point set")
    order = np.arange(m)
    speed = np.abs(np.asarray(doppler))
    cycle = np.asarray(cycle)
    if m == n:
        return order
    if m < n:
        # lexsort: last key is primary
        ranking = np.lexsort((order, -cycle, -speed))
        extra = ranking[np.arange(n - m) % m]
        return np.concatenate([order, extra])
    keep_priority = np.lexsort((order, -speed, -cycle))
    return np.sort(keep_priority[:n])


@dataclass(frozen=True, eq=False)
class FixedCloud:
    xy: np.ndarray  # (N, 2)
    features: np.ndarray  # (N, 3): amplitude, doppler, rel_timestamp
    target: np.ndarray  # class index or IGNORE
    instance_id: np.ndarray
    origin_index: np.ndarray

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def unique_rows(self) -> np.ndarray:
        """First row of every distinct origin point, in row order."""
        _, first = np.unique(self.origin_index, return_index=True)
        return np.sort(first)


def resample(cloud: Cloud, n: int = DEFAULT_NUM_POINTS, class_config: ClassConfig | None = None) -> FixedCloud:
    idx = resample_indices(cloud.doppler, cloud.cycle, n)
    cfg = class_config or ClassConfig()
    target = map_label_array(cloud.label, cloud.object_class, cloud.sketchy, cfg)
    return FixedCloud(
        xy=np.stack([cloud.x[idx], cloud.y[idx]], axis=1),
        features=np.stack([cloud.amplitude[idx], cloud.doppler[idx], cloud.rel_timestamp[idx]], axis=1),
        target=target[idx],
        instance_id=cloud.instance_id[idx],
        origin_index=idx,
    )


@dataclass(frozen=True)
class FeatureStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls((0.0,) * 5, (1.0,) * 5)

    @classmethod
    def fit(cls, matrices: Seq[np.ndarray]) -> "FeatureStats":
        x = np.concatenate(matrices, axis=0)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return cls(tuple(x.mean(axis=0).tolist()), tuple(std.tolist()))


def featurize(cloud: FixedCloud, stats: FeatureStats | None = None) -> np.ndarray:
    """(N, 5) matrix with columns x, y, amplitude, doppler, rel_timestamp."""
    x = np.concatenate([cloud.xy, cloud.features], axis=1)
    if stats is not None:
        x = (x - np.asarray(stats.mean)) / np.asarray(stats.std)
    return x


def sequence_clouds(frames: Seq[Frame], num_cycles: int = DEFAULT_NUM_CYCLES, cycle_time: float = 0.1,
                    stride: int = 1):
    """Yield ``(frame_position, Cloud)`` for every frame with enough history."""
    for i in range(num_cycles - 1, len(frames), stride):
        window = frames[i - num_cycles + 1:i + 1]
        if sum(len(f) for f in window) == 0:
            continue
        yield i, accumulate(window, cycle_time)
