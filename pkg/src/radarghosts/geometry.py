"""Specular multi-path geometry for a point object next to a flat wall.

All positions are 2D ego-frame coordinates in metres.  A wall is treated as
an ideal mirror along the infinite line through its segment; a prediction is
only *valid* when the specular bounce point lies on the finite segment.

Ghost kinds (type = where the last bounce happens, order = number of bounces):

* MP12: sensor -> wall -> object -> sensor.  Arrives from the object bearing.
* MP22: sensor -> object -> wall -> sensor.  Same path reversed, arrives from
  the mirrored object's bearing.
* MP23: sensor -> wall -> object -> wall -> sensor.  Appears at the mirror
  image of the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Label, WallSegment

GHOST_KINDS = (Label.MP12, Label.MP22, Label.MP23)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MovingPoint:
    pos: tuple[float, float]
    vel: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.pos, *self.vel)):
            raise GeometryError("moving point has non-finite components")


@dataclass(frozen=True)
class GhostPrediction:
    kind: Label
    range: float
    bearing: float  # rad
    pos: tuple[float, float]
    doppler: float
    valid: bool
    surface_id: int


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def _line(wall: WallSegment) -> tuple[np.ndarray, np.ndarray, float]:
    a, b = _vec(wall.a), _vec(wall.b)
    d = b - a
    length = float(np.hypot(d[0], d[1]))
    if length == 0.0:
        raise GeometryError(f"wall {wall.id} is degenerate")
    return a, d / length, length


def _signed_offset(p: np.ndarray, wall: WallSegment) -> float:
    a, u, _ = _line(wall)
    r = p - a
    return float(u[0] * r[1] - u[1] * r[0])


def mirror_point(p, wall: WallSegment) -> tuple[float, float]:
    """Reflect ``p`` across the infinite line through ``wall``."""
    a, u, _ = _line(wall)
    r = _vec(p) - a
    q = a + 2.0 * (r @ u) * u - r
    return float(q[0]), float(q[1])


def mirror_vector(v, wall: WallSegment) -> tuple[float, float]:
    _, u, _ = _line(wall)
    v = _vec(v)
    w = 2.0 * (v @ u) * u - v
    return float(w[0]), float(w[1])


def same_side(a, b, wall: WallSegment) -> bool:
    sa, sb = _signed_offset(_vec(a), wall), _signed_offset(_vec(b), wall)
    return sa * sb > 0.0


def _specular(a: np.ndarray, b: np.ndarray, wall: WallSegment) -> tuple[np.ndarray, bool]:
    sa, sb = _signed_offset(a, wall), _signed_offset(b, wall)
    if not sa * sb > 0.0:
        raise GeometryError("no specular path: points not strictly on the same side of the wall")
    w0, u, length = _line(wall)
    # a -> mirror(b) crosses the line where the signed offset changes sign
    t = sa / (sa + sb)
    bm = _vec(mirror_point(b, wall))
    p = a + t * (bm - a)
    s = float((p - w0) @ u)
    inside = -1e-12 * length <= s <= length * (1.0 + 1e-12)
    return p, inside


def specular_point(a, b, wall: WallSegment) -> tuple[float, float] | None:
    """Bounce point on ``wall`` of the specular path a -> P -> b.

    Returns None when the point falls outside the finite segment.
    """
    p, inside = _specular(_vec(a), _vec(b), wall)
    return (float(p[0]), float(p[1])) if inside else None


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    if n == 0.0:
        raise GeometryError("direction undefined for coincident points")
    return v / n


def _bearing(p: np.ndarray) -> float:
    return math.atan2(p[1], p[0])


def path_length(kind: Label, sensor, obj_pos, wall: WallSegment | None = None) -> float:
    """Round-trip propagation length; the apparent range is half of it."""
    s, o = _vec(sensor), _vec(obj_pos)
    direct = float(np.hypot(*(o - s)))
    if kind == Label.REAL:
        return 2.0 * direct
    if wall is None:
        raise GeometryError("multi-path length needs a wall")
    p, _ = _specular(s, o, wall)
    via = float(np.hypot(*(p - s)) + np.hypot(*(o - p)))
    if kind in (Label.MP12, Label.MP22):
        return via + direct
    if kind == Label.MP23:
        return 2.0 * via
    raise GeometryError(f"no path model for {kind!r}")


def real_doppler(sensor, obj: MovingPoint) -> float:
    s, o = _vec(sensor), _vec(obj.pos)
    return float(_vec(obj.vel) @ _unit(o - s))


def ghost_detections(sensor, obj: MovingPoint, wall: WallSegment) -> list[GhostPrediction]:
    """Predicted MP12, MP22 and MP23 detections of ``obj`` caused by ``wall``."""
    s, o, v = _vec(sensor), _vec(obj.pos), _vec(obj.vel)
    if _signed_offset(o, wall) == 0.0:
        raise GeometryError("no specular path: object lies on the wall line")
    _, inside = _specular(s, o, wall)
    s_m = _vec(mirror_point(s, wall))
    o_m = _vec(mirror_point(o, wall))

    via = float(np.hypot(*(o - s_m)))  # |S'-O| == |S-P| + |P-O|
    direct = float(np.hypot(*(o - s)))
    dop_via = float(v @ _unit(o - s_m))
    dop_direct = float(v @ _unit(o - s))

    r2 = 0.5 * (via + direct)
    d2 = 0.5 * (dop_via + dop_direct)
    b_obj = _bearing(o - s)
    b_img = _bearing(o_m - s)
    r3 = float(np.hypot(*(o_m - s)))

    def at(rng: float, bearing: float) -> tuple[float, float]:
        return float(s[0] + rng * math.cos(bearing)), float(s[1] + rng * math.sin(bearing))

    return [
        GhostPrediction(Label.MP12, r2, b_obj, at(r2, b_obj), d2, inside, wall.id),
        GhostPrediction(Label.MP22, r2, b_img, at(r2, b_img), d2, inside, wall.id),
        GhostPrediction(Label.MP23, r3, b_img, (float(o_m[0]), float(o_m[1])), dop_via, inside, wall.id),
    ]
