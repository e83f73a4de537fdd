import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarghosts.core import (
    IGNORE, Annotation, ClassConfig, DatasetError, Frame, Granularity, Label, LabelSet, ObjectClass, RadarPoint,
    SensorSpec, Sequence, Split, WallSegment, eval_label, map_label_array, map_labels, read_header, read_sequence,
    validate_frame, write_sequence,
)
from radarghosts.simulate import corridor, generate_sequence


def test_sensor_defaults():
    s = SensorSpec()
    assert (s.carrier_frequency, s.range_min, s.range_max, s.azimuth_fov) == (77.0, 0.15, 153.0, 70.0)
    assert (s.doppler_max, s.res_range, s.res_azimuth, s.res_doppler, s.cycle_time) == (44.3, 0.15, 1.8, 0.087, 0.1)
    assert SensorSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        SensorSpec(range_min=10.0, range_max=5.0)


def test_annotation_invariants():
    with pytest.raises(ValueError):
        Annotation(instance_id=3, label=Label.BACKGROUND)
    with pytest.raises(ValueError):
        Annotation(instance_id=2, label=Label.MP12, object_class=ObjectClass.PEDESTRIAN)
    Annotation(instance_id=2, label=Label.MP12, object_class=ObjectClass.PEDESTRIAN, surface_id=0)


def test_six_class_configs():
    sizes = {(c.granularity, c.labelset): c.num_classes for c in ClassConfig.all()}
    assert len(sizes) == 6
    fg = {Granularity.PED_CYCL: 2, Granularity.MERGED: 1}
    per = {LabelSet.REAL_ONLY: 1, LabelSet.DETAILED_MP: 4, LabelSet.GHOST_MERGED: 2}
    for (g, l), n in sizes.items():
        assert n == 1 + fg[g] * per[l]


def _ann(label, cls=ObjectClass.PEDESTRIAN, sketchy=False):
    if label in (Label.BACKGROUND, Label.IGNORE):
        return Annotation(0, label, ObjectClass.NONE, None, sketchy)
    return Annotation(1, label, cls, 0, sketchy)


def test_map_labels_examples():
    cfg = ClassConfig(Granularity.PED_CYCL, LabelSet.DETAILED_MP)
    assert cfg.class_names[map_labels(_ann(Label.REAL), cfg)] == "ped"
    cfg = ClassConfig(Granularity.MERGED, LabelSet.GHOST_MERGED)
    assert cfg.class_names[map_labels(_ann(Label.MP23, ObjectClass.CYCLIST), cfg)] == "obj-ghost"
    for c in ClassConfig.all():
        assert map_labels(_ann(Label.OMP, sketchy=True), c) == IGNORE


def test_map_labels_rules():
    for c in ClassConfig.all():
        for lab in (Label.OMP, Label.INDISTINGUISHABLE, Label.IGNORE):
            assert map_labels(_ann(lab), c) == IGNORE
        assert map_labels(_ann(Label.BACKGROUND), c) == 0
        ghost = map_labels(_ann(Label.MP12), c)
        assert (ghost == IGNORE) == (c.labelset == LabelSet.REAL_ONLY)
    detailed = ClassConfig(Granularity.PED_CYCL, LabelSet.DETAILED_MP)
    got = [detailed.class_names[map_labels(_ann(l, k), detailed)]
           for k in (ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST) for l in (Label.REAL, Label.MP12, Label.MP22, Label.MP23)]
    assert got == ["ped", "ped-12", "ped-22", "ped-23", "cycl", "cycl-12", "cycl-22", "cycl-23"]


def test_eval_labels_count_untrained_ghosts_as_background():
    real_only = ClassConfig(Granularity.MERGED, LabelSet.REAL_ONLY)
    assert eval_label(_ann(Label.MP22), real_only) == 0
    assert eval_label(_ann(Label.OMP), real_only) == 0
    assert eval_label(_ann(Label.INDISTINGUISHABLE), real_only) == IGNORE
    assert eval_label(_ann(Label.REAL, ObjectClass.CAR), real_only) == IGNORE


def test_map_label_array_matches_scalar():
    cfgs = ClassConfig.all()
    rng = np.random.default_rng(0)
    labels = rng.integers(0, len(Label), 400)
    classes = rng.integers(0, len(ObjectClass), 400)
    sketchy = rng.random(400) < 0.2
    for c in cfgs:
        for evaluation in (False, True):
            arr = map_label_array(labels, classes, sketchy, c, evaluation)
            from radarghosts.core import _target
            ref = [_target(Label(l), ObjectClass(k), bool(s), c, evaluation) for l, k, s in zip(labels, classes, sketchy)]
            assert arr.tolist() == ref
            assert set(arr.tolist()) <= set(range(c.num_classes)) | {IGNORE}


def _one_point_seq():
    pt = RadarPoint(1.0, 0.0, 0.5, 50.0, 0, Annotation())
    return Sequence("s", (WallSegment(0, (0, 5), (10, 5)),), (Frame.from_points(0, 0.0, [pt]),), Split.TEST,
                    name="one")


def test_round_trip_empty_and_single(tmp_path):
    empty = Sequence("s", (), (), Split.VAL, name="empty")
    write_sequence(empty, tmp_path / "e.jsonl")
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 1
    assert read_sequence(tmp_path / "e.jsonl") == empty
    one = _one_point_seq()
    write_sequence(one, tmp_path / "o.jsonl")
    back = read_sequence(tmp_path / "o.jsonl")
    assert back == one
    assert back.frames[0].points[0].doppler == 0.5


def test_simulated_round_trip_is_byte_identical(tmp_path):
    seq = generate_sequence(corridor(seed=3, n_frames=300))
    write_sequence(seq, tmp_path / "a.jsonl")
    back = read_sequence(tmp_path / "a.jsonl")
    assert back == seq
    write_sequence(back, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_reader_rejects_bad_files(tmp_path):
    seq = _one_point_seq()
    p = tmp_path / "x.jsonl"
    write_sequence(seq, p)
    lines = p.read_text().splitlines()
    head = json.loads(lines[0])
    head["version"] = 99
    (tmp_path / "v.jsonl").write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    with pytest.raises(DatasetError, match="version"):
        read_sequence(tmp_path / "v.jsonl")
    head["version"] = 1
    head["n_frames"] = 2
    (tmp_path / "n.jsonl").write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    with pytest.raises(DatasetError):
        read_sequence(tmp_path / "n.jsonl")
    rec = json.loads(lines[1])
    rec["points"]["x"] = [200.0]
    (tmp_path / "r.jsonl").write_text("\n".join([lines[0], json.dumps(rec)]) + "\n")
    with pytest.raises(DatasetError, match="range"):
        read_sequence(tmp_path / "r.jsonl")
    assert read_header(p)["scenario_id"] == "s"


def test_validate_frame_rules():
    s = SensorSpec()
    ok = dict(x=[5.0], y=[0.0], doppler=[0.0], amplitude=[1.0], instance_id=[0], label=[int(Label.BACKGROUND)],
              object_class=[int(ObjectClass.NONE)], surface_id=[-1], sketchy=[False])
    validate_frame(Frame(0, 0.0, **ok), s)
    for key, val in (("y", [50.0]), ("doppler", [50.0]), ("instance_id", [3])):
        with pytest.raises(DatasetError):
            validate_frame(Frame(0, 0.0, **{**ok, key: val}), s)
    ghost = {**ok, "label": [int(Label.MP12)], "instance_id": [2], "object_class": [0]}
    with pytest.raises(DatasetError, match="surface"):
        validate_frame(Frame(0, 0.0, **ghost), s)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def sequences(draw):
    n_frames = draw(st.integers(0, 4))
    frames = []
    for c in range(n_frames):
        n = draw(st.integers(0, 6))
        pts = []
        for _ in range(n):
            r = draw(st.floats(0.2, 150))
            az = draw(st.floats(-1.2, 1.2))
            lab = draw(st.sampled_from(list(Label)))
            if lab in (Label.BACKGROUND, Label.IGNORE):
                ann = Annotation(0, lab, ObjectClass.NONE, None, draw(st.booleans()))
            else:
                sid = draw(st.integers(0, 3)) if lab in (Label.MP12, Label.MP22, Label.MP23) else draw(
                    st.one_of(st.none(), st.integers(0, 3)))
                ann = Annotation(draw(st.integers(1, 9)), lab, draw(st.sampled_from(list(ObjectClass))), sid,
                                 draw(st.booleans()))
            pts.append(RadarPoint(r * np.cos(az), r * np.sin(az), draw(st.floats(-44, 44)), draw(finite), c, ann))
        frames.append(Frame.from_points(c, c * 0.1, pts))
    return Sequence(draw(st.text(min_size=1, max_size=8)), (WallSegment(0, (1, 2), (3, 4)),), tuple(frames),
                    draw(st.sampled_from(list(Split))), name=draw(st.text(max_size=8)))


@settings(max_examples=60, deadline=None)
@given(sequences())
def test_round_trip_property(tmp_path_factory, seq):
    p = tmp_path_factory.mktemp("rt") / "s.jsonl"
    write_sequence(seq, p)
    assert read_sequence(p) == seq
