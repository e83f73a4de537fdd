import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarghosts.core import ClassConfig, Frame, Label, ObjectClass
from radarghosts.preprocess import (
    FeatureStats, FixedCloud, PreprocessError, accumulate, featurize, resample, resample_indices, sequence_clouds,
)
from radarghosts.simulate import corridor, generate_sequence


def frame(cycle, n, doppler=None, label=Label.BACKGROUND):
    d = np.zeros(n) if doppler is None else np.asarray(doppler, float)
    return Frame(cycle, cycle * 0.1, x=np.arange(1.0, n + 1), y=np.zeros(n), doppler=d, amplitude=np.full(n, 10.0),
                 instance_id=np.zeros(n, int), label=np.full(n, int(label)),
                 object_class=np.full(n, int(ObjectClass.NONE)), surface_id=np.full(n, -1),
                 sketchy=np.zeros(n, bool))


def test_accumulate_counts_and_timestamps():
    cl = accumulate([frame(4, 10), frame(5, 20), frame(6, 30)])
    assert len(cl) == 60
    assert np.sum(cl.rel_timestamp == 0) == 30
    assert sorted(set(np.round(cl.rel_timestamp, 12).tolist())) == [-0.2, -0.1, 0.0]
    assert cl.newest_cycle == 6


def test_accumulate_single_and_gap():
    assert np.all(accumulate([frame(3, 5)]).rel_timestamp == 0)
    with pytest.raises(PreprocessError):
        accumulate([frame(1, 5), frame(3, 5)])
    with pytest.raises(PreprocessError):
        accumulate([])


def test_upsampling_example():
    idx = resample_indices(np.array([0.1, 2.0, 3.0, 0.5, 1.0]), np.zeros(5, int), 8)
    assert idx.tolist() == [0, 1, 2, 3, 4, 2, 1, 4]


def test_upsampling_cycles_through_ranking():
    idx = resample_indices(np.array([1.0, -3.0]), np.zeros(2, int), 7)
    assert idx.tolist() == [0, 1, 1, 0, 1, 0, 1]


def test_downsampling_example():
    dop = np.array([0.1, 5.0, 0.2, 4.0, 0.3, 3.0])
    cyc = np.array([0, 0, 1, 1, 2, 2])
    idx = resample_indices(dop, cyc, 4)
    assert idx.tolist() == [2, 3, 4, 5]


def test_identity_and_empty():
    assert resample_indices(np.array([3.0, 1.0, 2.0]), np.zeros(3, int), 3).tolist() == [0, 1, 2]
    with pytest.raises(PreprocessError):
        resample_indices(np.zeros(0), np.zeros(0, int), 4)


def test_duplicates_share_targets_and_origin():
    cl = accumulate([frame(0, 5, [0, 1, 2, 3, 4], Label.BACKGROUND)])
    fc = resample(cl, 12, ClassConfig())
    assert len(fc) == 12
    for i in range(12):
        j = fc.origin_index[i]
        assert fc.xy[i, 0] == cl.x[j] and fc.target[i] == fc.target[np.flatnonzero(fc.origin_index == j)[0]]
    assert fc.unique_rows.tolist() == [0, 1, 2, 3, 4]


def test_featurize():
    fc = FixedCloud(np.array([[1.0, 2.0]]), np.array([[10.0, -0.5, -0.1]]), np.array([0]), np.array([0]),
                    np.array([0]))
    assert featurize(fc).tolist() == [[1.0, 2.0, 10.0, -0.5, -0.1]]
    assert featurize(fc, FeatureStats.identity()).tolist() == [[1.0, 2.0, 10.0, -0.5, -0.1]]
    stats = FeatureStats.fit([np.array([[0.0] * 5, [2.0] * 5])])
    assert stats.mean == (1.0,) * 5 and stats.std == (1.0,) * 5
    assert FeatureStats.from_dict(stats.to_dict()) == stats


def test_full_cloud_shape_and_timestamps():
    seq = generate_sequence(corridor(seed=2, n_frames=8))
    clouds = list(sequence_clouds(seq.frames))
    assert [i for i, _ in clouds] == list(range(2, 8))
    fc = resample(clouds[0][1])
    assert featurize(fc).shape == (2560, 5)
    assert set(np.round(fc.features[:, 2], 12).tolist()) <= {0.0, -0.1, -0.2}


@st.composite
def clouds(draw):
    m = draw(st.integers(1, 60))
    dop = draw(st.lists(st.floats(-10, 10, allow_nan=False), min_size=m, max_size=m))
    cyc = draw(st.lists(st.integers(0, 2), min_size=m, max_size=m))
    n = draw(st.integers(1, 90))
    return np.array(dop), np.array(cyc), n


@settings(max_examples=300, deadline=None)
@given(clouds())
def test_resample_properties(c):
    dop, cyc, n = c
    m = len(dop)
    idx = resample_indices(dop, cyc, n)
    assert len(idx) == n
    if m <= n:
        assert idx[:m].tolist() == list(range(m))
        ranking = sorted(range(m), key=lambda i: (-abs(dop[i]), -cyc[i], i))
        assert idx[m:].tolist() == [ranking[k % m] for k in range(n - m)]
    else:
        kept = set(idx.tolist())
        assert len(kept) == n and idx.tolist() == sorted(kept)
        dropped = set(range(m)) - kept
        for d in dropped:
            for k in kept:
                # nothing kept ranks below something dropped
                assert (cyc[k], abs(dop[k])) >= (cyc[d], abs(dop[d]))
