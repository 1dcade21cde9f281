import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emmil.errors import ConfigError, DataError
from emmil.inference import (
    Proposal,
    fuse_scores,
    predict_classes,
    propose,
    proposals_to_mask,
    read_proposals,
    runs,
    write_proposals,
)
from emmil.mil_core import above_threshold, segments_to_mask

scores = st.floats(0.0, 1.0)


def test_fusion_thumos_default():
    assert fuse_scores(np.array([0.5]), np.array([[0.9]]), 0.8)[0, 0] == pytest.approx(0.58)


def test_fusion_degenerate_weights(rng):
    Q = rng.random(7)
    P = rng.random((7, 3))
    assert np.array_equal(fuse_scores(Q, P, 0.0), P)
    L = fuse_scores(Q, P, 1.0)
    assert all(np.array_equal(L[:, c], Q) for c in range(3))


def test_fusion_rejects_bad_lambda():
    with pytest.raises(ConfigError):
        fuse_scores(np.zeros(2), np.zeros((2, 1)), 1.5)
    with pytest.raises(ConfigError):
        fuse_scores(np.zeros(3), np.zeros((2, 1)), 0.5)


def test_grouping_example():
    L = np.array([[0.9], [0.9], [0.1], [0.1], [0.8]])
    props = propose(L, {0}, 0.0, 1.25)
    assert [(p.start, p.end) for p in props] == [(0.0, 2.5), (5.0, 6.25)]
    assert [p.confidence for p in props] == pytest.approx([0.9, 0.8])


def test_constant_column_no_proposals():
    for v in (0.0, 0.3, 0.1 + 0.2, 1.0):
        assert propose(np.full((9, 2), v), {0, 1}, 0.15, 1.25) == []


def test_runs_split_by_one_clip():
    L = np.array([[0.9], [0.9], [0.0], [0.9], [0.9]])
    props = propose(L, {0}, 0.0, 1.0)
    assert [(p.start, p.end) for p in props] == [(0.0, 2.0), (3.0, 5.0)]


def test_unpredicted_class_skipped():
    L = np.array([[0.9, 0.9], [0.1, 0.1]])
    assert {p.label for p in propose(L, {1}, 0.0, 1.0)} == {1}


def test_max_confidence_option():
    L = np.array([[0.6], [1.0], [0.0], [0.0]])
    (p,) = propose(L, {0}, 0.0, 1.0, score="max")
    assert p.confidence == 1.0
    with pytest.raises(ConfigError):
        propose(L, {0}, 0.0, 1.0, score="median")


def test_predict_classes():
    P = np.array([[0.2, 0.7, 0.5], [0.4, 0.1, 0.3]])
    assert predict_classes(P) == [1]
    assert predict_classes(np.full((4, 3), 0.49)) == []


def test_oracle_scores_predict_planted_classes(tiny_dataset):
    for bag in tiny_dataset:
        P = np.zeros((bag.seq.T, bag.num_classes))
        for s in bag.segments:
            P[:, s.label] = np.maximum(
                P[:, s.label], segments_to_mask([s], bag.seq.T, bag.seq.clip_duration_sec))
        assert predict_classes(P) == np.flatnonzero(bag.label).tolist()


def test_runs_helper():
    assert runs(np.array([1, 1, 0, 1])) == [(0, 2), (3, 4)]
    assert runs(np.zeros(4)) == []
    assert runs(np.ones(3)) == [(0, 3)]


@given(arrays(np.float64, st.integers(1, 30), elements=scores), st.floats(0, 1),
       st.sampled_from([1.0, 1.25, 0.5]))
def test_proposals_cover_mask_exactly(col, gamma, dur):
    props = propose(col[:, None], {0}, gamma, dur)
    mask = above_threshold(col, gamma).astype(np.int64)
    assert np.array_equal(proposals_to_mask(props, len(col), dur), mask)
    spans = sorted((p.start, p.end) for p in props)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 < b0  # disjoint and never touching
    for p in props:
        assert p.start < p.end
        assert p.start / dur == pytest.approx(round(p.start / dur))


@given(arrays(np.float64, 6, elements=scores), arrays(np.float64, (6, 2), elements=scores),
       st.integers(0, 5), st.floats(0.0, 0.5), st.floats(0.01, 1.0))
def test_fusion_monotone_in_q(Q, P, t, bump, lam):
    Q2 = Q.copy()
    Q2[t] += bump
    assert np.all(fuse_scores(Q2, P, lam)[t] >= fuse_scores(Q, P, lam)[t])


def test_proposal_file_roundtrip(tmp_path):
    props = [Proposal("b1", 0, 0.0, 2.5, 0.9), Proposal("b2", 2, 5.0, 6.25, 1 / 3)]
    write_proposals(props, tmp_path / "p.tsv")
    text = (tmp_path / "p.tsv").read_text()
    assert text.splitlines()[1] == "b2\t2\t5.000000\t6.250000\t0.333333"
    back = read_proposals(tmp_path / "p.tsv")
    assert [(p.bag_id, p.label, p.start, p.end) for p in back] == \
        [(p.bag_id, p.label, p.start, p.end) for p in props]


def test_bad_proposal_line(tmp_path):
    (tmp_path / "p.tsv").write_text("b1\t0\t0.0\n")
    with pytest.raises(DataError, match="p.tsv:1"):
        read_proposals(tmp_path / "p.tsv")
