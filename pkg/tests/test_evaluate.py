import math
from unittest.mock import patch

import numpy as np
import pytest

from sampletag import evaluate
from sampletag.data import SegmentSet
from sampletag.errors import ConfigError, UndefinedMetricError


def pairwise_auc(scores, labels):
    """O(n^2) reference: fraction of positive/negative pairs ordered correctly, ties count half"""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return credit / (len(pos) * len(neg))


def test_auc_examples():
    assert evaluate.auc_tag([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert evaluate.auc_tag([0.9, 0.5, 0.2], [1, 0, 1]) == 0.5
    assert evaluate.auc_tag([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # few distinct values so ties are common; sometimes fully degenerate
        scores = rng.integers(0, int(rng.integers(1, 6)), n) / 4.0
        assert abs(evaluate.auc_tag(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


def test_auc_invariant_under_monotone_transform(rng):
    scores = rng.uniform(size=40)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    assert evaluate.auc_tag(scores, labels) == evaluate.auc_tag(np.exp(3 * scores) - 7, labels)


def test_auc_of_negated_scores_is_the_complement(rng):
    scores = rng.permutation(30) / 30.0
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert evaluate.auc_tag(scores, labels) + evaluate.auc_tag(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        evaluate.auc_tag([0.1, 0.2], [1, 1])


def test_segment_average():
    probs = np.array([[0.2, 0.4], [0.4, 0.8], [0.9, 0.1]])
    table = evaluate.PredictionTable.from_segments(
        probs, [0, 0, 1], np.array([[1, 0], [1, 0], [0, 1]]), ['s1', 's2'])
    np.testing.assert_allclose(table.probs, [[0.3, 0.6], [0.9, 0.1]])
    assert table.labels.tolist() == [[1, 0], [0, 1]]
    frame = table.to_frame(['a', 'b'])
    assert list(frame.index) == ['s1', 's2'] and frame.loc['s2', 'a'] == pytest.approx(0.9)


def test_song_without_segments():
    with pytest.raises(ConfigError):
        evaluate.PredictionTable.from_segments(np.zeros((1, 1)), [0], np.zeros((1, 1)), ['a', 'b'])


def test_random_table_matches_oracle(rng):
    probs = rng.uniform(size=(20, 4))
    labels = rng.integers(0, 2, (20, 4))
    labels[0], labels[1] = 0, 1
    report = evaluate.score_table(evaluate.PredictionTable([str(i) for i in range(20)], probs, labels))
    for k in range(4):
        assert abs(report.per_tag[k] - pairwise_auc(probs[:, k], labels[:, k])) <= 1e-12
    assert report.macro == pytest.approx(np.mean(report.per_tag))


def test_undefined_tag_is_excluded_and_logged():
    probs = np.array([[0.9, 0.2], [0.1, 0.3], [0.8, 0.4]])
    labels = np.array([[1, 1], [0, 1], [1, 1]])
    with patch.object(evaluate.logger, 'warning') as warning:
        report = evaluate.score_table(evaluate.PredictionTable(['x', 'y', 'z'], probs, labels), ['rock', 'pop'])
    assert report.per_tag[0] == 1.0 and math.isnan(report.per_tag[1])
    assert report.macro == 1.0
    warning.assert_called_once()
    assert warning.call_args.kwargs['tag'] == 'pop'


class ConstantNet:
    """Stands in for a Network: returns fixed per-segment outputs"""
    dtype = np.float32

    def __init__(self, outputs):
        self.outputs = outputs
        self.calls = 0

    def eval(self):
        return self

    def forward(self, x):
        out = self.outputs[self.calls:self.calls + len(x)]
        self.calls += len(x)
        return out


def segments_for(labels, per_song=2):
    labels = np.repeat(np.asarray(labels, dtype=np.uint8), per_song, axis=0)
    n = len(labels)
    return SegmentSet(np.zeros((n, 81), np.float32), labels, np.repeat(np.arange(n // per_song), per_song),
                      [f's{i}' for i in range(n // per_song)], ['a', 'b'])


def test_constant_network_scores_one_half():
    segments = segments_for([[1, 0], [0, 1], [1, 1], [0, 0]])
    report = evaluate.evaluate(ConstantNet(np.full((8, 2), 0.5)), segments, batch_size=3)
    assert report.per_tag == [0.5, 0.5] and report.macro == 0.5


def test_oracle_network_scores_one():
    segments = segments_for([[1, 0], [0, 1], [1, 1], [0, 0]])
    report = evaluate.evaluate(ConstantNet(segments.labels.astype(np.float32)), segments)
    assert report.macro == 1.0


def test_empty_test_set():
    empty = SegmentSet(np.zeros((0, 81), np.float32), np.zeros((0, 2), np.uint8), np.zeros(0, int), [], ['a', 'b'])
    with pytest.raises(ConfigError, match="empty"):
        evaluate.evaluate(ConstantNet(np.zeros((0, 2))), empty)


def test_report_has_tags_plus_macro(tmp_path):
    report = evaluate.EvalReport(['a', 'b', 'c'], [0.5, float('nan'), 1.0], 0.75)
    path = evaluate.write_report(report, str(tmp_path / "eval.csv"))
    lines = open(path).read().splitlines()
    assert lines[0] == 'tag,auc'
    assert len(lines) == 1 + 3 + 1
    assert lines[2] == 'b,nan' and lines[-1] == 'macro,0.750000'
