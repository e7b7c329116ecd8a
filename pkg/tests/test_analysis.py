import os

import numpy as np
import pandas as pd
import pytest

from sampletag import analysis
from sampletag.data import SegmentSet
from sampletag.errors import ConfigError
from sampletag.model import build, toy_config


def segment_set(labels, tags=('a', 'b', 'c')):
    labels = np.asarray(labels, dtype=np.uint8)
    n = len(labels)
    return SegmentSet(np.zeros((n, 81), np.float32), labels, np.arange(n), [f's{i}' for i in range(n)], list(tags))


@pytest.fixture
def segments(rng):
    labels = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 1], [0, 0, 1], [1, 0, 1]], dtype=np.uint8)
    sset = segment_set(labels)
    sset.waveforms[...] = rng.uniform(-1, 1, sset.waveforms.shape)
    return sset


def test_capture_shapes_and_range(toy_net, segments):
    cap = analysis.capture(toy_net, segments, batch_size=2)
    assert cap.block_ids == [1, 2, 3]
    for gates in cap.blocks.values():
        assert gates.shape == (5, 4)
        assert np.all((gates > 0) & (gates < 1))


def test_zeroed_gates_are_one_half(toy_net, segments):
    for block in toy_net.blocks:
        block.se.fc2.weight.value[...] = 0.0
        block.se.fc2.bias.value[...] = 0.0
    report = analysis.build_report(analysis.capture(toy_net, segments), segments)
    for block in report.block_ids:
        np.testing.assert_array_equal(report.means[block], 0.5)
        assert report.std[block] == 0.0


def test_capture_rejects_networks_without_se(rng, segments):
    net = build(toy_config('res1'), rng)
    with pytest.raises(ConfigError, match="no SE units"):
        analysis.capture(net, segments)


def test_rese_capture_uses_the_se_subunit(rng, segments):
    net = build(toy_config('rese2'), rng)
    cap = analysis.capture(net, segments)
    assert len(cap.blocks) == 3


def test_tag_means_direct_average():
    cap = analysis.ExcitationCapture({1: np.array([[0.2, 0.4], [0.6, 0.8], [0.1, 0.9]])})
    sset = segment_set([[1, 0, 0], [1, 1, 0], [0, 1, 0]])
    means, absent = analysis.tag_means(cap, sset)
    np.testing.assert_allclose(means[1][0], [0.4, 0.6])
    np.testing.assert_allclose(means[1][1], [0.35, 0.85])
    assert np.isnan(means[1][2]).all()
    assert absent == ['c']


def test_tag_means_identical_song_sets_give_identical_rows():
    cap = analysis.ExcitationCapture({1: np.array([[0.2, 0.3], [0.7, 0.1]])})
    means, _ = analysis.tag_means(cap, segment_set([[1, 1, 0], [0, 0, 1]]))
    np.testing.assert_array_equal(means[1][0], means[1][1])


def test_tag_means_ignores_segment_order():
    gates = np.random.default_rng(5).uniform(size=(6, 3))
    labels = np.random.default_rng(6).integers(0, 2, (6, 3))
    labels[0] = 1
    order = np.array([3, 0, 5, 1, 4, 2])
    a, _ = analysis.tag_means(analysis.ExcitationCapture({1: gates}), segment_set(labels))
    b, _ = analysis.tag_means(analysis.ExcitationCapture({1: gates[order]}), segment_set(labels[order]))
    np.testing.assert_allclose(a[1], b[1])


def test_sort_channels():
    assert analysis.sort_channels(np.array([[0.2, 0.9, 0.5]])).tolist() == [1, 2, 0]
    assert analysis.sort_channels(np.full((2, 4), 0.3)).tolist() == [0, 1, 2, 3]
    matrix = np.random.default_rng(0).uniform(size=(5, 7))
    order = analysis.sort_channels(matrix)
    assert sorted(order.tolist()) == list(range(7))
    assert np.all(np.diff(matrix[:, order].mean(axis=0)) <= 0)


def test_std_profile():
    assert analysis.std_profile({1: np.full((3, 2), 0.4)})[1] == pytest.approx(0.0, abs=1e-12)
    assert analysis.std_profile({1: np.array([[0.4], [0.6]])})[1] == pytest.approx(0.1)
    means = {1: np.array([[0.2, 0.6], [0.4, 0.4]])}
    assert analysis.std_profile(means, 'channel')[1] == pytest.approx(0.1)
    assert analysis.std_profile(means, 'tag')[1] == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        analysis.std_profile(means, 'median')


def test_std_profile_skips_absent_tags():
    means = {2: np.array([[0.4], [np.nan], [0.6]])}
    assert analysis.std_profile(means)[2] == pytest.approx(0.1)


def test_emit_and_load_round_trip(toy_net, segments, tmp_path):
    report = analysis.build_report(analysis.capture(toy_net, segments), segments)
    written = analysis.emit_report(report, str(tmp_path))
    per_block = [p for p in written if p.endswith('_tag_means.csv')]
    assert len(per_block) == len(report.block_ids)
    assert os.path.join(str(tmp_path), 'std_profile.csv') in written
    loaded = analysis.load_report(str(tmp_path))
    assert loaded.tags == report.tags
    for block in report.block_ids:
        np.testing.assert_allclose(loaded.means[block], report.means[block], atol=1e-6)
        assert loaded.std[block] == pytest.approx(report.std[block], abs=1e-6)
        assert loaded.orders[block].tolist() == report.orders[block].tolist()


def test_long_table_and_cooccurrence(toy_net, segments, tmp_path):
    report = analysis.build_report(analysis.capture(toy_net, segments), segments)
    cooc = np.array([[2, 1], [1, 2]])
    analysis.emit_report(report, str(tmp_path), cooc, ['a', 'b'])
    long = pd.read_csv(tmp_path / "excitation_long.csv")
    assert list(long.columns) == ['block', 'tag', 'channel_rank', 'channel', 'value']
    assert len(long) == 3 * 3 * 4
    first = long[(long.block == 1) & (long.channel_rank == 0)]
    assert set(first.channel) == {int(report.orders[1][0])}
    table = pd.read_csv(tmp_path / "cooccurrence.csv", index_col='tag')
    assert table.to_numpy().tolist() == [[2, 1], [1, 2]]
