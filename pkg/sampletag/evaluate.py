"""Per-tag ROC-AUC, macro average and song-level (segment-averaged) prediction."""
from dataclasses import dataclass

import numpy as np
import pandas as pd
import structlog
from scipy.stats import rankdata

from sampletag.errors import ConfigError, DimensionError, UndefinedMetricError

logger = structlog.get_logger(__name__)


def auc_tag(scores, labels):
    """Mann-Whitney AUC with average ranks, i.e. tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length", scores.shape, labels.shape)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method='average')
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class PredictionTable:
    song_ids: list
    probs: np.ndarray   # (songs, tags), segment-averaged
    labels: np.ndarray  # (songs, tags)

    @classmethod
    def from_segments(cls, segment_probs, song_index, segment_labels, song_ids):
        """One row per song: the mean of its segments' predictions."""
        song_index = np.asarray(song_index)
        n_songs = len(song_ids)
        counts = np.bincount(song_index, minlength=n_songs)
        if np.any(counts == 0):
            raise ConfigError("every song needs at least one segment")
        sums = np.zeros((n_songs, segment_probs.shape[1]), dtype=np.float64)
        np.add.at(sums, song_index, segment_probs.astype(np.float64))
        labels = np.zeros((n_songs, segment_labels.shape[1]), dtype=np.uint8)
        labels[song_index] = segment_labels
        return cls(list(song_ids), sums / counts[:, None], labels)

    def to_frame(self, tags=None):
        columns = tags or [f'tag{i}' for i in range(self.probs.shape[1])]
        return pd.DataFrame(self.probs, index=pd.Index(self.song_ids, name='song_id'), columns=columns)


@dataclass
class EvalReport:
    tags: list
    per_tag: list   # AUC per tag, nan where undefined
    macro: float

    def to_frame(self):
        rows = [(tag, auc) for tag, auc in zip(self.tags, self.per_tag)]
        rows.append(('macro', self.macro))
        return pd.DataFrame(rows, columns=['tag', 'auc'])


def score_table(table, tags=None):
    """AUC per tag and the unweighted mean over tags where it is defined."""
    n_tags = table.probs.shape[1]
    tags = list(tags) if tags is not None else [f'tag{i}' for i in range(n_tags)]
    per_tag = []
    for k, tag in enumerate(tags):
        try:
            per_tag.append(auc_tag(table.probs[:, k], table.labels[:, k]))
        except UndefinedMetricError:
            logger.warning('auc_undefined', tag=tag, positives=int(table.labels[:, k].sum()),
                           songs=len(table.song_ids))
            per_tag.append(float('nan'))
    defined = [a for a in per_tag if not np.isnan(a)]
    macro = float(np.mean(defined)) if defined else float('nan')
    return EvalReport(tags, per_tag, macro)


def predict_segments(net, segments, batch_size=23):
    """Eval-mode probabilities for every segment, in segment order."""
    net.eval()
    out = []
    for start in range(0, len(segments), batch_size):
        x = segments.waveforms[start:start + batch_size][:, :, None].astype(net.dtype, copy=False)
        out.append(net.forward(x))
    return np.concatenate(out, axis=0)


def evaluate(net, segments, batch_size=23):
    if len(segments) == 0:
        raise ConfigError("test set is empty")
    probs = predict_segments(net, segments, batch_size)
    table = PredictionTable.from_segments(probs, segments.song_index, segments.labels, segments.song_ids)
    return score_table(table, segments.tags)


def write_report(report, path):
    """`tag,auc` rows followed by `macro,<value>`."""
    report.to_frame().to_csv(path, index=False, float_format='%.6f', na_rep='nan')
    return path
