"""Excitation analysis: SE gate activations per tag, channel ordering and per-block std."""
import glob
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import structlog

from sampletag.errors import ConfigError
from sampletag.utils import ensure_dir

logger = structlog.get_logger(__name__)

STD_METHODS = ('channel', 'tag')


@dataclass
class ExcitationCapture:
    blocks: dict  # block number (1-based) -> (segments, channels) gate values

    @property
    def block_ids(self):
        return sorted(self.blocks)


@dataclass
class ExcitationReport:
    tags: list
    means: dict                       # block -> (tags, channels), nan rows for absent tags
    orders: dict                      # block -> channel permutation
    std: dict                         # block -> scalar
    absent: list = field(default_factory=list)

    @property
    def block_ids(self):
        return sorted(self.means)


def capture(net, segments, batch_size=23):
    """Record every SE gate for every segment (eval mode, no tape)."""
    se_blocks = [i for i, block in enumerate(net.blocks, 1) if block.se is not None]
    if not se_blocks:
        raise ConfigError(f"{net.config.block_kind} network has no SE units to analyze")
    if len(segments) == 0:
        raise ConfigError("nothing to capture: the segment set is empty")
    net.eval()
    rows = {i: [] for i in se_blocks}
    for start in range(0, len(segments), batch_size):
        x = segments.waveforms[start:start + batch_size][:, :, None].astype(net.dtype, copy=False)
        gates = []
        net.forward(x, capture=gates)
        for i, s in zip(se_blocks, gates):
            rows[i].append(s.astype(np.float64))
    return ExcitationCapture({i: np.concatenate(rows[i], axis=0) for i in se_blocks})


def tag_means(cap, segments):
    """Mean gate per tag over all segments whose song carries that tag (multi-label).

    Returns ({block: (tags, channels)}, absent tag names); absent rows are nan.
    """
    labels = segments.labels.astype(bool)
    absent = [tag for k, tag in enumerate(segments.tags) if not labels[:, k].any()]
    for tag in absent:
        logger.warning('tag_absent', tag=tag)
    out = {}
    for block, gates in cap.blocks.items():
        if len(gates) != len(labels):
            raise ConfigError(f"block {block} captured {len(gates)} segments, dataset has {len(labels)}")
        means = np.full((labels.shape[1], gates.shape[1]), np.nan)
        for k in range(labels.shape[1]):
            if labels[:, k].any():
                means[k] = gates[labels[:, k]].mean(axis=0)
        out[block] = means
    return out, absent


def sort_channels(mean_matrix):
    """Channels by descending mean over (present) tags; ties keep channel order."""
    col_means = np.nanmean(mean_matrix, axis=0)
    return np.lexsort((np.arange(mean_matrix.shape[1]), -col_means))


def std_profile(means, method='channel'):
    """One spread value per block.

    ``channel``: population std over tags for each channel, averaged over channels.
    ``tag``: mean over channels for each tag, then population std over tags.
    """
    if method not in STD_METHODS:
        raise ConfigError(f"std method must be one of {STD_METHODS}, got {method!r}")
    profile = {}
    for block, matrix in means.items():
        present = matrix[~np.isnan(matrix).any(axis=1)]
        if method == 'channel':
            profile[block] = float(present.std(axis=0).mean())
        else:
            profile[block] = float(present.mean(axis=1).std())
    return profile


def build_report(cap, segments, method='channel'):
    means, absent = tag_means(cap, segments)
    orders = {block: sort_channels(m) for block, m in means.items()}
    return ExcitationReport(list(segments.tags), means, orders, std_profile(means, method), absent)


def emit_report(report, out_dir, cooccurrence=None, cooccurrence_tags=None):
    """Write per-block tag means, the std profile, a long table and optionally co-occurrence."""
    ensure_dir(out_dir)
    written = []
    long_rows = []
    for block in report.block_ids:
        matrix = report.means[block]
        channels = [f'ch{c}' for c in range(matrix.shape[1])]
        frame = pd.DataFrame(matrix, index=pd.Index(report.tags, name='tag'), columns=channels)
        path = os.path.join(out_dir, f'block{block}_tag_means.csv')
        frame.to_csv(path, float_format='%.9g', na_rep='nan')
        written.append(path)
        for rank, channel in enumerate(report.orders[block]):
            for k, tag in enumerate(report.tags):
                long_rows.append((block, tag, rank, int(channel), matrix[k, channel]))

    std_path = os.path.join(out_dir, 'std_profile.csv')
    pd.DataFrame({'block': report.block_ids, 'std': [report.std[b] for b in report.block_ids]}) \
        .to_csv(std_path, index=False, float_format='%.9g')
    written.append(std_path)

    long_path = os.path.join(out_dir, 'excitation_long.csv')
    pd.DataFrame(long_rows, columns=['block', 'tag', 'channel_rank', 'channel', 'value']) \
        .to_csv(long_path, index=False, float_format='%.9g', na_rep='nan')
    written.append(long_path)

    if cooccurrence is not None:
        tags = list(cooccurrence_tags)
        cooc_path = os.path.join(out_dir, 'cooccurrence.csv')
        pd.DataFrame(np.asarray(cooccurrence), index=pd.Index(tags, name='tag'), columns=tags).to_csv(cooc_path)
        written.append(cooc_path)
    logger.info('excitation_report_written', out_dir=str(out_dir), files=len(written))
    return written


def load_report(out_dir):
    """Parse files written by emit_report back into an ExcitationReport."""
    means, orders = {}, {}
    tags = None
    for path in glob.glob(os.path.join(out_dir, 'block*_tag_means.csv')):
        block = int(re.search(r'block(\d+)_tag_means', os.path.basename(path)).group(1))
        frame = pd.read_csv(path, index_col='tag', keep_default_na=False, na_values=['nan'])
        frame.index = frame.index.astype(str)
        tags = list(frame.index)
        means[block] = frame.to_numpy(dtype=np.float64)
        orders[block] = sort_channels(means[block])
    if not means:
        raise ConfigError(f"no excitation report found in {out_dir}")
    std = pd.read_csv(os.path.join(out_dir, 'std_profile.csv'))
    profile = {int(b): float(s) for b, s in zip(std['block'], std['std'])}
    absent = [t for k, t in enumerate(tags) if all(np.isnan(m[k]).all() for m in means.values())]
    return ExcitationReport(tags, means, orders, profile, absent)
