"""Manifest + audio ingestion, segmentation, tag co-occurrence and synthetic tagged audio.

Manifest format (UTF-8)::

    song_id,audio_path,split,tags
    0001,audio/0001.wav,train,guitar|rock

``audio_path`` is resolved relative to the manifest's directory. Audio is PCM WAV
(8/16-bit) or raw little-endian float32 (``.f32``/``.raw``) whose sample rate sits in
a ``<path>.rate`` sidecar.
"""
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import structlog
from scipy import signal
from scipy.io import wavfile

from sampletag.config import Config
from sampletag.errors import AudioFormatError, ConfigError, ManifestError
from sampletag.utils import ensure_dir, sanitize_filename

logger = structlog.get_logger(__name__)

SAMPLE_RATE = Config.SAMPLE_RATE
SPLITS = ('train', 'valid', 'test')
MANIFEST_COLUMNS = ['song_id', 'audio_path', 'split', 'tags']
RAW_EXTENSIONS = ('.f32', '.raw')


@dataclass
class TagVocabulary:
    tags: list
    index: dict = field(init=False)

    def __post_init__(self):
        if len(set(self.tags)) != len(self.tags):
            raise ManifestError("tag vocabulary has duplicate names")
        self.index = {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self):
        return len(self.tags)

    def vector(self, tags):
        out = np.zeros(len(self.tags), dtype=np.uint8)
        for tag in tags:
            if tag in self.index:
                out[self.index[tag]] = 1
        return out


@dataclass
class DatasetManifest:
    frame: pd.DataFrame  # song_id, audio_path (absolute or manifest-relative), split, tags (list)
    root: str = ''

    def __len__(self):
        return len(self.frame)

    def split(self, name):
        return DatasetManifest(self.frame[self.frame['split'] == name].reset_index(drop=True), self.root)

    def audio_path(self, row):
        path = row['audio_path']
        return path if os.path.isabs(path) else os.path.join(self.root, path)


@dataclass
class Clip:
    song_id: str
    waveform: np.ndarray
    tags: np.ndarray
    split: str = 'train'


@dataclass
class Segment:
    clip: Clip
    offset: int
    length: int

    @property
    def samples(self):
        return self.clip.waveform[self.offset:self.offset + self.length]


@dataclass
class SegmentSet:
    """Segments stacked for training/evaluation; song_index maps each row to song_ids."""
    waveforms: np.ndarray   # (N, input_len) float32
    labels: np.ndarray      # (N, tags) uint8
    song_index: np.ndarray  # (N,)
    song_ids: list
    tags: list

    def __len__(self):
        return len(self.waveforms)

    def songs_with_tag(self, k):
        return sorted({self.song_ids[i] for i in self.song_index[self.labels[:, k] == 1]})


def _split_tags(value):
    return [t.strip() for t in str(value).split('|') if t.strip()]


def select_vocabulary(frame, top_k):
    """The top_k most frequent tags of the training split; ties broken lexicographically."""
    train = frame[frame['split'] == 'train']
    counts = train['tags'].explode().dropna().value_counts()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return TagVocabulary([tag for tag, _ in ranked[:top_k]])


def load_manifest(path, top_k=Config.TOP_K):
    """Parse a manifest, select the tag vocabulary and drop songs with no selected tag."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ManifestError(f"cannot parse manifest {path}: {e}") from e
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"manifest {path} is missing columns {missing}")
    dupes = frame['song_id'][frame['song_id'].duplicated()].unique().tolist()
    if dupes:
        raise ManifestError(f"manifest {path} has duplicate song_ids {dupes[:5]}")
    bad = sorted(set(frame['split']) - set(SPLITS))
    if bad:
        raise ManifestError(f"manifest {path} has unknown splits {bad}; expected {SPLITS}")
    frame = frame[MANIFEST_COLUMNS].copy()
    frame['tags'] = frame['tags'].map(_split_tags)

    vocab = select_vocabulary(frame, top_k)
    keep = frame['tags'].map(lambda tags: any(t in vocab.index for t in tags))
    dropped = int((~keep).sum())
    if dropped:
        logger.info('songs_dropped', count=dropped, reason='no selected tag')
    frame = frame[keep].reset_index(drop=True)
    if not (frame['split'] == 'train').any():
        raise ManifestError(f"manifest {path} has an empty train split")
    root = os.path.dirname(os.path.abspath(path))
    return DatasetManifest(frame, root), vocab


def resample_linear(x, src_rate, dst_rate=SAMPLE_RATE):
    """Linear-interpolation resampling (not band-limited)."""
    if src_rate == dst_rate:
        return x
    n_out = int(round(len(x) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(x)), x).astype(np.float32)


def _read_rate_sidecar(path):
    sidecar = f"{path}.rate"
    try:
        with open(sidecar, encoding='utf-8') as fh:
            return int(fh.read().strip())
    except (OSError, ValueError) as e:
        raise AudioFormatError(f"{path}: raw audio needs a sample rate in {sidecar}") from e


def load_waveform(audio_path, rate=None):
    """Mono float32 waveform at 22050 Hz with values in [-1, 1]."""
    ext = os.path.splitext(audio_path)[1].lower()
    if ext in RAW_EXTENSIONS:
        src_rate = rate or _read_rate_sidecar(audio_path)
        try:
            data = np.fromfile(audio_path, dtype='<f4').astype(np.float32)
        except OSError as e:
            raise AudioFormatError(f"cannot read {audio_path}: {e}") from e
    else:
        try:
            src_rate, data = wavfile.read(audio_path)
        except FileNotFoundError:
            raise
        except ValueError as e:
            raise AudioFormatError(f"{audio_path}: RIFF/fmt chunk not supported: {e}") from e
        if data.dtype == np.int16:
            data = data.astype(np.float32) / 32768.0
        elif data.dtype == np.uint8:
            data = (data.astype(np.float32) - 128.0) / 128.0
        elif data.dtype == np.float32:
            pass
        else:
            raise AudioFormatError(f"{audio_path}: fmt chunk declares unsupported sample format {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    data = resample_linear(data.astype(np.float32), src_rate)
    return np.clip(data, -1.0, 1.0).astype(np.float32)


def segment(clip, input_len):
    """Consecutive non-overlapping windows from sample 0; the remainder is dropped."""
    count = len(clip.waveform) // input_len
    if count == 0:
        logger.warning('segment_skipped', song_id=clip.song_id, samples=len(clip.waveform), input_len=input_len)
        return []
    return [Segment(clip, i * input_len, input_len) for i in range(count)]


def build_segments(clips, input_len, tags):
    """Stack all segments of the given clips; clips too short are skipped."""
    waveforms, labels, song_index, song_ids = [], [], [], []
    for clip in clips:
        segs = segment(clip, input_len)
        if not segs:
            continue
        for seg in segs:
            waveforms.append(seg.samples)
            labels.append(clip.tags)
            song_index.append(len(song_ids))
        song_ids.append(clip.song_id)
    if not waveforms:
        return SegmentSet(np.zeros((0, input_len), np.float32), np.zeros((0, len(tags)), np.uint8),
                          np.zeros(0, dtype=np.int64), [], list(tags))
    return SegmentSet(np.stack(waveforms).astype(np.float32), np.stack(labels).astype(np.uint8),
                      np.asarray(song_index, dtype=np.int64), song_ids, list(tags))


def load_clips(manifest, vocab, split=None):
    """Load and label every song of a manifest (optionally one split)."""
    subset = manifest.split(split) if split else manifest
    if split and len(subset) == 0:
        raise ManifestError(f"manifest has an empty {split} split")
    clips = []
    for _, row in subset.frame.iterrows():
        path = manifest.audio_path(row)
        try:
            waveform = load_waveform(path)
        except FileNotFoundError as e:
            raise AudioFormatError(f"audio file not found: {path}") from e
        clips.append(Clip(row['song_id'], waveform, vocab.vector(row['tags']), row['split']))
    return clips


def cooccurrence(manifest, vocab, tags=None):
    """(i, j) = number of songs annotated with both tags; the diagonal holds tag counts."""
    tags = list(tags) if tags else list(vocab.tags)
    unknown = [t for t in tags if t not in vocab.index]
    if unknown:
        raise ConfigError(f"tags not in vocabulary: {unknown}")
    onehot = np.array([[1 if t in song_tags else 0 for t in tags] for song_tags in manifest.frame['tags']],
                      dtype=np.int64).reshape(-1, len(tags))
    return onehot.T @ onehot


# Synthetic tagged audio

SIGNATURE_FAMILIES = ('sine', 'amnoise', 'pulse', 'chirp')
SIGNATURE_CENTERS = np.round(np.geomspace(800.0, 9000.0, 16)).astype(int)
MAX_SIGNATURES = len(SIGNATURE_CENTERS)


@dataclass
class Signature:
    family: str
    center: float

    @property
    def name(self):
        return f"{self.family}_{int(self.center)}hz"

    @property
    def band(self):
        return 0.85 * self.center, 1.15 * self.center

    def render(self, n, rng, rate=SAMPLE_RATE):
        t = np.arange(n) / rate
        f = self.center
        if self.family == 'sine':
            x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        elif self.family == 'amnoise':
            sos = signal.butter(4, [0.92 * f, 1.08 * f], btype='bandpass', fs=rate, output='sos')
            carrier = signal.sosfilt(sos, rng.standard_normal(n + 256))[256:]
            x = carrier * (1.0 + 0.8 * np.sin(2 * np.pi * 40.0 * t + rng.uniform(0, 2 * np.pi)))
        elif self.family == 'pulse':
            period = max(int(rate / 200.0), 4)
            gate = (np.arange(n) + rng.integers(period)) % period < period // 3
            x = gate * np.sin(2 * np.pi * f * t)
        else:
            x = signal.chirp(t, f0=0.92 * f, t1=max(t[-1], 1e-3), f1=1.08 * f, phi=rng.uniform(0, 360))
        rms = np.sqrt(np.mean(x ** 2))
        return x / rms if rms > 0 else x


def signatures(num_tags):
    if num_tags > MAX_SIGNATURES:
        raise ConfigError(f"at most {MAX_SIGNATURES} synthetic signatures exist, asked for {num_tags}")
    return [Signature(SIGNATURE_FAMILIES[k % len(SIGNATURE_FAMILIES)], float(SIGNATURE_CENTERS[k]))
            for k in range(num_tags)]


@dataclass
class SynthDataset:
    clips: list
    vocab: TagVocabulary
    signatures: list

    def split(self, name):
        return [c for c in self.clips if c.split == name]

    def segments(self, input_len, split=None):
        clips = self.split(split) if split else self.clips
        return build_segments(clips, input_len, self.vocab.tags)


def _split_for(i):
    return {8: 'valid', 9: 'test'}.get(i % 10, 'train')


def synth_generate(num_songs, num_tags, input_len, seed, segments_per_song=2, snr_db=10.0):
    """Songs mixing 1-3 tag signatures plus white noise at ``snr_db``; deterministic per seed."""
    if num_songs < 1 or num_tags < 1 or input_len < 1 or segments_per_song < 1:
        raise ConfigError("synth_generate needs positive sizes")
    sigs = signatures(num_tags)
    rng = np.random.default_rng(seed)
    n = input_len * segments_per_song
    counts = np.zeros(num_tags, dtype=np.int64)
    clips = []
    for i in range(num_songs):
        k = min(1 + i % 3, num_tags)
        order = rng.permutation(num_tags)
        # least-used tags first keeps labels balanced
        chosen = sorted(order[np.argsort(counts[order], kind='stable')][:k].tolist())
        counts[chosen] += 1
        mix = sum(sigs[j].render(n, rng) for j in chosen)
        noise_power = np.mean(mix ** 2) / (10.0 ** (snr_db / 10.0))
        mix = mix + rng.standard_normal(n) * np.sqrt(noise_power)
        mix = 0.95 * mix / np.max(np.abs(mix))
        tags = np.zeros(num_tags, dtype=np.uint8)
        tags[chosen] = 1
        clips.append(Clip(f"synth{i:05d}", mix.astype(np.float32), tags, _split_for(i)))
    return SynthDataset(clips, TagVocabulary([s.name for s in sigs]), sigs)


def export_dataset(dataset, out_dir, fmt='f32'):
    """Write audio files and manifest.csv; raw f32 is bit-exact, wav is 16-bit PCM."""
    if fmt not in ('f32', 'wav'):
        raise ConfigError(f"export format must be f32 or wav, got {fmt!r}")
    audio_dir = ensure_dir(os.path.join(out_dir, 'audio'))
    rows = []
    for clip in dataset.clips:
        name = sanitize_filename(clip.song_id)
        rel = os.path.join('audio', f"{name}.{fmt}")
        path = os.path.join(out_dir, rel)
        if fmt == 'f32':
            clip.waveform.astype('<f4').tofile(path)
            with open(f"{path}.rate", 'w', encoding='utf-8') as fh:
                fh.write(f"{SAMPLE_RATE}\n")
        else:
            pcm = np.clip(np.round(clip.waveform * 32767.0), -32768, 32767).astype(np.int16)
            wavfile.write(path, SAMPLE_RATE, pcm)
        tags = [dataset.vocab.tags[k] for k in np.flatnonzero(clip.tags)]
        rows.append({'song_id': clip.song_id, 'audio_path': rel, 'split': clip.split, 'tags': '|'.join(tags)})
    manifest_path = os.path.join(out_dir, 'manifest.csv')
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest_path, index=False, lineterminator='\n')
    logger.info('dataset_exported', songs=len(rows), out_dir=str(out_dir), fmt=fmt)
    return manifest_path
