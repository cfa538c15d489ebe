"""Synthetic multi-label video corpus and bit-exact feature persistence.

Each synthetic video is Gaussian noise in both modalities; every planted
class adds a fixed per-class template over one contiguous window of frames,
so the labels depend on local temporal segments. On disk a dataset is a
manifest.jsonl plus one little-endian float32 feature file per modality
per video (16-byte header: magic "Y8MF", version, rows, cols).
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_MAGIC = b"Y8MF"
FEATURE_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class VideoRecord:
    id: str
    num_frames: int
    visual: np.ndarray  # num_frames x d_visual
    audio: np.ndarray   # num_frames x d_audio
    labels: set = field(default_factory=set)


@dataclass
class BatchItem:
    id: str
    visual: np.ndarray  # T x d_visual, padded/truncated
    audio: np.ndarray
    valid_len: int
    labels: set


@dataclass
class SynthConfig:
    num_videos: int = 100
    num_classes: int = 20
    d_visual: int = 32
    d_audio: int = 16
    t_min: int = 24
    t_max: int = 32
    motif_len: int = 6
    motifs_min: int = 1
    motifs_max: int = 3
    noise_scale: float = 1.0
    template_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.motif_len > self.t_min:
            raise ValueError(f"motif length {self.motif_len} exceeds shortest "
                             f"video length {self.t_min}")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("bad frame-count range")


def generate_synthetic(cfg: SynthConfig):
    """Deterministic corpus for a given seed; labels = planted classes."""
    rng = np.random.default_rng(cfg.seed)
    templates_v = rng.normal(size=(cfg.num_classes, cfg.d_visual))
    templates_a = rng.normal(size=(cfg.num_classes, cfg.d_audio))
    records = []
    for idx in range(cfg.num_videos):
        t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        visual = rng.normal(scale=cfg.noise_scale, size=(t, cfg.d_visual))
        audio = rng.normal(scale=cfg.noise_scale, size=(t, cfg.d_audio))
        n_motifs = int(rng.integers(cfg.motifs_min, cfg.motifs_max + 1))
        classes = rng.choice(cfg.num_classes, size=n_motifs, replace=False) \
            if n_motifs > 0 else np.empty(0, dtype=int)
        for c in classes:
            start = int(rng.integers(0, t - cfg.motif_len + 1))
            sl = slice(start, start + cfg.motif_len)
            visual[sl] += cfg.template_scale * templates_v[c]
            audio[sl] += cfg.template_scale * templates_a[c]
        records.append(VideoRecord(id=f"vid{idx:05d}", num_frames=t,
                                   visual=visual, audio=audio,
                                   labels=set(int(c) for c in classes)))
    return records


def _write_features(path, arr):
    a32 = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, a32.shape[0], a32.shape[1]))
        f.write(a32.tobytes())


def _read_features(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:4] != FEATURE_MAGIC:
            raise DataFormatError(f"{path}: bad feature-file header")
        version, rows, cols = struct.unpack("<III", head[4:])
        if version != FEATURE_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        raw = f.read()
    if len(raw) != 4 * rows * cols:
        raise DataFormatError(f"{path}: {len(raw)} payload bytes, "
                              f"expected {4 * rows * cols}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_records(records, out_dir):
    """Persist a dataset; float32 at the file boundary."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as mf:
        for r in records:
            vf, af = f"{r.id}_visual.bin", f"{r.id}_audio.bin"
            _write_features(os.path.join(feat_dir, vf), r.visual)
            _write_features(os.path.join(feat_dir, af), r.audio)
            mf.write(json.dumps({"id": r.id, "num_frames": r.num_frames,
                                 "labels": sorted(r.labels),
                                 "visual_file": vf, "audio_file": af}) + "\n")


def read_records(in_dir):
    manifest = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise DataFormatError(f"no manifest.jsonl in {in_dir}")
    records = []
    with open(manifest) as mf:
        for line in mf:
            if not line.strip():
                continue
            try:
                meta = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{manifest}: bad manifest line: {e}") from None
            visual = _read_features(os.path.join(in_dir, "features", meta["visual_file"]))
            audio = _read_features(os.path.join(in_dir, "features", meta["audio_file"]))
            if visual.shape[0] != meta["num_frames"] or audio.shape[0] != meta["num_frames"]:
                raise DataFormatError(
                    f"record {meta['id']!r}: manifest says {meta['num_frames']} "
                    f"frames, files have {visual.shape[0]}/{audio.shape[0]}")
            records.append(VideoRecord(id=meta["id"], num_frames=meta["num_frames"],
                                       visual=visual, audio=audio,
                                       labels=set(meta["labels"])))
    return records


def pad_or_truncate(arr, t):
    """Keep the first t rows; zero-pad when the clip is shorter."""
    if arr.shape[0] >= t:
        return np.array(arr[:t])
    out = np.zeros((t, arr.shape[1]))
    out[:arr.shape[0]] = arr
    return out


def batch_and_pad(records, t, batch_size):
    """Chunk records (in given order) into batches of fixed-T items."""
    if t < 1 or batch_size < 1:
        raise ValueError("t and batch_size must be >= 1")
    items = [BatchItem(id=r.id,
                       visual=pad_or_truncate(r.visual, t),
                       audio=pad_or_truncate(r.audio, t),
                       valid_len=min(r.num_frames, t),
                       labels=set(r.labels))
             for r in records]
    return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
