"""Embedding-sequence files, dataset manifests, synthetic data and batching.

Sequence file layout (all integers little-endian)::

    b"EMBSEQ01"            8 bytes
    version                u32  (= 1)
    label                  u32
    N                      u64
    d                      u64
    id length              u16
    id                     UTF-8 bytes
    X                      N * d float64, little-endian, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import make_rng

MAGIC = b"EMBSEQ01"
VERSION = 1
_HEADER = struct.Struct("<8sIIQQH")
# guards against absurd headers before any allocation happens
MAX_ELEMENTS = 1 << 40


class SequenceFormatError(ValueError):
    """Base class for malformed sequence files."""


class BadMagicError(SequenceFormatError):
    pass


class VersionMismatchError(SequenceFormatError):
    pass


class TruncatedFileError(SequenceFormatError):
    pass


class ShapeOverflowError(SequenceFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class EmbeddingSequence:
    utt_id: str
    label: int
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError(f"X must be a non-empty 2-D matrix, got shape {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError(f"sequence {self.utt_id!r} has non-finite entries")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d_model(self):
        return self.X.shape[1]


def encode_sequence(seq):
    uid = seq.utt_id.encode("utf-8")
    if len(uid) > 0xFFFF:
        raise ValueError("utterance id longer than 65535 bytes")
    n, d = seq.X.shape
    header = _HEADER.pack(MAGIC, VERSION, seq.label, n, d, len(uid))
    return header + uid + seq.X.astype("<f8", copy=False).tobytes(order="C")


def decode_sequence(buf):
    if len(buf) < 8:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:8] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:8])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header")
    _, version, label, n, d, id_len = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if n < 1 or d < 1 or n * d > MAX_ELEMENTS:
        raise ShapeOverflowError(f"unsupported shape ({n}, {d})")
    start = _HEADER.size + id_len
    end = start + 8 * n * d
    if len(buf) < end:
        raise TruncatedFileError(f"expected {end} bytes, found {len(buf)}")
    if len(buf) > end:
        raise SequenceFormatError(f"{len(buf) - end} trailing bytes after the payload")
    try:
        uid = bytes(buf[_HEADER.size:start]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SequenceFormatError("utterance id is not valid UTF-8") from exc
    x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=start).astype(np.float64).reshape(n, d)
    return EmbeddingSequence(uid, label, x)


def write_sequence(path, seq):
    Path(path).write_bytes(encode_sequence(seq))


def read_sequence(path):
    return decode_sequence(Path(path).read_bytes())


# -- manifests ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: int
    n: int


@dataclass
class DatasetManifest:
    d_model: int
    labels: list
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    @property
    def n_classes(self):
        return len(self.labels)

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "labels": list(self.labels),
            "entries": [{"path": e.path, "label": e.label, "n": e.n} for e in self.entries],
        }

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def resolve(self, entry):
        return self.root / entry.path

    def load_sequences(self):
        """Read every referenced file, checking it against its entry."""
        out = []
        for e in self.entries:
            seq = read_sequence(self.resolve(e))
            if seq.label != e.label or seq.X.shape != (e.n, self.d_model):
                raise ManifestError(
                    f"{e.path}: file has label {seq.label}, shape {seq.X.shape}; "
                    f"manifest says label {e.label}, shape ({e.n}, {self.d_model})"
                )
            out.append(seq)
        return out


def load_manifest(path):
    """Parse a manifest; entry paths are relative to the manifest's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        m = DatasetManifest(
            d_model=int(raw["d_model"]),
            labels=[str(x) for x in raw["labels"]],
            entries=[ManifestEntry(str(e["path"]), int(e["label"]), int(e["n"])) for e in raw["entries"]],
            root=path.parent,
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    for e in m.entries:
        if not 0 <= e.label < m.n_classes:
            raise ManifestError(f"{e.path}: label {e.label} outside [0, {m.n_classes})")
        if not m.resolve(e).is_file():
            raise ManifestError(f"{e.path}: referenced file does not exist")
    return m


def write_dataset(sequences, out_dir, manifest_name, label_names, subdir="seqs"):
    """Write sequences as EMBSEQ01 files plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / subdir).mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in sequences:
        rel = f"{subdir}/{seq.utt_id}.embseq"
        write_sequence(out_dir / rel, seq)
        entries.append(ManifestEntry(rel, seq.label, seq.n))
    d_model = sequences[0].d_model if sequences else 0
    m = DatasetManifest(d_model, list(label_names), entries, root=out_dir)
    m.save(out_dir / manifest_name)
    return m


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class Gaussian embedding sequences.

    Class ``c`` has a mean vector of norm ``mean_scale`` along a seeded random
    direction; each frame is that mean plus ``noise_scale`` times standard
    normal noise. Sequence lengths are uniform in ``[n_min, n_max]``.
    """

    n_classes: int = 5
    d_model: int = 32
    n_min: int = 20
    n_max: int = 40
    mean_scale: float = 4.0
    noise_scale: float = 1.0
    per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.d_model < 1 or self.per_class < 0:
            raise ValueError("n_classes and d_model must be >= 1, per_class >= 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.mean_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be non-negative")


def class_means(spec):
    rng = make_rng([spec.seed, 0])
    directions = rng.standard_normal((spec.n_classes, spec.d_model))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return spec.mean_scale * directions


def gen_synthetic(spec, per_class=None, stream=1, prefix="utt"):
    """Generate ``per_class`` sequences for each class, class-major order.

    Class means depend only on ``spec.seed``; ``stream`` selects an
    independent draw of lengths and noise, so held-out splits share means.
    """
    per_class = spec.per_class if per_class is None else per_class
    means = class_means(spec)
    rng = make_rng([spec.seed, stream])
    out = []
    for c in range(spec.n_classes):
        for i in range(per_class):
            n = int(rng.integers(spec.n_min, spec.n_max, endpoint=True))
            x = means[c] + spec.noise_scale * rng.standard_normal((n, spec.d_model))
            out.append(EmbeddingSequence(f"{prefix}{stream}_c{c:03d}_{i:05d}", c, x))
    return out


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    X: np.ndarray        # (B, N_max, d), zero in padded positions
    mask: np.ndarray     # (B, N_max) bool, prefix-valid
    labels: np.ndarray   # (B,)
    ids: list

    def __len__(self):
        return len(self.ids)

    @property
    def lengths(self):
        return self.mask.sum(axis=1)

    def sequences(self):
        """Undo the padding."""
        return [EmbeddingSequence(uid, int(lab), x[:n])
                for uid, lab, x, n in zip(self.ids, self.labels, self.X, self.lengths)]


def pad_batch(seqs):
    if not seqs:
        raise ValueError("cannot batch zero sequences")
    n_max = max(s.n for s in seqs)
    d = seqs[0].d_model
    X = np.zeros((len(seqs), n_max, d))
    mask = np.zeros((len(seqs), n_max), dtype=bool)
    for i, s in enumerate(seqs):
        if s.d_model != d:
            raise ValueError(f"sequence {s.utt_id!r} has d={s.d_model}, batch has d={d}")
        X[i, :s.n] = s.X
        mask[i, :s.n] = True
    return Batch(X, mask, np.array([s.label for s in seqs], dtype=np.int64), [s.utt_id for s in seqs])


def make_batches(data, batch_size, seed=0, shuffle=True):
    """Split ``data`` into zero-padded batches (optionally after a seeded shuffle)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(data))
    if shuffle:
        order = make_rng(seed).permutation(len(data))
    return [pad_batch([data[i] for i in order[k:k + batch_size]])
            for k in range(0, len(data), batch_size)]


def dataset_summary(data, n_classes):
    lengths = np.array([s.n for s in data]) if data else np.zeros(0, dtype=int)
    counts = np.bincount([s.label for s in data], minlength=n_classes) if data else np.zeros(n_classes, int)
    return {
        "sequences": len(data),
        "per_class": counts.tolist(),
        "length_min": int(lengths.min()) if data else 0,
        "length_max": int(lengths.max()) if data else 0,
        "length_mean": float(lengths.mean()) if data else 0.0,
    }


def ensure_empty_dir(path, force=False):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists and is not empty (use --force)")
    os.makedirs(path, exist_ok=True)
    return path
