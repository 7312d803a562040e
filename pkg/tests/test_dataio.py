import json
import struct
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from lidattn.dataio import (
    BadMagicError,
    EmbeddingSequence,
    ManifestError,
    SequenceFormatError,
    ShapeOverflowError,
    SyntheticSpec,
    TruncatedFileError,
    VersionMismatchError,
    class_means,
    decode_sequence,
    encode_sequence,
    ensure_empty_dir,
    gen_synthetic,
    load_manifest,
    make_batches,
    pad_batch,
    read_sequence,
    write_dataset,
    write_sequence,
)

GOLDEN = Path(__file__).parent / "data" / "golden.embseq"
GOLDEN_X = [[0.5, -1.25, 3.0], [1e-3, -0.0, 2.5e10]]


def _seq(seed=0, n=7, d=16, label=2, uid="utt-α"):
    return EmbeddingSequence(uid, label, np.random.default_rng(seed).standard_normal((n, d)))


def test_round_trip(tmp_path):
    s = _seq()
    write_sequence(tmp_path / "a.embseq", s)
    back = read_sequence(tmp_path / "a.embseq")
    assert back.utt_id == s.utt_id and back.label == s.label
    assert back.X.tobytes() == s.X.tobytes()


def test_golden_file_reads():
    s = read_sequence(GOLDEN)
    assert s.utt_id == "golden-utt" and s.label == 3
    assert s.X.shape == (2, 3)
    assert s.X.tobytes() == np.array(GOLDEN_X, dtype="<f8").tobytes()
    assert np.signbit(s.X[1, 1])


def test_golden_file_written_byte_exact():
    s = EmbeddingSequence("golden-utt", 3, np.array(GOLDEN_X))
    assert encode_sequence(s) == GOLDEN.read_bytes()


def test_truncation_detected():
    buf = encode_sequence(_seq())
    for cut in (4, 20, len(buf) - 1):
        with pytest.raises(TruncatedFileError):
            decode_sequence(buf[:cut])


def test_bad_magic():
    buf = bytearray(encode_sequence(_seq()))
    buf[:8] = b"NOTMAGIC"
    with pytest.raises(BadMagicError):
        decode_sequence(bytes(buf))


def test_version_mismatch():
    buf = bytearray(encode_sequence(_seq()))
    struct.pack_into("<I", buf, 8, 2)
    with pytest.raises(VersionMismatchError):
        decode_sequence(bytes(buf))


def test_shape_overflow():
    buf = bytearray(encode_sequence(_seq()))
    struct.pack_into("<QQ", buf, 16, 2**40, 2**30)
    with pytest.raises(ShapeOverflowError):
        decode_sequence(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(SequenceFormatError):
        decode_sequence(encode_sequence(_seq()) + b"\0")


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, ShapeOverflowError}
    assert len(kinds) == 4
    assert all(issubclass(k, SequenceFormatError) for k in kinds)


def test_sequence_validation():
    with pytest.raises(ValueError):
        EmbeddingSequence("x", 0, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        EmbeddingSequence("x", 0, np.array([[np.nan]]))


# -- synthetic ----------------------------------------------------------------

def test_noise_free_frames_equal_class_mean():
    spec = SyntheticSpec(n_classes=3, d_model=6, noise_scale=0.0, per_class=4)
    means = class_means(spec)
    for s in gen_synthetic(spec):
        assert np.all(s.X == means[s.label])
        assert spec.n_min <= s.n <= spec.n_max
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), spec.mean_scale)


def test_same_seed_same_dataset():
    spec = SyntheticSpec(n_classes=3, d_model=6, per_class=5, seed=9)
    a, b = gen_synthetic(spec), gen_synthetic(spec)
    assert [s.utt_id for s in a] == [s.utt_id for s in b]
    assert all(x.X.tobytes() == y.X.tobytes() for x, y in zip(a, b))
    c = gen_synthetic(SyntheticSpec(n_classes=3, d_model=6, per_class=5, seed=10))
    assert not np.array_equal(a[0].X[:1], c[0].X[:1])


def test_streams_share_means_but_not_noise():
    spec = SyntheticSpec(n_classes=2, d_model=4, per_class=3, noise_scale=0.0)
    a, b = gen_synthetic(spec, stream=1), gen_synthetic(spec, stream=2)
    assert np.all(a[0].X[0] == b[0].X[0])
    noisy = SyntheticSpec(n_classes=2, d_model=4, per_class=3)
    assert not np.array_equal(gen_synthetic(noisy, stream=1)[0].X[:1], gen_synthetic(noisy, stream=2)[0].X[:1])


def test_centroid_oracle_learnable():
    spec = SyntheticSpec(n_classes=5, d_model=32, per_class=100, mean_scale=4.0, noise_scale=1.0)
    train, test = gen_synthetic(spec, stream=1), gen_synthetic(spec, per_class=50, stream=2)
    pooled = lambda data: np.array([s.X.mean(axis=0) for s in data])
    labels = lambda data: np.array([s.label for s in data])
    centroids = np.array([pooled(train)[labels(train) == c].mean(axis=0) for c in range(5)])
    dist = ((pooled(test)[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == labels(test)) >= 0.99


def test_spec_validation():
    for bad in (dict(n_min=0), dict(n_min=5, n_max=4), dict(noise_scale=-1.0)):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


# -- batching -----------------------------------------------------------------

def test_equal_lengths_all_valid():
    seqs = [_seq(i, n=5, d=3) for i in range(4)]
    batch = pad_batch(seqs)
    assert batch.mask.all() and batch.X.shape == (4, 5, 3)


def test_mixed_lengths_mask_and_zero_padding():
    batch = pad_batch([_seq(0, n=3, d=2), _seq(1, n=5, d=2)])
    np.testing.assert_array_equal(batch.mask[0], [1, 1, 1, 0, 0])
    assert np.all(batch.X[0, 3:] == 0.0)


def test_batches_reproduce_dataset():
    spec = SyntheticSpec(n_classes=3, d_model=4, n_min=1, n_max=9, per_class=7)
    data = gen_synthetic(spec)
    batches = make_batches(data, 4, seed=5)
    assert make_batches(data, 4, seed=5)[0].ids == batches[0].ids
    flat = [s for b in batches for s in b.sequences()]
    key = lambda s: (s.utt_id, s.label, s.X.tobytes())
    assert Counter(map(key, flat)) == Counter(map(key, data))
    assert [s.utt_id for s in flat] != [s.utt_id for s in data]
    unshuffled = [s.utt_id for b in make_batches(data, 4, shuffle=False) for s in b.sequences()]
    assert unshuffled == [s.utt_id for s in data]
    for b in batches:
        lengths = b.lengths
        for row, n in zip(b.mask, lengths):
            assert row[:n].all() and not row[n:].any()


def test_mixed_dimensions_rejected():
    with pytest.raises(ValueError):
        pad_batch([_seq(0, d=2), _seq(1, d=3)])


# -- manifests ----------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    data = gen_synthetic(SyntheticSpec(n_classes=2, d_model=3, per_class=3))
    write_dataset(data, tmp_path, "manifest.json", ["en", "fr"])
    m = load_manifest(tmp_path / "manifest.json")
    assert m.labels == ["en", "fr"] and m.d_model == 3 and len(m.entries) == 6
    loaded = m.load_sequences()
    assert all(a.X.tobytes() == b.X.tobytes() and a.label == b.label for a, b in zip(loaded, data))
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc) >= {"d_model", "labels", "entries"}
    assert set(doc["entries"][0]) == {"path", "label", "n"}


def test_manifest_missing_file(tmp_path):
    data = gen_synthetic(SyntheticSpec(n_classes=2, d_model=3, per_class=1))
    m = write_dataset(data, tmp_path, "m.json", ["a", "b"])
    (tmp_path / m.entries[0].path).unlink()
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.json")


def test_manifest_shape_mismatch(tmp_path):
    data = gen_synthetic(SyntheticSpec(n_classes=2, d_model=3, per_class=1))
    m = write_dataset(data, tmp_path, "m.json", ["a", "b"])
    write_sequence(tmp_path / m.entries[0].path, EmbeddingSequence("x", 0, np.zeros((2, 5))))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.json").load_sequences()


def test_manifest_label_out_of_range(tmp_path):
    data = gen_synthetic(SyntheticSpec(n_classes=2, d_model=3, per_class=1))
    write_dataset(data, tmp_path, "m.json", ["a", "b"])
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["labels"] = ["a"]
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.json")


def test_ensure_empty_dir(tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(FileExistsError):
        ensure_empty_dir(tmp_path)
    assert ensure_empty_dir(tmp_path, force=True) == tmp_path
