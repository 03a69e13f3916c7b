import json

import numpy as np
import pytest

from tailor import dataio
from tailor.dataio import (
    DatasetManifest,
    MagicError,
    MissingFileError,
    ModalityBundle,
    ShapeError,
    SynthSpec,
    TruncatedError,
    generate_synthetic,
    load,
    read_matrices,
    write_dataset,
    write_matrices,
)


def manifest(alignment="aligned", lengths=(4, 4, 4)):
    return DatasetManifest(
        name="tiny",
        alignment=alignment,
        label_names=["a", "b"],
        modalities={m: {"dim": d, "length": n} for m, d, n in zip(dataio.MODALITY_ORDER, (2, 3, 1), lengths)},
        splits={},
        instances=0,
    )


def bundles(rng, n, lengths=(4, 4, 4)):
    out = []
    for _ in range(n):
        mats = [rng.standard_normal((d, t)).astype(np.float32) for d, t in zip((2, 3, 1), lengths)]
        out.append(ModalityBundle(*mats, labels=(rng.random(2) < 0.5).astype(np.float32)))
    return out


def test_aligned_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = bundles(rng, 5)
    path = write_dataset(tmp_path, manifest(), {"train": data})
    back = list(load(path).iter_split("train"))
    assert len(back) == 5
    for a, b in zip(data, back):
        for m in dataio.MODALITY_ORDER:
            assert np.array_equal(a.matrices()[m], b.matrices()[m])
        assert np.array_equal(a.labels, b.labels)


def test_unaligned_round_trip_keeps_true_lengths(tmp_path):
    rng = np.random.default_rng(1)
    data = bundles(rng, 3, lengths=(3, 5, 2))
    path = write_dataset(tmp_path, manifest("unaligned", (4, 6, 2)), {"train": data})
    back = list(load(path).iter_split("train"))
    for a, b in zip(data, back):
        assert b.lengths == {"visual": 3, "audio": 5, "text": 2}
        assert np.array_equal(b.visual[:, :3], a.visual) and np.all(b.visual[:, 3:] == 0)


def test_truncation_names_the_record(tmp_path):
    path = write_dataset(tmp_path, manifest(), {"train": bundles(np.random.default_rng(0), 4)})
    split = tmp_path / "train.bin"
    raw = split.read_bytes()
    split.write_bytes(raw[:-10])
    with pytest.raises(TruncatedError, match="record 3"):
        list(load(path).iter_split("train"))


def test_bad_magic_and_missing_files(tmp_path):
    path = write_dataset(tmp_path, manifest(), {"train": bundles(np.random.default_rng(0), 1)})
    split = tmp_path / "train.bin"
    split.write_bytes(b"XXXXXXXX" + split.read_bytes()[8:])
    with pytest.raises(MagicError):
        list(load(path).iter_split("train"))
    split.unlink()
    with pytest.raises(MissingFileError):
        list(load(path).iter_split("train"))
    with pytest.raises(MissingFileError):
        load(tmp_path / "nowhere")


def test_shape_mismatch_on_write(tmp_path):
    bad = bundles(np.random.default_rng(0), 1, lengths=(3, 4, 4))
    with pytest.raises(ShapeError):
        write_dataset(tmp_path, manifest(), {"train": bad})


def test_manifest_json_round_trip():
    m = manifest()
    m.splits = {"train": {"file": "train.bin", "count": 0}}
    assert DatasetManifest.from_json(m.to_json()).to_json() == m.to_json()


def test_default_synthetic_dataset(tmp_path):
    path = generate_synthetic(tmp_path, seed=3)
    man = json.loads(path.read_text())
    assert man["label_names"] == list(dataio.DEFAULT_LABELS)
    ds = load(path)
    arrs = ds.arrays("train")
    assert arrs["visual"].shape == (200, 8, 10)
    assert arrs["audio"].shape == (200, 8, 10)
    assert arrs["text"].shape == (200, 12, 10)
    assert arrs["labels"].shape == (200, 6)
    assert ds.arrays("valid")["labels"].shape == (50, 6)
    assert ds.arrays("test")["labels"].shape == (50, 6)


def test_same_seed_is_byte_identical(tmp_path):
    generate_synthetic(tmp_path / "a", seed=11)
    generate_synthetic(tmp_path / "b", seed=11)
    generate_synthetic(tmp_path / "c", seed=12)
    for name in ("manifest.json", "train.bin", "valid.bin", "test.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.bin").read_bytes() != (tmp_path / "c" / "train.bin").read_bytes()


def test_each_label_lives_in_two_modalities():
    assign = dataio.label_modalities(6, 2)
    assert all(len(set(a)) == 2 for a in assign)
    for m in dataio.MODALITY_ORDER:
        assert sum(m in a for a in assign) == 4


def test_noise_free_labels_are_linearly_recoverable(tmp_path):
    spec = SynthSpec(noise=0.0, counts={"train": 200})
    arrs = load(generate_synthetic(tmp_path, spec, seed=5)).arrays("train")
    x = np.concatenate([arrs[m].reshape(200, -1) for m in dataio.MODALITY_ORDER], axis=1).astype(np.float64)
    y = arrs["labels"].astype(np.float64)
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = x @ w > 0.5
    assert np.array_equal(pred, y > 0.5)


def test_planted_cooccurrence():
    spec = SynthSpec()
    y = dataio.sample_labels(np.random.default_rng(0), 10_000, spec)
    src, tgt, _ = spec.cooccur
    assert y[y[:, src] == 1, tgt].mean() > y[:, tgt].mean() + 0.2
    others = [j for j in range(6) if j not in (src, tgt)]
    assert abs(y[:, others].mean() - 0.3) < 0.02


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(marginal=1.5).validate()
    with pytest.raises(ValueError):
        SynthSpec(cooccur=(5, 5, 0.8)).validate()
    with pytest.raises(ValueError):
        SynthSpec(modalities_per_label=4).validate()


def test_embedding_matrices_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    records = [[rng.standard_normal((4, 3)).astype(np.float32), rng.standard_normal((4, 2)).astype(np.float32)]
               for _ in range(3)]
    labels = np.array([[1, 0], [0, 1], [1, 1]], np.float32)
    meta = write_matrices(tmp_path, ["M", "C_v"], records, labels, ["a", "b"])
    mats, y = read_matrices(meta)
    assert np.array_equal(mats["M"], np.stack([r[0] for r in records]))
    assert np.array_equal(mats["C_v"], np.stack([r[1] for r in records]))
    assert np.array_equal(y, labels)
    (tmp_path / "embeddings.bin").write_bytes((tmp_path / "embeddings.bin").read_bytes()[:-4])
    with pytest.raises(TruncatedError):
        read_matrices(meta)
