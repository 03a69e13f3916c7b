"""Dataset container format, loader and seeded synthetic generator.

A dataset directory holds ``manifest.json`` plus one binary file per split.
Each binary file starts with a 16-byte header (8-byte magic ``MMERFT01``,
uint32 record count, uint32 reserved) followed by back-to-back records. A
record is the visual, audio and text matrices then the label vector, all
little-endian float32, matrices stored feature-major (``d_m`` rows by
``tau_m`` columns, row-major). In unaligned datasets each matrix is preceded
by a uint32 true length and padded with zeros to the manifest length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"MMERFT01"
HEADER = struct.Struct("<8sII")
MODALITY_ORDER = ("visual", "audio", "text")
SPLITS = ("train", "valid", "test")
DEFAULT_LABELS = ("angry", "disgust", "fear", "happy", "sad", "surprise")


class DataError(Exception):
    pass


class MissingFileError(DataError):
    pass


class MagicError(DataError):
    pass


class ShapeError(DataError):
    pass


class TruncatedError(DataError):
    pass


@dataclass
class DatasetManifest:
    name: str
    alignment: str
    label_names: list[str]
    modalities: dict[str, dict[str, int]]
    splits: dict[str, dict]
    instances: int

    def __post_init__(self):
        if self.alignment not in ("aligned", "unaligned"):
            raise ShapeError(f"alignment must be aligned or unaligned, got {self.alignment!r}")
        if not self.label_names or len(set(self.label_names)) != len(self.label_names):
            raise ShapeError("label_names must be nonempty and unique")
        for m in MODALITY_ORDER:
            spec = self.modalities.get(m)
            if spec is None or spec.get("dim", 0) < 1 or spec.get("length", 0) < 1:
                raise ShapeError(f"modality {m}: dim and length must be positive")
        if self.alignment == "aligned" and len({self.modalities[m]["length"] for m in MODALITY_ORDER}) != 1:
            raise ShapeError("aligned dataset must share one sequence length")
        if sum(s["count"] for s in self.splits.values()) != self.instances:
            raise ShapeError("split counts do not sum to the instance count")

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    @property
    def aligned(self) -> bool:
        return self.alignment == "aligned"

    def dims(self) -> dict[str, int]:
        return {m: self.modalities[m]["dim"] for m in MODALITY_ORDER}

    def lengths(self) -> dict[str, int]:
        return {m: self.modalities[m]["length"] for m in MODALITY_ORDER}

    def record_size(self) -> int:
        n = self.num_labels
        for m in MODALITY_ORDER:
            n += self.modalities[m]["dim"] * self.modalities[m]["length"]
        extra = 4 * len(MODALITY_ORDER) if not self.aligned else 0
        return 4 * n + extra

    def to_json(self) -> str:
        data = {
            "format": MAGIC.decode(),
            "name": self.name,
            "alignment": self.alignment,
            "label_names": list(self.label_names),
            "modalities": {m: dict(self.modalities[m]) for m in MODALITY_ORDER},
            "splits": self.splits,
            "instances": self.instances,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        try:
            return cls(
                name=data["name"],
                alignment=data["alignment"],
                label_names=list(data["label_names"]),
                modalities={m: dict(data["modalities"][m]) for m in MODALITY_ORDER},
                splits=data["splits"],
                instances=int(data["instances"]),
            )
        except KeyError as exc:
            raise ShapeError(f"manifest is missing field {exc}") from None


@dataclass
class ModalityBundle:
    visual: np.ndarray
    audio: np.ndarray
    text: np.ndarray
    labels: np.ndarray
    lengths: dict[str, int] = field(default_factory=dict)

    def matrices(self):
        return {"visual": self.visual, "audio": self.audio, "text": self.text}


def _write_records(path: Path, manifest: DatasetManifest, bundles: Sequence[ModalityBundle]) -> None:
    with path.open("wb") as f:
        f.write(HEADER.pack(MAGIC, len(bundles), 0))
        for b in bundles:
            for m, mat in b.matrices().items():
                d, tau = manifest.modalities[m]["dim"], manifest.modalities[m]["length"]
                mat = np.asarray(mat, dtype="<f4")
                if mat.shape[0] != d or mat.shape[1] > tau or (manifest.aligned and mat.shape[1] != tau):
                    raise ShapeError(f"{m} matrix {mat.shape} does not fit manifest ({d}, {tau})")
                if not manifest.aligned:
                    f.write(struct.pack("<I", b.lengths.get(m, mat.shape[1])))
                    padded = np.zeros((d, tau), dtype="<f4")
                    padded[:, : mat.shape[1]] = mat
                    mat = padded
                f.write(np.ascontiguousarray(mat).tobytes())
            labels = np.asarray(b.labels, dtype="<f4")
            if labels.shape != (manifest.num_labels,):
                raise ShapeError(f"label vector {labels.shape} does not match {manifest.num_labels} labels")
            f.write(labels.tobytes())


def write_dataset(out_dir: str | Path, manifest: DatasetManifest, splits: dict[str, Sequence[ModalityBundle]]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, bundles in splits.items():
        entry = manifest.splits.setdefault(name, {})
        entry.setdefault("file", f"{name}.bin")
        entry["count"] = len(bundles)
        _write_records(out_dir / entry["file"], manifest, bundles)
    manifest.instances = sum(s["count"] for s in manifest.splits.values())
    path = out_dir / "manifest.json"
    path.write_text(manifest.to_json())
    return path


class Dataset:
    """Handle on a dataset directory; splits are streamed record by record."""

    def __init__(self, manifest_path: str | Path):
        self.path = Path(manifest_path)
        if self.path.is_dir():
            self.path = self.path / "manifest.json"
        if not self.path.exists():
            raise MissingFileError(f"manifest not found: {self.path}")
        self.root = self.path.parent
        self.manifest = DatasetManifest.from_json(self.path.read_text())

    def split_names(self) -> list[str]:
        return list(self.manifest.splits)

    def iter_split(self, split: str) -> Iterator[ModalityBundle]:
        man = self.manifest
        if split not in man.splits:
            raise DataError(f"unknown split {split!r}; manifest has {sorted(man.splits)}")
        entry = man.splits[split]
        path = self.root / entry["file"]
        if not path.exists():
            raise MissingFileError(f"split file not found: {path}")
        with path.open("rb") as f:
            head = f.read(HEADER.size)
            if len(head) < HEADER.size:
                raise TruncatedError(f"{path}: header truncated")
            magic, count, _ = HEADER.unpack(head)
            if magic != MAGIC:
                raise MagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
            if count != entry["count"]:
                raise ShapeError(f"{path}: header says {count} records, manifest says {entry['count']}")
            for i in range(count):
                yield self._read_record(f, i, path)

    def _read_record(self, f, index: int, path: Path) -> ModalityBundle:
        man = self.manifest
        mats, lengths = {}, {}
        for m in MODALITY_ORDER:
            d, tau = man.modalities[m]["dim"], man.modalities[m]["length"]
            if not man.aligned:
                raw = f.read(4)
                if len(raw) < 4:
                    raise TruncatedError(f"{path}: record {index} truncated in {m} length")
                (true_len,) = struct.unpack("<I", raw)
                if not 1 <= true_len <= tau:
                    raise ShapeError(f"{path}: record {index} {m} length {true_len} outside [1, {tau}]")
                lengths[m] = true_len
            else:
                lengths[m] = tau
            raw = f.read(4 * d * tau)
            if len(raw) < 4 * d * tau:
                raise TruncatedError(f"{path}: record {index} truncated in {m} block")
            mats[m] = np.frombuffer(raw, dtype="<f4").reshape(d, tau).copy()
        raw = f.read(4 * man.num_labels)
        if len(raw) < 4 * man.num_labels:
            raise TruncatedError(f"{path}: record {index} truncated in label vector")
        labels = np.frombuffer(raw, dtype="<f4").copy()
        if not np.all((labels == 0) | (labels == 1)):
            raise ShapeError(f"{path}: record {index} has non-binary labels")
        return ModalityBundle(mats["visual"], mats["audio"], mats["text"], labels, lengths)

    def arrays(self, split: str) -> dict[str, np.ndarray]:
        """Stack a whole split into arrays: visual/audio/text ``(n, d_m, tau_m)`` and labels ``(n, l)``."""
        bundles = list(self.iter_split(split))
        man = self.manifest
        out = {}
        for m in MODALITY_ORDER:
            shape = (len(bundles), man.modalities[m]["dim"], man.modalities[m]["length"])
            out[m] = np.stack([b.matrices()[m] for b in bundles]) if bundles else np.zeros(shape, np.float32)
        out["labels"] = (np.stack([b.labels for b in bundles]) if bundles
                         else np.zeros((0, man.num_labels), np.float32))
        return out


def load(manifest_path: str | Path) -> Dataset:
    return Dataset(manifest_path)


@dataclass
class SynthSpec:
    dims: dict[str, int] = field(default_factory=lambda: {"visual": 8, "audio": 8, "text": 12})
    lengths: dict[str, int] = field(default_factory=lambda: {"visual": 10, "audio": 10, "text": 10})
    label_names: tuple[str, ...] = DEFAULT_LABELS
    counts: dict[str, int] = field(default_factory=lambda: {"train": 200, "valid": 50, "test": 50})
    marginal: float | Sequence[float] = 0.3
    cooccur: tuple[int, int, float] | None = (5, 3, 0.8)
    modalities_per_label: int = 2
    amplitude: float = 1.0
    noise: float = 0.5
    name: str = "synthetic"

    @property
    def alignment(self) -> str:
        return "aligned" if len(set(self.lengths.values())) == 1 else "unaligned"

    def validate(self) -> None:
        l = len(self.label_names)
        if l < 1 or len(set(self.label_names)) != l:
            raise ValueError("label names must be nonempty and unique")
        if any(self.dims.get(m, 0) < 1 or self.lengths.get(m, 0) < 1 for m in MODALITY_ORDER):
            raise ValueError("every modality needs a positive dim and length")
        marg = np.broadcast_to(np.asarray(self.marginal, dtype=float), (l,))
        if np.any(marg < 0) or np.any(marg > 1):
            raise ValueError("marginal label probabilities must lie in [0, 1]")
        if not 1 <= self.modalities_per_label <= 3:
            raise ValueError("modalities_per_label must be 1, 2 or 3")
        if self.cooccur is not None:
            src, tgt, p = self.cooccur
            if not (0 <= src < l and 0 <= tgt < l and src != tgt and 0 <= p <= 1):
                raise ValueError(f"invalid co-occurrence {self.cooccur}")
        if self.noise < 0 or any(c < 0 for c in self.counts.values()):
            raise ValueError("noise and split counts must be nonnegative")


def label_modalities(num_labels: int, per_label: int) -> list[tuple[str, ...]]:
    """Round-robin assignment of each label to ``per_label`` modalities."""
    return [tuple(MODALITY_ORDER[(j + k) % 3] for k in range(per_label)) for j in range(num_labels)]


def sample_labels(rng: np.random.Generator, n: int, spec: SynthSpec) -> np.ndarray:
    l = len(spec.label_names)
    marg = np.broadcast_to(np.asarray(spec.marginal, dtype=float), (l,))
    y = (rng.random((n, l)) < marg).astype(np.float32)
    if spec.cooccur is not None:
        src, tgt, p = spec.cooccur
        boost = rng.random(n) < p
        y[:, tgt] = np.where((y[:, src] == 1) & boost, 1.0, y[:, tgt])
    return y


def synth_patterns(rng: np.random.Generator, spec: SynthSpec) -> dict[str, np.ndarray]:
    """Rank-one ``(d_m, tau_m)`` pattern per label and modality (zero where the label is absent)."""
    l = len(spec.label_names)
    assign = label_modalities(l, spec.modalities_per_label)
    pats = {}
    for m in MODALITY_ORDER:
        d, tau = spec.dims[m], spec.lengths[m]
        u = rng.standard_normal((l, d))
        w = rng.standard_normal((l, tau))
        p = spec.amplitude * u[:, :, None] * w[:, None, :]
        mask = np.array([m in assign[j] for j in range(l)], dtype=float)
        pats[m] = p * mask[:, None, None]
    return pats


def generate_synthetic(out_dir: str | Path, spec: SynthSpec | None = None, seed: int = 0) -> Path:
    """Write a seeded synthetic dataset; returns the manifest path."""
    spec = spec or SynthSpec()
    spec.validate()
    root = np.random.SeedSequence(seed)
    pattern_ss, *split_ss = root.spawn(1 + len(spec.counts))
    pats = synth_patterns(np.random.default_rng(pattern_ss), spec)
    splits = {}
    for (name, n), ss in zip(spec.counts.items(), split_ss):
        rng = np.random.default_rng(ss)
        y = sample_labels(rng, n, spec)
        bundles = []
        for i in range(n):
            mats = {}
            for m in MODALITY_ORDER:
                signal = np.tensordot(y[i], pats[m], axes=1)
                mats[m] = signal + spec.noise * rng.standard_normal(signal.shape)
            bundles.append(ModalityBundle(mats["visual"], mats["audio"], mats["text"], y[i]))
        splits[name] = bundles
    manifest = DatasetManifest(
        name=spec.name,
        alignment=spec.alignment,
        label_names=list(spec.label_names),
        modalities={m: {"dim": spec.dims[m], "length": spec.lengths[m]} for m in MODALITY_ORDER},
        splits={name: {"file": f"{name}.bin", "count": n} for name, n in spec.counts.items()},
        instances=sum(spec.counts.values()),
    )
    return write_dataset(out_dir, manifest, splits)


EMBED_MAGIC = b"MMEREMB1"


def write_matrices(out_dir: str | Path, names: Sequence[str], records: Sequence[Sequence[np.ndarray]],
                   labels: np.ndarray, label_names: Sequence[str], stem: str = "embeddings") -> Path:
    """Write per-sample named matrices (e.g. fused and refined representations).

    Same layout as a split file: 16-byte header (magic ``MMEREMB1``), then per
    record each matrix as little-endian float32 row-major, then the labels.
    A JSON sidecar lists matrix names and shapes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shapes = [tuple(int(s) for s in m.shape) for m in records[0]] if records else []
    with (out_dir / f"{stem}.bin").open("wb") as f:
        f.write(HEADER.pack(EMBED_MAGIC, len(records), 0))
        for mats, y in zip(records, labels):
            for mat, shape in zip(mats, shapes):
                if mat.shape != shape:
                    raise ShapeError(f"matrix shape {mat.shape} differs from first record {shape}")
                f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
            f.write(np.asarray(y, dtype="<f4").tobytes())
    meta = {
        "format": EMBED_MAGIC.decode(),
        "file": f"{stem}.bin",
        "count": len(records),
        "matrices": [{"name": n, "rows": s[0], "cols": s[1]} for n, s in zip(names, shapes)],
        "label_names": list(label_names),
    }
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_matrices(meta_path: str | Path) -> tuple[dict[str, np.ndarray], np.ndarray]:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text())
    data = (meta_path.parent / meta["file"]).read_bytes()
    magic, count, _ = HEADER.unpack(data[: HEADER.size])
    if magic != EMBED_MAGIC:
        raise MagicError(f"bad magic {magic!r}")
    specs = meta["matrices"]
    l = len(meta["label_names"])
    per = sum(s["rows"] * s["cols"] for s in specs) + l
    body = np.frombuffer(data[HEADER.size :], dtype="<f4")
    if body.size != per * count:
        raise TruncatedError(f"{meta['file']}: expected {per * count} values, found {body.size}")
    body = body.reshape(count, per)
    out, off = {}, 0
    for s in specs:
        size = s["rows"] * s["cols"]
        out[s["name"]] = body[:, off : off + size].reshape(count, s["rows"], s["cols"]).astype(np.float32)
        off += size
    return out, body[:, off:].astype(np.float32)
