"""Objective, Adam, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from . import amr
from . import diffcore as dc
from .config import ModelConfig, dump_config, parse_config_text
from .dataio import MODALITY_ORDER, Dataset
from .metrics import EvalReport, evaluate
from .model import InputShapes, TailorModel, build_model, total_loss

log = logging.getLogger(__name__)

__all__ = [
    "total_loss", "Adam", "lr_at", "Checkpoint", "train", "train_epochs", "NumericalError", "TrainResult",
]

LOSS_KEYS = ("L_ml", "L_C", "L_P", "L_diff", "L_cml", "L_All")
LOG_COLUMNS = ("epoch", *LOSS_KEYS, "val_acc", "val_p", "val_r", "val_microf1")
PROBE_COLUMNS = ("epoch", "rep_kind", "modality", "p_visual", "p_audio", "p_text")


class NumericalError(RuntimeError):
    def __init__(self, message: str, last_good: "Checkpoint | None" = None):
        super().__init__(message)
        self.last_good = last_good


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warm-up from 0 to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warm = warmup_fraction * total_steps
    if warm > 0 and step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warm))


class Adam:
    """Adam with bias correction; moment state is keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    @torch.no_grad()
    def step(self, named_params, lr: float, grads: dict[str, torch.Tensor] | None = None) -> None:
        named_params = list(named_params)
        resolved = {}
        for name, p in named_params:
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            resolved[name] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in named_params:
            g = resolved[name]
            m = self.m.setdefault(name, torch.zeros_like(p))
            v = self.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adam_step(params, grads, state: Adam, lr: float):
    state.step(params, lr, grads)
    return params, state


# --- named random streams -------------------------------------------------

def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode())])


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(stream_seed(seed, name).generate_state(1, np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
    return g


# --- checkpoint container --------------------------------------------------

CKPT_MAGIC = b"TLRCKPT1"
_NP_DTYPES = {"f64": "<f8", "f32": "<f4", "u8": "u1"}


@dataclass
class Checkpoint:
    """Named parameter blocks, Adam moments, progress counters and RNG state."""

    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    step: int = 0
    config_text: str = ""
    shapes: dict = field(default_factory=dict)
    shuffle_state: dict = field(default_factory=dict)
    dropout_state: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    best_microf1: float = -1.0

    def blocks(self):
        for name, arr in self.params.items():
            yield f"param/{name}", arr
        for name, arr in self.adam_m.items():
            yield f"adam_m/{name}", arr
        for name, arr in self.adam_v.items():
            yield f"adam_v/{name}", arr
        yield "rng/dropout", self.dropout_state

    def to_bytes(self) -> bytes:
        meta = {
            "adam_t": self.adam_t,
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config_text,
            "shapes": self.shapes,
            "shuffle_state": self.shuffle_state,
            "best_microf1": self.best_microf1,
        }
        lines = ["version 1", "meta " + json.dumps(meta, sort_keys=True, separators=(",", ":"))]
        payload = io.BytesIO()
        for name, arr in self.blocks():
            code = {np.dtype("float64"): "f64", np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}[arr.dtype]
            raw = np.ascontiguousarray(arr, dtype=_NP_DTYPES[code]).tobytes()
            shape = "x".join(str(s) for s in arr.shape) or "-"
            lines.append(f"block {name} {code} {shape} {payload.tell()} {len(raw)}")
            payload.write(raw)
        lines.append("end")
        header = ("\n".join(lines) + "\n").encode()
        return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + payload.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = data[16 : 16 + hlen].decode().splitlines()
        body = data[16 + hlen :]
        if header[0] != "version 1":
            raise ValueError(f"unsupported checkpoint version line {header[0]!r}")
        meta = json.loads(header[1][len("meta ") :])
        ck = cls(params={}, adam_t=meta["adam_t"], epoch=meta["epoch"], step=meta["step"],
                 config_text=meta["config"], shapes=meta["shapes"], shuffle_state=meta["shuffle_state"],
                 best_microf1=meta["best_microf1"])
        for line in header[2:]:
            if line == "end":
                break
            _, name, code, shape, off, nbytes = line.split()
            dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            off, nbytes = int(off), int(nbytes)
            if off + nbytes > len(body):
                raise ValueError(f"checkpoint block {name} is truncated")
            arr = np.frombuffer(body[off : off + nbytes], dtype=_NP_DTYPES[code]).reshape(dims).copy()
            arr = arr.astype(arr.dtype.newbyteorder("="))
            kind, _, key = name.partition("/")
            if kind == "param":
                ck.params[key] = arr
            elif kind == "adam_m":
                ck.adam_m[key] = arr
            elif kind == "adam_v":
                ck.adam_v[key] = arr
            elif name == "rng/dropout":
                ck.dropout_state = arr
        return ck

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def config(self) -> ModelConfig:
        return parse_config_text(self.config_text)

    def input_shapes(self) -> InputShapes:
        return InputShapes(dict(self.shapes["dims"]), dict(self.shapes["lengths"]), int(self.shapes["num_labels"]))

    def build(self) -> TailorModel:
        model = build_model(self.config, self.input_shapes())
        load_params(model, self)
        return model


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def make_checkpoint(model: TailorModel, opt: Adam | None = None, epoch: int = 0, step: int = 0,
                    shuffle_rng: np.random.Generator | None = None,
                    dropout_gen: torch.Generator | None = None, best_microf1: float = -1.0) -> Checkpoint:
    s = model.shapes
    return Checkpoint(
        params={n: _np(p) for n, p in model.named_parameters()},
        adam_m={n: _np(t) for n, t in (opt.m.items() if opt else ())},
        adam_v={n: _np(t) for n, t in (opt.v.items() if opt else ())},
        adam_t=opt.t if opt else 0,
        epoch=epoch,
        step=step,
        config_text=dump_config(model.config),
        shapes={"dims": s.dims, "lengths": s.lengths, "num_labels": s.num_labels},
        shuffle_state=shuffle_rng.bit_generator.state if shuffle_rng is not None else {},
        dropout_state=dropout_gen.get_state().numpy().copy() if dropout_gen is not None else np.zeros(0, np.uint8),
        best_microf1=best_microf1,
    )


@torch.no_grad()
def load_params(model: TailorModel, ckpt: Checkpoint) -> None:
    own = dict(model.named_parameters())
    missing = set(own) - set(ckpt.params)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in own.items():
        p.copy_(torch.from_numpy(ckpt.params[name]).to(p.dtype))


# --- data helpers ----------------------------------------------------------

def split_tensors(dataset: Dataset, split: str, dtype: torch.dtype) -> dict[str, torch.Tensor]:
    arrs = dataset.arrays(split)
    return {k: torch.from_numpy(v).to(dtype) for k, v in arrs.items()}


def input_shapes(dataset: Dataset) -> InputShapes:
    man = dataset.manifest
    return InputShapes(man.dims(), man.lengths(), man.num_labels)


def _take(data: dict[str, torch.Tensor], idx) -> dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in data.items()}


@torch.no_grad()
def predict(model: TailorModel, data: dict[str, torch.Tensor], batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    n = data["labels"].shape[0]
    out = []
    for start in range(0, n, batch_size):
        b = _take(data, slice(start, start + batch_size))
        out.append(model(b["visual"], b["audio"], b["text"]).probs)
    model.train(was)
    if not out:
        return np.zeros((0, model.shapes.num_labels))
    return torch.cat(out).cpu().numpy()


def evaluate_split(model: TailorModel, data: dict[str, torch.Tensor], threshold: float = 0.5) -> EvalReport:
    probs = predict(model, data)
    return evaluate(probs, data["labels"].cpu().numpy(), threshold)


@torch.no_grad()
def discriminator_probe(model: TailorModel, data: dict[str, torch.Tensor]) -> dict[str, dict[str, np.ndarray]]:
    """Per-sample, time-averaged discriminator probabilities ``(n, 3)`` for each rep kind and modality."""
    if model.config.disable_amr:
        return {}
    was = model.training
    model.eval()
    out = model(data["visual"], data["audio"], data["text"])
    model.train(was)
    disc = model.amr.discriminator
    return {
        kind: {m: disc(reps[m]).mean(dim=1).cpu().numpy() for m in amr.KEYS}
        for kind, reps in (("common", out.reps.common), ("private", out.reps.private))
    }


@torch.no_grad()
def orthogonality(model: TailorModel, data: dict[str, torch.Tensor]) -> float:
    """Sum over modalities and samples of ||C^T P||_F^2 on a frozen batch."""
    was = model.training
    model.eval()
    out = model(data["visual"], data["audio"], data["text"])
    model.train(was)
    return float(amr.loss_diff(out.reps.common, out.reps.private, "positive"))


# --- training loop ---------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val: EvalReport
    train: EvalReport | None = None
    probe: dict = field(default_factory=dict)
    improved: bool = False


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochRecord]
    model: TailorModel
    stopped_early: bool = False

    @property
    def best_microf1(self) -> float:
        return self.best.best_microf1


def _probe_rows(epoch: int, probe: dict) -> list[list]:
    rows = []
    for kind in ("common", "private"):
        for m, name in zip(amr.KEYS, MODALITY_ORDER):
            p = probe[kind][m].mean(axis=0)
            rows.append([epoch, kind, name, *(repr(float(x)) for x in p)])
    return rows


def train_epochs(
    dataset: Dataset,
    config: ModelConfig,
    eval_train: bool = False,
    resume: Checkpoint | None = None,
) -> Iterator[tuple[EpochRecord, TailorModel, Adam, np.random.Generator, torch.Generator, int]]:
    """Run training one epoch at a time, yielding the record and live state after each epoch."""
    dtype = dc.dtype_for(config.precision)
    shapes = input_shapes(dataset)
    train_data = split_tensors(dataset, "train", dtype)
    val_data = split_tensors(dataset, "valid", dtype)
    probe_data = _take(val_data, slice(0, config.probe_size))
    n = train_data["labels"].shape[0]
    if n == 0:
        raise ValueError("training split is empty")

    model = build_model(config, shapes, seed=int(stream_seed(config.seed, "init").generate_state(1)[0]))
    dropout_gen = torch_generator(config.seed, "dropout")
    model.set_dropout_generator(dropout_gen)
    shuffle_rng = np.random.default_rng(stream_seed(config.seed, "shuffle"))
    opt = Adam()
    params = list(model.named_parameters())
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step, start_epoch = 0, 1
    if resume is not None:
        load_params(model, resume)
        opt.t = resume.adam_t
        opt.m = {k: torch.from_numpy(v).to(dtype) for k, v in resume.adam_m.items()}
        opt.v = {k: torch.from_numpy(v).to(dtype) for k, v in resume.adam_v.items()}
        if resume.shuffle_state:
            shuffle_rng.bit_generator.state = resume.shuffle_state
        if resume.dropout_state.size:
            dropout_gen.set_state(torch.from_numpy(resume.dropout_state.copy()))
        step, start_epoch = resume.step, resume.epoch + 1

    model.train()
    for epoch in range(start_epoch, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        batches = 0
        for start in range(0, n, config.batch_size):
            b = _take(train_data, torch.from_numpy(order[start : start + config.batch_size]))
            try:
                out = model(b["visual"], b["audio"], b["text"], b["labels"])
            except dc.DomainError as exc:
                raise NumericalError(f"non-finite activations at epoch {epoch}, step {step}: {exc}") from None
            loss = out.losses["L_All"]
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            for p in model.parameters():
                p.grad = None
            dc.backward(loss)
            opt.step(params, lr_at(step, total_steps, config.base_lr, config.warmup_fraction))
            step += 1
            batches += 1
            for k in LOSS_KEYS:
                sums[k] += float(out.losses[k].detach())
        record = EpochRecord(
            epoch=epoch,
            losses={k: v / batches for k, v in sums.items()},
            val=evaluate_split(model, val_data, config.threshold),
            train=evaluate_split(model, train_data, config.threshold) if eval_train else None,
            probe=discriminator_probe(model, probe_data) if len(probe_data["labels"]) else {},
        )
        yield record, model, opt, shuffle_rng, dropout_gen, step


def train(
    dataset: Dataset,
    config: ModelConfig,
    out_dir: str | Path | None = None,
    eval_train: bool = False,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    stop_when: Callable[[EpochRecord], bool] | None = None,
) -> TrainResult:
    """Train with model selection on validation micro-F1 and patience-based early stopping.

    When ``out_dir`` is given, ``train_log.csv``, ``amr_probe.csv``,
    ``best.ckpt`` and ``last.ckpt`` are written there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    last: Checkpoint | None = None
    best_f1, stale, stopped = -1.0, 0, False
    log_rows, probe_rows = [], []
    model = None
    try:
        for record, model, opt, rng, gen, step in train_epochs(dataset, config, eval_train):
            history.append(record)
            last = make_checkpoint(model, opt, record.epoch, step, rng, gen, best_f1)
            if record.val.microf1 > best_f1:
                best_f1, stale = record.val.microf1, 0
                record.improved = True
                best = copy.deepcopy(last)
                best.best_microf1 = best_f1
            else:
                stale += 1
            last.best_microf1 = best_f1
            v = record.val
            log_rows.append([record.epoch, *(repr(record.losses[k]) for k in LOSS_KEYS),
                             repr(v.acc), repr(v.p), repr(v.r), repr(v.microf1)])
            if record.probe:
                probe_rows.extend(_probe_rows(record.epoch, record.probe))
            log.info("epoch %d L_All=%.4f val_microf1=%.4f", record.epoch, record.losses["L_All"], v.microf1)
            if on_epoch is not None:
                on_epoch(record)
            if stop_when is not None and stop_when(record):
                stopped = True
                break
            if stale >= config.patience:
                stopped = True
                break
    except NumericalError as exc:
        exc.last_good = last
        if out is not None and last is not None:
            last.save(out / "last_good.ckpt")
        raise
    finally:
        if out is not None:
            _write_csv(out / "train_log.csv", LOG_COLUMNS, log_rows)
            _write_csv(out / "amr_probe.csv", PROBE_COLUMNS, probe_rows)
    if out is not None:
        best.save(out / "best.ckpt")
        last.save(out / "last.ckpt")
    return TrainResult(best, last, history, model, stopped)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- ablation grid ---------------------------------------------------------

ABLATIONS: tuple[tuple[str, int, dict], ...] = (
    ("w/o AMR", 1, {"disable_amr": True}),
    ("psi=[v,t,a,c]", 6, {"fusion_order": ("v", "t", "a", "c")}),
    ("psi=[a,t,v,c]", 7, {"fusion_order": ("a", "t", "v", "c")}),
    ("w/o MTE", 8, {"disable_token_embeddings": True}),
    ("w/ identical", 9, {"identical_head": True}),
    ("w/ LE", 10, {"disable_label_correlation": True, "disable_label_modal_attention": True}),
    ("w/ LE, LC", 11, {"disable_label_modal_attention": True}),
    ("TAILOR", 12, {}),
)
ABLATION_COLUMNS = ("variant", "variant_id", "seeds", "val_acc", "val_p", "val_r", "val_microf1",
                    "test_acc", "test_p", "test_r", "test_microf1")


def run_ablation(dataset: Dataset, config: ModelConfig, seeds=(0,), variants=ABLATIONS,
                 out_path: str | Path | None = None) -> list[dict]:
    """Train every variant for every seed; report per-variant medians over seeds.

    Validation metrics come from the best epoch, test metrics from the best checkpoint.
    """
    dtype = dc.dtype_for(config.precision)
    test_data = split_tensors(dataset, "test", dtype) if "test" in dataset.manifest.splits else None
    rows = []
    for name, variant_id, flags in variants:
        vals, tests = [], []
        for seed in seeds:
            cfg = config.replace(seed=seed, **flags)
            result = train(dataset, cfg)
            best = next(r for r in reversed(result.history) if r.improved)
            vals.append(best.val)
            if test_data is not None and len(test_data["labels"]):
                tests.append(evaluate_split(result.best.build(), test_data, cfg.threshold))
        row = {"variant": name, "variant_id": variant_id, "seeds": " ".join(str(s) for s in seeds)}
        for prefix, reps in (("val", vals), ("test", tests)):
            for key in ("acc", "p", "r", "microf1"):
                row[f"{prefix}_{key}"] = float(np.median([getattr(r, key) for r in reps])) if reps else float("nan")
        rows.append(row)
    if out_path is not None:
        _write_csv(Path(out_path), ABLATION_COLUMNS, [[row[c] for c in ABLATION_COLUMNS] for row in rows])
    return rows
