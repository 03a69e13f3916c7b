"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or config contract violation,
3 numerical failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import dataio, gradcheck, trainer
from .config import ConfigContractError, ModelConfig, load_config
from .dataio import DataError, SynthSpec
from .labelhead import export_correlations
from .unimodal import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tailor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _triple(text: str) -> dict[str, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers (visual,audio,text)")
    return dict(zip(dataio.MODALITY_ORDER, parts))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tailor", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a seeded synthetic dataset")
    g.add_argument("--dims", type=_triple, default=None, help="feature dims, e.g. 8,8,12")
    g.add_argument("--lengths", type=_triple, default=None, help="sequence lengths, e.g. 10,10,10")
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-valid", type=int, default=50)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--marginal", type=float, default=0.3)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--manifest", type=Path, required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--config", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--subset-accuracy", action="store_true")

    a = sub.add_parser("ablate", help="run the ablation grid and write ablation.csv")
    a.add_argument("--config", type=Path, required=True)
    a.add_argument("--manifest", type=Path, required=True)
    a.add_argument("--seeds", default="0", help="comma-separated seeds")

    c = sub.add_parser("export-correlations", help="write per-head label correlation CSVs")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--manifest", type=Path, required=True)
    c.add_argument("--raw", action="store_true", help="export raw scores instead of row-softmaxed")

    m = sub.add_parser("export-embeddings", help="write fused and refined representations of a probe batch")
    m.add_argument("--checkpoint", type=Path, required=True)
    m.add_argument("--manifest", type=Path, required=True)
    m.add_argument("--split", default="valid")
    m.add_argument("--count", type=int, default=64)

    sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    return p


def _config(args, path: Path) -> ModelConfig:
    cfg = load_config(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.precision is not None:
        changes["precision"] = args.precision
    return cfg.replace(**changes) if changes else cfg


def _load_checkpoint(args, path: Path) -> trainer.Checkpoint:
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return trainer.Checkpoint.load(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_gen_synth(args) -> int:
    spec = SynthSpec(counts={"train": args.n_train, "valid": args.n_valid, "test": args.n_test},
                     noise=args.noise, marginal=args.marginal)
    if args.dims:
        spec.dims = args.dims
    if args.lengths:
        spec.lengths = args.lengths
    try:
        path = dataio.generate_synthetic(args.out_dir, spec, seed=args.seed or 0)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, args.config)
    ds = dataio.load(args.manifest)
    result = trainer.train(ds, cfg, args.out_dir)
    print(json.dumps({"best_epoch": result.best.epoch, "best_val_microf1": result.best_microf1,
                      "epochs_run": len(result.history)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, args.config)
    ds = dataio.load(args.manifest)
    ckpt = _load_checkpoint(args, args.checkpoint)
    from .model import build_model

    model = build_model(cfg, trainer.input_shapes(ds))
    try:
        trainer.load_params(model, ckpt)
    except (KeyError, RuntimeError) as exc:
        raise ConfigContractError(f"checkpoint does not match config: {exc}") from None
    data = trainer.split_tensors(ds, args.split, next(model.parameters()).dtype)
    from .metrics import evaluate

    probs = trainer.predict(model, data)
    report = evaluate(probs, data["labels"].numpy(), cfg.threshold, args.subset_accuracy)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / f"eval_{args.split}.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, args.config)
    ds = dataio.load(args.manifest)
    seeds = [int(s) for s in args.seeds.split(",")]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = trainer.run_ablation(ds, cfg, seeds, out_path=args.out_dir / "ablation.csv")
    for row in rows:
        print(f"{row['variant']:<16} val_microf1={row['val_microf1']:.4f}")
    return EXIT_OK


def cmd_export_correlations(args) -> int:
    ckpt = _load_checkpoint(args, args.checkpoint)
    ds = dataio.load(args.manifest)
    model = ckpt.build()
    if model.config.identical_head or model.config.disable_label_correlation:
        raise ConfigContractError("checkpoint has no label self-attention to export")
    with torch.no_grad():
        _, r = model.label_attn()
    paths = export_correlations(r, ds.manifest.label_names, args.out_dir, model.label_attn.head_dim, args.raw)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ckpt = _load_checkpoint(args, args.checkpoint)
    ds = dataio.load(args.manifest)
    model = ckpt.build()
    model.eval()
    data = trainer.split_tensors(ds, args.split, next(model.parameters()).dtype)
    data = {k: v[: args.count] for k, v in data.items()}
    with torch.no_grad():
        out = model(data["visual"], data["audio"], data["text"])
    names, mats = ["M"], [out.fused]
    if out.reps is not None:
        for kind, reps in (("C", out.reps.common), ("P", out.reps.private)):
            for m in ("v", "a", "t"):
                names.append(f"{kind}_{m}")
                mats.append(reps[m])
    records = [[t[i].numpy() for t in mats] for i in range(len(data["labels"]))]
    path = dataio.write_matrices(args.out_dir, names, records, data["labels"].numpy(), ds.manifest.label_names)
    print(path)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_suite(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<14} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-correlations": cmd_export_correlations,
    "export-embeddings": cmd_export_embeddings,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"tailor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigContractError, ConfigError, FileNotFoundError) as exc:
        print(f"tailor: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.NumericalError as exc:
        print(f"tailor: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
