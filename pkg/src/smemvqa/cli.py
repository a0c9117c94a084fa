"""Command line: generate, train, eval, viz, gradcheck, repro.

Exit codes: 0 success, 1 usage or input error, 2 a check did not pass.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import scenarios
from .features import load_precomputed
from .harness import (
    TrainConfig,
    evaluate,
    image_features,
    position_heuristic_baseline,
    run_manifest,
    train,
    write_manifest,
)
from .model import CheckpointError, load_checkpoint
from .synth import SpecError, SynthSpec, generate, load_dataset, serialize_dataset, spec_to_dict
from .text import Vocabulary
from .viz import export_attention_maps, export_correlation_csv

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}")
    return r, c


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}")


def _merge(base: dict, args, keys) -> dict:
    """Config file values, overridden by any flag given on the command line."""
    out = dict(base)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _feature_files(data_dir: Path) -> list:
    """Per-image precomputed features named by the manifest's ``features`` field."""
    seen, feats = set(), []
    for line in (data_dir / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "features" not in rec:
            raise UsageError(f"{data_dir}: manifest has no feature files")
        if rec["image"] not in seen:
            seen.add(rec["image"])
            feats.append(load_precomputed(data_dir / rec["features"]))
    return feats


def _features(ds, data_dir: Path, source: str, grid):
    if source == "precomputed":
        return image_features(ds, "precomputed", grid, _feature_files(data_dir))
    return image_features(ds, source, grid)


def _split_dirs(data: Path) -> tuple[Path, Path | None]:
    if (data / "train" / "manifest.jsonl").exists():
        test = data / "test"
        return data / "train", test if (test / "manifest.jsonl").exists() else None
    if (data / "manifest.jsonl").exists():
        return data, None
    raise UsageError(f"{data}: no manifest.jsonl (or train/manifest.jsonl) found")


# ---------------------------------------------------------------- commands

SPEC_KEYS = ("task", "seed", "n_train", "n_test", "image_size", "square", "num_distractors", "object_noun")
TRAIN_KEYS = ("model", "hops", "epochs", "seed", "lr", "batch_size", "momentum", "halve_every",
              "weight_decay", "dropout", "features", "N", "grid", "conv_channels")


def cmd_generate(args) -> int:
    cfg = _merge(_load_config(args.config).get("data", {}), args, SPEC_KEYS)
    spec = SynthSpec(**cfg)
    train_ds, test_ds = generate(spec)
    out = Path(args.out)
    serialize_dataset(train_ds, out / "train")
    serialize_dataset(test_ds, out / "test")
    counts = {"train_images": len(train_ds.images), "test_images": len(test_ds.images),
              "train_samples": len(train_ds.samples), "test_samples": len(test_ds.samples)}
    write_manifest(out / "run.json", run_manifest({"data": spec_to_dict(spec)}, spec.seed, counts, command="generate"))
    print(f"wrote {counts['train_images']} train and {counts['test_images']} test images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_merge(_load_config(args.config).get("train", {}), args, TRAIN_KEYS))
    tr_dir, te_dir = _split_dirs(Path(args.data))
    tr = load_dataset(tr_dir)
    ftr = _features(tr, tr_dir, cfg.features, cfg.grid)
    te = fte = None
    if te_dir is not None:
        te = load_dataset(te_dir)
        fte = _features(te, te_dir, cfg.features, cfg.grid)
    out = Path(args.out)
    if cfg.model == "position-heuristic":
        if te is None:
            raise UsageError("the position heuristic needs a test split to report on")
        rep = position_heuristic_baseline(tr, te)
        metrics = {"test_accuracy": rep.accuracy, "per_category": rep.per_category}
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "run.json", run_manifest(asdict(cfg), cfg.seed, metrics, command="train"))
        print(f"position heuristic test accuracy {rep.accuracy:.4f}")
        return EXIT_OK
    res = train(cfg, tr, te, out_dir=out, train_feats=ftr, val_feats=fte)
    metrics = {"history": res.history, "best_epoch": res.best_epoch}
    if te is not None:
        rep = evaluate(res.model, res.vocab, te, fte)
        metrics.update(test_accuracy=rep.accuracy, per_category=rep.per_category)
        print(f"final test accuracy {rep.accuracy:.4f}")
    write_manifest(out / "run.json", run_manifest(asdict(cfg), cfg.seed, metrics, command="train", T=res.T))
    print(f"checkpoints in {out}")
    return EXIT_OK


def _checkpoint_and_vocab(args):
    ckpt = Path(args.checkpoint)
    try:
        model = load_checkpoint(ckpt)
    except (OSError, CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}")
    vocab_path = Path(args.vocab) if args.vocab else ckpt.parent / "vocab.json"
    try:
        vocab = Vocabulary.from_json(vocab_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read vocabulary {vocab_path}: {e}")
    if model.config.get("vocab_hash") and model.config["vocab_hash"] != vocab.hash():
        raise UsageError(f"vocabulary {vocab_path} does not match the checkpoint")
    return model, vocab


def _model_features(model, ds, data_dir: Path, source: str | None):
    grid = tuple(model.config.get("grid") or (4, 4))
    if source is None:
        source = "conv" if model.config.get("conv_channels") else "grid"
    return _features(ds, data_dir, source, grid)


def cmd_eval(args) -> int:
    model, vocab = _checkpoint_and_vocab(args)
    data_dir = Path(args.data)
    ds = load_dataset(data_dir)
    rep = evaluate(model, vocab, ds, _model_features(model, ds, data_dir, args.features))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval.json"
    metrics = {"accuracy": rep.accuracy, "per_category": rep.per_category,
               "category_counts": rep.category_counts, "consensus": rep.consensus}
    manifest = run_manifest({"checkpoint": str(args.checkpoint), "data": str(data_dir)}, None, metrics,
                            command="eval", records=rep.records)
    write_manifest(out, manifest)
    print(f"accuracy {rep.accuracy:.4f}")
    for cat, acc in rep.per_category.items():
        print(f"  {cat:<10} {acc:.4f} ({rep.category_counts[cat]})")
    return EXIT_OK


def cmd_viz(args) -> int:
    model, vocab = _checkpoint_and_vocab(args)
    data_dir = Path(args.data)
    ds = load_dataset(data_dir)
    feats = _model_features(model, ds, data_dir, args.features)
    try:
        picks = [int(v) for v in args.samples.split(",")]
    except ValueError:
        raise UsageError(f"--samples takes comma-separated indices, got {args.samples!r}")
    if any(not 0 <= i < len(ds.samples) for i in picks):
        raise UsageError(f"sample index out of range 0..{len(ds.samples) - 1}")
    out = Path(args.out)
    written = export_attention_maps(model, vocab, ds.images, [(i, ds.samples[i]) for i in picks], feats, out)
    for i in picks:
        written.append(export_correlation_csv(model, vocab, ds.samples[i], feats, out / f"sample_{i:05d}_corr.csv"))
    write_manifest(out / "run.json", run_manifest({"checkpoint": str(args.checkpoint), "data": str(data_dir),
                                                   "samples": picks}, None, {"files": len(written)}, command="viz"))
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = scenarios.gradcheck(seed=args.seed)
    print(f"max relative error {res.metrics['max_rel_error']:.3e}")
    if args.manifest:
        write_manifest(args.manifest, run_manifest({"h": 1e-5}, args.seed, res.metrics, command="gradcheck"))
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_repro(args) -> int:
    names = scenarios.CRITERIA if args.scenario == "all" else [args.scenario]
    if any(n not in scenarios.SCENARIOS for n in names):
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from all, {', '.join(scenarios.SCENARIOS)}")
    cache: dict = {}
    results = []
    for n in names:
        r = scenarios.run(n, cache)
        print(r.line(), flush=True)
        results.append(r)
    if args.manifest:
        metrics = {r.name: {"passed": r.passed, "seconds": round(r.seconds, 2), **r.metrics} for r in results}
        write_manifest(args.manifest, run_manifest({"scenarios": names}, scenarios.TRAIN_SEED, metrics, command="repro"))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smemvqa", description="Spatial memory network VQA experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (train/ and test/)")
    g.add_argument("--task", choices=["abs", "rel", "absolute", "relative"])
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--square", type=int)
    g.add_argument("--distractors", dest="num_distractors", type=int)
    g.add_argument("--noun", dest="object_noun")
    g.add_argument("--config", help="JSON file; its \"data\" block gives defaults")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="dataset dir (with train/ and optional test/)")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file; its \"train\" block gives defaults")
    t.add_argument("--model", choices=["smem-1hop", "smem-2hop", "smem-Hhop", "ibowimg", "position-heuristic"])
    t.add_argument("--hops", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--momentum", type=float)
    t.add_argument("--halve-every", dest="halve_every", type=int)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--features", choices=["grid", "conv", "precomputed"])
    t.add_argument("--N", type=int)
    t.add_argument("--grid", type=_grid)
    t.add_argument("--conv-channels", dest="conv_channels", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("viz", cmd_viz, "export attention maps and correlation CSVs")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
        e.add_argument("--data", required=True, help="dataset split dir")
        e.add_argument("--features", choices=["grid", "conv", "precomputed"])
        if name == "eval":
            e.add_argument("--out", help="report path (default: eval.json next to the checkpoint)")
        else:
            e.add_argument("--samples", default="0", help="comma-separated sample indices")
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference check of a tiny two-hop model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--manifest")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("repro", help="run an acceptance scenario end to end")
    r.add_argument("scenario", help="scenario name, or 'all'")
    r.add_argument("--manifest")
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, SpecError, ValueError, OSError) as e:
        print(f"smemvqa {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
