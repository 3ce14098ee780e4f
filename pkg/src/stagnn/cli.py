"""Command-line entry point: ``python -m stagnn <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from .datasets import (
    LAND_COVER, TRANSITIONS, DatasetError, SlicParams, SyntheticSpec, cached_rag, default_cache_dir, generate_synthetic,
    load_mnist, load_temporal_dir, mnist_to_graphs, records_to_supergraphs,
)
from .graph import GraphBatch, GraphFormatError, build_supergraph, deserialize_graph, serialize_graph
from .nn import GraphClassifier, ModelConfig, load_checkpoint
from .segmentation import CorruptImage, boundary_overlay, load_image, save_image, slic
from .training import (
    DEFAULT_VOTING_TABLE, Ensemble, NumericError, TrainConfig, ensemble_vote, evaluate, load_voting_table,
    split_dataset, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
BENCH_MODELS = ("stag-gsp", "stag-gcp", "sagnn-e")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _slic_params(args) -> SlicParams:
    return SlicParams(args.n_segments, args.compactness, args.max_iter)


# ---------------------------------------------------------------- data helpers


def _is_mnist_dir(path: Path) -> bool:
    return path.is_dir() and (path / MNIST_FILES["train"][0]).exists()


def _is_temporal_dir(path: Path) -> bool:
    return path.is_dir() and (path / "labels.csv").exists()


def _load_graphs(args):
    """Graphs, labels, ids and class names for ``--data``."""
    data = Path(args.data)
    params = _slic_params(args)
    if _is_mnist_dir(data):
        images, labels = (data / f for f in MNIST_FILES[args.mnist_split])
        records = load_mnist(images, labels, limit=args.limit)
        graphs = mnist_to_graphs(records, params, workers=args.threads or 1)
        return graphs, np.array([r.label for r in records]), [r.id for r in records], [str(d) for d in range(10)], None
    if _is_temporal_dir(data):
        records = load_temporal_dir(data)
        if args.limit is not None:
            records = records[:args.limit]
        graphs = records_to_supergraphs(records, params, workers=args.threads or 1)
        manifest = data / "manifest.json"
        classes = json.loads(manifest.read_text())["classes"] if manifest.exists() else None
        if classes is None:
            classes = sorted({r for r in _label_names(data)})
        frame_labels = [r.frame_labels for r in records]
        return graphs, np.array([r.label for r in records]), [r.id for r in records], classes, frame_labels
    raise DatasetError(f"{data}: neither an MNIST IDX directory nor a temporal dataset (labels.csv)")


def _label_names(root: Path):
    with open(root / "labels.csv", newline="") as fh:
        return [row["label"] for row in csv.DictReader(fh)]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_segment(args) -> int:
    img = load_image(args.input)
    lm = slic(img, args.n_segments, args.compactness, args.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "labels.pgm").write_text(lm.to_pgm())
    meta = {
        "input": str(args.input),
        "height": img.height,
        "width": img.width,
        "n_segments": args.n_segments,
        "compactness": args.compactness,
        "max_iter": args.max_iter,
        "n_superpixels": lm.n_segments,
    }
    if args.overlay:
        save_image(boundary_overlay(img, lm), out / "overlay.png")
        meta["overlay"] = "overlay.png"
    _write_json(out / "segment.json", meta)
    print(f"{lm.n_segments} superpixels -> {out}")
    return EXIT_OK


def _frame_paths(folder: Path, years) -> list[Path]:
    if years:
        paths = [folder / f"{y}.png" for y in years]
        missing = [p.name for p in paths if not p.exists()]
        if missing:
            raise DatasetError(f"{folder}: missing frames {', '.join(missing)}")
        return paths
    paths = sorted(folder.glob("*.png"))
    if not paths:
        raise DatasetError(f"{folder}: no PNG frames")
    return paths


def cmd_build_graph(args) -> int:
    src = Path(args.input)
    params = _slic_params(args)
    cache = default_cache_dir()
    out = Path(args.out)
    if src.is_file():
        g = cached_rag(load_image(src), params, cache)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(serialize_graph(g))
        written = 1
    elif _is_temporal_dir(src):
        records = load_temporal_dir(src, years=args.years)
        out.mkdir(parents=True, exist_ok=True)
        for rec, g in zip(records, records_to_supergraphs(records, params, cache, workers=args.threads or 1)):
            (out / f"{rec.id}.json").write_bytes(serialize_graph(g))
        written = len(records)
    elif src.is_dir():
        rags = [cached_rag(load_image(p), params, cache) for p in _frame_paths(src, args.years)]
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_bytes(serialize_graph(build_supergraph(rags)))
        written = 1
    else:
        raise DatasetError(f"{src}: no such file or directory")
    # Re-read what was written so a malformed file fails here, not downstream.
    targets = [out] if out.is_file() else sorted(out.glob("*.json"))
    for p in targets:
        deserialize_graph(p.read_bytes())
    print(f"wrote {written} graph(s) -> {out}")
    return EXIT_OK


def _model_config(args, in_dim: int, n_classes: int, n_frames: int) -> ModelConfig:
    return ModelConfig(
        in_dim=in_dim, layer_kind=args.layer, hidden_dims=args.hidden_dims, heads=args.heads,
        readout=args.readout, mlp_dims=args.mlp_dims, n_classes=n_classes, n_frames=n_frames,
        aggregator=args.aggregator,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr0=args.lr, plateau_patience=args.plateau_patience, lr_factor=args.lr_factor,
        early_stop_patience=args.patience, batch_size=args.batch_size, seed=args.seed,
        max_epochs=args.max_epochs, deterministic=args.deterministic, threads=args.threads,
    )


def cmd_train(args) -> int:
    graphs, labels, _, classes, _ = _load_graphs(args)
    n_frames = getattr(graphs[0], "n_frames", 1)
    cfg = _model_config(args, graphs[0].feature_dim, len(classes), n_frames)
    tcfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = train(cfg, graphs, labels, tcfg, metrics_path=out / "metrics.csv",
                checkpoint_path=out / "checkpoint.json", log=log)
    # Keep the provenance needed by eval/predict next to the weights.
    ckpt = json.loads((out / "checkpoint.json").read_text())
    ckpt["extra"].update({
        "classes": list(classes), "seed": args.seed, "split": list(tcfg.split),
        "slic": {"n_segments": args.n_segments, "compactness": args.compactness, "max_iter": args.max_iter},
    })
    (out / "checkpoint.json").write_text(json.dumps(ckpt))
    summary = {
        "epochs": len(res.history),
        "best_epoch": res.best_epoch,
        "stopped_early": res.stopped_early,
        "test_accuracy": None if res.test is None else res.test.accuracy,
        "n_params": res.model.n_params(),
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _select_split(args, extra: dict, n: int, labels):
    if args.split == "all":
        return np.arange(n)
    seed = extra.get("seed", args.seed)
    fractions = tuple(extra.get("split", (0.70, 0.15, 0.15)))
    parts = split_dataset(np.arange(n), seed, labels, fractions)
    return np.asarray(parts[("train", "val", "test").index(args.split)], dtype=np.int64)


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    graphs, labels, _, _, _ = _load_graphs(args)
    idx = _select_split(args, extra, len(graphs), labels)
    res = evaluate(model, [graphs[i] for i in idx], labels[idx])
    report = {"split": args.split, "n": int(len(idx)), "accuracy": res.accuracy,
              "loss": res.loss, "confusion": res.confusion.tolist()}
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps({k: report[k] for k in ("split", "n", "accuracy", "loss")}))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    graphs, _, ids, classes, _ = _load_graphs(args)
    classes = extra.get("classes", classes)
    probs = np.vstack([model.predict_proba(GraphBatch(graphs[i:i + 256], dtype=model.dtype))
                       for i in range(0, len(graphs), 256)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "label", "confidence"])
        for sid, p in zip(ids, probs):
            k = int(p.argmax())
            w.writerow([sid, k, classes[k] if k < len(classes) else k, f"{p[k]:.6f}"])
    print(f"{len(ids)} predictions -> {out}")
    return EXIT_OK


def _time_forward(fn, n_passes: int, warmup: int) -> tuple[list[float], int]:
    for _ in range(warmup):
        fn()
    with ad.count_ops() as box:
        fn()
    ops = box[0]
    times = []
    for _ in range(n_passes):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times, ops


def bench_forward_pass(sgs, models=("stag-gsp", "sagnn-e"), n_passes: int = 100, warmup: int = 10, seed: int = 0,
                       hidden_dims=(128, 128), mlp_dims=(64,), n_classes: int = 5, table=None) -> list[dict]:
    """Forward-pass time and op count of each model on the same supergraphs."""
    if not models:
        raise UsageError("no models requested")
    unknown = [m for m in models if m not in BENCH_MODELS]
    if unknown:
        raise UsageError(f"unknown models {unknown}; choose from {', '.join(BENCH_MODELS)}")
    T = sgs[0].n_frames
    in_dim = sgs[0].feature_dim
    report = []
    for name in models:
        if name == "sagnn-e":
            frame_cfg = ModelConfig(in_dim=in_dim - 1, hidden_dims=hidden_dims, mlp_dims=mlp_dims,
                                    n_classes=len(LAND_COVER))
            ens = Ensemble([GraphClassifier(frame_cfg, seed=seed + t) for t in range(T)], list(LAND_COVER),
                           list(TRANSITIONS), dict(table or DEFAULT_VOTING_TABLE))
            frames = [GraphBatch([sg.frame(t) for sg in sgs], dtype=np.float32) for t in range(T)]

            def fn(ens=ens, frames=frames):
                fp = np.stack([m.predict(b) for m, b in zip(ens.models, frames)], axis=1)
                return [ensemble_vote([ens.frame_classes[c] for c in row], ens.table) for row in fp]
        else:
            readout = name.split("-")[1]
            cfg = ModelConfig(in_dim=in_dim, hidden_dims=hidden_dims, mlp_dims=mlp_dims, n_classes=n_classes,
                              readout=readout, n_frames=T)
            model = GraphClassifier(cfg, seed=seed)
            batch = GraphBatch(list(sgs), dtype=np.float32)

            def fn(model=model, batch=batch):
                return model.predict(batch)
        times, ops = _time_forward(fn, n_passes, warmup)
        report.append({
            "model": name,
            "median_ms": statistics.median(times),
            "mean_ms": statistics.fmean(times),
            "total_ms": float(np.sum(times)),
            "op_count": ops,
            "n_passes": n_passes,
        })
    return report


def cmd_bench_fpt(args) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    if not models:
        raise UsageError("--models is empty")
    data = Path(args.data)
    if _is_temporal_dir(data):
        records = load_temporal_dir(data)[:args.n_samples]
    else:
        raise DatasetError(f"{data}: bench-fpt needs a temporal dataset directory")
    sgs = records_to_supergraphs(records, _slic_params(args))
    table = load_voting_table(args.voting_table) if args.voting_table else None
    report = bench_forward_pass(sgs, models, args.n_passes, args.warmup, args.seed, args.hidden_dims,
                                args.mlp_dims, table=table)
    for row in report:
        print(f"{row['model']:10s} median {row['median_ms']:.3f} ms  mean {row['mean_ms']:.3f} ms  "
              f"ops {row['op_count']}")
    if args.out:
        _write_json(Path(args.out), {"n_samples": len(sgs), "results": report})
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(image_size=args.image_size, n_per_class=args.n_per_class, noise=args.noise, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"{len(manifest['records'])} locations -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_slic(p):
    p.add_argument("--n-segments", type=int, default=75, help="target superpixel count (default 75)")
    p.add_argument("--compactness", type=float, default=10.0, help="SLIC compactness m (default 10)")
    p.add_argument("--max-iter", type=int, default=10, help="SLIC iterations (default 10)")


def _add_data(p):
    p.add_argument("--data", required=True, help="MNIST IDX directory or temporal dataset directory")
    p.add_argument("--mnist-split", choices=("train", "test"), default="train", help="which MNIST files to read")
    p.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    _add_slic(p)


def _add_model(p):
    p.add_argument("--layer", choices=("gcn", "gatv1", "gatv2", "sagnn"), default="sagnn")
    p.add_argument("--readout", choices=("gsp", "gcp"), default="gsp")
    p.add_argument("--hidden-dims", type=_ints, default=(128, 128), help="comma-separated widths")
    p.add_argument("--mlp-dims", type=_ints, default=(64,), help="comma-separated hidden widths of the head")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--aggregator", choices=("mean", "sum"), default="mean")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML file of flag values; flags given on the command line win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, fixed seeds")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads and worker processes")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="stagnn", description="Superpixel graph attention networks for image and change classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("segment", parents=[common], help="SLIC superpixels of one image")
    p.add_argument("input")
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.add_argument("--overlay", action="store_true", help="also write a boundary overlay PNG")
    _add_slic(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("build-graph", parents=[common], help="region adjacency graph(s) as JSON")
    p.add_argument("input", help="image file, folder of yearly frames, or temporal dataset root")
    p.add_argument("--out", "-o", required=True, help="output file (or directory for a dataset root)")
    p.add_argument("--years", type=lambda s: [y for y in s.split(",") if y], default=None,
                   help="comma-separated frame order")
    _add_slic(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common], help="train a graph classifier")
    _add_data(p)
    _add_model(p)
    p.add_argument("--out", "-o", required=True, help="run directory (checkpoint, metrics.csv, summary.json)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=200, help="early-stopping patience in epochs")
    p.add_argument("--plateau-patience", type=int, default=20)
    p.add_argument("--lr-factor", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix of a checkpoint")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--out", "-o", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="per-sample class and confidence CSV")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench-fpt", parents=[common], help="forward-pass time and op count per model")
    p.add_argument("--data", required=True, help="temporal dataset directory")
    p.add_argument("--models", default="stag-gsp,sagnn-e", help=f"comma-separated subset of {','.join(BENCH_MODELS)}")
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--n-passes", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--hidden-dims", type=_ints, default=(128, 128))
    p.add_argument("--mlp-dims", type=_ints, default=(64,))
    p.add_argument("--voting-table", default=None, help="from,to,transition CSV")
    p.add_argument("--out", "-o", default=None, help="JSON report path")
    _add_slic(p)
    p.set_defaults(func=cmd_bench_fpt)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write the synthetic transition dataset")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--n-per-class", type=int, default=400)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values as defaults, so explicit flags override them."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        sub = _subparser(parser, command)
    except KeyError:
        return parser.parse_args(argv)
    try:
        with open(known.config, "rb") as fh:
            values = tomllib.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read config {known.config}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{known.config}: {exc}") from exc
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or isinstance(value, dict):
            raise UsageError(f"{known.config}: unknown key {key!r} for '{command}'")
        action = actions[dest]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        if action.type is not None and isinstance(value, str):
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{known.config}: bad value for {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{known.config}: {key!r} must be one of {', '.join(map(str, action.choices))}")
        action.required = False
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"stagnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"stagnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA

    limits = threadpool_limits(limits=1 if args.deterministic else args.threads) \
        if (args.deterministic or args.threads) else nullcontext()
    try:
        with limits:
            return args.func(args)
    except UsageError as exc:
        print(f"stagnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"stagnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CorruptImage, GraphFormatError, OSError, ValueError, KeyError) as exc:
        print(f"stagnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
