"""Command-line interface.

    kmex train-toy --out run/ --seed 42
    kmex embed     --model run/model.json --data run/data --out run/emb
    kmex convert   --model run/model.json --data run/data --out run/kmex
    kmex evaluate  --model run/model.json --data run/data --prototypes run/kmex/protos.kmx --out run/eval
    kmex report    run/eval/report.json --out run/eval

Every command validates its whole configuration before writing anything.
Randomness flows from ``--seed``: per-class clustering streams and
per-image RO streams are children of ``SeedSequence(seed)``, so ``--threads``
never changes a result.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kmex import data, metrics, nn, pipeline, svg
from kmex import prototypes as protolib
from kmex.similarity import VARIANTS, Similarity

log = logging.getLogger("kmex")

REPORT_FORMAT = "kmex-report"
REPORT_VERSION = 1


class UsageError(ValueError):
    """Invalid configuration, raised before any output is written."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    command: str
    params: dict

    def to_dict(self) -> dict:
        return {"command": self.command, **self.params}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# outputs and execution knobs that cannot change a result
_NOT_HASHED = {"out", "overwrite", "func", "threads"}


def make_config(args: argparse.Namespace) -> RunConfig:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED and k != "command"}
    return RunConfig(args.command, params)


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).replace(";", ",").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seed expects integers separated by commas, got {text!r}") from None
    if not seeds:
        raise UsageError("--seed needs at least one value")
    if any(s < 0 for s in seeds):
        raise UsageError("seeds must be non-negative")
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"duplicate seeds in {text!r}")
    return seeds


def parse_per_class(text: str, n_classes: int) -> int | list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--prototypes-per-class expects an int or a comma list, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise UsageError("--prototypes-per-class values must be positive")
    if len(values) == 1:
        return values[0]
    if len(values) != n_classes:
        raise UsageError(f"--prototypes-per-class lists {len(values)} counts for {n_classes} classes")
    return values


def _single_seed(text: str) -> int:
    seeds = parse_seeds(text)
    if len(seeds) != 1:
        raise UsageError("this command takes a single --seed")
    return seeds[0]


def _need(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what}: no such file or directory: {p}")
    return p


def _positive(name: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return
    if value is None or value < 1:
        raise UsageError(f"{name} must be a positive integer")


def _check_writable(paths: list[Path], overwrite: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --overwrite)")


def _load_model(args) -> nn.Model:
    model_path = _need(args.model, "--model")
    if args.weights is not None:
        _need(args.weights, "--weights")
    else:
        doc = json.loads(model_path.read_text())
        _need(model_path.with_name(doc.get("weights_file", "weights.bin")), "weights file")
    return nn.load_model(model_path, args.weights)


def _load_data(args) -> tuple[data.Dataset, data.Dataset]:
    root = _need(args.data, "--data")
    if not root.is_dir():
        raise UsageError(f"--data {root} must be a dataset directory for this command")
    return data.load_dataset_dir(root, None)


def _check_compatible(model: nn.Model, ds: data.Dataset) -> None:
    if tuple(ds.shape) != tuple(model.stack.input_shape):
        raise UsageError(f"dataset images {ds.shape} do not match model input {model.stack.input_shape}")
    if ds.n_classes > model.stack.n_classes:
        raise UsageError(f"dataset has {ds.n_classes} classes, model only {model.stack.n_classes}")


def _with_model_classes(model: nn.Model, train: data.Dataset, test: data.Dataset):
    k = model.stack.n_classes
    return (data.Dataset(train.images, train.labels, k, train.mean, train.std),
            data.Dataset(test.images, test.labels, k, train.mean, train.std))


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train_toy(args) -> int:
    seed = _single_seed(args.seed)
    for name in ("classes", "n_train", "n_test", "epochs", "batch_size", "size"):
        _positive("--" + name.replace("_", "-"), getattr(args, name))
    if args.size % 4:
        raise UsageError("--size must be a multiple of 4")
    if not args.lr > 0:
        raise UsageError("--lr must be positive")
    if args.separation < 0:
        raise UsageError("--separation must be non-negative")
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    targets = [out / "model.json", out / "weights.bin", out / "data"]
    if args.attributes:
        targets.append(out / "data" / "attrs.csv")
    _check_writable(targets, args.overwrite)

    k = args.classes
    counts = [a + b for a, b in zip(data._split_counts(args.n_train, k), data._split_counts(args.n_test, k))]
    attrs = None
    if args.attributes:
        full, table = data.gen_attributed_toy(seed, k, counts, data.default_attribute_spec(k),
                                              size=args.size, separation=args.separation)
    else:
        full = data.gen_blob_images(seed, k, counts, size=args.size, separation=args.separation)
    tr_idx, te_idx = data.split_indices(full.labels, k, args.n_train, args.n_test, seed)
    train = full.subset(tr_idx).with_stats()
    test = data.Dataset(full.images[te_idx], full.labels[te_idx], k, train.mean, train.std)
    if args.attributes:
        attrs = data.AttributeTable(table.values[tr_idx], table.names)

    stack = nn.toy_cnn(k, args.size)
    norm = nn.Model(stack, None, train.mean, train.std)
    weights = nn.train_sgd(stack, seed, norm.normalize(train.images), train.labels, args.epochs,
                           args.lr, args.batch_size)
    model = nn.Model(stack, weights, train.mean, train.std)

    out.mkdir(parents=True, exist_ok=True)
    nn.save_model(model, out / "model.json")
    data.save_dataset_dir(out / "data", train, test)
    if attrs is not None:
        data.save_attributes(out / "data" / "attrs.csv", attrs)
    acc_tr = (model.predict_proba(model.normalize(train.images)).argmax(1) == train.labels).mean()
    acc_te = (model.predict_proba(model.normalize(test.images)).argmax(1) == test.labels).mean()
    print(f"train accuracy {100 * acc_tr:.2f}%  test accuracy {100 * acc_te:.2f}%")
    print(f"wrote {out / 'model.json'} ({stack.n_params()} parameters) and {out / 'data'}")
    return 0


def cmd_embed(args) -> int:
    model = _load_model(args)
    train, test = _load_data(args)
    ds = train if args.split == "train" else test
    _check_compatible(model, ds)
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    emb_path, lab_path = out / "embeddings.kmx", out / "labels.kmx"
    _check_writable([emb_path, lab_path], args.overwrite)

    z = nn.embed_batched(model.stack, model.weights, model.normalize(ds.images))
    out.mkdir(parents=True, exist_ok=True)
    data.save_embeddings(emb_path, z)
    data.save_labels(lab_path, ds.labels)
    back = data.load_embeddings(emb_path)
    if back.rows.astype(np.float32).tobytes() != z.astype(np.float32).tobytes():
        raise RuntimeError(f"{emb_path}: round-trip check failed")
    print(f"wrote {len(z)} x {z.shape[1]} embeddings to {emb_path}")
    return 0


def cmd_convert(args) -> int:
    seed = _single_seed(args.seed)
    _positive("--restarts", args.restarts)
    _positive("--subsample", args.subsample, allow_none=True)
    _positive("--threads", args.threads)
    similarity = Similarity(args.similarity)
    if args.out is None:
        raise UsageError("--out is required")
    data_path = _need(args.data, "--data")
    out = Path(args.out)
    targets = [out / "protos.kmx", out / "protos.json", out / "gallery.svg"]
    _check_writable(targets, args.overwrite)

    opts = dict(similarity=similarity, seed=seed, restarts=args.restarts, subsample=args.subsample,
                threads=args.threads)
    train = None
    if data_path.is_dir():
        model = _load_model(args)
        train, test = _with_model_classes(model, *_load_data(args))
        _check_compatible(model, train)
        per_class = parse_per_class(args.prototypes_per_class, train.n_classes)
        if args.patch:
            protos = protolib.patch_convert(model, train, per_class, **opts)
        else:
            protos = protolib.convert(model, train, per_class, method=args.method, **opts)
    else:
        if args.patch:
            raise UsageError("--patch needs a model and a dataset directory")
        labels_path = _need(args.labels, "--labels")
        emb = data.load_embeddings(data_path)
        labels = data.load_labels(labels_path)
        if len(labels) != emb.shape[0]:
            raise UsageError(f"{labels_path} has {len(labels)} labels for {emb.shape[0]} embeddings")
        n_classes = int(labels.max()) + 1
        per_class = parse_per_class(args.prototypes_per_class, n_classes)
        protos = protolib.fit_prototypes(emb.rows, labels, per_class, method=args.method,
                                         n_classes=n_classes, source=_file_digest(data_path), **opts)

    out.mkdir(parents=True, exist_ok=True)
    protolib.save_prototypes(protos, out / "protos.kmx")
    written = [out / "protos.kmx", out / "protos.json"]
    if train is not None:
        (out / "gallery.svg").write_text(_gallery(protos, train))
        written.append(out / "gallery.svg")
    print(f"{len(protos)} prototypes ({', '.join(map(str, protos.per_class()))} per class); "
          f"wrote {', '.join(str(p) for p in written)}")
    return 0


def _gallery(protos: protolib.PrototypeSet, train: data.Dataset) -> str:
    order = np.lexsort((protos.index, protos.classes))
    images = [train.images[protos.representative[i]] for i in order]
    captions = [f"class {protos.classes[i]} ({protos.importance[i]:.2f})" for i in order]
    columns = max(protos.per_class())
    return svg.gallery(images, captions, columns=columns)


_SCALARS = ("acc_base", "acc_sem", "acc_delta", "d_tsp", "d_dvs", "d_fdl_mean", "d_fdl_std",
            "auroc_mean", "auroc_std", "auroc_random_mean", "auroc_base_mean",
            "auroc_base_random_mean", "captured_attributes", "attribute_mae")


def _aggregate(reports: list[metrics.MetricReport]) -> dict:
    agg = {}
    for name in _SCALARS:
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            agg[name] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        agg[name] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return agg


def _mean_report(reports: list[metrics.MetricReport]) -> metrics.MetricReport:
    if len(reports) == 1:
        return reports[0]
    agg = _aggregate(reports)
    values = {k: (None if v is None else v["mean"]) for k, v in agg.items()}
    if values["captured_attributes"] is not None:
        values["captured_attributes"] = int(round(values["captured_attributes"]))
    return metrics.MetricReport(**values)


def _output_name(out: Path, stem: str, suffix: str, overwrite: bool, stamp: str) -> Path:
    path = out / f"{stem}{suffix}"
    if path.exists() and not overwrite:
        return out / f"{stem}-{stamp}{suffix}"
    return path


def cmd_evaluate(args) -> int:
    seeds = parse_seeds(args.seed)
    _positive("--restarts", args.restarts)
    _positive("--subsample", args.subsample, allow_none=True)
    _positive("--ro-steps", args.ro_steps)
    _positive("--eval-images", args.eval_images)
    _positive("--threads", args.threads)
    similarity = Similarity(args.similarity)
    if args.out is None:
        raise UsageError("--out is required")
    model = _load_model(args)
    train, test = _with_model_classes(model, *_load_data(args))
    _check_compatible(model, train)
    fixed = None
    if args.prototypes is not None:
        proto_path = _need(args.prototypes, "--prototypes")
        _need(proto_path.with_suffix(".json"), "prototype sidecar")
        fixed = protolib.load_prototypes(proto_path)
        if fixed.patch is not None:
            raise UsageError(f"{proto_path} holds patch prototypes; evaluate expects image-level ones")
        if fixed.dim != model.stack.embedding_dim:
            raise UsageError(f"{proto_path}: prototype dimension {fixed.dim} != embedding "
                             f"dimension {model.stack.embedding_dim}")
        per_class = None
    else:
        per_class = parse_per_class(args.prototypes_per_class, train.n_classes)
    attrs = None
    if args.attrs is not None:
        attrs = data.load_attributes(_need(args.attrs, "--attrs"))
        if len(attrs) != len(train):
            raise UsageError(f"{args.attrs} has {len(attrs)} rows, training split has {len(train)}")

    runs, curves = [], {}
    for seed in seeds:
        protos = fixed if fixed is not None else protolib.convert(
            model, train, per_class, similarity=similarity, seed=seed, restarts=args.restarts,
            subsample=args.subsample, method=args.method, threads=args.threads)
        log.info("seed %d: evaluating %d prototypes", seed, len(protos))
        ev = pipeline.evaluate(model, protos, train, test, eval_images=args.eval_images,
                               ro_steps=args.ro_steps, seed=seed, attrs=attrs, threads=args.threads)
        runs.append({"seed": seed, "metrics": ev.report.to_dict(),
                     "radar": metrics.radar_summary(ev.report)})
        for mode, c in ev.curves.items():
            curves.setdefault(mode, []).append(c)
    reports = [metrics.MetricReport(**r["metrics"]) for r in runs]
    cfg = make_config(args)
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
        "seeds": seeds,
        "inputs": {
            "model_digest": model.digest(),
            "prototypes_digest": None if fixed is None else _file_digest(Path(args.prototypes)),
        },
        "runs": runs,
        "aggregate": _aggregate(reports),
        "radar": metrics.radar_summary(_mean_report(reports)),
    }

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    report_path = _output_name(out, "report", ".json", args.overwrite, stamp)
    curves_path = _output_name(out, "curves", ".csv", args.overwrite, stamp)
    _dump_json(report_path, doc)
    curves_path.write_text(_curves_csv(curves))
    agg = doc["aggregate"]
    print(f"acc base {agg['acc_base']['mean']:.2f}  kmex {agg['acc_sem']['mean']:.2f}  "
          f"d_tsp {agg['d_tsp']['mean']:.4f}  d_fdl {agg['d_fdl_mean']['mean']:.4f}  "
          f"auroc {agg['auroc_mean']['mean']:.4f}")
    print(f"wrote {report_path} and {curves_path}")
    return 0


def _curves_csv(curves: dict[str, list[metrics.ROCurve]]) -> str:
    lines = ["mode,fraction,mean,std"]
    for mode in sorted(curves):
        per_image = np.concatenate([c.per_image for c in curves[mode]])
        fractions = curves[mode][0].fractions
        mean, std = per_image.mean(axis=0), per_image.std(axis=0)
        lines += [f"{mode},{f:.6f},{m:.9g},{s:.9g}" for f, m, s in zip(fractions, mean, std)]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    if not args.reports:
        raise UsageError("give at least one report.json")
    docs = []
    for p in args.reports:
        doc = json.loads(_need(p, "report").read_text())
        if doc.get("format") != REPORT_FORMAT:
            raise UsageError(f"{p} is not a kmex report")
        docs.append((Path(p), doc))
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    _check_writable([out / "radar.svg", out / "summary.txt"], args.overwrite)

    series, lines = {}, []
    header = f"{'report':<28}" + "".join(f"{a:>12}" for a in metrics.RADAR_AXES)
    lines.append(header)
    for path, doc in docs:
        label = path.parent.name or path.stem
        while label in series:
            label += "'"
        series[label] = doc["radar"]
        lines.append(f"{label:<28}" + "".join(f"{doc['radar'][a]:>12.4f}" for a in metrics.RADAR_AXES))
    out.mkdir(parents=True, exist_ok=True)
    (out / "radar.svg").write_text(svg.radar(series, metrics.RADAR_AXES))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out / 'radar.svg'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    if "model" in names:
        p.add_argument("--model", help="model.json written by train-toy")
        p.add_argument("--weights", help="weights file (default: next to the model)")
    if "data" in names:
        p.add_argument("--data", help="dataset directory (or embeddings.kmx for convert)")
    if "protos" in names:
        p.add_argument("--prototypes-per-class", default="5",
                       help="prototypes per class: an int, or one count per class (e.g. 3,5,5)")
        p.add_argument("--similarity", default="neg_l2", choices=VARIANTS)
        p.add_argument("--restarts", type=int, default=5, help="k-means restarts (default 5)")
        p.add_argument("--subsample", type=int, default=None,
                       help="cluster at most this many samples per class")
        p.add_argument("--method", default="kmeans", choices=("kmeans", "bisecting"))
        p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", default="42")
    p.add_argument("--out", help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmex", description="Convert classifiers into prototype "
                                     "models with per-class k-means and evaluate them.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="generate blob images and train the toy CNN")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--attributes", action="store_true",
                   help="paint binary visual factors and write data/attrs.csv")
    _common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("embed", help="write the embeddings of a dataset split")
    p.add_argument("--split", default="train", choices=("train", "test"))
    _common(p, "model", "data")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("convert", help="cluster training embeddings into prototypes")
    p.add_argument("--labels", help="labels.kmx when --data is an embeddings file")
    p.add_argument("--patch", action="store_true", help="cluster per-position patch features")
    _common(p, "model", "data", "protos")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="compute every metric; --seed accepts a comma list")
    p.add_argument("--prototypes", help="protos.kmx from convert (default: convert per seed)")
    p.add_argument("--attrs", help="attrs.csv aligned with the training split")
    p.add_argument("--ro-steps", type=int, default=50)
    p.add_argument("--eval-images", type=int, default=100)
    _common(p, "model", "data", "protos")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="radar plot and summary table for one or more reports")
    p.add_argument("reports", nargs="*", help="report.json files")
    p.add_argument("--seed", default="0", help=argparse.SUPPRESS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("KMEX_LOG", "WARNING").upper()
    numeric = int(level) if level.isdigit() else getattr(logging, level, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, data.FormatError, nn.ShapeError, ValueError) as err:
        print(f"kmex {args.command}: error: {err}", file=sys.stderr)
        return 2
    except nn.TrainingDiverged as err:
        print(f"kmex {args.command}: error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
