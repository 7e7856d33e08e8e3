"""Command-line entry point: ``mlvpt <subcommand>``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from mlvpt.checkpoint import load_backbone, load_model, save_backbone
from mlvpt.config import ConfigError, RunConfig, default_seed
from mlvpt.datagen import DatasetError, SynthConfig, load_dataset, read_labels_csv, write_dataset
from mlvpt.labelgraph import (
    GroupingConfig,
    build_cooccurrence,
    group_classes,
    grouping_to_json,
    load_grouping,
    write_matrix,
)
from mlvpt.metrics import evaluate, false_positive_rate
from mlvpt.model import build_classifier
from mlvpt.trainer import NonFiniteError, predict_batches, pretrain_backbone, train

log = logging.getLogger("mlvpt")

EXIT_INPUT = 2
EXIT_NUMERIC = 3
SPLITS = ("test", "decorrelated", "probe")


class InputError(Exception):
    pass


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'i,j', got {text!r}") from exc
    return i, j


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(data_dir: str, split: str) -> Path:
    path = Path(data_dir) / f"{split}.json"
    if not path.exists():
        raise InputError(f"missing split manifest {path}")
    return path


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


# --- subcommands -------------------------------------------------------------------


def cmd_group(args: argparse.Namespace) -> None:
    labels = read_labels_csv(args.labels)
    cfg = GroupingConfig(
        n_groups=args.n_groups,
        tau=args.tau,
        kmeans_restarts=args.restarts,
        rng_seed=default_seed() if args.seed is None else args.seed,
    )
    if cfg.n_groups > labels.shape[1]:
        raise InputError(f"--n-groups {cfg.n_groups} exceeds the number of classes K={labels.shape[1]}")
    co, dc = group_classes(labels, cfg)
    s_path = None
    if args.dump_s:
        write_matrix(args.dump_s, build_cooccurrence(labels))
        s_path = str(args.dump_s)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(grouping_to_json(co, dc, cfg, s_path))


def cmd_gen_data(args: argparse.Namespace) -> None:
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(SynthConfig)}
    if values["rng_seed"] is None:
        values["rng_seed"] = default_seed()
    cfg = SynthConfig(**values)
    write_dataset(cfg, args.out, decorrelated=args.decorrelated_test, probe=args.probe, pretrain=not args.no_pretrain)


def _backbone_for(args: argparse.Namespace, cfg: RunConfig):
    if args.backbone:
        return load_backbone(args.backbone)
    split = "pretrain" if (Path(args.data) / "pretrain.json").exists() else "train"
    ds = load_dataset(_manifest(args.data, split))
    return pretrain_backbone(cfg.encoder, ds.images, ds.labels, cfg.pretrain, cfg.asl)


def cmd_pretrain(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    backbone = _backbone_for(argparse.Namespace(backbone=None, data=args.data), cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_backbone(args.out, backbone)


def cmd_train(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    if args.mode:
        cfg = cfg.with_section("train", mode=args.mode)
    mode = cfg.train.mode
    tr = load_dataset(_manifest(args.data, "train"))
    va = load_dataset(_manifest(args.data, "val"))
    partitions = None
    if mode == "ml_vpt":
        if not args.grouping:
            raise InputError("--grouping is required for ml_vpt")
        partitions = load_grouping(args.grouping)
        if partitions[0].n_groups != cfg.encoder.n_groups:
            raise InputError(
                f"grouping has {partitions[0].n_groups} groups but encoder.n_groups={cfg.encoder.n_groups}"
            )
    backbone = _backbone_for(args, cfg)
    if dataclasses.asdict(backbone.cfg) != dataclasses.asdict(cfg.encoder):
        # prompt layout may differ from the stored backbone config; geometry must not
        geo = ("n_layers", "embed_dim", "n_heads", "patch_size", "image_size", "channels", "mlp_ratio")
        if any(getattr(backbone.cfg, k) != getattr(cfg.encoder, k) for k in geo):
            raise InputError("backbone geometry does not match encoder config")
        backbone.cfg = cfg.encoder
    model = build_classifier(
        mode, backbone, cfg.encoder, tr.labels.shape[1], partitions, cfg.model.expert_hidden, cfg.train.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.dumps())
    train(model, tr.images, tr.labels, va.images, va.labels, cfg.train, cfg.asl, out)


def _load_run_model(ckpt: str, use_ema: bool):
    if not Path(ckpt).exists():
        raise InputError(f"missing checkpoint {ckpt}")
    model = load_model(ckpt, use_ema=use_ema)
    model.eval()
    return model


def cmd_eval(args: argparse.Namespace) -> None:
    model = _load_run_model(args.ckpt, not args.no_ema)
    out_root = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    for split in args.splits.split(","):
        ds = load_dataset(_manifest(args.data, split))
        outputs = predict_batches(model, ds.images)
        scores = outputs["y"]
        _check_finite(scores, f"{split} scores")
        res = evaluate(scores, ds.labels, args.threshold)
        doc = res.to_dict()
        doc["split"] = split
        doc["n"] = len(ds)
        doc["mode"] = model.mode
        if "removed_class" in ds.manifest:
            j = int(ds.manifest["removed_class"])
            doc["removed_class"] = j
            doc["removed_class_fpr"] = false_positive_rate(scores, ds.labels, j, args.threshold)
        _write_json(out_root / split / "metrics.json", doc)
        with open(out_root / split / "per_class_ap.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "AP"])
            for k, ap in enumerate(res.per_class_AP):
                w.writerow([k, "" if np.isnan(ap) else repr(ap)])


def cmd_predict(args: argparse.Namespace) -> None:
    model = _load_run_model(args.ckpt, not args.no_ema)
    ds = load_dataset(_manifest(args.data, args.split))
    stop = len(ds) if args.count is None else min(len(ds), args.index + args.count)
    if not 0 <= args.index < len(ds):
        raise InputError(f"--index {args.index} out of range for {len(ds)} images")
    outputs = predict_batches(model, ds.images[args.index : stop])
    lines = []
    for r in range(stop - args.index):
        doc = {
            "image_id": args.index + r,
            "y_hat_co": outputs["y_co"][r].tolist() if "y_co" in outputs else None,
            "y_hat_dc": outputs["y_dc"][r].tolist() if "y_dc" in outputs else None,
            "y_hat": outputs["y"][r].tolist(),
        }
        _check_finite(outputs["y"][r], "predictions")
        lines.append(json.dumps(doc))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_metrics(run_dir: Path, split: str) -> dict:
    path = run_dir / "eval" / split / "metrics.json"
    if not path.exists():
        raise InputError(f"missing {path}; run 'mlvpt eval' first")
    return json.loads(path.read_text())


def _best_history_row(run_dir: Path) -> dict:
    path = run_dir / "history.csv"
    if not path.exists():
        raise InputError(f"missing {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    best = max(rows, key=lambda r: float(r["val_mAP"]))
    return {"best_epoch": int(best["epoch"]), "best_val_mAP": float(best["val_mAP"]), "epochs_run": len(rows)}


def dump_gate_weights(model, images: np.ndarray, out_dir: Path) -> None:
    outputs = predict_batches(model, images)
    for mode in ("co", "dc"):
        w = outputs[f"gates_{mode}"]
        with open(out_dir / f"gate_weights_{mode}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["image_id", "class"] + [f"w_{e + 1}" for e in range(w.shape[2])])
            for i in range(w.shape[0]):
                for k in range(w.shape[1]):
                    wr.writerow([i, k] + [repr(float(v)) for v in w[i, k]])


def cmd_report(args: argparse.Namespace) -> None:
    runs = {"ml_vpt": Path(args.ml), "vanilla_vpt": Path(args.vanilla)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = args.splits.split(",")
    metrics = {(m, s): _read_metrics(d, s) for m, d in runs.items() for s in splits}
    cols = ["mode", "split", "mAP", "CP", "CR", "CF1", "OP", "OR", "OF1", "mAP_drop_vs_test", "removed_class_fpr",
            "best_epoch", "best_val_mAP", "epochs_run"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for m, d in runs.items():
            hist = _best_history_row(d)
            base = metrics[(m, "test")]["mAP"] if (m, "test") in metrics else None
            for s in splits:
                doc = metrics[(m, s)]
                row = {k: doc.get(k) for k in ("mAP", "CP", "CR", "CF1", "OP", "OR", "OF1")}
                row.update(mode=m, split=s, removed_class_fpr=doc.get("removed_class_fpr", ""), **hist)
                row["mAP_drop_vs_test"] = "" if base is None else base - doc["mAP"]
                w.writerow(row)
    with open(out / "per_class_ap_delta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "class", "ap_ml_vpt", "ap_vanilla_vpt", "delta"])
        for s in splits:
            a = metrics[("ml_vpt", s)]["per_class_AP"]
            b = metrics[("vanilla_vpt", s)]["per_class_AP"]
            for k, (x, y) in enumerate(zip(a, b)):
                delta = "" if x is None or y is None else x - y
                w.writerow([s, k, "" if x is None else x, "" if y is None else y, delta])
    ckpt = runs["ml_vpt"] / "best.ckpt"
    if args.data and ckpt.exists():
        model = _load_run_model(str(ckpt), True)
        ds = load_dataset(_manifest(args.data, args.gate_split))
        dump_gate_weights(model, ds.images, out)


# --- argument parsing -------------------------------------------------------------


def _add_dataclass_flags(p: argparse.ArgumentParser, typ) -> None:
    for f in dataclasses.fields(typ):
        flag = "--" + f.name.replace("_", "-")
        default = None if f.name == "rng_seed" else f.default
        p.add_argument(flag, dest=f.name, type=type(f.default), default=default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlvpt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("group", help="cluster classes into CO/DC groups from a label CSV")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", default="grouping.json")
    p.add_argument("--n-groups", type=int, default=GroupingConfig.n_groups)
    p.add_argument("--tau", type=float, default=GroupingConfig.tau)
    p.add_argument("--restarts", type=int, default=GroupingConfig.kmeans_restarts)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-s", default=None, help="also write S as a binary matrix dump")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, SynthConfig)
    p.add_argument("--decorrelated-test", action="store_true")
    p.add_argument("--probe", type=_parse_pair, default=None, metavar="I,J")
    p.add_argument("--no-pretrain", action="store_true", help="skip the backbone pretraining split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and save a backbone")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="prompt-tune a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--grouping", default=None)
    p.add_argument("--mode", choices=("ml_vpt", "vanilla_vpt"), default=None)
    p.add_argument("--backbone", default=None, help="pretrained backbone checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset splits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--out", default=None, help="default: <ckpt dir>/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-image probabilities as JSON lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="compare ml_vpt and vanilla_vpt runs")
    p.add_argument("--ml", required=True)
    p.add_argument("--vanilla", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--splits", default=",".join(SPLITS))
    p.add_argument("--gate-split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except NonFiniteError as exc:
        print(f"mlvpt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"mlvpt: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
