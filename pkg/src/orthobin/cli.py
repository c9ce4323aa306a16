"""Command-line front end.

Verbs: pretrain, binarize, noise-probe, toy-mse, infer-bench. Every run
writes a config snapshot sufficient for bit-exact reproduction next to its
outputs. Output directory comes from --out or the ORTHOBIN_OUT env var.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import __version__
from .autodiff import DomainError, ShapeError
from .datasets import ParseError, load_dataset
from .experiments import (DEFAULT_SCALES, ExperimentReport,
                          NOISE_PROBE_COLUMNS, TOY_INSTANCE_SEED,
                          noise_probe, run_id_for, search_toy_instance,
                          toy_comparison)
from .inference import BinaryDeployment, benchmark
from .network import (Network, evaluate_accuracy, load_checkpoint, pretrain,
                      save_checkpoint)
from .seeding import substream
from .trainer import (METRIC_COLUMNS, TrainConfig, TrainingDiverged,
                      binarize_network)
from .transform import NumericalError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_CONTRACT = 5


def _out_dir(args) -> str:
    out = args.out or os.environ.get("ORTHOBIN_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    return out


def _write_config(out: str, command: str, payload: dict) -> str:
    doc = {"command": command, "version": __version__, **payload}
    path = os.path.join(out, "config.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
    return path


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def _dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="gaussians",
                   help="gaussians | moons | file.csv | idx:IMAGES,LABELS")
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--noise", type=float, default=None,
                   help="generator noise level (generator default if unset)")
    p.add_argument("--test-fraction", type=float, default=0.25)


def _load_data(args):
    return load_dataset(args.dataset, seed=args.seed, n_train=args.n_train,
                        n_test=args.n_test, noise=args.noise,
                        test_fraction=args.test_fraction)


def _dataset_payload(args) -> dict:
    return {"dataset": args.dataset, "n_train": args.n_train,
            "n_test": args.n_test, "noise": args.noise,
            "test_fraction": args.test_fraction, "seed": args.seed}


def _parse_arch(text: str) -> list[int]:
    try:
        dims = [int(p) for p in text.split("x")]
    except ValueError as exc:
        raise ValueError(f"bad architecture {text!r}: {exc}") from exc
    if len(dims) < 2:
        raise ValueError("architecture needs at least two dims, e.g. 2x16x2")
    return dims


# ---------------------------------------------------------------------------
# Commands


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    train, test = _load_data(args)
    dims = _parse_arch(args.arch)
    if dims[0] != train.dim:
        raise ValueError(
            f"architecture input dim {dims[0]} != dataset dim {train.dim}")
    if dims[-1] != train.n_classes:
        raise ValueError(
            f"architecture output dim {dims[-1]} != classes {train.n_classes}")
    net = Network.mlp(dims, full_precision_ends=not args.quantize_ends)
    net.init_weights(substream(args.seed, "init"))
    history = pretrain(net, train.features, train.labels, epochs=args.epochs,
                       lr=args.lr, batch_size=args.batch_size,
                       rng=substream(args.seed, "data"),
                       test=(test.features, test.labels))
    ckpt = os.path.join(out, "fp_checkpoint.json")
    save_checkpoint(net, ckpt)
    _write_csv(os.path.join(out, "pretrain_metrics.csv"),
               ("epoch", "loss", "train_accuracy", "test_accuracy"), history)
    _write_config(out, "pretrain", {
        **_dataset_payload(args), "arch": args.arch, "epochs": args.epochs,
        "lr": args.lr, "batch_size": args.batch_size,
        "quantize_ends": args.quantize_ends})
    train_acc = evaluate_accuracy(net, train.features, train.labels)
    test_acc = evaluate_accuracy(net, test.features, test.labels)
    print(f"pretrained {args.arch} on {args.dataset}: "
          f"train accuracy {train_acc:.4f}, test accuracy {test_acc:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        cfg = TrainConfig.from_dict(doc.get("train_config", doc))
    else:
        cfg = TrainConfig()
    overrides = {
        "lam": args.lam, "gamma": args.gamma, "k": args.k,
        "n_ep": args.epochs_per_layer, "finetune_epochs": args.finetune_epochs,
        "lr_quant": args.lr_quant, "lr_finetune": args.lr_finetune,
        "batch_size": args.batch_size, "block_size": args.block_size,
        "alpha_policy": args.alpha_policy, "ablation": args.ablation,
        "capture_capacity": args.capture_capacity,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    cfg.seed = args.seed
    if args.no_activation_binarization:
        cfg.binarize_activations = False
    if args.no_reg:
        cfg.reg_enabled = False
    if args.center_inputs:
        cfg.center_inputs = True
    cfg.validate()
    return cfg


def cmd_binarize(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    train, test = _load_data(args)
    fp_net = load_checkpoint(args.checkpoint)
    fp_acc = evaluate_accuracy(fp_net, test.features, test.labels)

    baseline_result = None
    baseline_acc = None
    if not args.no_baseline:
        base_cfg = TrainConfig.from_dict({**cfg.to_dict(), "ablation": "none"})
        base_net = load_checkpoint(args.checkpoint)
        baseline_result = binarize_network(
            base_net, train.features, train.labels, base_cfg,
            test=(test.features, test.labels))
        baseline_acc = baseline_result.final_accuracy
        _write_csv(os.path.join(out, "baseline_metrics.csv"), METRIC_COLUMNS,
                   baseline_result.metrics)
        save_checkpoint(base_net, os.path.join(out, "baseline_checkpoint.json"))

    net = load_checkpoint(args.checkpoint)
    result = binarize_network(net, train.features, train.labels, cfg,
                              test=(test.features, test.labels))
    ckpt = os.path.join(out, "binary_checkpoint.json")
    save_checkpoint(net, ckpt)
    _write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, result.metrics)

    config_payload = {**_dataset_payload(args), "checkpoint": args.checkpoint,
                      "train_config": cfg.to_dict(),
                      "with_baseline": not args.no_baseline}
    _write_config(out, "binarize", config_payload)
    report = ExperimentReport(
        run_id=run_id_for(config_payload),
        config=config_payload,
        final_accuracy={"full_precision": fp_acc,
                        "binarized": result.final_accuracy,
                        "baseline": baseline_acc},
        q_plain=result.q_plain, q_weighted=result.q_weighted,
        baseline_q_plain=(baseline_result.q_plain if baseline_result else None),
        baseline_q_weighted=(baseline_result.q_weighted
                             if baseline_result else None))
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())

    print(f"binarized ({cfg.ablation}): test accuracy "
          f"{result.final_accuracy:.4f} (full precision {fp_acc:.4f}"
          + (f", baseline {baseline_acc:.4f})" if baseline_acc is not None
             else ")"))
    print(f"quant distances: plain {result.q_plain:.4f}, "
          f"weighted {result.q_weighted:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_noise_probe(args) -> int:
    out = _out_dir(args)
    train, test = _load_data(args)
    net = load_checkpoint(args.checkpoint)
    scales = tuple(float(s) for s in args.scales.split(","))
    modes = (("layer-dependent", "layer-independent")
             if args.mode == "both" else (args.mode,))
    sides = ("top5", "bottom5") if args.rows == "both" else (args.rows,)
    rows = noise_probe(net, train.features, test.features, test.labels,
                       modes=modes, sides=sides, scales=scales,
                       seed=args.seed, repeats=args.repeats,
                       include_fp=args.include_fp_layers)
    path = os.path.join(out, "noise_probe.csv")
    _write_csv(path, NOISE_PROBE_COLUMNS, rows)
    _write_config(out, "noise-probe", {
        **_dataset_payload(args), "checkpoint": args.checkpoint,
        "scales": list(scales), "mode": args.mode, "rows": args.rows,
        "repeats": args.repeats, "include_fp_layers": args.include_fp_layers})
    print(f"noise probe: {len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_toy_mse(args) -> int:
    out = _out_dir(args)
    seed = args.instance_seed
    if args.search:
        seed = search_toy_instance(seed, args.search)
        print(f"search found separating instance at seed {seed}")
    result = toy_comparison(seed)
    rows = [{"quantizer": "plain", **{k: result["plain"][k]
                                      for k in ("mse", "task_loss")}},
            {"quantizer": "guided", **{k: result["guided"][k]
                                       for k in ("mse", "task_loss")}}]
    path = os.path.join(out, "toy_mse.csv")
    _write_csv(path, ("quantizer", "mse", "task_loss"), rows)
    _write_config(out, "toy-mse", {"instance_seed": seed,
                                   "dim": result["dim"],
                                   "n_samples": result["n_samples"]})
    print(f"plain:  weight mse {result['plain']['mse']:.6f}, "
          f"task loss {result['plain']['task_loss']:.6f}")
    print(f"guided: weight mse {result['guided']['mse']:.6f}, "
          f"task loss {result['guided']['task_loss']:.6f}")
    separated = (result["plain"]["mse"] < result["guided"]["mse"]
                 and result["plain"]["task_loss"] > result["guided"]["task_loss"])
    print("separation (plain wins mse, loses task): "
          + ("yes" if separated else "no"))
    return EXIT_OK


def cmd_infer_bench(args) -> int:
    out = _out_dir(args)
    net = load_checkpoint(args.checkpoint)
    deploy = BinaryDeployment.from_network(net)
    rng = substream(args.seed, "bench")
    x = rng.normal(size=(args.samples, net.input_dim))
    rows = benchmark(deploy, x, repeats=args.repeats)
    path = os.path.join(out, "infer_bench.csv")
    _write_csv(path, ("path", "samples", "ops_per_sec"), rows)
    _write_config(out, "infer-bench", {"checkpoint": args.checkpoint,
                                       "samples": args.samples,
                                       "repeats": args.repeats,
                                       "seed": args.seed})
    for row in rows:
        print(f"{row['path']}: {row['ops_per_sec']:.3e} ops/sec")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthobin",
        description="Binarize small networks with transform-guided "
                    "quantized training; run the diagnostic experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--out", default=None,
                       help="output directory (default $ORTHOBIN_OUT or ./runs)")

    p = sub.add_parser("pretrain", help="train a full-precision model")
    common(p)
    _dataset_args(p)
    p.add_argument("--arch", default="2x16x16x16x2",
                   help="layer dims joined by x, e.g. 2x16x16x16x2")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--quantize-ends", action="store_true",
                   help="also mark the first/last layers as quantizable")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("binarize", help="run progressive binarization")
    common(p)
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None,
                   help="JSON file with a train_config section")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs-per-layer", type=int, default=None)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--lr-quant", type=float, default=None)
    p.add_argument("--lr-finetune", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--alpha-policy", choices=("trained", "recompute"),
                   default=None)
    p.add_argument("--ablation",
                   choices=("none", "intra", "cross", "aggregated"),
                   default=None)
    p.add_argument("--capture-capacity", type=int, default=None)
    p.add_argument("--no-activation-binarization", action="store_true")
    p.add_argument("--no-reg", action="store_true",
                   help="drop the orthogonality/scale regularizer")
    p.add_argument("--center-inputs", action="store_true")
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the paired no-transform baseline run")
    p.set_defaults(fn=cmd_binarize)

    p = sub.add_parser("noise-probe",
                       help="spectral noise sensitivity of a checkpoint")
    common(p)
    _dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scales",
                   default=",".join(str(s) for s in DEFAULT_SCALES))
    p.add_argument("--mode", choices=("layer-dependent", "layer-independent",
                                      "both"), default="both")
    p.add_argument("--rows", choices=("top5", "bottom5", "both"),
                   default="both")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--include-fp-layers", action="store_true")
    p.set_defaults(fn=cmd_noise_probe)

    p = sub.add_parser("toy-mse",
                       help="weight MSE vs task loss on the committed instance")
    common(p)
    p.add_argument("--instance-seed", type=int, default=TOY_INSTANCE_SEED)
    p.add_argument("--search", type=int, default=0,
                   help="search this many seeds for a separating instance")
    p.set_defaults(fn=cmd_toy_mse)

    p = sub.add_parser("infer-bench",
                       help="XNOR vs float-simulation throughput")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(fn=cmd_infer_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ParseError, FileNotFoundError, OSError) as exc:
        print(f"error (data/io): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NumericalError) as exc:
        print(f"error (training): {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ShapeError, DomainError, ValueError) as exc:
        print(f"error (contract): {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
