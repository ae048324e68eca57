"""Command-line entry point: ``spacte {train,certify,analyze,count,print-defaults}``.

Exit codes: 0 success, 1 reference-count assertion failure, 2 configuration
or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .certify import certify_dataset, read_records, write_records
from .data import read_cifar10_binary, subsample_every, synthetic_blobs
from .errors import ConfigError, InputError, SpacteError
from .metrics import (acr, certified_curve, easy_hard_report, log_prob_gap_samples, runtime_report,
                      write_groups_csv, write_histogram_csv)
from .model import cost_report, resnet110
from .seeding import numpy_rng
from .trainer import load_checkpoint, read_checkpoint_header, train

log = logging.getLogger("spacte")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

RESNET110_REFERENCE = {"single": 1_730_714, "five_heads": 6_995_138, "five_dnns": 8_653_570}


def load_data(cfg: config_mod.RunConfig, split: str):
    if cfg["data.kind"] == "blobs":
        count = cfg["data.train_count"] if split == "train" else cfg["data.test_count"]
        return synthetic_blobs(cfg["data.dim"], 2, cfg["data.separation"], cfg["data.spread"], count,
                               cfg["run.seed"], split)
    if not cfg["data.path"]:
        raise ConfigError("data.path required for data.kind = cifar10", "data.path")
    return read_cifar10_binary(cfg["data.path"], split)


def params_digest(net) -> str:
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- commands


def cmd_train(config_path, resume=None) -> int:
    cfg = config_mod.load_config(config_path)
    spec, tcfg = cfg.architecture(), cfg.train_config()
    out = Path(cfg["run.output_dir"])
    data = load_data(cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    heads = range(1, spec.num_heads + 1)
    mode = "a" if resume else "w"
    with open(log_path, mode) as fh:
        if not resume:
            fh.write("\t".join(["epoch", "lambda", "lr", *[f"loss_h{k}" for k in heads], "cosine_loss"]) + "\n")

        def on_epoch(s):
            fh.write("\t".join([str(s["epoch"]), f"{s['lambda']:.6f}", f"{s['lr']:.6g}",
                                *[f"{v:.6f}" for v in s["smoothed_loss"]], f"{s['cosine_loss']:.6g}"]) + "\n")
            fh.flush()
            log.info("epoch %d lambda %.4f lr %.4g loss %s", s["epoch"], s["lambda"], s["lr"],
                     " ".join(f"{v:.4f}" for v in s["smoothed_loss"]))

        state, report = train(spec, tcfg, data, checkpoint_dir=out / "checkpoints", resume_from=resume,
                              on_epoch=on_epoch, extra_header={"config": config_mod.render(cfg, comments=False)})
    last = report.history[-1]["smoothed_loss"] if report.history else []
    summary = [
        f"epochs={report.epochs_run}",
        f"iterations={report.iterations}",
        "final_smoothed_loss=" + ",".join(f"{v:.6f}" for v in last),
        f"params_sha256={params_digest(state.network)}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    (out / "train_runtime.txt").write_text(runtime_report({"epoch_seconds": report.seconds_per_epoch},
                                                          cost_report(spec)) + "\n")
    print("\n".join(summary))
    return EXIT_OK


def _network_from_checkpoint(path, cfg=None):
    state, spec, header = load_checkpoint(path)
    if cfg is not None:
        if spec != cfg.architecture():
            raise ConfigError(f"checkpoint {path} architecture does not match the config", "model")
        if header.get("sigma") is not None and header["sigma"] != cfg["noise.sigma"]:
            log.warning("certifying with sigma=%s but the checkpoint was trained with sigma=%s",
                        cfg["noise.sigma"], header["sigma"])
    net = state.network
    net.eval()
    return net, header


def cmd_certify(config_path, checkpoint_path, workers=None, out_path=None) -> int:
    cfg = config_mod.load_config(config_path)
    ccfg = cfg.certify_config()
    net, _ = _network_from_checkpoint(checkpoint_path, cfg)
    data = subsample_every(load_data(cfg, "test"), cfg["certify.stride"])
    if cfg["certify.max_examples"]:
        data = data.take(np.arange(min(len(data), cfg["certify.max_examples"])))
    workers = workers or cfg["certify.workers"]
    records = certify_dataset(net, data, ccfg, workers=workers)
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    tsv = Path(out_path) if out_path else out / "certify.tsv"
    write_records(tsv, records)
    curve = certified_curve(records)
    curve.write_csv(tsv.with_suffix(".curve.csv"))
    print(f"examples={len(records)} ACR={acr(records):.4f}")
    for r, a in zip(curve.radii, curve.accuracy):
        print(f"r={r:.2f}\tcertified_accuracy={a:.4f}")
    print(runtime_report({"certify_seconds": [r.seconds for r in records]}))
    return EXIT_OK


def cmd_analyze(records_path, checkpoint_path, mode, config_path=None, out_path=None, draws=None, bins=50,
                threshold=0.2, index=None) -> int:
    if mode not in ("gap-histogram", "easy-hard"):
        raise ConfigError(f"unknown analyze mode {mode!r}; use gap-histogram or easy-hard", "mode")
    records = read_records(records_path)
    if not records:
        raise InputError(f"{records_path} has no records")
    if config_path is not None:
        cfg = config_mod.load_config(config_path)
    else:
        header, _ = read_checkpoint_header(checkpoint_path)
        if "config" not in header:
            raise ConfigError("checkpoint carries no config; pass --config", "config")
        cfg = config_mod.parse_and_validate(header["config"])
    net, _ = _network_from_checkpoint(checkpoint_path, cfg)
    data = load_data(cfg, "test")
    sigma, seed = cfg["noise.sigma"], cfg["run.seed"]
    out_dir = Path(cfg["run.output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if mode == "gap-histogram":
        idx = records[0].idx if index is None else index
        if not 0 <= idx < len(data):
            raise InputError(f"example index {idx} outside the test set")
        n = draws or 10_000
        gaps = log_prob_gap_samples(net, data.x[idx], int(data.y[idx]), sigma, n, numpy_rng(seed, "gap", idx))
        counts, edges = np.histogram(gaps, bins=bins)
        path = Path(out_path) if out_path else out_dir / f"gap_histogram_{idx}.csv"
        write_histogram_csv(path, counts, edges)
        print(f"draws={n} misclassified_fraction={np.mean(gaps < 0):.4f} -> {path}")
    else:
        groups = easy_hard_report(net, records, data, threshold, sigma, cfg["noise.draws"], draws or 10, seed)
        path = Path(out_path) if out_path else out_dir / "easy_hard.csv"
        write_groups_csv(path, groups)
        for g in groups.values():
            print(f"{g.name}: count={g.count} mean_smoothed_loss={g.mean_loss:.4f} mean_draw_accuracy={g.mean_accuracy:.4f}")
    return EXIT_OK


def cmd_count(config_path=None, reference=False, kv=False) -> int:
    if reference:
        checks = [
            ("single", resnet110(1, 2), "params_total_multihead"),
            ("five_heads", resnet110(5, 2), "params_total_multihead"),
            ("five_dnns", resnet110(5, 0), "params_total_multihead"),
        ]
        status = EXIT_OK
        for name, spec, field in checks:
            rep = cost_report(spec)
            print(f"== resnet110 {name}")
            print(rep.as_kv() if kv else rep.as_text())
            got, want = getattr(rep, field), RESNET110_REFERENCE[name]
            if got != want:
                print(f"MISMATCH {name}: computed {got:,} expected {want:,}")
                status = EXIT_ASSERT
            else:
                print(f"{name}: {got:,} parameters (matches {want:,})")
        return status
    if config_path is None:
        raise ConfigError("count needs a config file or --resnet110-reference", "config")
    rep = cost_report(config_mod.load_config(config_path).architecture())
    print(rep.as_kv() if kv else rep.as_text())
    return EXIT_OK


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (section.key, default, meaning):\n" + config_mod.describe_keys()
    p = argparse.ArgumentParser(prog="spacte", description="Multi-head randomized-smoothing training and certification.",
                                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--print-defaults", action="store_true", help="print the full default config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="train a multi-head network", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("config")
    t.add_argument("--resume", help="checkpoint to resume from")

    c = sub.add_parser("certify", help="certify the configured test subsample")
    c.add_argument("config")
    c.add_argument("checkpoint")
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--out", help="TSV output path (default <output_dir>/certify.tsv)")

    a = sub.add_parser("analyze", help="log-probability gaps or easy/hard analysis")
    a.add_argument("records")
    a.add_argument("checkpoint")
    a.add_argument("--mode", required=True)
    a.add_argument("--config", help="override the config stored in the checkpoint")
    a.add_argument("--out")
    a.add_argument("--draws", type=int)
    a.add_argument("--bins", type=int, default=50)
    a.add_argument("--threshold", type=float, default=0.2, help="radius splitting easy from hard")
    a.add_argument("--index", type=int, help="example index for gap-histogram (default: first record)")

    n = sub.add_parser("count", help="parameter and FLOPs report")
    n.add_argument("config", nargs="?")
    n.add_argument("--resnet110-reference", action="store_true")
    n.add_argument("--kv", action="store_true", help="key=value output")

    sub.add_parser("print-defaults", help="print the full default config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.print_defaults or args.command == "print-defaults":
            sys.stdout.write(config_mod.render())
            return EXIT_OK
        if args.command == "train":
            return cmd_train(args.config, args.resume)
        if args.command == "certify":
            if args.workers is not None and args.workers < 1:
                raise ConfigError("--workers must be >= 1", "workers")
            return cmd_certify(args.config, args.checkpoint, args.workers, args.out)
        if args.command == "analyze":
            return cmd_analyze(args.records, args.checkpoint, args.mode, args.config, args.out, args.draws,
                               args.bins, args.threshold, args.index)
        if args.command == "count":
            return cmd_count(args.config, args.resnet110_reference, args.kv)
        parser.print_help()
        return EXIT_CONFIG
    except (ConfigError, InputError) as exc:
        key = getattr(exc, "key", None)
        print(f"config error{f' [{key}]' if key else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpacteError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
