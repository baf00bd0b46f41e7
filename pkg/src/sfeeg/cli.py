"""Command line entry point: ``sfeeg <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .adapt import AdaptationState, DlarConfig, LclConfig, adapt, format_log_record, log_header
from .data import FeatureSet, generate_synthetic, load_windows, write_features, write_windows
from .errors import SfeegError, StageError
from .features import extract
from .metrics import emit_reports, evaluate, format_report
from .model import load_checkpoint, save_checkpoint
from .pipeline import (ABLATIONS, PipelineConfig, load_config, load_domain, parse_config_text,
                       pretrain_source, run_inference, run_pipeline, write_inference_csv)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; flags given here override it")
    g = p.add_argument_group("configuration overrides")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kwargs = {"dest": f.name, "default": None}
        if f.name == "ablation":
            kwargs["choices"] = ABLATIONS
        elif f.name == "feature_kind":
            kwargs["choices"] = ("psd", "de")
        g.add_argument(flag, **kwargs)


def config_from_args(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    lines = [f"{f.name} = {getattr(args, f.name)}" for f in fields(PipelineConfig)
             if getattr(args, f.name, None) is not None]
    if lines:
        cfg = parse_config_text("\n".join(lines), cfg)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfeeg", description="Source-free EEG emotion adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic source/target pair as SFEEG window files")
    _add_config_flags(p)

    p = sub.add_parser("extract", help="SFEEG windows -> 160-feature CSV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--feature-kind", choices=("psd", "de"), default="psd")

    p = sub.add_parser("pretrain", help="train on labeled source data")
    _add_config_flags(p)

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to unlabeled target data")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p)

    p = sub.add_parser("infer", help="gated test-time-augmented inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", required=True)
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="metrics from an inference CSV")
    p.add_argument("inference")
    p.add_argument("--out-dir", default=None)

    p = sub.add_parser("pipeline", help="pretrain, adapt, infer and evaluate in one run")
    _add_config_flags(p)
    return parser


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective").write_text(cfg.to_text())
    return out


def cmd_synth(args):
    cfg = config_from_args(args)
    out = _out(cfg)
    src, tgt = generate_synthetic(cfg.synth_config())
    write_windows(src, out / "source.sfeeg")
    write_windows(tgt, out / "target.sfeeg")
    print(f"wrote {len(src)} source and {len(tgt)} target windows to {out}")


def cmd_extract(args):
    ds = load_windows(args.input)
    write_features(FeatureSet(extract(ds.data, ds.rate, args.feature_kind), ds.subject_ids, ds.labels), args.output)
    print(f"wrote {len(ds)} feature rows to {args.output}")


def _need(path, what):
    if not path:
        raise SfeegError(f"--{what} is required")
    return path


def cmd_pretrain(args):
    cfg = config_from_args(args)
    out = _out(cfg)
    source = load_domain(_need(cfg.source, "source"), cfg.feature_kind, "source")
    lines = []
    net, _ = pretrain_source(source, cfg, log=lines.append)
    save_checkpoint(net, out / "pretrained.ckpt")
    (out / "pretrain.log").write_text("".join(line + "\n" for line in lines))
    print(f"wrote {out / 'pretrained.ckpt'}")


def cmd_adapt(args):
    cfg = config_from_args(args)
    out = _out(cfg)
    target = load_domain(_need(cfg.target, "target"), cfg.feature_kind, "target")
    dlar = cfg.dlar_config() if cfg.runs_dlar else DlarConfig(epochs=0)
    lcl = cfg.lcl_config() if cfg.runs_lcl else LclConfig(epochs=0, k=cfg.knn_k)
    lines = []
    net, state, _ = adapt(args.checkpoint, target.features, dlar, lcl,
                          log=lambda rec: lines.append(format_log_record(rec)),
                          recalibrate=cfg.bn_recalibration and cfg.adapts)
    save_checkpoint(net, out / "adapted.ckpt")
    state.save(out / "adaptation_state.json")
    (out / "adaptation.log").write_text("".join(line + "\n" for line in [log_header(), *lines]))
    print(f"wrote {out / 'adapted.ckpt'} and {out / 'adaptation_state.json'}")


def cmd_infer(args):
    cfg = config_from_args(args)
    out = _out(cfg)
    target = load_domain(_need(cfg.target, "target"), cfg.feature_kind, "target")
    net = load_checkpoint(args.checkpoint)
    state = AdaptationState.load(args.state)
    records, _ = run_inference(net, state, target, cfg)
    write_inference_csv(records, target, out / "inference.csv")
    rate = np.mean([r.tta_invoked for r in records]) if records else 0.0
    print(f"wrote {len(records)} predictions to {out / 'inference.csv'} (tta rate {rate:.4f})")


def cmd_evaluate(args):
    with open(args.inference, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if any(r["true_label"] == "" for r in rows):
        raise SfeegError("inference file has samples without true labels")
    report = evaluate([int(r["final"]) for r in rows], [int(r["true_label"]) for r in rows],
                      [r["subject_id"] for r in rows], [r["tta_invoked"] == "1" for r in rows])
    if args.out_dir:
        emit_reports(report, args.out_dir)
    sys.stdout.write(format_report(report))


def cmd_pipeline(args):
    cfg = config_from_args(args)
    result = run_pipeline(cfg)
    if result.report is not None:
        sys.stdout.write(format_report(result.report))
    print(f"artifacts in {cfg.out_dir}")


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "infer": cmd_infer, "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SfeegError, OSError, ValueError) as exc:
        print(f"error: {StageError(args.command, exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
