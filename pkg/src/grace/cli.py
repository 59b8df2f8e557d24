"""``grace`` command line: gen-data, train, sweep, hyper-sweep, audit.

Failures print one JSON object ``{"error": code, "message": ...}`` on stderr
and exit with status 1 (2 for usage errors, as argparse does).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .feature_context import MASK_MODES
from .gcn import TrainingError
from .harness import (
    ABLATIONS,
    FULL,
    HYPER_AXES,
    ExperimentConfig,
    HarnessError,
    cmd_audit,
    cmd_hyper_sweep,
    cmd_sweep,
    cmd_train,
    gen_data,
)
from .numerics import ConvergenceError


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ablations(text: str) -> list[str]:
    """``all``, a configuration name, or ingredients to drop (``glspr``, ``sc``)."""
    if text == "all":
        return list(ABLATIONS)
    if text in ABLATIONS:
        return [text]
    drop = {t.strip() for t in text.split(",") if t.strip()}
    if not drop <= {"glspr", "sc"}:
        raise argparse.ArgumentTypeError(f"unknown ablation {text!r}")
    name = "+".join(["gcn"] + [k for k in ("glspr", "sc") if k not in drop])
    return [name]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("grace-run"), help="run directory")
    common.add_argument("--m-r", type=_floats, dest="m_r", help="comma-separated masking ratios")
    common.add_argument("--mask-mode", choices=MASK_MODES, dest="mask_mode", help="restrict to one mask mode")
    common.add_argument("--ablate", type=_ablations,
                        help="'all', a configuration name (" + ", ".join(ABLATIONS) + ") or ingredients to drop")

    p = argparse.ArgumentParser(prog="grace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a dataset manifest")
    sub.add_parser("train", parents=[common], help="train GRACE heads and the baseline")
    sub.add_parser("sweep", parents=[common], help="masking-ratio robustness sweep")
    hs = sub.add_parser("hyper-sweep", parents=[common], help="train and evaluate along one hyperparameter")
    hs.add_argument("--axis", required=True, help="one of " + ", ".join(HYPER_AXES))
    hs.add_argument("--values", required=True, type=_floats)
    au = sub.add_parser("audit", parents=[common], help="spectral certificate and contraction audit")
    au.add_argument("--checkpoint", type=Path)
    au.add_argument("--weight-scale", type=float, default=1.0, dest="weight_scale")
    au.add_argument("--iters", type=int, default=500)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.m_r is not None:
        cfg = replace(cfg, eval_m_r_list=args.m_r)
    if args.mask_mode is not None:
        cfg = replace(cfg, modes=[args.mask_mode], generator=replace(cfg.generator, mask_mode=args.mask_mode))
    if args.ablate is not None:
        cfg = replace(cfg, ablations=args.ablate)
    return cfg


def run(args) -> dict:
    cfg = resolve_config(args)
    out = args.out
    if args.command == "gen-data":
        m = gen_data(cfg, out)
        return {"manifest": str(out / "manifest.json"), "samples": len(m.entries)}
    if args.command == "train":
        s = cmd_train(cfg, out)
        return {name: v["test"]["auc"] for name, v in s["models"].items()}
    if args.command == "sweep":
        rep = cmd_sweep(cfg, out)
        return {"rows": len(rep["rows"]), "trend": rep["trend"]}
    if args.command == "hyper-sweep":
        values = [int(v) if args.axis != "alpha" and float(v).is_integer() else v for v in args.values]
        rows = cmd_hyper_sweep(cfg, out, args.axis, values)
        return {"rows": len(rows), "csv": str(out / f"hyper_{args.axis}.csv")}
    if args.command == "audit":
        rep = cmd_audit(cfg, out, args.checkpoint, args.weight_scale, args.iters)
        return {"interval_ok": rep["certificate"]["interval_ok"], "L_f": rep["assumptions"]["L_f"]}
    raise HarnessError("usage", f"unknown command {args.command}")


def _fail(code: str, message: str) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except HarnessError as exc:
        return _fail(exc.code, str(exc))
    except TrainingError as exc:
        return _fail("non_finite_loss", str(exc))
    except ConvergenceError as exc:
        return _fail("eigensolver_budget", str(exc))
    except OSError as exc:
        return _fail("io_error", str(exc))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
