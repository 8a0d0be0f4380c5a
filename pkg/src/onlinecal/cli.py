"""Command-line entry point: gen -> train -> calibrate -> run / sweep -> report.

Exit codes: 0 success, 1 usage error, 2 input/format error, 3 numeric failure,
4 calibration certified no threshold (results are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import artifacts
from .calibration import ThresholdGrid, calibrate_paths
from .errors import ContractError, FormatError, NumericError
from .probe import ProbeConfig, Variant
from .runtime import (
    LossMode, RiskSpec, SweepRow, TraceRecord, compute_paths, dump_trajectory_trace, evaluate_paths,
)
from .synth import SynthConfig, generate_dataset, reference_config, with_ood_shift
from .trainer import InnerPolicy, LabelMode, Mode, TrainConfig, train, train_static

log = logging.getLogger("onlinecal")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_NO_THRESHOLD = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split(text: str) -> List[int]:
    try:
        parts = [int(p) for p in text.split(":")]
    except ValueError:
        raise UsageError(f"bad --split {text!r}, expected a:b:c") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) == 0:
        raise UsageError(f"bad --split {text!r}, expected three non-negative integers")
    return parts


def split_sizes(count: int, ratio: List[int]) -> List[int]:
    total = sum(ratio)
    sizes = [count * r // total for r in ratio[:2]]
    return sizes + [count - sum(sizes)]


def _grid(text: Optional[str], cal_paths=None) -> ThresholdGrid:
    if text is None:
        return ThresholdGrid.uniform()
    if text.startswith("quantile:"):
        m = int(text.split(":", 1)[1])
        return ThresholdGrid.from_scores(cal_paths.smoothed, m)
    if "," in text:
        return ThresholdGrid(tuple(float(x) for x in text.split(",")))
    return ThresholdGrid.uniform(int(text))


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ORCA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"ORCA_SEED={env!r} is not an integer") from None
    return 0


def _executor(args):
    return ThreadPoolExecutor(max_workers=args.threads) if args.threads > 1 else nullcontext(None)


def _label_mode(doc: dict) -> LabelMode:
    return LabelMode(Mode(doc.get("mode", "supervised")), doc.get("cumulative", True))


# --- subcommands ------------------------------------------------------------

def _synth_overrides(cfg: SynthConfig, args) -> SynthConfig:
    doc = cfg.to_dict()
    for flag, key in (("drift", "drift_coeff"), ("noise", "noise_scale"), ("churn", "answer_churn"),
                      ("token_mean", "token_mean")):
        if getattr(args, flag) is not None:
            doc[key] = getattr(args, flag)
    if args.p_neg is not None:
        doc["transition"] = {**doc["transition"], "p_neg": args.p_neg}
    if args.lengths is not None:
        try:
            lo, hi = (int(x) for x in args.lengths.split(":"))
        except ValueError:
            raise UsageError(f"bad --lengths {args.lengths!r}, expected min:max") from None
        doc["length_range"] = (lo, hi)
    return SynthConfig.from_dict(doc)


def cmd_gen(args) -> int:
    seed = _seed(args)
    if args.config:
        cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": seed})
    else:
        cfg = reference_config(seed)
    cfg = _synth_overrides(cfg, args)
    if args.shift:
        cfg = with_ood_shift(cfg)
    ratio = _split(args.split)
    data = generate_dataset(cfg, args.count)
    perm = np.random.default_rng(seed).permutation(args.count)
    sizes = split_sizes(args.count, ratio)
    ext = ".jsonl" if args.format == "text" else ".bin"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = 0
    for name, size in zip(("train", "cal", "test"), sizes):
        part = [data[i] for i in sorted(perm[start : start + size])]
        start += size
        artifacts.write_trajectories(out / f"{args.prefix}{name}{ext}", part)
        log.info("wrote %d trajectories to %s", size, out / f"{args.prefix}{name}{ext}")
    (out / f"{args.prefix}config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    data = artifacts.read_trajectories(args.data)
    if not data:
        raise ContractError(f"{args.data} holds no trajectories")
    variant = Variant(args.variant.replace("-", "_"))
    probe = ProbeConfig(
        variant, data[0].dim, None if variant is Variant.NO_QK else args.dh,
        args.window, args.learn_eta,
    )
    trunc = "full" if args.truncation == "full" else int(args.truncation)
    tcfg = TrainConfig(args.lr, args.clip, args.epochs, trunc, InnerPolicy(args.inner_policy.replace("-", "_")),
                       _seed(args), args.batch)
    mode = LabelMode(Mode(args.mode))
    reports = []
    if args.static:
        slow = train_static(data, probe, tcfg, mode)
    else:
        slow, reports, _ = train(data, probe, tcfg, mode, eta=args.eta)
    train_doc = {
        "outer_lr": tcfg.outer_lr, "grad_clip": tcfg.grad_clip, "epochs": tcfg.epochs_for(probe),
        "truncation": tcfg.truncation, "inner_label_policy": tcfg.inner_label_policy.value,
        "seed": tcfg.seed, "batch": tcfg.batch,
    }
    art = artifacts.ModelArtifact(probe, slow, train_doc, {"mode": mode.mode.value, "cumulative": mode.cumulative},
                                  static=args.static)
    artifacts.write_model(args.out, art)
    if args.epochs_csv:
        artifacts.write_csv(args.epochs_csv, artifacts.EPOCH_COLUMNS, [[r.epoch, r.mean_loss] for r in reports])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    art = artifacts.read_model(args.model)
    cal = artifacts.read_trajectories(args.cal)
    spec = RiskSpec(args.delta, args.epsilon, args.budget, LossMode(args.loss_mode.replace("-", "_")))
    with _executor(args) as ex:
        paths = compute_paths(art.slow, art.probe, cal, spec.budget, _label_mode(art.label_mode), ex)
    res = calibrate_paths(paths, _grid(args.grid, paths), spec)
    artifacts.write_calibration(args.out, res)
    if args.csv:
        artifacts.emit_report(res, args.csv, "csv")
    if res.lambda_star is None:
        print(f"onlinecal: notice[no-threshold]: n={res.n} delta={spec.delta} epsilon={spec.epsilon} "
              f"first_pvalue={res.records[0].pvalue:.6g}", file=sys.stderr)
        return EXIT_NO_THRESHOLD
    log.info("selected threshold %.4f", res.lambda_star)
    return EXIT_OK


def cmd_run(args) -> int:
    art = artifacts.read_model(args.model)
    data = artifacts.read_trajectories(args.data)
    mode = _label_mode(art.label_mode)
    if args.calib:
        res = artifacts.read_calibration(args.calib)
        lam, spec = res.lambda_star, res.spec
    else:
        lam = args.threshold
        spec = RiskSpec(args.delta, args.epsilon, None, LossMode.EMITTED_INCORRECT)
    with _executor(args) as ex:
        paths = compute_paths(art.slow, art.probe, data, spec.budget, mode, ex)
    report = evaluate_paths(paths, lam, spec)
    artifacts.emit_report(report, args.out, "csv")
    if args.per_problem:
        artifacts.write_csv(args.per_problem, ["id", "stop_step", "length", "savings", "loss"], [
            [tr.id, int(s), int(n), float(v), int(b)]
            for tr, s, n, v, b in zip(data, report.stop_steps, paths.lengths, report.per_problem_savings, report.loss_bits)
        ])
    if args.svg:
        artifacts.emit_report(report, args.svg, "svg")
    if args.traces:
        tdir = Path(args.traces)
        tdir.mkdir(parents=True, exist_ok=True)
        for tr in data[: args.max_traces]:
            recs = list(dump_trajectory_trace(art.slow, art.probe, lam, tr, mode))
            artifacts.emit_report(recs, tdir / f"trace_{tr.id}.csv", "csv")
    return EXIT_OK


def cmd_sweep(args) -> int:
    art = artifacts.read_model(args.model)
    cal = artifacts.read_trajectories(args.cal)
    test = artifacts.read_trajectories(args.test)
    mode = _label_mode(art.label_mode)
    try:
        deltas = sorted(float(x) for x in args.deltas.split(","))
    except ValueError:
        raise UsageError(f"bad --deltas {args.deltas!r}") from None
    loss_mode = LossMode(args.loss_mode.replace("-", "_"))
    with _executor(args) as ex:
        cal_paths = compute_paths(art.slow, art.probe, cal, args.budget, mode, ex)
        test_paths = compute_paths(art.slow, art.probe, test, args.budget, mode, ex)
    grid = _grid(args.grid, cal_paths)
    rows = []
    for d in deltas:
        spec = RiskSpec(d, args.epsilon, args.budget, loss_mode)
        res = calibrate_paths(cal_paths, grid, spec)
        rep = evaluate_paths(test_paths, res.lambda_star, spec)
        rows.append(SweepRow(d, res.lambda_star, rep.savings_step, rep.savings_token, rep.error_rate, rep.n))
    artifacts.emit_report(rows, args.out, "csv")
    if args.svg:
        artifacts.emit_report(rows, args.svg, "svg")
    return EXIT_OK


def _opt_float(v: str):
    return None if v == "" else float(v)


def cmd_report(args) -> int:
    src = Path(args.input)
    if src.suffix == ".json":
        res = artifacts.read_calibration(src)
        artifacts.emit_report(res, args.out, "svg")
        return EXIT_OK
    rows = artifacts.read_csv(src)
    if not rows:
        raise FormatError(f"{src}: no data rows")
    cols = set(rows[0])
    if cols == set(artifacts.SWEEP_COLUMNS):
        sweep = [SweepRow(float(r["delta"]), _opt_float(r["lambda_star"]), float(r["savings_step"]),
                          _opt_float(r["savings_token"]), float(r["error_rate"]), int(r["n"])) for r in rows]
        artifacts.emit_report(sweep, args.out, "svg")
    elif cols == set(artifacts.TRACE_COLUMNS):
        recs = [TraceRecord(int(r["step"]), float(r["raw"]), float(r["smoothed"]), r["stopped"] == "1",
                            None if r["first_correct"] == "" else int(r["first_correct"])) for r in rows]
        artifacts.emit_report(recs, args.out, "svg", threshold=args.threshold)
    else:
        raise FormatError(f"{src}: unrecognised CSV columns {sorted(cols)}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="onlinecal", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="64-bit seed (default: $ORCA_SEED or 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for scoring")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic train/cal/test trajectory files")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", default="3:1:1")
    g.add_argument("--out", default=".")
    g.add_argument("--prefix", default="")
    g.add_argument("--format", choices=["binary", "text"], default="binary")
    g.add_argument("--config", help="SynthConfig JSON (default: reference world)")
    g.add_argument("--shift", action="store_true", help="apply the reference out-of-distribution shift")
    g.add_argument("--drift", type=float, help="AR(1) noise coefficient")
    g.add_argument("--noise", type=float, help="noise scale")
    g.add_argument("--p-neg", type=float, help="probability of no transition")
    g.add_argument("--churn", type=float, help="pre-transition answer churn probability")
    g.add_argument("--token-mean", type=float)
    g.add_argument("--lengths", help="trajectory length range min:max")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="meta-train (or --static train) a probe")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["no-qk", "qk", "shared-qk"], default="no-qk")
    t.add_argument("--dh", type=int, default=128)
    t.add_argument("--mode", choices=["supervised", "consistent"], default="supervised")
    t.add_argument("--inner-policy", choices=["pseudo-zero", "true-labels"], default="pseudo-zero")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--clip", type=float, default=1.0)
    t.add_argument("--eta", type=float, default=0.01)
    t.add_argument("--learn-eta", action="store_true")
    t.add_argument("--truncation", default="full")
    t.add_argument("--window", type=int, default=10)
    t.add_argument("--static", action="store_true", help="standard training, no inner updates")
    t.add_argument("--epochs-csv")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="Learn-then-Test threshold calibration")
    c.add_argument("--model", required=True)
    c.add_argument("--cal", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--delta", type=float, default=0.1)
    c.add_argument("--epsilon", type=float, default=0.05)
    c.add_argument("--grid", help="m (uniform), 'quantile:m', or comma-separated descending thresholds")
    c.add_argument("--loss-mode", choices=["emitted-incorrect", "early-stop-only"], default="emitted-incorrect")
    c.add_argument("--budget", type=int, default=None)
    c.add_argument("--csv", help="also write the per-threshold audit as CSV")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="deploy a calibrated probe on a trajectory file")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--calib")
    r.add_argument("--threshold", type=float, default=None, help="fixed threshold when --calib is absent")
    r.add_argument("--delta", type=float, default=0.1)
    r.add_argument("--epsilon", type=float, default=0.05)
    r.add_argument("--out", required=True)
    r.add_argument("--per-problem")
    r.add_argument("--svg")
    r.add_argument("--traces")
    r.add_argument("--max-traces", type=int, default=10)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="calibrate and evaluate over several risk levels")
    s.add_argument("--model", required=True)
    s.add_argument("--cal", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--deltas", default="0.05,0.1,0.15,0.2")
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--grid")
    s.add_argument("--loss-mode", choices=["emitted-incorrect", "early-stop-only"], default="emitted-incorrect")
    s.add_argument("--budget", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="render stored sweep/trace CSV or calibration JSON as SVG")
    rp.add_argument("--input", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--threshold", type=float, default=None)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"onlinecal: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"onlinecal: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"onlinecal: error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ContractError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"onlinecal: error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
