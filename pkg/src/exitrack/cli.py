"""Command line: gen-data, train, calibrate, track, eval, pareto."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import config as config_mod
from .config import ConfigError, REUSE_MODES, RunConfig
from .data import DataError, read_sequence, write_dataset
from .evaluation import (difficulty_report, exit_depth_report, metric_report, pareto_front,
                         plot_front, read_points, write_points, write_rows)
from .inference import (ExitPolicy, calibrate, match_cost_random_policy, track_sequence,
                        write_calibration)
from .numerics.checkpoint import CheckpointError
from .objectives import TrainingDiverged, train
from .pipeline import (CONFIG, TRAIN_LOG, WEIGHTS, RunManifest, generate_dataset, load_model, load_split,
                       save_model, track_dataset, write_train_log)

log = logging.getLogger("exitrack")

ABLATIONS = {
    "reuse": ("exits", "reuse", REUSE_MODES),
    "distill": ("train", "distill", ("on", "off", "plain")),
    "strategy": ("train", "strategy", ("joint", "fixed-backbone", "one-by-one")),
}


class CliError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _out_dir(args, allow_existing: bool = True) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not allow_existing:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    return config_mod.load(args.config) if args.config else RunConfig().validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> list[Path]:
    cfg = _config(args)
    out = _out_dir(args, allow_existing=args.force)
    outputs = []
    for split, seqs in generate_dataset(cfg, args.seed).items():
        write_dataset(seqs, out / split)
        outputs.append(out / split)
        log.info("%s: %d sequences", split, len(seqs))
    return outputs


def cmd_train(args) -> list[Path]:
    cfg = _config(args)
    out = _out_dir(args)
    model, rows = train(load_split(args.data, "train"), cfg, args.seed, load_split(args.data, "val"))
    outputs = save_model(model, out)
    write_train_log(rows, model.num_exits, out / TRAIN_LOG)
    return outputs + [out / TRAIN_LOG]


def cmd_calibrate(args) -> list[Path]:
    model = load_model(args.ckpt)
    out = _out_dir(args)
    inf = model.cfg.infer
    cal = calibrate(model, load_split(args.data, "val"), inf.grid_step, inf.refine_step, inf.refine_radius,
                    inf.budget)
    write_calibration(cal, out / "calibration.csv")
    (out / "tau.txt").write_text(",".join(repr(t) for t in cal.best.tau) + "\n")
    log.info("chosen tau %s: IoU %.4f at %.0f FLOPs", cal.best.tau, cal.best.mean_iou, cal.best.mean_flops)
    return [out / "calibration.csv", out / "tau.txt"]


def _policy(args, model, seqs=None) -> ExitPolicy:
    K = model.num_exits
    tau = args.tau if args.tau is not None else tuple(model.cfg.infer.tau)
    if args.policy == "random" and args.probs is None:
        if seqs is None:
            raise CliError("random policy needs --probs")
        # compute-matched to the adaptive policy at the given thresholds
        adaptive = track_dataset(model, seqs, ExitPolicy.adaptive(tau), args.jobs, args.ckpt_dir)
        return match_cost_random_policy(adaptive, K, args.seed)
    try:
        return ExitPolicy.parse(args.policy, K, tau=tau, probs=args.probs, seed=args.seed)
    except ValueError as e:
        raise CliError(str(e)) from e


def cmd_track(args) -> list[Path]:
    model = load_model(args.ckpt)
    out = _out_dir(args)
    seq = read_sequence(args.seq)
    args.ckpt_dir = None
    res = track_sequence(model, seq, _policy(args, model))
    path = out / f"{seq.name}.csv"
    res.write_csv(path)
    log.info("%s: mean IoU %.4f, median %.2f ms/frame", seq.name, float(res.ious.mean()), res.median_latency_ms)
    return [path]


def _frame_rows(results) -> list[dict]:
    rows = []
    for r in results:
        for i in range(len(r)):
            x, y, w, h = (float(v) for v in r.boxes[i])
            rows.append({"sequence": r.name, "level": r.difficulty, "frame": i + 1, "x": x, "y": y, "w": w, "h": h,
                         "exit": int(r.exits[i]), "score": float(r.scores[i]), "iou": float(r.ious[i]),
                         "flops": int(r.flops[i]), "flag": int(r.flags[i])})
    return rows


def _eval_one(model, seqs, policy, args, label: str) -> tuple[list, object]:
    results = track_dataset(model, seqs, policy, args.jobs, args.ckpt_dir)
    return results, metric_report(results, model.num_exits, label)


def cmd_eval(args) -> list[Path]:
    out = _out_dir(args)
    if args.ablate:
        return _eval_ablation(args, out)
    model = load_model(args.ckpt)
    args.ckpt_dir = Path(args.ckpt) if Path(args.ckpt).is_dir() else Path(args.ckpt).parent
    seqs = load_split(args.data, args.split)
    policy = _policy(args, model, seqs)
    results, report = _eval_one(model, seqs, policy, args, policy.label())
    write_rows([report.as_row()], out / "metrics.csv")
    write_rows(_frame_rows(results), out / "frames.csv")
    depth = exit_depth_report(results)
    write_rows(depth.rows, out / "exit_depth.csv")
    write_rows(depth.attribute_rows, out / "attributes.csv")
    outputs = [out / n for n in ("metrics.csv", "frames.csv", "exit_depth.csv", "attributes.csv")]
    if args.difficulty:
        by_exit = {k: track_dataset(model, seqs, ExitPolicy.fixed(k, model.num_exits), args.jobs, args.ckpt_dir)
                   for k in range(1, model.num_exits + 1)}
        write_rows(difficulty_report(by_exit, sorted({s.difficulty for s in seqs})), out / "difficulty.csv")
        outputs.append(out / "difficulty.csv")
    log.info("%s: AUC %.2f, P@5px %.2f", report.label, report.auc, report.precision)
    return outputs


def _eval_ablation(args, out: Path) -> list[Path]:
    """Train each preset variant (cached under ``out/variants``) and evaluate every fixed exit."""
    section, key, values = ABLATIONS[args.ablate]
    base = _config(args)
    data = {s: load_split(args.data, s) for s in ("train", "val", args.split)}
    rows = []
    for value in values:
        try:
            cfg = config_mod.replace(base, **{section: {key: value}})
        except ConfigError as e:
            log.warning("skipping %s=%s: %s", key, value, e)
            continue
        variant_dir = out / "variants" / f"{key}-{value}"
        if (variant_dir / WEIGHTS).exists() and config_mod.load(variant_dir / CONFIG) == cfg:
            model = load_model(variant_dir)
        else:
            model, log_rows = train(data["train"], cfg, args.seed, data["val"])
            save_model(model, variant_dir)
            write_train_log(log_rows, model.num_exits, variant_dir / TRAIN_LOG)
        args.ckpt_dir = variant_dir
        for k in range(1, model.num_exits + 1):
            _, rep = _eval_one(model, data[args.split], ExitPolicy.fixed(k, model.num_exits), args, f"fixed:{k}")
            rows.append({"variant": f"{key}={value}", "exit": k, "mean_iou": rep.mean_iou, "auc": rep.auc,
                         "precision": rep.precision})
    write_rows(rows, out / "ablation.csv")
    return [out / "ablation.csv", out / "variants"]


def cmd_pareto(args) -> list[Path]:
    out = _out_dir(args)
    points = read_points(args.inp)
    front = pareto_front(points)
    write_points(front, out / "front.csv")
    outputs = [out / "front.csv"]
    if args.plot:
        plot_front(points, out / "front.svg")
        outputs.append(out / "front.svg")
    log.info("%d of %d points on the front", len(front), len(points))
    return outputs


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults to the built-in toy config)")
    common.add_argument("--seed", type=int, default=0, help="seed for data generation, init and sampling")
    common.add_argument("--out", required=True, help="output directory (receives a manifest.json)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="exitrack", description="Early-exit transformer tracker toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write train/val/test synthetic splits")
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--data", required=True, help="dataset root written by gen-data")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common], help="sweep exit thresholds on the validation split")
    c.add_argument("--ckpt", required=True, help="model directory or model.dytx")
    c.add_argument("--data", required=True, help="dataset root written by gen-data")
    c.set_defaults(func=cmd_calibrate)

    def policy_flags(sp):
        sp.add_argument("--policy", default="adaptive", help="fixed:k, adaptive or random")
        sp.add_argument("--tau", type=_floats, help="comma-separated thresholds for exits 1..K-1")
        sp.add_argument("--probs", type=_floats, help="exit distribution for the random policy")

    k = sub.add_parser("track", parents=[common], help="track one sequence, write per-frame CSV")
    k.add_argument("--ckpt", required=True, help="model directory or model.dytx")
    k.add_argument("--seq", required=True, help="sequence directory")
    policy_flags(k)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", parents=[common], help="metrics for a policy or an ablation preset")
    e.add_argument("--ckpt", help="model directory or model.dytx (not needed with --ablate)")
    e.add_argument("--data", required=True, help="dataset root written by gen-data")
    e.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to evaluate")
    e.add_argument("--ablate", choices=sorted(ABLATIONS), help="train and compare preset variants")
    e.add_argument("--difficulty", action="store_true", help="also write the per-level exit comparison")
    policy_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("pareto", parents=[common], help="non-dominated speed/precision points")
    r.add_argument("--in", dest="inp", required=True, help="CSV with speed, precision[, label]")
    r.add_argument("--plot", action="store_true", help="also write front.svg")
    r.set_defaults(func=cmd_pareto)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not args.ablate and not args.ckpt:
        parser.error("eval needs --ckpt unless --ablate is given")
    try:
        cfg = _config(args)
        if args.command in ("track", "calibrate") or (args.command == "eval" and not args.ablate):
            cfg = load_model(args.ckpt).cfg
        manifest = RunManifest.begin(cfg, args.seed, ["exitrack", *(sys.argv[1:] if argv is None else argv)])
        outputs = args.func(args)
        manifest.finish(args.out, outputs)
    except (CliError, ConfigError, DataError, CheckpointError, FileNotFoundError, TrainingDiverged,
            ValueError) as e:
        print(f"exitrack {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
