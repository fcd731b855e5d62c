"""Command-line surface.

Subcommands: skeleton, datagen, train, reconstruct, evaluate, sweep,
bench. Every command prints a short human summary and, where an --out
is given, writes a versioned machine-readable artifact (dataset,
checkpoint, pose stream, or JSON report). Exit codes: 0 success,
1 runtime failure (category printed to stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import diffusion as df
from . import features as ft
from . import inference as inf
from . import metrics as mt
from .kinematics import default_tree, load_skeleton, SkeletonError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imufill",
                                description="sparse-sensor motion reconstruction toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    sk = sub.add_parser("skeleton", help="skeleton file tools")
    sksub = sk.add_subparsers(dest="subcmd", required=True)
    skv = sksub.add_parser("validate", help="check a skeleton definition file")
    skv.add_argument("file")

    dgp = sub.add_parser("datagen", help="generate a synthetic training corpus")
    dgp.add_argument("--kinds", default="gait,random_smooth,stationary,jump")
    dgp.add_argument("--trials", type=int, default=20)
    dgp.add_argument("--seconds", type=float, default=30.0)
    dgp.add_argument("--seed", type=int, default=0)
    dgp.add_argument("--noise-std", type=float, default=0.0,
                     help="optional Gaussian acceleration noise, m/s^2")
    dgp.add_argument("--out", required=True)
    dgp.add_argument("--export-text", default=None, help="also write a lossless text mirror here")

    tr = sub.add_parser("train", help="train a denoiser on a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--size", default="2/64/128", help="layers/width/feedforward")
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--diffusion-steps", type=int, default=1000, metavar="T")
    tr.add_argument("--holdout", type=int, default=0, help="trials held out for eval logging")
    tr.add_argument("--out", required=True)

    rc = sub.add_parser("reconstruct", help="autoregressive reconstruction")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--config", required=True,
                    help="comma-separated site list, optionally +insoles; or all13/none")
    rc.add_argument("--spread", default="30", help="step count, preset name (10A..10D), or explicit list")
    rc.add_argument("--in", dest="input", required=True,
                    help="dataset (.imfd, with --trial) or a 60 Hz imu-stream .jsonl")
    rc.add_argument("--trial", default=None, help="trial id when --in is a dataset")
    rc.add_argument("--height", type=float, default=None,
                    help="subject height, required for stream input")
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--variant", choices=("renoise", "ddim"), default="renoise")
    rc.add_argument("--no-root-correction", action="store_true")
    rc.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    ev.add_argument("--gt", required=True, help="dataset file")
    ev.add_argument("--trial", default=None)
    ev.add_argument("--rec", required=True, help="pose-stream .jsonl")
    ev.add_argument("--out", default=None)

    sw = sub.add_parser("sweep", help="evaluate many sensor configurations")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--data", required=True)
    sw.add_argument("--configs", required=True,
                    help="semicolon-separated config specs, e.g. 'pelvis+head;shank_l+shank_r'")
    sw.add_argument("--objectives", default="GA,legsLA,backLA,RE10")
    sw.add_argument("--spread", default="30")
    sw.add_argument("--trials", type=int, default=0, help="limit number of trials (0 = all)")
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--out", required=True)

    bn = sub.add_parser("bench", help="per-frame latency of the reconstruction loop")
    bn.add_argument("--ckpt", required=True)
    bn.add_argument("--spread", default="30")
    bn.add_argument("--frames", type=int, default=200)
    bn.add_argument("--config", default="pelvis,head,wrist_l,wrist_r,shank_l,shank_r")
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return {
            "skeleton": cmd_skeleton,
            "datagen": cmd_datagen,
            "train": cmd_train,
            "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate,
            "sweep": cmd_sweep,
            "bench": cmd_bench,
        }[args.cmd](args)
    except (dg.GenerationError, dg.DatasetError, df.CheckpointError, df.ScheduleError,
            ft.FeatureError, inf.SpreadError, inf.InferenceError, mt.MetricsError,
            SkeletonError, FileNotFoundError) as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return 1
    except df.TrainingDiverged as e:
        print(f"error (TrainingDiverged): {e}", file=sys.stderr)
        return 1


def cmd_skeleton(args) -> int:
    tree = load_skeleton(args.file)
    print(f"ok: {args.file}: {tree.n_segments} segments, "
          f"{len(tree.site_names)} sites, {len(tree.contact_names)} contact points, "
          f"reference height {tree.reference_height:.2f} m")
    return 0


def cmd_datagen(args) -> int:
    tree = default_tree()
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    t0 = time.perf_counter()
    trials = dg.generate_corpus(tree, n_trials=args.trials, seconds=args.seconds,
                                seed=args.seed, kinds=kinds, noise_std=args.noise_std)
    dg.save_dataset(trials, tree, args.out)
    if args.export_text:
        dg.export_dataset_text(trials, args.export_text)
    dur = time.perf_counter() - t0
    total_s = sum(t.motion.duration_s for t in trials)
    print(f"wrote {len(trials)} trials ({total_s:.0f} s of motion) to {args.out} "
          f"in {dur:.1f} s; kinds: {', '.join(kinds)}")
    return 0


def cmd_train(args) -> int:
    tree = default_tree()
    trials = dg.load_dataset(args.data)
    holdout = []
    if args.holdout > 0:
        holdout, trials = trials[: args.holdout], trials[args.holdout:]
    if not trials:
        raise dg.DatasetError("no trials left to train on")
    dg.compute_trial_weights(trials, tree)
    cfg = df.TrainConfig(model=df.DenoiserConfig.parse(args.size), steps=args.steps,
                         batch=args.batch, lr=args.lr, seed=args.seed, T=args.diffusion_steps)
    sampler = df.corpus_sampler(trials, tree, seed=args.seed)
    eval_windows = None
    if holdout:
        ws, hs = [], []
        for t in holdout:
            f = t.features(tree)
            for s in range(0, max(f.shape[0] - ft.WINDOW_LEN, 1), ft.WINDOW_LEN):
                ws.append(f[s:s + ft.WINDOW_LEN])
                hs.append(t.motion.height)
        eval_windows = (np.stack(ws), np.array(hs))
    result = df.train(sampler, tree, cfg, eval_windows=eval_windows,
                      eval_every=max(args.steps // 10, 1) if holdout else 0,
                      log=lambda s: print(s, flush=True))
    df.save_checkpoint(args.out, cfg.model, result.params, result.schedule, tree)
    print(f"saved checkpoint {args.out} ({cfg.model.label()}, "
          f"{df.param_count(cfg.model):,} parameters, final loss {result.losses[-1].total:.4f})")
    if result.eval_curve:
        print("holdout simple-loss curve: " + ", ".join(f"{v:.1f}" for v in result.eval_curve))
    return 0


def _load_model(path, tree):
    cfg, params, schedule = df.load_checkpoint(path, tree)
    return cfg, params, schedule


def cmd_reconstruct(args) -> int:
    tree = default_tree()
    cfg, params, schedule = _load_model(args.ckpt, tree)
    config = ft.SensorConfig.parse(args.config)
    spread = inf.StepSpread.parse(args.spread, schedule.T)
    src = Path(args.input)
    if src.suffix == ".imfd" or _looks_like_dataset(src):
        trials = dg.load_dataset(src)
        trial = _pick_trial(trials, args.trial)
        height = args.height or trial.motion.height
        recon = inf.Reconstructor(cfg, params, schedule, tree, config, height=height,
                                  spread=spread, seed=args.seed, variant=args.variant,
                                  root_correction=not args.no_root_correction)
        recon.cold_start()
        results = [recon.step(m) for m in inf.measurements_from_trial(trial, config)]
    else:
        if args.height is None:
            raise inf.InferenceError("--height is required for stream input")
        frames = inf.parse_stream_file(src)
        ing = inf.StreamIngestor()
        measurements = []
        for fr in frames:
            measurements.extend(ing.push(fr))
        measurements.extend(ing.finish())
        recon = inf.Reconstructor(cfg, params, schedule, tree, config, height=args.height,
                                  spread=spread, seed=args.seed, variant=args.variant,
                                  root_correction=not args.no_root_correction)
        recon.cold_start()
        results = [recon.step(m.measurement) for m in measurements]
    inf.write_pose_stream(args.out, tree, results)
    lat = recon.latency_percentiles()
    print(f"reconstructed {len(results)} frames -> {args.out} "
          f"(config {config.label()}, {len(spread)} steps, "
          f"latency p50 {lat['p50']:.1f} ms / p95 {lat['p95']:.1f} ms)")
    return 0


def _looks_like_dataset(path: Path) -> bool:
    try:
        with open(path, "rb") as f:
            return f.read(4) == dg.DATASET_MAGIC
    except OSError:
        return False


def _pick_trial(trials, trial_id):
    if trial_id is None:
        if len(trials) == 1:
            return trials[0]
        raise dg.DatasetError(f"--trial required; dataset has {len(trials)} trials: "
                              + ", ".join(t.trial_id for t in trials[:10]))
    for t in trials:
        if t.trial_id == trial_id:
            return t
    raise dg.DatasetError(f"trial {trial_id!r} not found")


def cmd_evaluate(args) -> int:
    tree = default_tree()
    trials = dg.load_dataset(args.gt)
    trial = _pick_trial(trials, args.trial)
    rot, root, contacts = inf.read_pose_stream(args.rec)
    rec = dg.MotionSequence(20.0, rot, root, trial.motion.height, trial.motion.mass,
                            trial.trial_id)
    rec = mt.align_at_start(trial.motion, rec)
    report = mt.compute_metrics(trial.motion, rec, tree)
    d = report.as_dict()
    print(f"trial {trial.trial_id}: "
          f"LA {d['LA_deg']:.2f} deg, GA {d['GA_deg']:.2f} deg, JPE {d['JPE_cm']:.2f} cm, "
          f"jitter {d['jitter']:.2f}, RE2 {_fmt(d['RE2_m'])}, RE5 {_fmt(d['RE5_m'])}, RE10 {_fmt(d['RE10_m'])}")
    if args.out:
        mt.save_report(args.out, {"kind": "evaluate", "metrics": d})
        print(f"report -> {args.out}")
    return 0


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f} m"


def cmd_sweep(args) -> int:
    tree = default_tree()
    cfg, params, schedule = _load_model(args.ckpt, tree)
    trials = dg.load_dataset(args.data)
    if args.trials > 0:
        trials = trials[: args.trials]
    configs = [ft.SensorConfig.parse(s) for s in args.configs.split(";") if s.strip()]
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    spread = inf.StepSpread.parse(args.spread, schedule.T)
    result = mt.sweep_configs(cfg, params, schedule, tree, trials, configs,
                              objectives, spread, seed=args.seed)
    mt.save_report(args.out, result.as_dict())
    print(f"swept {len(configs)} configs over {len(trials)} trials -> {args.out}")
    for obj in objectives:
        ranked = result.rankings[obj]
        best = result.entries[ranked[0]].aggregate[mt._agg_key(obj)]["mean"]
        print(f"  best {obj}: {ranked[0]} ({best:.3f})")
    return 0


def cmd_bench(args) -> int:
    tree = default_tree()
    cfg, params, schedule = _load_model(args.ckpt, tree)
    config = ft.SensorConfig.parse(args.config)
    spread = inf.StepSpread.parse(args.spread, schedule.T)
    m = dg.generate_motion("gait", seed=123, duration_s=max(args.frames / 20.0 + 1, 2.0),
                           speed=1.2, trial_id="bench")
    trial = dg.make_trial(m, tree)
    recon = inf.Reconstructor(cfg, params, schedule, tree, config,
                              height=trial.motion.height, spread=spread, seed=args.seed)
    recon.cold_start()
    meas = list(inf.measurements_from_trial(trial, config))
    n = min(args.frames, len(meas))
    for k in range(n):
        recon.step(meas[k])
    lat = recon.latency_percentiles()
    payload = {
        "kind": "bench", "model": cfg.label(), "params": df.param_count(cfg),
        "spread_steps": len(spread), "frames": n,
        "p50_ms": lat["p50"], "p95_ms": lat["p95"],
        "budget_ms": 50.0,
    }
    print(f"bench {cfg.label()} ({df.param_count(cfg):,} params), {len(spread)}-step spread, "
          f"{n} frames: p50 {lat['p50']:.1f} ms, p95 {lat['p95']:.1f} ms "
          f"({'within' if lat['p95'] < 50.0 else 'OVER'} the 50 ms budget)")
    if args.out:
        mt.save_report(args.out, payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
