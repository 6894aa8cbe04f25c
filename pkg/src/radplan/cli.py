"""Command-line interface: gen-data, build-db, train, plan, eval, ablate, sweep, plot-data."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import nets
from .diffusion import ReturnGuide, make_schedule, train_denoiser, train_return_guide
from .envs import (
    LinewalkScenario,
    StitchScenario,
    gen_linewalk_dataset,
    gen_stitching_dataset,
    make_env,
)
from .experiment import (
    ExperimentConfig,
    PipelineError,
    emit_plot_data,
    read_csv,
    run_ablations,
    run_pipeline,
    run_sweep,
)
from .planner import Planner, PlannerConfig, ablation_variant, run_episode, save_episodes
from .retrieval import build_database, load_database, save_database
from .steps import StepEstimator, sample_step_pairs, train_step_estimator
from .trajectory import load_dataset, save_dataset


def _cmd_gen_data(args) -> int:
    if args.scenario == "stitching":
        spec = StitchScenario(gap=args.gap, traj_per_family=args.traj_count)
        dataset = gen_stitching_dataset(spec, args.seed)
    else:
        spec = LinewalkScenario(n_traj=args.traj_count)
        dataset = gen_linewalk_dataset(spec, args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} trajectories ({dataset.total_steps} steps) to {args.out}")
    return 0


def _cmd_build_db(args) -> int:
    dataset = load_dataset(args.dataset)
    db = build_database(dataset, gamma=args.gamma)
    save_database(db, args.out)
    print(f"indexed {len(db)} states into {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    out_dir = Path(args.out)
    train_cfg = {"component": args.component, "dataset": str(args.dataset),
                 "horizon": args.horizon, "nsteps": args.nsteps,
                 "epochs": args.epochs, "seed": args.seed, "batch": args.batch}
    if args.component == "diffusion":
        sched = make_schedule(args.nsteps)
        params, losses, _ = train_denoiser(
            dataset, args.horizon, sched, epochs=args.epochs,
            batch_size=args.batch, seed=args.seed,
        )
        nets.save_checkpoint(out_dir / "denoiser.npz", "denoiser", params,
                             train_config=train_cfg,
                             extra={"schedule": sched.to_dict(), "horizon": args.horizon,
                                    "ds": dataset.ds, "da": dataset.da, "loss_curve": losses})
        print(f"denoiser: final epoch loss {losses[-1]:.4f} -> {out_dir / 'denoiser.npz'}")
    elif args.component == "guide":
        sched = make_schedule(args.nsteps)
        guide, losses = train_return_guide(
            dataset, args.horizon, sched, epochs=args.epochs,
            batch_size=args.batch, seed=args.seed,
        )
        nets.save_checkpoint(out_dir / "guide.npz", "return_guide", guide.params,
                             train_config=train_cfg,
                             extra={"return_min": guide.return_min,
                                    "return_max": guide.return_max, "loss_curve": losses})
        print(f"return guide: final epoch loss {losses[-1]:.6f} -> {out_dir / 'guide.npz'}")
    else:
        pairs = sample_step_pairs(dataset, args.horizon, args.pairs, seed=args.seed)
        est, losses = train_step_estimator(pairs, args.horizon, epochs=args.epochs, seed=args.seed)
        nets.save_checkpoint(out_dir / "step_estimator.npz", "step_estimator", est.params,
                             train_config=train_cfg,
                             extra={"horizon": args.horizon, "loss_curve": losses})
        print(f"step estimator: final epoch loss {losses[-1]:.4f} -> {out_dir / 'step_estimator.npz'}")
    return 0


def _load_models(models_dir: Path):
    denoiser, _, dmeta = nets.load_checkpoint(models_dir / "denoiser.npz", expected_role="denoiser")
    sched = make_schedule(int(dmeta["extra"]["schedule"]["n_steps"]),
                          dmeta["extra"]["schedule"]["kind"])
    horizon = int(dmeta["extra"]["horizon"])
    guide = None
    guide_path = models_dir / "guide.npz"
    if guide_path.exists():
        gp, _, gmeta = nets.load_checkpoint(guide_path, expected_role="return_guide")
        guide = ReturnGuide(gp, gmeta["extra"]["return_min"], gmeta["extra"]["return_max"])
    sp, _, smeta = nets.load_checkpoint(models_dir / "step_estimator.npz",
                                        expected_role="step_estimator")
    est = StepEstimator(sp, int(smeta["extra"]["horizon"]))
    return denoiser, sched, horizon, guide, est


def _cmd_plan(args) -> int:
    db = load_database(args.db)
    denoiser, sched, horizon, guide, est = _load_models(Path(args.models))
    env = make_env(args.env)
    pc = PlannerConfig(
        top_k=args.top_k, min_similarity=args.delta, return_tolerance=args.eta,
        horizon=horizon, guidance_scale=args.rho, replan_interval=args.replan_interval,
    )
    planner = Planner(database=db, denoiser=denoiser, schedule=sched, step_estimator=est,
                      config=pc, guide=guide,
                      action_low=env.action_low, action_high=env.action_high)
    if args.ablation != "none":
        planner = ablation_variant(args.ablation, planner)
    records = []
    for ep in range(args.episodes):
        rec = run_episode(planner, env, args.max_steps, args.seed * 100000 + ep)
        records.append(rec)
        ret = rec.episode_return(db.gamma)
        print(f"episode {ep}: return {ret:.4f} steps {len(rec)} terminal {rec.terminal}")
    save_episodes(records, args.out)
    print(f"wrote {len(records)} episodes to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    if args.out_dir:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    rows = run_pipeline(config)
    for row in rows:
        print(f"seed {row.seed}: return {row.mean_return:.4f} +- {row.std_return:.4f} "
              f"success {row.success_rate:.2f}")
    return 0


def _cmd_ablate(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    if args.out_dir:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    rows = run_ablations(config)
    for row in rows:
        if row.seed == "all":
            print(f"{row.variant}: return {row.mean_return:.4f} +- {row.std_return:.4f} "
                  f"success {row.success_rate:.2f}")
    return 0


def _cmd_sweep(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    if args.out_dir:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    k_values = tuple(int(x) for x in args.k_values.split(","))
    delta_values = tuple(float(x) for x in args.delta_values.split(","))
    cells = run_sweep(config, k_values, delta_values)
    for cell in cells:
        print(f"panel {cell['panel']}: k={cell['top_k']} delta={cell['min_similarity']} "
              f"return {cell['mean_return']:.4f} +- {cell['std_return']:.4f}")
    return 0


def _cmd_plot_data(args) -> int:
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    curve_path = run_dir / "curves.csv"
    rows = []
    if metrics_path.exists():
        from .experiment import MetricsRow
        for d in read_csv(metrics_path):
            rows.append(MetricsRow(
                config_hash=d["config_hash"], env=d["env"], variant=d["variant"],
                seed=d["seed"], episodes=int(d["episodes"]),
                mean_return=float(d["mean_return"]), std_return=float(d["std_return"]),
                success_rate=float(d["success_rate"]),
                normalized_score=float(d["normalized_score"]),
                mean_similarity=float(d["mean_similarity"]),
                miss_rate=float(d["miss_rate"]),
                mean_anchor_offset=float(d["mean_anchor_offset"]),
                eval_seed_hash=d["eval_seed_hash"],
            ))
    curves = []
    if curve_path.exists():
        curves = [[d[c] for c in ("env", "variant", "seed", "epoch", "mean_return", "success_rate")]
                  for d in read_csv(curve_path)]
    out = emit_plot_data(rows, curves, args.out or run_dir)
    for name, path in out.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radplan",
                                     description="Retrieval-guided diffusion planning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--scenario", choices=["stitching", "linewalk"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--gap", type=float, default=0.0)
    p.add_argument("--traj-count", type=int, default=40)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("build-db", help="build the retrieval database")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.set_defaults(func=_cmd_build_db)

    p = sub.add_parser("train", help="train one model component")
    p.add_argument("--component", choices=["diffusion", "guide", "step"], required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon", type=int, default=32)
    p.add_argument("--nsteps", type=int, default=20)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--pairs", type=int, default=4000)
    p.add_argument("--out", default="models")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("plan", help="run the planner in an environment")
    p.add_argument("--models", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=300)
    p.add_argument("--top-k", type=int, default=6)
    p.add_argument("--delta", type=float, default=0.9)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--replan-interval", type=int, default=1)
    p.add_argument("--ablation", default="none")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("eval", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="evaluate the planner and its ablations")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="retrieval-parameter sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--k-values", default="6,30,60,120")
    p.add_argument("--delta-values", default="0.0,0.5,0.8,0.9")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("plot-data", help="emit plot-ready CSVs from a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
