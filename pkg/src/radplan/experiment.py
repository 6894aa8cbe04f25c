"""End-to-end experiment harness: pipelines, ablations, sweeps, plot data.

A pipeline is keyed by the hash of its resolved configuration and lays its
artifacts out under `<out_dir>/<hash>/`:

    dataset.jsonl     generated offline data (unless an external path is given)
    db.npz            retrieval database sidecar
    models/seed<k>/   denoiser.npz, guide.npz, step_estimator.npz per seed
    metrics.csv       per-seed rows plus an aggregate row
    episodes.jsonl    every evaluation episode with per-step diagnostics
    curves.csv        per-epoch evaluation returns (when curve_points > 0)
    run.log           stage log, config hash included

Completed stages are skipped on rerun (cache hit), and identical
(config, seeds) reproduce metrics.csv byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .diffusion import (
    ReturnGuide,
    make_schedule,
    train_denoiser,
    train_return_guide,
)
from .envs import Nav2dEnv, StitchScenario, gen_stitching_dataset, make_env, scripted_arc_policy
from .planner import (
    ABLATION_KINDS,
    EpisodeRecord,
    Planner,
    PlannerConfig,
    ablation_variant,
    run_episode,
    save_episodes,
)
from .retrieval import StateDatabase, build_database, load_database, save_database
from .steps import StepEstimator, sample_step_pairs, train_step_estimator
from .trajectory import OfflineDataset, load_dataset, save_dataset


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


VARIANT_FULL = "full"
ALL_VARIANTS = (VARIANT_FULL, *ABLATION_KINDS)

METRICS_COLUMNS = [
    "config_hash", "env", "variant", "seed", "episodes", "mean_return", "std_return",
    "success_rate", "normalized_score", "mean_similarity", "miss_rate",
    "mean_anchor_offset", "eval_seed_hash",
]

CURVE_COLUMNS = ["env", "variant", "seed", "epoch", "mean_return", "success_rate"]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a reproducible run needs; every field is overridable.

    JSON configs use these field names; environment variables named
    RAD_<FIELD> (upper-cased) override individual fields for CI.
    """

    env: str = "stitching-ood"
    dataset: str | None = None
    out_dir: str = "runs"
    seeds: tuple[int, ...] = (0, 1, 2)
    # planning / models
    horizon: int = 32
    n_diffusion_steps: int = 20
    schedule: str = "cosine"
    top_k: int = 6
    min_similarity: float = 0.9
    return_tolerance: float = 0.1
    guidance_scale: float = 0.1
    guide_gradient_clip: float = 1.0
    gamma: float = 0.99
    replan_interval: int = 1
    fallback: str = "unconditional"
    ablation: str = "none"
    # training
    denoiser_epochs: int = 40
    guide_epochs: int = 15
    step_epochs: int = 30
    steps_per_epoch: int = 100
    batch_size: int = 32
    step_pair_count: int = 4000
    denoiser_hidden: tuple[int, ...] = (512, 512, 512)
    guide_hidden: tuple[int, ...] = (256, 256)
    step_hidden: tuple[int, ...] = (128, 128, 128)
    denoiser_lr: float = 2e-4
    guide_lr: float = 2e-4
    step_lr: float = 1e-3
    # evaluation
    episodes_per_seed: int = 50
    max_steps: int = 300
    sweep_episodes: int | None = None   # episodes per sweep cell; defaults to episodes_per_seed
    curve_points: int = 0
    curve_episodes: int = 10
    # data generation
    dataset_seed: int = 12345
    gap: float = 0.0
    traj_per_family: int = 40

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for name in ("denoiser_hidden", "guide_hidden", "step_hidden"):
            object.__setattr__(self, name, tuple(int(h) for h in getattr(self, name)))

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("config needs at least one seed")
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if self.ablation not in ("none", *ABLATION_KINDS):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.episodes_per_seed < 1:
            raise ConfigError("episodes_per_seed must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        for name in ("denoiser_hidden", "guide_hidden", "step_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh)).with_env_overrides()

    def with_env_overrides(self, environ=None) -> "ExperimentConfig":
        """Apply RAD_<FIELD> environment overrides, parsing by field type."""
        environ = os.environ if environ is None else environ
        updates = {}
        for f in dataclasses.fields(self):
            raw = environ.get(f"RAD_{f.name.upper()}")
            if raw is None:
                continue
            current = getattr(self, f.name)
            if f.name in ("seeds", "denoiser_hidden", "guide_hidden", "step_hidden"):
                updates[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
            elif isinstance(current, bool):
                updates[f.name] = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                updates[f.name] = int(raw)
            elif isinstance(current, float):
                updates[f.name] = float(raw)
            else:
                updates[f.name] = raw
        return dataclasses.replace(self, **updates) if updates else self

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def scenario(self) -> StitchScenario:
        return StitchScenario(gap=self.gap, traj_per_family=self.traj_per_family)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            top_k=self.top_k,
            min_similarity=self.min_similarity,
            return_tolerance=self.return_tolerance,
            horizon=self.horizon,
            guidance_scale=self.guidance_scale,
            guide_gradient_clip=self.guide_gradient_clip,
            replan_interval=self.replan_interval,
            fallback=self.fallback,
        )


@dataclass
class MetricsRow:
    config_hash: str
    env: str
    variant: str
    seed: str              # seed number, or "all" for the aggregate
    episodes: int
    mean_return: float
    std_return: float
    success_rate: float
    normalized_score: float
    mean_similarity: float
    miss_rate: float
    mean_anchor_offset: float
    eval_seed_hash: str

    def to_list(self) -> list[str]:
        return [str(getattr(self, c)) for c in METRICS_COLUMNS]


def write_csv(path, columns: list[str], rows: list[list[str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _make_logger(run_dir: Path, config_hash: str) -> logging.Logger:
    logger = logging.getLogger(f"radplan.run.{config_hash}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    logger.propagate = False
    run_dir.mkdir(parents=True, exist_ok=True)
    fmt = logging.Formatter("%(asctime)s %(message)s")
    fh = logging.FileHandler(run_dir / "run.log")
    fh.setFormatter(fmt)
    logger.addHandler(fh)
    sh = logging.StreamHandler()
    sh.setFormatter(fmt)
    logger.addHandler(sh)
    logger.info("config hash %s", config_hash)
    return logger


# --- pipeline stages -----------------------------------------------------------------


@dataclass
class PipelineArtifacts:
    config: ExperimentConfig
    run_dir: Path
    dataset: OfflineDataset
    database: StateDatabase
    models: dict[int, dict]        # seed -> {"denoiser", "guide", "step", "schedule", "snapshots"}
    logger: logging.Logger


def _eval_seed_list(config: ExperimentConfig, seed: int, episodes: int) -> list[int]:
    return [seed * 100000 + ep for ep in range(episodes)]


def _seed_hash(seeds: list[int]) -> str:
    return hashlib.sha256(json.dumps(seeds).encode()).hexdigest()[:12]


def _stage_dataset(config: ExperimentConfig, run_dir: Path, logger) -> OfflineDataset:
    if config.dataset is not None:
        logger.info("stage dataset: loading %s", config.dataset)
        return load_dataset(config.dataset)
    path = run_dir / "dataset.jsonl"
    if path.exists():
        logger.info("stage dataset: cache hit (%s)", path)
        return load_dataset(path)
    logger.info("stage dataset: generating stitching data (seed %d)", config.dataset_seed)
    dataset = gen_stitching_dataset(config.scenario(), config.dataset_seed)
    dataset = OfflineDataset.build(list(dataset.trajectories), gamma=config.gamma)
    save_dataset(dataset, path)
    return dataset


def _stage_database(config: ExperimentConfig, run_dir: Path, dataset: OfflineDataset, logger) -> StateDatabase:
    path = run_dir / "db.npz"
    if path.exists():
        logger.info("stage build-db: cache hit (%s)", path)
        return load_database(path, dataset)
    logger.info("stage build-db: indexing %d states", dataset.total_steps)
    db = build_database(dataset)
    save_database(db, path)
    return db


def _curve_epochs(config: ExperimentConfig) -> tuple[int, ...]:
    if config.curve_points <= 0:
        return ()
    pts = np.linspace(1, config.denoiser_epochs, num=min(config.curve_points, config.denoiser_epochs))
    return tuple(sorted({int(round(p)) for p in pts}))


def _train_one_seed(config: ExperimentConfig, dataset: OfflineDataset, seed: int,
                    model_dir: Path, logger):
    sched = make_schedule(config.n_diffusion_steps, config.schedule)
    train_cfg = config.to_dict()
    snapshots_wanted = _curve_epochs(config)

    denoiser_path = model_dir / "denoiser.npz"
    guide_path = model_dir / "guide.npz"
    step_path = model_dir / "step_estimator.npz"
    snap_dir = model_dir / "snapshots"
    have_snaps = all((snap_dir / f"denoiser_ep{e}.npz").exists() for e in snapshots_wanted)
    if denoiser_path.exists() and guide_path.exists() and step_path.exists() and have_snaps:
        logger.info("stage train[seed %d]: cache hit", seed)
        denoiser, _, dmeta = nets.load_checkpoint(denoiser_path, expected_role="denoiser")
        guide_params, _, gmeta = nets.load_checkpoint(guide_path, expected_role="return_guide")
        guide = ReturnGuide(guide_params, gmeta["extra"]["return_min"], gmeta["extra"]["return_max"])
        step_params, _, smeta = nets.load_checkpoint(step_path, expected_role="step_estimator")
        est = StepEstimator(step_params, int(smeta["extra"]["horizon"]))
        snaps = {}
        for e in snapshots_wanted:
            p, _, _ = nets.load_checkpoint(snap_dir / f"denoiser_ep{e}.npz", expected_role="denoiser")
            snaps[e] = p
        return {"denoiser": denoiser, "guide": guide, "step": est,
                "schedule": sched, "snapshots": snaps}

    logger.info("stage train[seed %d]: denoiser (%d epochs x %d steps)",
                seed, config.denoiser_epochs, config.steps_per_epoch)
    denoiser, d_losses, snaps = train_denoiser(
        dataset, config.horizon, sched,
        epochs=config.denoiser_epochs, batch_size=config.batch_size, seed=seed,
        steps_per_epoch=config.steps_per_epoch, lr=config.denoiser_lr,
        hidden=config.denoiser_hidden, snapshot_epochs=snapshots_wanted,
    )
    nets.save_checkpoint(denoiser_path, "denoiser", denoiser, train_config=train_cfg,
                         extra={"schedule": sched.to_dict(), "horizon": config.horizon,
                                "ds": dataset.ds, "da": dataset.da,
                                "loss_curve": d_losses})
    for e, p in snaps.items():
        nets.save_checkpoint(snap_dir / f"denoiser_ep{e}.npz", "denoiser", p,
                             train_config=train_cfg, extra={"epoch": e})

    logger.info("stage train[seed %d]: return guide (%d epochs)", seed, config.guide_epochs)
    guide, g_losses = train_return_guide(
        dataset, config.horizon, sched,
        epochs=config.guide_epochs, batch_size=config.batch_size, seed=seed,
        steps_per_epoch=config.steps_per_epoch, lr=config.guide_lr, hidden=config.guide_hidden,
    )
    nets.save_checkpoint(guide_path, "return_guide", guide.params, train_config=train_cfg,
                         extra={"return_min": guide.return_min, "return_max": guide.return_max,
                                "loss_curve": g_losses})

    logger.info("stage train[seed %d]: step estimator (%d pairs)", seed, config.step_pair_count)
    pairs = sample_step_pairs(dataset, config.horizon, config.step_pair_count, seed=seed)
    est, s_losses = train_step_estimator(
        pairs, config.horizon, epochs=config.step_epochs, lr=config.step_lr,
        seed=seed, hidden=config.step_hidden,
    )
    nets.save_checkpoint(step_path, "step_estimator", est.params, train_config=train_cfg,
                         extra={"horizon": config.horizon, "loss_curve": s_losses})
    return {"denoiser": denoiser, "guide": guide, "step": est,
            "schedule": sched, "snapshots": snaps}


def prepare_pipeline(config: ExperimentConfig) -> PipelineArtifacts:
    """Run (or reuse) the data/database/training stages for every seed."""
    config.validate()
    run_dir = Path(config.out_dir) / config.config_hash()
    logger = _make_logger(run_dir, config.config_hash())
    try:
        dataset = _stage_dataset(config, run_dir, logger)
    except Exception as exc:
        raise PipelineError("dataset", str(exc)) from exc
    try:
        database = _stage_database(config, run_dir, dataset, logger)
    except Exception as exc:
        raise PipelineError("build-db", str(exc)) from exc
    models = {}
    for seed in config.seeds:
        try:
            models[seed] = _train_one_seed(config, dataset, seed,
                                           run_dir / "models" / f"seed{seed}", logger)
        except Exception as exc:
            raise PipelineError(f"train[seed {seed}]", str(exc)) from exc
    return PipelineArtifacts(config=config, run_dir=run_dir, dataset=dataset,
                             database=database, models=models, logger=logger)


def build_planner(art: PipelineArtifacts, seed: int, variant: str = VARIANT_FULL,
                  planner_config: PlannerConfig | None = None,
                  denoiser: nets.NetParams | None = None) -> Planner:
    models = art.models[seed]
    env = make_env(art.config.env, art.config.scenario())
    planner = Planner(
        database=art.database,
        denoiser=denoiser if denoiser is not None else models["denoiser"],
        schedule=models["schedule"],
        step_estimator=models["step"],
        config=planner_config or art.config.planner_config(),
        guide=models["guide"],
        action_low=env.action_low,
        action_high=env.action_high,
    )
    if variant != VARIANT_FULL:
        planner = ablation_variant(variant, planner)
    return planner


@dataclass
class EvalResult:
    records: list[EpisodeRecord]
    returns: np.ndarray
    successes: np.ndarray
    similarities: list[float]
    misses: int
    decisions: int
    offsets: list[int]


def evaluate_planner(planner: Planner, env: Nav2dEnv, episode_seeds: list[int],
                     max_steps: int, gamma: float) -> EvalResult:
    records, returns, successes = [], [], []
    sims, offsets = [], []
    misses = decisions = 0
    for ep_seed in episode_seeds:
        rec = run_episode(planner, env, max_steps, ep_seed)
        records.append(rec)
        returns.append(rec.episode_return(gamma))
        successes.append(1.0 if rec.terminal else 0.0)
        for d in rec.diagnostics:
            if d.replanned:
                decisions += 1
                if d.retrieval_miss:
                    misses += 1
                if d.similarity is not None and np.isfinite(d.similarity):
                    sims.append(d.similarity)
                if d.anchor_offset is not None:
                    offsets.append(d.anchor_offset)
    return EvalResult(
        records=records,
        returns=np.array(returns),
        successes=np.array(successes),
        similarities=sims,
        misses=misses,
        decisions=max(decisions, 1),
        offsets=offsets,
    )


def _baseline_returns(env: Nav2dEnv, config: ExperimentConfig) -> tuple[float, float]:
    """(random-policy mean return, scripted corridor-following mean return)."""
    episodes = min(30, config.episodes_per_seed)
    oracle_policy = scripted_arc_policy(config.scenario())

    def run_policy(policy, seed_base: int) -> float:
        total = 0.0
        for ep in range(episodes):
            rng = np.random.default_rng(seed_base + ep)
            state = env.reset(seed_base + ep)
            rewards = []
            for _ in range(config.max_steps):
                state, r, terminal = env.step(policy(state, rng))
                rewards.append(r)
                if terminal:
                    break
            ret, w = 0.0, 1.0
            for r in rewards:
                ret += w * r
                w *= config.gamma
            total += ret
        return total / episodes

    def random_policy(state, rng):
        return rng.uniform(env.action_low, env.action_high)

    return run_policy(random_policy, 7_700_000), run_policy(oracle_policy, 7_800_000)


def _normalized_score(mean_return: float, rand: float, oracle: float) -> float:
    if oracle == rand:
        return 0.0
    return 100.0 * (mean_return - rand) / (oracle - rand)


def _metrics_row(config: ExperimentConfig, variant: str, seed: str, result: EvalResult,
                 episode_seeds: list[int], rand: float, oracle: float) -> MetricsRow:
    mean_ret = float(result.returns.mean())
    return MetricsRow(
        config_hash=config.config_hash(),
        env=config.env,
        variant=variant,
        seed=seed,
        episodes=len(result.returns),
        mean_return=mean_ret,
        std_return=float(result.returns.std()),
        success_rate=float(result.successes.mean()),
        normalized_score=_normalized_score(mean_ret, rand, oracle),
        mean_similarity=float(np.mean(result.similarities)) if result.similarities else float("nan"),
        miss_rate=result.misses / result.decisions,
        mean_anchor_offset=float(np.mean(result.offsets)) if result.offsets else float("nan"),
        eval_seed_hash=_seed_hash(episode_seeds),
    )


def _aggregate_row(rows: list[MetricsRow]) -> MetricsRow:
    """Mean over per-seed means; std over per-seed means (population)."""
    means = np.array([r.mean_return for r in rows])
    first = rows[0]
    return MetricsRow(
        config_hash=first.config_hash,
        env=first.env,
        variant=first.variant,
        seed="all",
        episodes=sum(r.episodes for r in rows),
        mean_return=float(means.mean()),
        std_return=float(means.std()),
        success_rate=float(np.mean([r.success_rate for r in rows])),
        normalized_score=float(np.mean([r.normalized_score for r in rows])),
        mean_similarity=float(np.nanmean([r.mean_similarity for r in rows])),
        miss_rate=float(np.mean([r.miss_rate for r in rows])),
        mean_anchor_offset=float(np.nanmean([r.mean_anchor_offset for r in rows])),
        eval_seed_hash=_seed_hash(sorted({r.eval_seed_hash for r in rows})) if len(rows) > 1 else first.eval_seed_hash,
    )


def run_pipeline(config: ExperimentConfig) -> list[MetricsRow]:
    """Full deterministic pipeline; returns per-seed rows plus an aggregate."""
    art = prepare_pipeline(config)
    env = make_env(config.env, config.scenario())
    rand, oracle = _baseline_returns(env, config)
    art.logger.info("baselines: random %.4f, oracle %.4f", rand, oracle)
    variant = config.ablation if config.ablation != "none" else VARIANT_FULL

    rows: list[MetricsRow] = []
    all_records: list[EpisodeRecord] = []
    curve_rows: list[list[str]] = []
    for seed in config.seeds:
        episode_seeds = _eval_seed_list(config, seed, config.episodes_per_seed)
        planner = build_planner(art, seed, variant)
        result = evaluate_planner(planner, env, episode_seeds, config.max_steps, config.gamma)
        rows.append(_metrics_row(config, variant, str(seed), result, episode_seeds, rand, oracle))
        all_records.extend(result.records)
        art.logger.info("stage eval[seed %d]: mean return %.4f success %.2f",
                        seed, rows[-1].mean_return, rows[-1].success_rate)
        for epoch, snap in sorted(art.models[seed]["snapshots"].items()):
            curve_seeds = _eval_seed_list(config, seed, config.curve_episodes)
            for cv_variant, cv_kind in (("retrieval", VARIANT_FULL),
                                        ("no_retrieval", "no_retrieval_random_target")):
                p = build_planner(art, seed, cv_kind, denoiser=snap)
                res = evaluate_planner(p, env, curve_seeds, config.max_steps, config.gamma)
                curve_rows.append([config.env, cv_variant, str(seed), str(epoch),
                                   str(float(res.returns.mean())),
                                   str(float(res.successes.mean()))])

    agg = _aggregate_row(rows)
    write_csv(art.run_dir / "metrics.csv", METRICS_COLUMNS, [r.to_list() for r in rows + [agg]])
    save_episodes(all_records, art.run_dir / "episodes.jsonl")
    if curve_rows:
        write_csv(art.run_dir / "curves.csv", CURVE_COLUMNS, curve_rows)
    art.logger.info("pipeline complete: %s", art.run_dir / "metrics.csv")
    return rows + [agg]


def run_ablations(config: ExperimentConfig) -> list[MetricsRow]:
    """Evaluate the full planner plus every ablation under shared seeds."""
    art = prepare_pipeline(config)
    env = make_env(config.env, config.scenario())
    rand, oracle = _baseline_returns(env, config)
    rows: list[MetricsRow] = []
    for variant in ALL_VARIANTS:
        per_seed = []
        for seed in config.seeds:
            episode_seeds = _eval_seed_list(config, seed, config.episodes_per_seed)
            planner = build_planner(art, seed, variant)
            result = evaluate_planner(planner, env, episode_seeds, config.max_steps, config.gamma)
            per_seed.append(_metrics_row(config, variant, str(seed), result, episode_seeds, rand, oracle))
            art.logger.info("ablate %s seed %d: return %.4f success %.2f",
                            variant, seed, per_seed[-1].mean_return, per_seed[-1].success_rate)
        rows.extend(per_seed)
        rows.append(_aggregate_row(per_seed))
    write_csv(art.run_dir / "ablations.csv", METRICS_COLUMNS, [r.to_list() for r in rows])

    # pivot table: one row per method, one column per env
    aggregates = [r for r in rows if r.seed == "all"]
    envs = sorted({r.env for r in aggregates})
    table = [["method", *envs]]
    for variant in ALL_VARIANTS:
        line = [variant]
        for env_name in envs:
            match = [r for r in aggregates if r.variant == variant and r.env == env_name]
            line.append(f"{match[0].mean_return:.4f}+-{match[0].std_return:.4f}" if match else "")
        table.append(line)
    write_csv(art.run_dir / "ablation_table.csv", table[0], table[1:])
    emit_plot_data(rows, [], art.run_dir)
    return rows


def run_sweep(config: ExperimentConfig,
              k_values: tuple[int, ...] = (6, 30, 60, 120),
              delta_values: tuple[float, ...] = (0.0, 0.5, 0.8, 0.9)) -> list[dict]:
    """Two-panel retrieval-parameter sweep reusing the trained models.

    Panel "top_k" varies k with min_similarity fixed at the config value;
    panel "min_similarity" varies the threshold with top_k fixed. Both the
    varied and the fixed value are written into every row.
    """
    art = prepare_pipeline(config)
    env = make_env(config.env, config.scenario())
    rand, oracle = _baseline_returns(env, config)
    episodes = config.sweep_episodes or config.episodes_per_seed
    cells = [("top_k", k, config.min_similarity) for k in k_values]
    cells += [("min_similarity", config.top_k, d) for d in delta_values]

    columns = ["panel", "top_k", "min_similarity", "env", "seed", "episodes",
               "mean_return", "std_return", "success_rate", "normalized_score",
               "miss_rate", "eval_seed_hash"]
    out_rows: list[list[str]] = []
    results: list[dict] = []
    for panel, k, delta in cells:
        pc = dataclasses.replace(art.config.planner_config(), top_k=k, min_similarity=delta)
        seed_means = []
        for seed in config.seeds:
            episode_seeds = _eval_seed_list(config, seed, episodes)
            planner = build_planner(art, seed, VARIANT_FULL, planner_config=pc)
            res = evaluate_planner(planner, env, episode_seeds, config.max_steps, config.gamma)
            mean_ret = float(res.returns.mean())
            seed_means.append((mean_ret, float(res.successes.mean()),
                               res.misses / res.decisions))
            out_rows.append([panel, str(k), str(delta), config.env, str(seed), str(episodes),
                             str(mean_ret), str(float(res.returns.std())),
                             str(float(res.successes.mean())),
                             str(_normalized_score(mean_ret, rand, oracle)),
                             str(res.misses / res.decisions), _seed_hash(episode_seeds)])
        means = np.array([m for m, _, _ in seed_means])
        row = {
            "panel": panel, "top_k": k, "min_similarity": delta, "env": config.env,
            "mean_return": float(means.mean()), "std_return": float(means.std()),
            "success_rate": float(np.mean([s for _, s, _ in seed_means])),
            "miss_rate": float(np.mean([m for _, _, m in seed_means])),
        }
        results.append(row)
        out_rows.append([panel, str(k), str(delta), config.env, "all", str(episodes * len(config.seeds)),
                         str(row["mean_return"]), str(row["std_return"]),
                         str(row["success_rate"]), str(_normalized_score(row["mean_return"], rand, oracle)),
                         str(row["miss_rate"]), ""])
        art.logger.info("sweep %s k=%d delta=%.2f: return %.4f success %.2f miss %.2f",
                        panel, k, delta, row["mean_return"], row["success_rate"], row["miss_rate"])
    write_csv(art.run_dir / "sweep.csv", columns, out_rows)
    return results


def emit_plot_data(metrics: list[MetricsRow], curve_rows: list[list[str]], out_dir) -> dict[str, Path]:
    """Write plot-ready CSVs: per-epoch learning curves and ablation bars.

    Empty inputs still produce header-only files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "learning_curve.csv"
    write_csv(curve_path, CURVE_COLUMNS, curve_rows)
    bars_path = out_dir / "ablation_bars.csv"
    bar_cols = ["env", "variant", "mean_return", "std_return", "success_rate"]
    bar_rows = [[r.env, r.variant, str(r.mean_return), str(r.std_return), str(r.success_rate)]
                for r in metrics if r.seed == "all"]
    write_csv(bars_path, bar_cols, bar_rows)
    return {"learning_curve": curve_path, "ablation_bars": bars_path}
