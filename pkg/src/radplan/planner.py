"""Closed-loop control: retrieve a target, estimate its offset, plan, act.

Each decision step (at the configured replan interval) the planner queries
the state database for a high-return target similar to the current state,
asks the step estimator how many steps away that target plausibly is, samples
an anchored guided plan, and executes its first action. Between replans it
consumes queued actions from the current plan.

Planner instances share immutable models and databases and may run episodes
in parallel; a single instance is not safe for concurrent act() calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nets
from .diffusion import GuidanceConfig, NoiseSchedule, ReturnGuide, sample_plan
from .retrieval import RetrievalMiss, RetrievalQuery, RetrievalResult, StateDatabase, retrieve_target
from .steps import StepEstimator, estimate_steps
from .trajectory import (
    Trajectory,
    denormalize_actions,
    normalize_states,
    trajectory_return,
)

ABLATION_KINDS = ("no_retrieval_random_target", "fixed_anchor_position", "random_step_count")


class PlannerConfigError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    top_k: int = 6
    min_similarity: float = 0.9
    return_tolerance: float = 0.1
    horizon: int = 32
    guidance_scale: float = 0.1
    guide_gradient_clip: float = 1.0
    replan_interval: int = 1
    fallback: str = "unconditional"  # or "last_target"
    fixed_anchor_position: int = 5   # used by the fixed-position ablation

    def __post_init__(self):
        if self.replan_interval < 1:
            raise ValueError("replan_interval must be >= 1")
        if self.fallback not in ("unconditional", "last_target"):
            raise ValueError(f"unknown fallback mode {self.fallback!r}")


@dataclass
class StepDiagnostics:
    """What produced the action at one environment step."""

    replanned: bool
    plan_row: int
    target_state: np.ndarray | None
    anchor_offset: int | None
    similarity: float | None
    segment_return: float | None
    retrieval_miss: bool

    def to_dict(self) -> dict:
        return {
            "replanned": self.replanned,
            "plan_row": self.plan_row,
            "target_state": None if self.target_state is None else self.target_state.tolist(),
            "anchor_offset": self.anchor_offset,
            "similarity": self.similarity,
            "segment_return": self.segment_return,
            "retrieval_miss": self.retrieval_miss,
        }


@dataclass
class _PlannerState:
    plan: np.ndarray | None = None
    cursor: int = 0
    steps_since_replan: int = 0
    last_result: RetrievalResult | None = None
    last_miss: bool = False


class Planner:
    def __init__(
        self,
        database: StateDatabase,
        denoiser: nets.NetParams,
        schedule: NoiseSchedule,
        step_estimator: StepEstimator,
        config: PlannerConfig,
        guide: ReturnGuide | None = None,
        action_low: np.ndarray | None = None,
        action_high: np.ndarray | None = None,
        seed: int = 0,
        target_mode: str = "retrieval",   # or "random" (ablation)
        step_mode: str = "model",         # or "fixed" / "random" (ablations)
    ):
        if denoiser is None or step_estimator is None:
            raise PlannerConfigError("planner requires a denoiser and a step estimator")
        if step_estimator.horizon != config.horizon:
            raise PlannerConfigError(
                f"step estimator horizon {step_estimator.horizon} != planner horizon {config.horizon}"
            )
        self.db = database
        self.denoiser = denoiser
        self.schedule = schedule
        self.step_estimator = step_estimator
        self.guide = guide
        self.config = config
        self.action_low = action_low
        self.action_high = action_high
        self.target_mode = target_mode
        self.step_mode = step_mode
        self.rng = np.random.default_rng(seed)
        self.state = _PlannerState()

    # -- composition pieces ---------------------------------------------------

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)
        self.state = _PlannerState()

    def _pick_target(self, raw_state: np.ndarray):
        """Returns (RetrievalResult | None, miss flag)."""
        if self.target_mode == "random":
            idx = int(self.rng.integers(0, len(self.db)))
            entry = self.db.entry(idx)
            return RetrievalResult(
                target_state=entry.state,
                entry=entry,
                entry_index=idx,
                similarity=float("nan"),
                segment_return=self.db.segment_return(idx, self.config.horizon),
                remaining_length=self.db.remaining_length(idx),
            ), False
        query = RetrievalQuery(
            state=raw_state,
            top_k=self.config.top_k,
            min_similarity=self.config.min_similarity,
            return_tolerance=self.config.return_tolerance,
            horizon=self.config.horizon,
        )
        try:
            return retrieve_target(self.db, raw_state, query), False
        except RetrievalMiss:
            if self.config.fallback == "last_target" and self.state.last_result is not None:
                return self.state.last_result, True
            return None, True

    def _pick_offset(self, raw_state: np.ndarray, result: RetrievalResult | None) -> int | None:
        if result is None:
            return None
        if self.step_mode == "fixed":
            return min(self.config.fixed_anchor_position, self.config.horizon - 1)
        if self.step_mode == "random":
            return int(self.rng.integers(1, self.config.horizon))
        return estimate_steps(self.step_estimator, raw_state, result.target_state)

    def _replan(self, raw_state: np.ndarray) -> StepDiagnostics:
        result, miss = self._pick_target(raw_state)
        offset = self._pick_offset(raw_state, result)
        current_n = normalize_states(raw_state, self.db.norm_stats)
        target_n = None
        if result is not None:
            target_n = normalize_states(result.target_state, self.db.norm_stats)
        plan = sample_plan(
            current_state=current_n,
            target_state=target_n,
            anchor_offset=offset,
            denoiser=self.denoiser,
            guide=self.guide,
            gcfg=GuidanceConfig(
                scale=self.config.guidance_scale,
                gradient_clip=self.config.guide_gradient_clip,
            ),
            sched=self.schedule,
            horizon=self.config.horizon,
            ds=self.db.ds,
            da=self.db.da,
            rng=self.rng,
        )
        self.state.plan = plan
        self.state.cursor = 0
        self.state.steps_since_replan = 0
        self.state.last_result = result if result is not None else self.state.last_result
        self.state.last_miss = miss
        return StepDiagnostics(
            replanned=True,
            plan_row=0,
            target_state=None if result is None else result.target_state.copy(),
            anchor_offset=offset,
            similarity=None if result is None else result.similarity,
            segment_return=None if result is None else result.segment_return,
            retrieval_miss=miss,
        )

    def act(self, raw_state: np.ndarray):
        """Return (action in env units, diagnostics) for the current state."""
        st = self.state
        need_replan = (
            st.plan is None
            or st.steps_since_replan >= self.config.replan_interval
            or st.cursor >= self.config.horizon
        )
        if need_replan:
            diag = self._replan(np.asarray(raw_state, dtype=np.float64))
        else:
            last = st.last_result
            diag = StepDiagnostics(
                replanned=False,
                plan_row=st.cursor,
                target_state=None if last is None else last.target_state.copy(),
                anchor_offset=None,
                similarity=None if last is None else last.similarity,
                segment_return=None if last is None else last.segment_return,
                retrieval_miss=st.last_miss,
            )
        row = self.state.plan[self.state.cursor]
        action = denormalize_actions(row[self.db.ds :], self.db.norm_stats)
        if self.action_low is not None and self.action_high is not None:
            action = np.clip(action, self.action_low, self.action_high)
        self.state.cursor += 1
        self.state.steps_since_replan += 1
        return action, diag


def ablation_variant(kind: str, planner: Planner) -> Planner:
    """A planner with one component replaced per the named ablation.

    Shares the immutable models and database of the original; gets a fresh
    rng/state so evaluations stay independent.
    """
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATION_KINDS}")
    target_mode = "random" if kind == "no_retrieval_random_target" else "retrieval"
    step_mode = {"fixed_anchor_position": "fixed", "random_step_count": "random"}.get(kind, "model")
    return Planner(
        database=planner.db,
        denoiser=planner.denoiser,
        schedule=planner.schedule,
        step_estimator=planner.step_estimator,
        config=planner.config,
        guide=planner.guide,
        action_low=planner.action_low,
        action_high=planner.action_high,
        target_mode=target_mode,
        step_mode=step_mode,
    )


# --- episode rollout ----------------------------------------------------------------


@dataclass
class EpisodeRecord:
    states: list      # T+1 visited states (includes the final one)
    actions: list     # T actions
    rewards: list     # T rewards
    diagnostics: list[StepDiagnostics]
    terminal: bool
    seed: int

    def __len__(self) -> int:
        return len(self.actions)

    def to_trajectory(self, traj_id: int = 0) -> Trajectory:
        return Trajectory(
            id=traj_id,
            states=np.array(self.states[: len(self.actions)]),
            actions=np.array(self.actions),
            rewards=np.array(self.rewards),
        )

    def episode_return(self, gamma: float) -> float:
        if not self.actions:
            return 0.0
        return trajectory_return(self.to_trajectory(), gamma)

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "terminal": self.terminal,
            "states": [np.asarray(s).tolist() for s in self.states],
            "actions": [np.asarray(a).tolist() for a in self.actions],
            "rewards": list(self.rewards),
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }, separators=(",", ":"))


def run_episode(planner: Planner, env, max_steps: int, seed: int) -> EpisodeRecord:
    """Roll the planner against an environment until terminal or max_steps."""
    planner.reseed(seed)
    state = env.reset(seed)
    record = EpisodeRecord(states=[state], actions=[], rewards=[], diagnostics=[],
                           terminal=False, seed=seed)
    for step in range(max_steps):
        try:
            action, diag = planner.act(state)
            state, reward, terminal = env.step(action)
        except Exception as exc:
            raise RuntimeError(f"episode failed at step {step}: {exc}") from exc
        record.states.append(state)
        record.actions.append(action)
        record.rewards.append(float(reward))
        record.diagnostics.append(diag)
        if terminal:
            record.terminal = True
            break
    return record


def save_episodes(records: list[EpisodeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
