"""Desk-scale environments and offline dataset generators.

Two scenarios back the whole verification story:

* a 2D point-mass navigation arena whose offline data consists of two
  disconnected trajectory families — one low-return family from the start
  region to a midpoint, one high-return family passing near that midpoint and
  reaching the goal — so that reaching the goal from the start requires
  stitching behavior across families;
* a 1D constant-velocity line walk whose true step count between any two
  states is |dx| / step_size exactly, giving the step estimator an analytic
  ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trajectory import OfflineDataset, Trajectory


class ScenarioError(ValueError):
    pass


# --- 2D navigation env ------------------------------------------------------------


@dataclass(frozen=True)
class Nav2dParams:
    arena_min: float = 0.0
    arena_max: float = 1.0
    step_size: float = 0.04        # per-axis action bound (inf-norm)
    goal_center: tuple[float, float] = (0.80, 0.18)
    goal_radius: float = 0.06
    step_cost: float = -0.01
    goal_reward: float = 1.0
    noise: float = 0.0             # std of transition perturbation
    walls: tuple[tuple[float, float, float, float], ...] = ()  # (xmin, ymin, xmax, ymax)


class Nav2dEnv:
    """Point-mass navigation: bounded displacement actions, goal-entry terminal.

    step() is deterministic given the state and action at noise level 0;
    with noise > 0 perturbations come from the reset-seeded generator.
    """

    ds = 2
    da = 2

    def __init__(self, params: Nav2dParams, start_sampler, name: str = "nav2d"):
        self.params = params
        self.name = name
        self._start_sampler = start_sampler
        self._pos: np.ndarray | None = None
        self._rng: np.random.Generator | None = None

    @property
    def action_low(self) -> np.ndarray:
        return np.full(2, -self.params.step_size)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(2, self.params.step_size)

    def in_goal(self, pos: np.ndarray) -> bool:
        return float(np.linalg.norm(pos - np.asarray(self.params.goal_center))) <= self.params.goal_radius

    def _blocked(self, pos: np.ndarray) -> bool:
        return any(x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1
                   for x0, y0, x1, y1 in self.params.walls)

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._pos = np.asarray(self._start_sampler(self._rng), dtype=np.float64)
        return self._pos.copy()

    def step(self, action: np.ndarray):
        if self._pos is None:
            raise RuntimeError("call reset() before step()")
        p = self.params
        a = np.clip(np.asarray(action, dtype=np.float64), -p.step_size, p.step_size)
        new = self._pos + a
        if p.noise > 0:
            new = new + self._rng.normal(0.0, p.noise, size=2)
        new = np.clip(new, p.arena_min, p.arena_max)
        if self._blocked(new):
            new = self._pos.copy()
        self._pos = new
        if self.in_goal(new):
            return new.copy(), p.goal_reward, True
        return new.copy(), p.step_cost, False


# --- stitching scenario ------------------------------------------------------------


@dataclass(frozen=True)
class StitchScenario:
    """Geometry and sampling plan for the disconnected two-family dataset.

    Both families follow a circular-arc corridor around the arena origin,
    walked clockwise (decreasing angle). Family A runs from the start angle
    down to the midpoint angle and stops; family B begins a little above the
    midpoint angle and continues into the goal region at the goal angle. A
    central wall blocks the straight chord from start to goal, so reaching
    the goal requires actually following the corridor.

    `gap` radially displaces family B's early segment away from the arc; at
    gap 0 the families touch in the overlap wedge near the midpoint.
    """

    radius: float = 0.8
    start_angle_deg: float = 83.0
    mid_angle_deg: float = 46.0
    b_start_angle_deg: float = 52.0
    b_merge_angle_deg: float = 40.0   # where family B has fully merged onto the arc
    goal_angle_deg: float = 11.0
    gap: float = 0.0
    step_size: float = 0.04
    goal_radius: float = 0.06
    step_cost: float = -0.01
    goal_reward: float = 1.0
    noise: float = 0.0
    wall: tuple[tuple[float, float, float, float], ...] = ((0.0, 0.0, 0.5, 0.5),)
    traj_per_family: int = 40
    start_spread: float = 0.015
    radial_spread: float = 0.09     # initial radius offset range, teaches corrections
    heading_noise: float = 0.10     # radians, per step
    radial_gain: float = 6.0        # arc-keeping correction strength
    meander_steps: int = 4          # initial small-steps padding on family A
    max_len: int = 80
    ood_radius: tuple[float, float] = (0.08, 0.16)

    def point_at(self, angle_deg: float, radius: float | None = None) -> np.ndarray:
        r = self.radius if radius is None else radius
        a = np.deg2rad(angle_deg)
        return r * np.array([np.cos(a), np.sin(a)])

    @property
    def start(self) -> np.ndarray:
        return self.point_at(self.start_angle_deg)

    @property
    def goal_center(self) -> np.ndarray:
        return self.point_at(self.goal_angle_deg)

    def nav_params(self) -> Nav2dParams:
        return Nav2dParams(
            step_size=self.step_size,
            goal_center=tuple(self.goal_center),
            goal_radius=self.goal_radius,
            step_cost=self.step_cost,
            goal_reward=self.goal_reward,
            noise=self.noise,
            walls=self.wall,
        )

    def validate(self) -> None:
        if self.gap < 0 or self.radius + self.gap > 0.99:
            raise ScenarioError(
                f"gap {self.gap} pushes family B outside the arena (radius {self.radius})"
            )
        if self.traj_per_family < 1:
            raise ScenarioError("traj_per_family must be >= 1")
        if not (self.goal_angle_deg < self.b_start_angle_deg <= self.start_angle_deg):
            raise ScenarioError("angles must satisfy goal < family-B start <= family-A start")


def _angle_deg(pos: np.ndarray) -> float:
    return float(np.rad2deg(np.arctan2(pos[1], pos[0])))


def _arc_step(pos, target_radius, step_size, heading_noise, radial_gain, rng):
    """One clockwise step along a circle, with a radius-restoring correction."""
    r = float(np.linalg.norm(pos))
    radial = pos / r
    tangent = np.array([radial[1], -radial[0]])  # clockwise: angle decreases
    direction = tangent + radial_gain * (target_radius - r) * radial
    direction = direction / np.linalg.norm(direction)
    theta = rng.normal(0.0, heading_noise)
    c, s = np.cos(theta), np.sin(theta)
    direction = np.array([c * direction[0] - s * direction[1],
                          s * direction[0] + c * direction[1]])
    action = np.clip(step_size * direction, -step_size, step_size)
    new = np.clip(pos + action, 0.0, 1.0)
    return new, new - pos


def gen_stitching_dataset(scenario: StitchScenario, seed: int) -> OfflineDataset:
    """Generate the two-family arc dataset; family B strictly out-returns family A."""
    scenario.validate()
    rng = np.random.default_rng(seed)
    sc = scenario
    goal = sc.goal_center

    trajectories: list[Trajectory] = []
    traj_id = 0
    for _ in range(sc.traj_per_family):
        # family A: meander near the start, then follow the arc to the midpoint
        # angle; the initial radial offset teaches radius-correcting behavior.
        r0 = sc.radius + rng.uniform(-sc.radial_spread, sc.radial_spread)
        pos = np.clip(sc.point_at(sc.start_angle_deg, r0)
                      + rng.normal(0.0, sc.start_spread, 2), 0.0, 1.0)
        states, actions, rewards = [], [], []
        for _ in range(sc.meander_steps):
            states.append(pos.copy())
            a = rng.uniform(-0.3 * sc.step_size, 0.3 * sc.step_size, 2)
            pos = np.clip(pos + a, 0.0, 1.0)
            actions.append(a)
            rewards.append(sc.step_cost)
        while len(states) < sc.max_len and _angle_deg(pos) > sc.mid_angle_deg:
            states.append(pos.copy())
            pos, act = _arc_step(pos, sc.radius, sc.step_size, sc.heading_noise,
                                 sc.radial_gain, rng)
            actions.append(act)
            rewards.append(sc.step_cost)
        trajectories.append(Trajectory(traj_id, np.array(states), np.array(actions),
                                       np.array(rewards)))
        traj_id += 1

    for _ in range(sc.traj_per_family):
        # family B: start above the midpoint angle, radially offset by gap, merge
        # onto the arc and continue clockwise into the goal region.
        r0 = sc.radius + sc.gap + rng.uniform(-sc.radial_spread, sc.radial_spread)
        pos = np.clip(sc.point_at(sc.b_start_angle_deg, r0)
                      + rng.normal(0.0, sc.start_spread, 2), 0.0, 1.0)
        states, actions, rewards = [], [], []
        reached = False
        while len(states) < sc.max_len:
            states.append(pos.copy())
            angle = _angle_deg(pos)
            if np.linalg.norm(pos - goal) < 2.5 * sc.step_size:
                # close to the goal: aim straight at it
                delta = goal - pos + rng.normal(0.0, 0.1 * sc.step_size, 2)
                move = min(sc.step_size, float(np.linalg.norm(delta)))
                act = np.clip(move * delta / np.linalg.norm(delta),
                              -sc.step_size, sc.step_size)
                new = np.clip(pos + act, 0.0, 1.0)
                act = new - pos
                pos = new
            else:
                frac = np.clip((angle - sc.b_merge_angle_deg)
                               / max(sc.b_start_angle_deg - sc.b_merge_angle_deg, 1e-9), 0.0, 1.0)
                pos, act = _arc_step(pos, sc.radius + sc.gap * frac, sc.step_size,
                                     sc.heading_noise, sc.radial_gain, rng)
            actions.append(act)
            if np.linalg.norm(pos - goal) <= sc.goal_radius:
                rewards.append(sc.goal_reward)
                reached = True
                break
            rewards.append(sc.step_cost)
        if not reached:
            raise ScenarioError("family B trajectory failed to reach the goal; "
                                "geometry or noise settings are infeasible")
        trajectories.append(Trajectory(traj_id, np.array(states), np.array(actions),
                                       np.array(rewards)))
        traj_id += 1

    return OfflineDataset.build(trajectories, gamma=0.99)


def scripted_arc_policy(scenario: StitchScenario):
    """Reference corridor-following controller (oracle for normalized scores)."""
    goal = scenario.goal_center

    def policy(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if np.linalg.norm(state - goal) < 2.5 * scenario.step_size:
            delta = goal - state
            return np.clip(delta, -scenario.step_size, scenario.step_size)
        r = max(float(np.linalg.norm(state)), 1e-9)
        radial = state / r
        tangent = np.array([radial[1], -radial[0]])
        direction = tangent + scenario.radial_gain * (scenario.radius - r) * radial
        direction = direction / np.linalg.norm(direction)
        return np.clip(scenario.step_size * direction, -scenario.step_size, scenario.step_size)

    return policy


def _id_start_sampler(scenario: StitchScenario):
    start = scenario.start

    def sampler(rng: np.random.Generator) -> np.ndarray:
        return np.clip(start + rng.normal(0.0, scenario.start_spread, 2), 0.0, 1.0)

    return sampler


def _ood_start_sampler(scenario: StitchScenario):
    """Starts in an annulus around the family-A start region, off data support."""
    start = scenario.start
    r_lo, r_hi = scenario.ood_radius

    def sampler(rng: np.random.Generator) -> np.ndarray:
        radius = rng.uniform(r_lo, r_hi)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        pos = start + radius * np.array([np.cos(angle), np.sin(angle)])
        return np.clip(pos, 0.01, 1.0)

    return sampler


def make_stitching_env(scenario: StitchScenario, start_mode: str = "ood") -> Nav2dEnv:
    if start_mode == "ood":
        sampler = _ood_start_sampler(scenario)
    elif start_mode == "id":
        sampler = _id_start_sampler(scenario)
    else:
        raise ScenarioError(f"unknown start mode {start_mode!r}")
    return Nav2dEnv(scenario.nav_params(), sampler, name=f"stitching-{start_mode}")


# --- 1D line walk ------------------------------------------------------------------


@dataclass(frozen=True)
class LinewalkScenario:
    n_traj: int = 60
    length: int = 40
    step_size: float = 0.1
    x_min: float = 0.0
    x_max: float = 50.0


def gen_linewalk_dataset(scenario: LinewalkScenario, seed: int) -> OfflineDataset:
    """Constant-velocity 1D walks; directions alternate so actions span both signs."""
    if scenario.n_traj < 2 or scenario.length < 2:
        raise ScenarioError("linewalk needs n_traj >= 2 and length >= 2")
    rng = np.random.default_rng(seed)
    margin = scenario.length * scenario.step_size
    trajectories = []
    for k in range(scenario.n_traj):
        direction = 1.0 if k % 2 == 0 else -1.0
        x0 = rng.uniform(scenario.x_min + margin, scenario.x_max - margin)
        xs = x0 + direction * scenario.step_size * np.arange(scenario.length)
        states = xs[:, None]
        actions = np.full((scenario.length, 1), direction * scenario.step_size)
        rewards = np.zeros(scenario.length)
        trajectories.append(Trajectory(k, states, actions, rewards))
    return OfflineDataset.build(trajectories, gamma=0.99)


def true_linewalk_offset(x_a: float, x_b: float, step_size: float) -> int:
    return int(round(abs(x_b - x_a) / step_size))


# --- env registry ------------------------------------------------------------------


def make_env(name: str, scenario: StitchScenario | None = None) -> Nav2dEnv:
    """Resolve a CLI env name to a constructed environment."""
    scenario = scenario or StitchScenario()
    if name in ("stitching-ood", "stitching"):
        return make_stitching_env(scenario, "ood")
    if name == "stitching-id":
        return make_stitching_env(scenario, "id")
    raise ScenarioError(f"unknown environment {name!r}")
