"""Core data model: trajectories, offline datasets, returns, normalization, JSONL I/O.

States and actions are plain float64 numpy vectors. A trajectory stores its
transitions as arrays (one row per timestep); an offline dataset bundles
trajectories with per-dimension min/max statistics used to map values into
[-1, 1] for generative modelling. Datasets are immutable after construction
and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file or in-memory dataset violates the schema."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Trajectory:
    """An ordered (state, action, reward) sequence with a dataset-unique id."""

    id: int
    states: np.ndarray   # (T, ds)
    actions: np.ndarray  # (T, da)
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        object.__setattr__(self, "states", _freeze(np.atleast_2d(self.states)))
        object.__setattr__(self, "actions", _freeze(np.atleast_2d(self.actions)))
        object.__setattr__(self, "rewards", _freeze(np.atleast_1d(self.rewards)))
        T = self.states.shape[0]
        if T < 1:
            raise DatasetFormatError("trajectory must have length >= 1")
        if self.actions.shape[0] != T or self.rewards.shape[0] != T:
            raise DatasetFormatError(
                f"trajectory {self.id}: states/actions/rewards lengths differ "
                f"({T}/{self.actions.shape[0]}/{self.rewards.shape[0]})"
            )
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()
                and np.isfinite(self.rewards).all()):
            raise DatasetFormatError(f"trajectory {self.id}: non-finite entries")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def ds(self) -> int:
        return self.states.shape[1]

    @property
    def da(self) -> int:
        return self.actions.shape[1]

    @property
    def transitions(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(self.states[t], self.actions[t], float(self.rewards[t]))

    @classmethod
    def from_transitions(cls, traj_id: int, transitions: Sequence[Transition]) -> "Trajectory":
        return cls(
            id=traj_id,
            states=np.array([tr.state for tr in transitions], dtype=np.float64),
            actions=np.array([tr.action for tr in transitions], dtype=np.float64),
            rewards=np.array([tr.reward for tr in transitions], dtype=np.float64),
        )


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min/max over a dataset's states and actions.

    Normalization is the affine map x -> 2*(x - min)/(max - min) - 1 onto
    [-1, 1]. Dimensions with min == max are flagged constant and map to 0;
    denormalizing a constant dimension restores the stored constant exactly.
    """

    state_min: np.ndarray
    state_max: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray

    def __post_init__(self):
        for name in ("state_min", "state_max", "action_min", "action_max"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "NormStats":
        states = np.concatenate([t.states for t in trajectories], axis=0)
        actions = np.concatenate([t.actions for t in trajectories], axis=0)
        return cls(
            state_min=states.min(axis=0), state_max=states.max(axis=0),
            action_min=actions.min(axis=0), action_max=actions.max(axis=0),
        )

    @property
    def constant_state_dims(self) -> np.ndarray:
        return self.state_min == self.state_max

    @property
    def constant_action_dims(self) -> np.ndarray:
        return self.action_min == self.action_max


def _normalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != lo.shape[0]:
        raise ValueError(f"dimension mismatch: vector has {x.shape[-1]} dims, stats have {lo.shape[0]}")
    span = hi - lo
    const = span == 0
    safe = np.where(const, 1.0, span)
    out = 2.0 * (x - lo) / safe - 1.0
    return np.where(const, 0.0, out)


def _denormalize(n: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if n.shape[-1] != lo.shape[0]:
        raise ValueError(f"dimension mismatch: vector has {n.shape[-1]} dims, stats have {lo.shape[0]}")
    const = (hi - lo) == 0
    out = (n + 1.0) / 2.0 * (hi - lo) + lo
    return np.where(const, lo, out)


def normalize_states(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return _normalize(x, stats.state_min, stats.state_max)


def denormalize_states(n: np.ndarray, stats: NormStats) -> np.ndarray:
    return _denormalize(n, stats.state_min, stats.state_max)


def normalize_actions(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return _normalize(x, stats.action_min, stats.action_max)


def denormalize_actions(n: np.ndarray, stats: NormStats) -> np.ndarray:
    return _denormalize(n, stats.action_min, stats.action_max)


@dataclass(frozen=True)
class OfflineDataset:
    """A fixed collection of trajectories plus normalization statistics."""

    trajectories: tuple[Trajectory, ...]
    ds: int
    da: int
    gamma: float
    norm_stats: NormStats = field(repr=False)

    @classmethod
    def build(cls, trajectories: Sequence[Trajectory], gamma: float = 0.99) -> "OfflineDataset":
        if len(trajectories) == 0:
            raise DatasetFormatError("dataset must contain at least one trajectory")
        if not (0.0 < gamma < 1.0):
            raise DatasetFormatError(f"gamma must be in (0, 1), got {gamma}")
        ids = [t.id for t in trajectories]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("trajectory ids must be unique within a dataset")
        ds, da = trajectories[0].ds, trajectories[0].da
        for t in trajectories:
            if t.ds != ds or t.da != da:
                raise DatasetFormatError(
                    f"trajectory {t.id}: dims ({t.ds},{t.da}) differ from dataset ({ds},{da})"
                )
        stats = NormStats.from_trajectories(trajectories)
        return cls(trajectories=tuple(trajectories), ds=ds, da=da, gamma=gamma, norm_stats=stats)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def content_hash(self) -> str:
        """SHA-256 of the canonical serialized form; stable across processes."""
        buf = io.StringIO()
        _write_dataset(self, buf)
        return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()


def discounted_suffix_return(
    traj: Trajectory,
    t: int,
    gamma: float,
    horizon: int | None = None,
    absolute_exponent: bool = False,
) -> float:
    """Discounted cumulative reward from timestep t.

    Default convention weights reward j by gamma**(j - t) so that suffix
    returns are comparable across timesteps. With absolute_exponent=True the
    weight is gamma**j instead (the whole sum scaled by gamma**t).

    With a horizon the sum covers at most `horizon` rewards, truncated at
    trajectory end.
    """
    T = len(traj)
    if not (0 <= t < T):
        raise IndexError(f"timestep {t} out of range for trajectory of length {T}")
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if horizon is not None and horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    end = T if horizon is None else min(T, t + horizon)
    total = 0.0
    weight = gamma**t if absolute_exponent else 1.0
    for j in range(t, end):
        total += weight * float(traj.rewards[j])
        weight *= gamma
    return total


def trajectory_return(traj: Trajectory, gamma: float) -> float:
    """Discounted return of the whole trajectory."""
    return discounted_suffix_return(traj, 0, gamma)


# --- JSONL serialization -----------------------------------------------------
#
# File layout: a header line {"ds": int, "da": int, "gamma": float} followed by
# one trajectory per line: {"id", "states", "actions", "rewards"}. Floats are
# written with repr-level precision (17 significant digits suffice for an
# exact float64 round trip), so save -> load -> save is byte-identical.


def _traj_to_json(traj: Trajectory) -> str:
    payload = {
        "id": traj.id,
        "states": traj.states.tolist(),
        "actions": traj.actions.tolist(),
        "rewards": traj.rewards.tolist(),
    }
    return json.dumps(payload, separators=(",", ":"))


def _write_dataset(dataset: OfflineDataset, fh) -> None:
    header = {"ds": dataset.ds, "da": dataset.da, "gamma": dataset.gamma}
    fh.write(json.dumps(header, separators=(",", ":")) + "\n")
    for traj in dataset.trajectories:
        fh.write(_traj_to_json(traj) + "\n")


def save_dataset(dataset: OfflineDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_dataset(dataset, fh)


def load_dataset(path) -> OfflineDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")

    def parse(lineno: int, text: str) -> dict:
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: parse error on line {lineno}: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise DatasetFormatError(f"{path}: parse error on line {lineno}: expected an object")
        return record

    header = parse(1, lines[0])
    for key in ("ds", "da", "gamma"):
        if key not in header:
            raise DatasetFormatError(f"{path}: header on line 1 missing '{key}'")
    ds, da = int(header["ds"]), int(header["da"])

    trajectories = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = parse(lineno, line)
        try:
            traj = Trajectory(
                id=int(record["id"]),
                states=np.asarray(record["states"], dtype=np.float64),
                actions=np.asarray(record["actions"], dtype=np.float64),
                rewards=np.asarray(record["rewards"], dtype=np.float64),
            )
        except KeyError as exc:
            raise DatasetFormatError(f"{path}: line {lineno} missing field {exc}") from exc
        except (DatasetFormatError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
        if traj.ds != ds or traj.da != da:
            raise DatasetFormatError(
                f"{path}: line {lineno}: trajectory dims ({traj.ds},{traj.da}) "
                f"do not match header ({ds},{da})"
            )
        trajectories.append(traj)
    if not trajectories:
        raise DatasetFormatError(f"{path}: dataset contains no trajectories")
    return OfflineDataset.build(trajectories, gamma=float(header["gamma"]))
