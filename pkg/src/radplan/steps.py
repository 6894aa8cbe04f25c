"""Step estimation: predict how many environment steps separate two states.

A small MLP takes the concatenated (current state, target state) pair in raw
units and regresses the true offset between them. At inference the real-valued
output is rounded half-away-from-zero and clamped into [1, horizon-1] so it
always names a valid interior plan row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .trajectory import OfflineDataset


class PairSamplingError(ValueError):
    pass


@dataclass(frozen=True)
class StepTrainingPair:
    current_state: np.ndarray
    target_state: np.ndarray
    offset: int


@dataclass
class StepEstimator:
    params: nets.NetParams
    horizon: int


def make_step_spec(ds: int, hidden: tuple[int, ...] = (128, 128, 128)) -> nets.NetSpec:
    # 4 affine layers total: 3 hidden + output.
    return nets.NetSpec(in_dim=2 * ds, out_dim=1, hidden=hidden, activation="relu")


def sample_step_pairs(
    dataset: OfflineDataset, horizon: int, count: int, seed: int
) -> list[StepTrainingPair]:
    """Draw (state, later state, offset) triples, offsets uniform where possible.

    A start position (traj, t) is drawn uniformly over all positions with at
    least one later state, then the offset uniform on [1, min(H-1, T-1-t)].
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    positions = []
    for traj in dataset.trajectories:
        T = len(traj)
        for t in range(T - 1):
            positions.append((traj, t))
    if not positions:
        raise PairSamplingError("no trajectory of length >= 2; cannot sample step pairs")
    rng = np.random.default_rng(seed)
    pairs = []
    pos_idx = rng.integers(0, len(positions), size=count)
    for k in range(count):
        traj, t = positions[pos_idx[k]]
        max_off = min(horizon - 1, len(traj) - 1 - t)
        offset = int(rng.integers(1, max_off + 1))
        pairs.append(StepTrainingPair(traj.states[t], traj.states[t + offset], offset))
    return pairs


def train_step_estimator(
    pairs: list[StepTrainingPair],
    horizon: int,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    hidden: tuple[int, ...] = (128, 128, 128),
    grad_clip: float = 10.0,
):
    """Minimize squared error between predicted and true offsets with Adam.

    Returns (estimator, per-epoch mean losses). Zero epochs leaves the net at
    initialization with an empty loss curve.
    """
    if not pairs:
        raise ValueError("cannot train on an empty pair list")
    ds = pairs[0].current_state.shape[0]
    inputs = np.array([np.concatenate([p.current_state, p.target_state]) for p in pairs])
    targets = np.array([float(p.offset) for p in pairs])[:, None]
    rng = np.random.default_rng(seed)
    params = nets.init_params(make_step_spec(ds, hidden), rng)
    opt = nets.OptimizerState.for_params(params, lr=lr)
    losses: list[float] = []
    n = len(pairs)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            pred, trace = nets.forward_with_trace(params, inputs[sel])
            diff = pred - targets[sel]
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise nets.TrainingError("step estimator loss became non-finite")
            wg, bg, _ = nets.backprop_from_trace(params, trace, 2.0 * diff / len(sel))
            wg, bg = nets.clip_gradients(wg, bg, grad_clip)
            nets.adam_step(params, wg, bg, opt)
            total += loss
            batches += 1
        losses.append(total / batches)
    return StepEstimator(params=params, horizon=horizon), losses


def _round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def estimate_steps(est: StepEstimator, current_state: np.ndarray, target_state: np.ndarray) -> int:
    """Predicted step count, rounded half-away-from-zero, clamped to [1, H-1]."""
    raw = float(nets.forward(est.params, np.concatenate([current_state, target_state]))[0])
    return int(np.clip(_round_half_away(raw), 1, est.horizon - 1))
