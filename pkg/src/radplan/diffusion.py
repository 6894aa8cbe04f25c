"""Anchored, return-guided denoising diffusion over short state-action plans.

A plan is an H x (ds+da) matrix in normalized units, row t holding the
(state, action) pair at plan step t. Known states (the current state at row 0
and the retrieved target at its estimated row) are clamped into the noisy
plan at every step of the reverse process, inpainting-style, so they survive
into the final sample exactly. An optional learned return predictor shifts
each reverse-step mean along its input gradient to bias samples toward
high-return plans.

Forward corruption uses tau_i = signal_i * tau_0 + noise_i * eps with
signal_i^2 + noise_i^2 = 1 (variance preserving). The reverse step adds
Gaussian noise with variance beta_i (none at the last step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .trajectory import OfflineDataset, discounted_suffix_return, normalize_actions, normalize_states


class SamplingError(RuntimeError):
    pass


class DiffusionDataError(ValueError):
    pass


# --- noise schedule -------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption coefficients, 1-indexed by denoising step i.

    alphas[i] scales the clean plan and sigmas[i] the injected noise in the
    forward process; they satisfy alphas**2 + sigmas**2 == 1. Index 0 is the
    uncorrupted limit (alpha 1, sigma 0).
    """

    n_steps: int
    kind: str
    betas: np.ndarray               # (N,), betas[i-1] is beta_i
    alpha_bars: np.ndarray          # (N+1,), alpha_bars[i] = prod_{j<=i}(1-beta_j); alpha_bars[0]=1
    posterior_variances: np.ndarray  # (N,), beta-tilde_i

    @property
    def alphas(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)

    def beta(self, i: int) -> float:
        return float(self.betas[i - 1])

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "kind": self.kind}


def make_schedule(n_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a schedule with increasing betas and near-total final corruption.

    The cosine variant follows the squared-cosine cumulative-product shape;
    the linear variant spaces betas evenly, rescaled so that small step
    counts still end heavily corrupted. Betas are capped at 0.999.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if kind == "cosine":
        s = 0.008
        j = np.arange(n_steps + 1)
        f = np.cos(((j / n_steps + s) / (1 + s)) * np.pi / 2.0) ** 2
        bars = f / f[0]
        betas = 1.0 - bars[1:] / bars[:-1]
        betas = np.clip(betas, 1e-8, 0.999)
    elif kind == "linear":
        scale = 1000.0 / n_steps
        betas = np.linspace(1e-4 * scale, min(0.02 * scale, 0.999), n_steps)
        betas = np.clip(betas, 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    posterior = betas * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
    return NoiseSchedule(
        n_steps=n_steps, kind=kind, betas=betas,
        alpha_bars=alpha_bars, posterior_variances=posterior,
    )


# --- plans and anchors ------------------------------------------------------------


@dataclass(frozen=True)
class AnchorSet:
    """(row, normalized state) constraints clamped into a plan's state block."""

    anchors: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        positions = [p for p, _ in self.anchors]
        if len(set(positions)) != len(positions):
            raise ValueError("anchor positions must be distinct")
        frozen = tuple(
            (int(p), np.ascontiguousarray(s, dtype=np.float64)) for p, s in self.anchors
        )
        for _, s in frozen:
            if not np.isfinite(s).all():
                raise ValueError("anchor states must be finite")
        object.__setattr__(self, "anchors", frozen)

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.anchors)


def apply_anchors(plan: np.ndarray, anchors: AnchorSet, ds: int) -> np.ndarray:
    """Clamp anchor states into their rows' state columns; actions stay free."""
    horizon = plan.shape[0]
    out = plan.copy()
    for pos, state in anchors.anchors:
        if not (0 <= pos < horizon):
            raise IndexError(f"anchor position {pos} outside plan of horizon {horizon}")
        if state.shape != (ds,):
            raise ValueError(f"anchor state has shape {state.shape}, expected ({ds},)")
        out[pos, :ds] = state
    return out


def forward_noise(tau0: np.ndarray, i: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt a clean plan to step i: alphas[i] * tau0 + sigmas[i] * eps."""
    if not (0 <= i <= sched.n_steps):
        raise ValueError(f"step {i} outside [0, {sched.n_steps}]")
    if eps.shape != tau0.shape:
        raise ValueError(f"noise shape {eps.shape} != plan shape {tau0.shape}")
    return float(sched.alphas[i]) * tau0 + float(sched.sigmas[i]) * eps


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 0.1          # strength of the return-gradient shift
    gradient_clip: float = 1.0  # L2 cap on the raw gradient before scaling

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError("guidance scale must be finite and >= 0")


# --- training ---------------------------------------------------------------------


@dataclass
class PlanWindows:
    """All horizon-length windows of a dataset, pre-normalized and stacked."""

    plans: np.ndarray        # (n_windows, H, ds+da)
    segment_returns: np.ndarray  # (n_windows,) discounted over the H rewards
    horizon: int
    ds: int
    da: int


def extract_windows(dataset: OfflineDataset, horizon: int) -> PlanWindows:
    """Collect every length-H sub-trajectory; trajectories shorter than H are skipped."""
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    plans, rets = [], []
    for traj in dataset.trajectories:
        if len(traj) < horizon:
            continue
        ns = normalize_states(traj.states, dataset.norm_stats)
        na = normalize_actions(traj.actions, dataset.norm_stats)
        rows = np.concatenate([ns, na], axis=1)
        for start in range(len(traj) - horizon + 1):
            plans.append(rows[start : start + horizon])
            rets.append(discounted_suffix_return(traj, start, dataset.gamma, horizon=horizon))
    if not plans:
        raise DiffusionDataError(
            f"no trajectory of length >= {horizon}; cannot build training windows"
        )
    return PlanWindows(
        plans=np.stack(plans),
        segment_returns=np.array(rets),
        horizon=horizon,
        ds=dataset.ds,
        da=dataset.da,
    )


def make_denoiser_spec(horizon: int, ds: int, da: int,
                       hidden: tuple[int, ...] = (512, 512, 512),
                       step_embed_dim: int = 16) -> nets.NetSpec:
    dim = horizon * (ds + da)
    return nets.NetSpec(in_dim=dim, out_dim=dim, hidden=hidden,
                        activation="mish", step_embed_dim=step_embed_dim)


def make_guide_spec(horizon: int, ds: int, da: int,
                    hidden: tuple[int, ...] = (256, 256),
                    step_embed_dim: int = 16) -> nets.NetSpec:
    return nets.NetSpec(in_dim=horizon * (ds + da), out_dim=1, hidden=hidden,
                        activation="mish", step_embed_dim=step_embed_dim)


def sample_training_batch(windows: PlanWindows, sched: NoiseSchedule,
                          rng: np.random.Generator, batch_size: int):
    """Draw one denoiser training batch.

    Per sample, in this order: a window index, a pseudo-target offset
    o ~ U(1, H-1), a diffusion step i ~ U(1, N), then the noise matrix. The
    noisy plan gets the clean current and pseudo-target states clamped in,
    and the returned mask zeroes those entries out of the loss (their noise
    is unrecoverable by construction).

    Returns (noisy_flat, steps, eps_flat, mask_flat, window_idx, offsets).
    """
    n, H, D = windows.plans.shape
    idx = rng.integers(0, n, size=batch_size)
    offsets = rng.integers(1, H, size=batch_size)
    steps = rng.integers(1, sched.n_steps + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, H, D))
    clean = windows.plans[idx]
    signal = sched.alphas[steps][:, None, None]
    noise = sched.sigmas[steps][:, None, None]
    noisy = signal * clean + noise * eps
    mask = np.ones((batch_size, H, D))
    rows = np.arange(batch_size)
    ds = windows.ds
    noisy[rows, 0, :ds] = clean[rows, 0, :ds]
    noisy[rows, offsets, :ds] = clean[rows, offsets, :ds]
    mask[rows, 0, :ds] = 0.0
    mask[rows, offsets, :ds] = 0.0
    flat = (batch_size, H * D)
    return noisy.reshape(flat), steps, eps.reshape(flat), mask.reshape(flat), idx, offsets


def masked_noise_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean squared error over unmasked entries; returns (loss, upstream grad)."""
    count = mask.sum()
    diff = (pred - target) * mask
    loss = float(np.sum(diff * diff) / count)
    return loss, 2.0 * diff / count


def train_denoiser(
    dataset: OfflineDataset,
    horizon: int,
    sched: NoiseSchedule,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
    steps_per_epoch: int = 100,
    lr: float = 2e-4,
    hidden: tuple[int, ...] = (512, 512, 512),
    grad_clip: float = 10.0,
    snapshot_epochs: tuple[int, ...] = (),
):
    """Train the noise-prediction net on pseudo-target-anchored windows.

    Returns (params, epoch_mean_losses, snapshots) where snapshots maps an
    epoch number from snapshot_epochs to a parameter copy taken right after
    that epoch.
    """
    windows = extract_windows(dataset, horizon)
    rng = np.random.default_rng(seed)
    spec = make_denoiser_spec(horizon, windows.ds, windows.da, hidden=hidden)
    params = nets.init_params(spec, rng, final_scale=0.01)
    opt = nets.OptimizerState.for_params(params, lr=lr)
    losses: list[float] = []
    snapshots: dict[int, nets.NetParams] = {}
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            noisy, steps, eps, mask, _, _ = sample_training_batch(windows, sched, rng, batch_size)
            pred, trace = nets.forward_with_trace(params, noisy, steps)
            loss, upstream = masked_noise_loss(pred, eps, mask)
            wg, bg, _ = nets.backprop_from_trace(params, trace, upstream)
            wg, bg = nets.clip_gradients(wg, bg, grad_clip)
            nets.adam_step(params, wg, bg, opt)
            total += loss
            if not np.isfinite(loss):
                raise nets.TrainingError(f"denoiser loss became non-finite at epoch {epoch}")
        losses.append(total / steps_per_epoch)
        if epoch + 1 in snapshot_epochs:
            snapshots[epoch + 1] = params.copy()
    return params, losses, snapshots


@dataclass
class ReturnGuide:
    """Learned map from a (noisy plan, step) pair to a scaled segment return."""

    params: nets.NetParams
    return_min: float
    return_max: float


def scale_return(value: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.0
    return (value - lo) / (hi - lo)


def train_return_guide(
    dataset: OfflineDataset,
    horizon: int,
    sched: NoiseSchedule,
    gamma: float | None = None,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    steps_per_epoch: int = 100,
    lr: float = 2e-4,
    hidden: tuple[int, ...] = (256, 256),
    grad_clip: float = 10.0,
):
    """Regress the guide onto window returns rescaled to [0, 1] over the dataset.

    gamma defaults to the dataset's discount; window returns are computed
    with it when supplied.
    """
    if gamma is not None and gamma != dataset.gamma:
        dataset = OfflineDataset.build(list(dataset.trajectories), gamma=gamma)
    windows = extract_windows(dataset, horizon)
    lo = float(windows.segment_returns.min())
    hi = float(windows.segment_returns.max())
    span = hi - lo if hi > lo else 1.0
    targets_all = (windows.segment_returns - lo) / span

    rng = np.random.default_rng(seed)
    spec = make_guide_spec(horizon, windows.ds, windows.da, hidden=hidden)
    params = nets.init_params(spec, rng, final_scale=0.01)
    opt = nets.OptimizerState.for_params(params, lr=lr)
    losses: list[float] = []
    n, H, D = windows.plans.shape
    for _ in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n, size=batch_size)
            steps = rng.integers(1, sched.n_steps + 1, size=batch_size)
            eps = rng.standard_normal((batch_size, H, D))
            clean = windows.plans[idx]
            noisy = sched.alphas[steps][:, None, None] * clean + sched.sigmas[steps][:, None, None] * eps
            pred, trace = nets.forward_with_trace(params, noisy.reshape(batch_size, H * D), steps)
            target = targets_all[idx][:, None]
            diff = pred - target
            loss = float(np.mean(diff * diff))
            wg, bg, _ = nets.backprop_from_trace(params, trace, 2.0 * diff / batch_size)
            wg, bg = nets.clip_gradients(wg, bg, grad_clip)
            nets.adam_step(params, wg, bg, opt)
            total += loss
        losses.append(total / steps_per_epoch)
    return ReturnGuide(params=params, return_min=lo, return_max=hi), losses


# --- sampling ---------------------------------------------------------------------


def guidance_gradient(guide: ReturnGuide, flat_plan: np.ndarray, i: int,
                      anchors: AnchorSet, ds: int, horizon: int,
                      gcfg: GuidanceConfig) -> np.ndarray:
    """Return-gradient direction for one plan, clipped, zeroed at anchors."""
    _, _, grad = nets.backward(guide.params, flat_plan, i, np.ones(1))
    grad = grad.reshape(horizon, -1)
    for pos, _ in anchors.anchors:
        grad[pos, :ds] = 0.0
    norm = float(np.linalg.norm(grad))
    if norm > gcfg.gradient_clip and norm > 0:
        grad = grad * (gcfg.gradient_clip / norm)
    return grad


def denoise_step(
    tau: np.ndarray,
    i: int,
    denoiser: nets.NetParams,
    guide: ReturnGuide | None,
    gcfg: GuidanceConfig,
    anchors: AnchorSet,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    ds: int,
) -> np.ndarray:
    """One reverse transition tau_i -> tau_{i-1} with anchors re-clamped.

    The mean is the standard posterior mean, computed through the predicted
    clean plan (clipped to the normalized data range [-1, 1], which keeps the
    few-step reverse process stable), optionally shifted by
    scale * clipped return gradient. Noise with variance beta_i is added
    except at the final step. A zero guidance scale short-circuits the guide
    entirely, so the output is bit-identical to the unguided sampler under a
    shared noise stream.
    """
    if not (1 <= i <= sched.n_steps):
        raise ValueError(f"step {i} outside [1, {sched.n_steps}]")
    horizon, width = tau.shape
    flat = tau.reshape(-1)
    eps_hat = nets.forward(denoiser, flat, i)
    beta = sched.beta(i)
    bar_i = float(sched.alpha_bars[i])
    bar_prev = float(sched.alpha_bars[i - 1])
    clean_hat = (flat - np.sqrt(1.0 - bar_i) * eps_hat) / np.sqrt(bar_i)
    clean_hat = np.clip(clean_hat, -1.0, 1.0)
    coef_clean = np.sqrt(bar_prev) * beta / (1.0 - bar_i)
    coef_noisy = np.sqrt(1.0 - beta) * (1.0 - bar_prev) / (1.0 - bar_i)
    mean = (coef_clean * clean_hat + coef_noisy * flat).reshape(horizon, width)
    if guide is not None and gcfg.scale > 0.0:
        grad = guidance_gradient(guide, flat, i, anchors, ds, horizon, gcfg)
        mean = mean + gcfg.scale * grad
    if i > 1:
        mean = mean + np.sqrt(beta) * rng.standard_normal(tau.shape)
    out = apply_anchors(mean, anchors, ds)
    if not np.isfinite(out).all():
        raise SamplingError(f"non-finite plan values at denoising step {i}")
    return out


def sample_plan(
    current_state: np.ndarray,
    target_state: np.ndarray | None,
    anchor_offset: int | None,
    denoiser: nets.NetParams,
    guide: ReturnGuide | None,
    gcfg: GuidanceConfig,
    sched: NoiseSchedule,
    horizon: int,
    ds: int,
    da: int,
    rng: np.random.Generator,
    on_step=None,
) -> np.ndarray:
    """Generate a full plan anchored at the current state (and target if given).

    Inputs are normalized state vectors. The noise stream is consumed in a
    fixed order: the initial H x (ds+da) Gaussian draw, then one noise matrix
    per reverse step down to step 2. `on_step(i, plan)` is invoked with the
    plan after each reverse step, newest first.
    """
    anchor_list = [(0, np.asarray(current_state, dtype=np.float64))]
    if target_state is not None:
        if anchor_offset is None or not (1 <= anchor_offset <= horizon - 1):
            raise ValueError(f"anchor offset {anchor_offset} outside [1, {horizon - 1}]")
        anchor_list.append((int(anchor_offset), np.asarray(target_state, dtype=np.float64)))
    anchors = AnchorSet(tuple(anchor_list))
    tau = rng.standard_normal((horizon, ds + da))
    tau = apply_anchors(tau, anchors, ds)
    for i in range(sched.n_steps, 0, -1):
        tau = denoise_step(tau, i, denoiser, guide, gcfg, anchors, sched, rng, ds)
        if on_step is not None:
            on_step(i, tau)
    return tau
