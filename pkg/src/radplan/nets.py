"""Small feed-forward nets with hand-rolled reverse-mode gradients and Adam.

Everything is float64 numpy. Inputs may be single vectors (d,) or batches
(B, d). Nets can optionally append a sinusoidal embedding of an integer step
index to their input, which is how the denoiser and the return guide condition
on the current denoising step.

Parameters are immutable during inference and may be shared across threads;
training mutates one owned copy through `adam_step`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "mish")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...]
    activation: str = "relu"
    step_embed_dim: int = 0  # sinusoidal step embedding appended to the input; 0 disables

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.out_dim < 1 or not self.hidden:
            raise ValueError("in_dim, out_dim >= 1 and at least one hidden width required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.step_embed_dim < 0 or self.step_embed_dim % 2 != 0:
            raise ValueError("step_embed_dim must be an even non-negative integer")

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.in_dim + self.step_embed_dim, *self.hidden, self.out_dim)

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim, "out_dim": self.out_dim, "hidden": list(self.hidden),
            "activation": self.activation, "step_embed_dim": self.step_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            in_dim=int(d["in_dim"]), out_dim=int(d["out_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            activation=str(d["activation"]), step_embed_dim=int(d["step_embed_dim"]),
        )


@dataclass
class NetParams:
    spec: NetSpec
    weights: list[np.ndarray]  # weights[l]: (fan_in, fan_out)
    biases: list[np.ndarray]   # biases[l]: (fan_out,)

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "NetParams":
        return NetParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(spec: NetSpec, rng: np.random.Generator, final_scale: float = 1.0) -> NetParams:
    """Uniform fan-in (Kaiming-style) initialization; biases zero.

    `final_scale` shrinks the last layer so freshly initialized regression
    nets predict near zero (used by the denoiser and the return guide).
    """
    widths = spec.layer_widths
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        if l == len(widths) - 2:
            bound *= final_scale
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(spec, weights, biases)


# --- activations --------------------------------------------------------------


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    # mish: z * tanh(softplus(z))
    return z * np.tanh(_softplus(z))


def _activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.where(z > 0, 1.0, 0.0)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    t = np.tanh(_softplus(z))
    sig = 1.0 / (1.0 + np.exp(-z))
    return t + z * (1.0 - t**2) * sig


def sinusoidal_step_embedding(step, dim: int) -> np.ndarray:
    """Deterministic sin/cos embedding of an integer step index.

    Layout interleaves sin and cos per frequency, so step 0 maps to
    [0, 1, 0, 1, ...]. Accepts a scalar (returns (dim,)) or an integer array
    (B,) (returns (B, dim)).
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError("embedding dim must be even and >= 2")
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * exponents)
    steps = np.asarray(step, dtype=np.float64)
    ang = steps[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# --- forward / backward -------------------------------------------------------


def _prepare_input(params: NetParams, x: np.ndarray, step) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.spec.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != spec in_dim {params.spec.in_dim}")
    if params.spec.step_embed_dim:
        if step is None:
            raise ValueError("net expects a step index but none was given")
        emb = sinusoidal_step_embedding(step, params.spec.step_embed_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.shape[0], emb.shape[0]))
        x = np.concatenate([x, emb], axis=1)
    elif step is not None:
        raise ValueError("net was built without a step embedding")
    return x, single


def forward_with_trace(params: NetParams, x: np.ndarray, step=None):
    """Forward pass keeping pre-activations for a later backward pass."""
    h, single = _prepare_input(params, x, step)
    act = params.spec.activation
    pre, post = [], [h]
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = post[-1] @ w + b
        pre.append(z)
        post.append(_activate(act, z) if l < n_layers - 1 else z)
    return post[-1], (pre, post, single)


def backprop_from_trace(params: NetParams, trace, upstream_grad: np.ndarray):
    """Reverse-mode sweep from cached activations.

    Returns (weight_grads, bias_grads, input_grad). The input gradient covers
    only the caller-supplied input dims (not the step embedding). Batched
    inputs accumulate parameter gradients over the batch.
    """
    pre, post, single = trace
    act = params.spec.activation
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape != post[-1].shape:
        raise ValueError(f"upstream grad shape {delta.shape} != output shape {post[-1].shape}")
    wgrads = [None] * len(params.weights)
    bgrads = [None] * len(params.biases)
    for l in range(len(params.weights) - 1, -1, -1):
        if l < len(params.weights) - 1:
            delta = delta * _activate_grad(act, pre[l])
        wgrads[l] = post[l].T @ delta
        bgrads[l] = delta.sum(axis=0)
        delta = delta @ params.weights[l].T
    input_grad = delta[:, : params.spec.in_dim]
    if single:
        input_grad = input_grad[0]
    return wgrads, bgrads, input_grad


def forward(params: NetParams, x: np.ndarray, step=None) -> np.ndarray:
    """Deterministic feed-forward evaluation."""
    out, (_, _, single) = forward_with_trace(params, x, step)
    return out[0] if single else out


def backward(params: NetParams, x: np.ndarray, step, upstream_grad: np.ndarray):
    """Exact gradients of upstream_grad . output w.r.t. parameters and input."""
    out, trace = forward_with_trace(params, x, step)
    del out
    return backprop_from_trace(params, trace, upstream_grad)


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: NetParams, lr: float, **kwargs) -> "OptimizerState":
        return cls(
            lr=lr,
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
            **kwargs,
        )


def clip_gradients(wgrads, bgrads, max_norm: float):
    """Globally rescale gradients to L2 norm <= max_norm. Returns new lists."""
    sq = sum(float(np.sum(g * g)) for g in wgrads) + sum(float(np.sum(g * g)) for g in bgrads)
    norm = np.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return wgrads, bgrads
    scale = max_norm / norm
    return [g * scale for g in wgrads], [g * scale for g in bgrads]


def adam_step(params: NetParams, wgrads, bgrads, state: OptimizerState) -> NetParams:
    """Standard bias-corrected Adam update. Mutates params and state in place."""
    for l, g in enumerate(wgrads):
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite weight gradient at layer {l}")
    for l, g in enumerate(bgrads):
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite bias gradient at layer {l}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    scale = state.lr * np.sqrt(corr2) / corr1
    for l in range(len(params.weights)):
        state.m_w[l] = b1 * state.m_w[l] + (1 - b1) * wgrads[l]
        state.v_w[l] = b2 * state.v_w[l] + (1 - b2) * wgrads[l] ** 2
        params.weights[l] = params.weights[l] - scale * state.m_w[l] / (np.sqrt(state.v_w[l]) + state.eps)
        state.m_b[l] = b1 * state.m_b[l] + (1 - b1) * bgrads[l]
        state.v_b[l] = b2 * state.v_b[l] + (1 - b2) * bgrads[l] ** 2
        params.biases[l] = params.biases[l] - scale * state.m_b[l] / (np.sqrt(state.v_b[l]) + state.eps)
    return params


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def config_digest(config: dict) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    path,
    role: str,
    params: NetParams,
    opt_state: OptimizerState | None = None,
    train_config: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write a versioned binary checkpoint (npz): spec, 64-bit params, optimizer."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "role": role,
        "spec": params.spec.to_dict(),
        "train_config_hash": config_digest(train_config or {}),
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{l}"] = w
        arrays[f"b{l}"] = b
    if opt_state is not None:
        arrays["opt_scalars"] = np.array(
            [opt_state.lr, opt_state.beta1, opt_state.beta2, opt_state.eps, float(opt_state.step)]
        )
        for l in range(len(params.weights)):
            arrays[f"mw{l}"] = opt_state.m_w[l]
            arrays[f"vw{l}"] = opt_state.v_w[l]
            arrays[f"mb{l}"] = opt_state.m_b[l]
            arrays[f"vb{l}"] = opt_state.v_b[l]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(
    path,
    expected_role: str | None = None,
    expected_spec: NetSpec | None = None,
):
    """Load a checkpoint; returns (params, opt_state_or_None, meta dict).

    Rejects role or spec mismatches and unknown versions.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        spec = NetSpec.from_dict(meta["spec"])
        if expected_role is not None and meta["role"] != expected_role:
            raise CheckpointError(f"{path}: role {meta['role']!r} != expected {expected_role!r}")
        if expected_spec is not None and spec != expected_spec:
            raise CheckpointError(f"{path}: stored NetSpec does not match the expected spec")
        n_layers = len(spec.layer_widths) - 1
        weights = [data[f"w{l}"] for l in range(n_layers)]
        biases = [data[f"b{l}"] for l in range(n_layers)]
        params = NetParams(spec, weights, biases)
        opt_state = None
        if "opt_scalars" in data:
            lr, b1, b2, eps, step = data["opt_scalars"]
            opt_state = OptimizerState(
                lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps), step=int(step),
                m_w=[data[f"mw{l}"] for l in range(n_layers)],
                v_w=[data[f"vw{l}"] for l in range(n_layers)],
                m_b=[data[f"mb{l}"] for l in range(n_layers)],
                v_b=[data[f"vb{l}"] for l in range(n_layers)],
            )
    return params, opt_state, meta
