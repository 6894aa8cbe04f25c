import numpy as np
import pytest

from radplan import nets
from radplan.nets import (
    CheckpointError,
    NetParams,
    NetSpec,
    OptimizerState,
    TrainingError,
    adam_step,
    backward,
    clip_gradients,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_step_embedding,
)


def small_spec(activation="tanh", step_embed_dim=0):
    return NetSpec(in_dim=4, out_dim=3, hidden=(8, 6), activation=activation,
                   step_embed_dim=step_embed_dim)


# --- forward -----------------------------------------------------------------


def test_zero_params_zero_output(rng):
    params = init_params(small_spec(), rng)
    for l in range(len(params.weights)):
        params.weights[l][:] = 0.0
        params.biases[l][:] = 0.0
    assert np.all(forward(params, rng.normal(size=4)) == 0.0)


def test_identity_linear_layer():
    spec = NetSpec(in_dim=3, out_dim=3, hidden=(3,), activation="relu")
    params = NetParams(spec, [np.eye(3), np.eye(3)], [np.zeros(3), np.zeros(3)])
    x = np.array([0.5, 1.25, 2.0])  # positive so relu passes through
    assert forward(params, x) == pytest.approx(x)


def test_forward_deterministic_bitwise(rng):
    params = init_params(small_spec("mish"), rng)
    x = rng.normal(size=4)
    assert np.array_equal(forward(params, x), forward(params, x))


def test_forward_batch_matches_single(rng):
    params = init_params(small_spec("mish"), rng)
    xs = rng.normal(size=(5, 4))
    batch = forward(params, xs)
    for k in range(5):
        assert batch[k] == pytest.approx(forward(params, xs[k]), abs=1e-14)


def test_forward_rejects_wrong_dim(rng):
    params = init_params(small_spec(), rng)
    with pytest.raises(ValueError):
        forward(params, np.zeros(5))


def test_init_reproducible():
    a = init_params(small_spec(), np.random.default_rng(7))
    b = init_params(small_spec(), np.random.default_rng(7))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


# --- gradients ----------------------------------------------------------------


def finite_difference_grads(params, x, step, upstream, h=1e-5):
    """Independent central-difference oracle for parameter and input grads."""
    def objective(p, xv):
        return float(np.dot(upstream, forward(p, xv, step)))

    wgrads = []
    for l, w in enumerate(params.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            p = params.copy()
            p.weights[l][idx] += h
            up = objective(p, x)
            p.weights[l][idx] -= 2 * h
            down = objective(p, x)
            g[idx] = (up - down) / (2 * h)
        wgrads.append(g)
    xgrad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        xgrad[idx] = (objective(params, xp) - objective(params, xm)) / (2 * h)
    return wgrads, xgrad


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.mark.parametrize("activation", ["tanh", "mish"])
@pytest.mark.parametrize("embed", [0, 4])
def test_gradients_match_finite_differences(activation, embed, rng):
    spec = NetSpec(in_dim=3, out_dim=2, hidden=(5, 4), activation=activation,
                   step_embed_dim=embed)
    for trial in range(5):
        params = init_params(spec, rng)
        x = rng.normal(size=3)
        step = int(rng.integers(0, 10)) if embed else None
        upstream = rng.normal(size=2)
        wg, bg, xg = backward(params, x, step, upstream)
        wg_fd, xg_fd = finite_difference_grads(params, x, step, upstream)
        for l in range(len(wg)):
            assert rel_err(wg[l], wg_fd[l]) <= 1e-4
        assert rel_err(xg, xg_fd) <= 1e-4


def test_relu_gradients_away_from_kinks(rng):
    spec = NetSpec(in_dim=3, out_dim=2, hidden=(5,), activation="relu")
    checked = 0
    while checked < 3:
        params = init_params(spec, rng)
        x = rng.normal(size=3)
        pre = x @ params.weights[0] + params.biases[0]
        if np.min(np.abs(pre)) < 1e-3:  # finite differences are unreliable at the kink
            continue
        upstream = rng.normal(size=2)
        wg, bg, xg = backward(params, x, None, upstream)
        wg_fd, xg_fd = finite_difference_grads(params, x, None, upstream)
        for l in range(len(wg)):
            assert rel_err(wg[l], wg_fd[l]) <= 1e-4
        assert rel_err(xg, xg_fd) <= 1e-4
        checked += 1


def test_linear_input_grad_is_transpose(rng):
    spec = NetSpec(in_dim=4, out_dim=3, hidden=(4,), activation="relu")
    w0 = np.eye(4)
    w1 = rng.normal(size=(4, 3))
    params = NetParams(spec, [w0, w1], [np.full(4, 10.0), np.zeros(3)])  # bias keeps relu active
    upstream = rng.normal(size=3)
    _, _, xg = backward(params, rng.uniform(0.1, 1.0, size=4), None, upstream)
    assert xg == pytest.approx(w1 @ upstream, abs=1e-12)


def test_constant_net_zero_gradient(rng):
    params = init_params(small_spec(), rng)
    for l in range(len(params.weights)):
        params.weights[l][:] = 0.0
    params.biases[-1][:] = 3.0
    wg, bg, xg = backward(params, rng.normal(size=4), None, np.ones(3))
    assert np.all(xg == 0.0)
    for g in wg[1:]:
        assert np.all(g == 0.0)


def test_backward_is_pure(rng):
    params = init_params(small_spec("mish"), rng)
    snapshot = params.copy()
    backward(params, rng.normal(size=4), None, np.ones(3))
    for a, b in zip(params.weights, snapshot.weights):
        assert np.array_equal(a, b)


# --- adam ----------------------------------------------------------------------


def test_adam_zero_gradient_no_change(rng):
    params = init_params(small_spec(), rng)
    before = params.copy()
    opt = OptimizerState.for_params(params, lr=1e-2)
    zeros_w = [np.zeros_like(w) for w in params.weights]
    zeros_b = [np.zeros_like(b) for b in params.biases]
    adam_step(params, zeros_w, zeros_b, opt)
    for a, b in zip(params.weights, before.weights):
        assert np.array_equal(a, b)


def test_adam_constant_gradient_monotone(rng):
    params = init_params(small_spec(), rng)
    opt = OptimizerState.for_params(params, lr=1e-3)
    grad_w = [np.zeros_like(w) for w in params.weights]
    grad_b = [np.zeros_like(b) for b in params.biases]
    grad_w[0][0, 0] = 1.0  # positive gradient drives the weight down
    history = []
    for _ in range(50):
        adam_step(params, grad_w, grad_b, opt)
        history.append(params.weights[0][0, 0])
    diffs = np.diff(history)
    assert np.all(diffs < 0)


def test_adam_quadratic_bowl_converges():
    rng = np.random.default_rng(0)
    spec = NetSpec(in_dim=1, out_dim=8, hidden=(1,), activation="relu")
    params = init_params(spec, rng)
    w = rng.normal(size=8)
    m = np.zeros(8); v = np.zeros(8)
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    for step in range(1, 2001):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        if np.linalg.norm(w) <= 1e-3:
            break
    assert np.linalg.norm(w) <= 1e-3


def test_adam_rejects_nonfinite_gradient(rng):
    params = init_params(small_spec(), rng)
    opt = OptimizerState.for_params(params, lr=1e-3)
    grad_w = [np.zeros_like(w) for w in params.weights]
    grad_b = [np.zeros_like(b) for b in params.biases]
    grad_w[1][0, 0] = np.nan
    with pytest.raises(TrainingError, match="layer 1"):
        adam_step(params, grad_w, grad_b, opt)


def test_clip_gradients_norm_cap(rng):
    g_w = [rng.normal(size=(3, 3)) * 100]
    g_b = [rng.normal(size=3) * 100]
    cw, cb = clip_gradients(g_w, g_b, 1.0)
    total = np.sqrt(sum(np.sum(g * g) for g in cw) + sum(np.sum(g * g) for g in cb))
    assert total == pytest.approx(1.0, rel=1e-9)


# --- step embedding -------------------------------------------------------------


def test_embedding_at_zero_alternates():
    emb = sinusoidal_step_embedding(0, 8)
    assert emb == pytest.approx([0, 1, 0, 1, 0, 1, 0, 1])


def test_embedding_distinct_neighbors():
    a = sinusoidal_step_embedding(1, 16)
    b = sinusoidal_step_embedding(2, 16)
    assert np.linalg.norm(a - b) > 0


def test_embedding_pairwise_distinct_through_twenty():
    embs = [sinusoidal_step_embedding(i, 16) for i in range(21)]
    for i in range(21):
        for j in range(i + 1, 21):
            assert np.linalg.norm(embs[i] - embs[j]) > 1e-8


def test_embedding_batch_layout():
    batch = sinusoidal_step_embedding(np.array([0, 1, 5]), 8)
    assert batch.shape == (3, 8)
    assert batch[0] == pytest.approx(sinusoidal_step_embedding(0, 8))
    assert batch[2] == pytest.approx(sinusoidal_step_embedding(5, 8))


def test_embedding_requires_even_dim():
    with pytest.raises(ValueError):
        sinusoidal_step_embedding(3, 7)


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    params = init_params(small_spec("mish", step_embed_dim=4), rng)
    opt = OptimizerState.for_params(params, lr=3e-4)
    opt.step = 17
    opt.m_w[0][:] = rng.normal(size=opt.m_w[0].shape)
    path = tmp_path / "model.npz"
    save_checkpoint(path, "denoiser", params, opt, train_config={"epochs": 3},
                    extra={"note": "x"})
    loaded, opt2, meta = load_checkpoint(path, expected_role="denoiser",
                                         expected_spec=params.spec)
    for a, b in zip(params.weights, loaded.weights):
        assert np.array_equal(a, b)
    for a, b in zip(params.biases, loaded.biases):
        assert np.array_equal(a, b)
    assert opt2.step == 17 and opt2.lr == 3e-4
    assert np.array_equal(opt.m_w[0], opt2.m_w[0])
    assert meta["extra"]["note"] == "x"
    assert meta["train_config_hash"] == nets.config_digest({"epochs": 3})


def test_checkpoint_rejects_role_mismatch(tmp_path, rng):
    params = init_params(small_spec(), rng)
    path = tmp_path / "model.npz"
    save_checkpoint(path, "denoiser", params)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_role="return_guide")


def test_checkpoint_rejects_spec_mismatch(tmp_path, rng):
    params = init_params(small_spec(), rng)
    path = tmp_path / "model.npz"
    save_checkpoint(path, "denoiser", params)
    other = NetSpec(in_dim=4, out_dim=3, hidden=(8, 7), activation="tanh")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_spec=other)
