import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radplan.retrieval import (
    DatabaseError,
    RetrievalMiss,
    RetrievalQuery,
    StateDatabase,
    build_database,
    cosine_similarity,
    load_database,
    retrieve_candidates,
    retrieve_target,
    save_database,
    select_target,
)
from radplan.trajectory import OfflineDataset, Trajectory, discounted_suffix_return

from conftest import random_dataset


def make_dataset(states_list, rewards_list, gamma=0.99, da=1):
    trajs = []
    for i, (states, rewards) in enumerate(zip(states_list, rewards_list)):
        T = len(rewards)
        trajs.append(Trajectory(i, np.asarray(states, dtype=float),
                                np.zeros((T, da)), np.asarray(rewards, dtype=float)))
    return OfflineDataset.build(trajs, gamma=gamma)


# --- oracles ------------------------------------------------------------------


def oracle_cosine(a, b):
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def oracle_retrieval(db: StateDatabase, query: RetrievalQuery):
    """Plain-python full scan + filter + sort + truncate + selection."""
    scored = []
    for i in range(len(db)):
        if query.exclude_traj is not None and db.traj_ids[i] == query.exclude_traj:
            continue
        sim = cosine_similarity(query.state, db.states[i])
        if sim >= query.min_similarity:
            scored.append((i, sim))
    scored.sort(key=lambda t: (-t[1], db.traj_ids[t[0]], db.timesteps[t[0]]))
    top = scored[: query.top_k]
    if not top:
        return None
    cands = []
    for i, sim in top:
        seg = db.segment_return(i, query.horizon)
        cands.append((i, sim, seg, db.remaining_length(i)))
    best = max(c[2] for c in cands)
    kept = [c for c in cands if abs(c[2] - best) <= query.return_tolerance]
    kept.sort(key=lambda c: (-c[3], -c[2], db.traj_ids[c[0]], db.timesteps[c[0]]))
    return kept[0][0]


# --- build_database ---------------------------------------------------------------


def test_database_entry_count(rng):
    ds = make_dataset(
        [rng.normal(size=(10, 2)), rng.normal(size=(15, 2))],
        [rng.uniform(size=10), rng.uniform(size=15)],
    )
    db = build_database(ds)
    assert len(db) == 25


def test_database_suffix_returns_match_oracle(rng):
    ds = random_dataset(rng, n_traj=4)
    db = build_database(ds)
    k = 0
    for traj in ds.trajectories:
        for t in range(len(traj)):
            expected = 0.0
            for j in range(t, len(traj)):
                expected += 0.99 ** (j - t) * traj.rewards[j]
            assert db.suffix_returns[k] == pytest.approx(expected, abs=1e-10)
            k += 1


def test_last_entry_suffix_is_final_reward(rng):
    ds = random_dataset(rng, n_traj=2)
    db = build_database(ds)
    for traj in ds.trajectories:
        idx = db.traj_offsets[traj.id] + len(traj) - 1
        assert db.suffix_returns[idx] == pytest.approx(traj.rewards[-1])


def test_database_metadata(rng):
    ds = random_dataset(rng, n_traj=3)
    db = build_database(ds)
    for i in range(len(db)):
        e = db.entry(i)
        assert e.timestep < db.traj_lengths[e.traj_id]
        assert db.remaining_length(i) == db.traj_lengths[e.traj_id] - e.timestep


# --- cosine similarity ----------------------------------------------------------


def test_cosine_orthogonal():
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_cosine_scale_invariant():
    assert cosine_similarity(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)


def test_cosine_zero_vector_is_zero():
    assert cosine_similarity(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0


def test_cosine_matches_high_precision_oracle(rng):
    for _ in range(1000):
        a = rng.normal(size=4)
        b = rng.normal(size=4)
        assert cosine_similarity(a, b) == pytest.approx(oracle_cosine(a, b), abs=1e-12)


def test_cosine_range(rng):
    for _ in range(200):
        v = cosine_similarity(rng.normal(size=5), rng.normal(size=5))
        assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


# --- retrieve_candidates -----------------------------------------------------------


def query_for(db, state, **kw):
    defaults = dict(top_k=6, min_similarity=0.9, return_tolerance=0.1, horizon=8)
    defaults.update(kw)
    return RetrievalQuery(state=np.asarray(state, dtype=float), **defaults)


def test_exact_state_ranks_first(rng):
    ds = random_dataset(rng, n_traj=3)
    db = build_database(ds)
    target = db.states[17]
    cands = retrieve_candidates(db, query_for(db, target.copy()))
    assert cands[0].entry_index == 17 or cands[0].similarity == pytest.approx(1.0)
    assert cands[0].similarity == pytest.approx(1.0)


def test_delta_one_no_exact_match_empty(rng):
    ds = random_dataset(rng, n_traj=2)
    db = build_database(ds)
    q = query_for(db, rng.normal(size=ds.ds) + 10.0, min_similarity=1.0)
    assert retrieve_candidates(db, q) == []


def test_retrieve_matches_bruteforce_oracle(rng):
    ds = random_dataset(rng, n_traj=30)
    db = build_database(ds)
    for trial in range(100):
        q = query_for(db, rng.normal(size=ds.ds),
                      top_k=int(rng.integers(1, 12)),
                      min_similarity=float(rng.uniform(-0.5, 0.95)))
        cands = retrieve_candidates(db, q)
        got = [c.entry_index for c in cands]
        scored = []
        for i in range(len(db)):
            sim = oracle_cosine(q.state, db.states[i])
            if sim >= q.min_similarity:
                scored.append((i, sim))
        scored.sort(key=lambda t: (-t[1], db.traj_ids[t[0]], db.timesteps[t[0]]))
        assert got == [i for i, _ in scored[: q.top_k]]


def test_tie_break_on_duplicate_states():
    # identical states produce exactly equal similarities; order must be
    # (lower traj_id, lower timestep)
    ds = make_dataset(
        [[[1.0, 2.0], [1.0, 2.0]], [[1.0, 2.0], [3.0, 1.0]]],
        [[0.0, 0.0], [0.0, 0.0]],
    )
    db = build_database(ds)
    cands = retrieve_candidates(db, query_for(db, [1.0, 2.0], top_k=3, min_similarity=0.99))
    keys = [(c.entry.traj_id, c.entry.timestep) for c in cands]
    assert keys == [(0, 0), (0, 1), (1, 0)]


def test_ranking_scale_invariance(rng):
    ds = random_dataset(rng, n_traj=8)
    db = build_database(ds)
    q = rng.normal(size=ds.ds)
    base = [c.entry_index for c in retrieve_candidates(db, query_for(db, q, min_similarity=-1.0, top_k=10))]
    for c in (0.001, 3.0, 1e6):
        scaled = [x.entry_index for x in retrieve_candidates(db, query_for(db, c * q, min_similarity=-1.0, top_k=10))]
        assert scaled == base


def test_exclude_traj(rng):
    ds = random_dataset(rng, n_traj=3)
    db = build_database(ds)
    target = db.states[0].copy()
    q = query_for(db, target, min_similarity=-1.0, exclude_traj=0)
    cands = retrieve_candidates(db, q)
    assert all(c.entry.traj_id != 0 for c in cands)


@given(st.integers(min_value=1, max_value=400), st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=25)
def test_retrieval_oracle_property(n_entries, seed):
    rng = np.random.default_rng(seed)
    T = max(2, n_entries // 3)
    states = [rng.normal(size=(T, 3)) for _ in range(3)]
    rewards = [rng.uniform(-1, 1, size=T) for _ in range(3)]
    db = build_database(make_dataset(states, rewards))
    q = query_for(db, rng.normal(size=3),
                  top_k=int(rng.integers(1, 10)),
                  min_similarity=float(rng.uniform(-1.0, 1.0)))
    cands = retrieve_candidates(db, q)
    for c in cands:
        assert c.similarity >= q.min_similarity
    oracle_best = oracle_retrieval(db, q)
    if oracle_best is None:
        assert cands == []
    else:
        assert select_target(cands, q).entry_index == oracle_best


# --- select_target -------------------------------------------------------------------


def test_single_candidate_always_selected(rng):
    ds = random_dataset(rng, n_traj=2)
    db = build_database(ds)
    q = query_for(db, db.states[3].copy(), top_k=1, return_tolerance=0.0)
    cands = retrieve_candidates(db, q)
    assert len(cands) == 1
    assert select_target(cands, q).entry_index == cands[0].entry_index


def test_eta_zero_keeps_only_best_return():
    # two candidate states; segment returns differ; eta=0 forces the best
    ds = make_dataset(
        [[[1.0, 1.0], [1.0, 1.0001]], [[1.0, 1.0002], [1.0, 1.0003], [1.0, 1.0004]]],
        [[0.0, 0.0], [5.0, 5.0, 5.0]],
    )
    db = build_database(ds)
    q = query_for(db, [1.0, 1.0], top_k=5, min_similarity=0.9, return_tolerance=0.0, horizon=4)
    cands = retrieve_candidates(db, q)
    chosen = select_target(cands, q)
    assert chosen.entry.traj_id == 1 and chosen.entry.timestep == 0


def test_select_matches_exhaustive_oracle(rng):
    ds = random_dataset(rng, n_traj=20)
    db = build_database(ds)
    for _ in range(50):
        q = query_for(db, rng.normal(size=ds.ds), top_k=50, min_similarity=-1.0,
                      return_tolerance=float(rng.uniform(0.0, 1.0)))
        cands = retrieve_candidates(db, q)
        best = max(c.segment_return for c in cands)
        kept = [c for c in cands if abs(c.segment_return - best) <= q.return_tolerance]
        expected = max(kept, key=lambda c: (c.remaining_length, c.segment_return,
                                            -c.entry.traj_id, -c.entry.timestep))
        got = select_target(cands, q)
        assert got.entry_index == expected.entry_index
        assert abs(got.segment_return - best) <= q.return_tolerance


def test_filter_soundness(rng):
    ds = random_dataset(rng, n_traj=10)
    db = build_database(ds)
    for _ in range(100):
        eta = float(rng.uniform(0, 0.5))
        q = query_for(db, rng.normal(size=ds.ds), top_k=20, min_similarity=-1.0,
                      return_tolerance=eta)
        cands = retrieve_candidates(db, q)
        best = max(c.segment_return for c in cands)
        survivors = [c for c in cands if abs(c.segment_return - best) <= eta]
        assert all(abs(c.segment_return - best) <= eta for c in survivors)
        chosen = select_target(cands, q)
        assert chosen.remaining_length == max(s.remaining_length for s in survivors)


def test_segment_return_uses_window(rng):
    ds = random_dataset(rng, n_traj=2)
    db = build_database(ds)
    H = 6
    for i in (0, 5, len(db) - 1):
        traj = ds.trajectories[[t.id for t in ds.trajectories].index(int(db.traj_ids[i]))]
        t = int(db.timesteps[i])
        expected = discounted_suffix_return(traj, t, 0.99, horizon=H - 1)
        assert db.segment_return(i, H) == pytest.approx(expected, abs=1e-12)


# --- retrieve_target (composition) ---------------------------------------------------


def test_low_return_query_finds_high_return_family():
    # two trajectories: one flat low-reward, one running alongside it with a
    # big terminal reward; querying from the low one must land on the rich
    # one (its states are angularly closer to the query than the low
    # trajectory's own neighbors)
    angles = np.deg2rad(np.linspace(80, 10, 8))
    low_states = [[np.cos(a), np.sin(a)] for a in angles]
    high_states = [[1.001 * np.cos(a + 1e-4), 1.001 * np.sin(a + 1e-4)] for a in angles]
    low_rewards = [0.0] * 8
    high_rewards = [0.0] * 7 + [10.0]
    ds = make_dataset([low_states, high_states], [low_rewards, high_rewards])
    db = build_database(ds)
    q = query_for(db, low_states[2], top_k=6, min_similarity=0.9, return_tolerance=0.5, horizon=9)
    result = retrieve_target(db, np.asarray(low_states[2]), q)
    assert result.entry.traj_id == 1


def test_query_identical_to_unique_best_state():
    ds = make_dataset(
        [[[5.0, 1.0], [6.0, 1.1]], [[1.0, 5.0], [1.1, 6.0]]],
        [[0.0, 0.0], [9.0, 9.0]],
    )
    db = build_database(ds)
    q = query_for(db, [1.0, 5.0], top_k=2, min_similarity=0.9, return_tolerance=0.1, horizon=4)
    result = retrieve_target(db, np.array([1.0, 5.0]), q)
    assert result.entry.traj_id == 1 and result.entry.timestep == 0
    assert result.similarity == pytest.approx(1.0)


def test_retrieval_miss_raises(rng):
    ds = random_dataset(rng, n_traj=2)
    db = build_database(ds)
    q = query_for(db, np.abs(rng.normal(size=ds.ds)) + 5.0, min_similarity=1.0)
    with pytest.raises(RetrievalMiss):
        retrieve_target(db, q.state, q)


def test_retrieval_deterministic(rng):
    ds = random_dataset(rng, n_traj=6)
    db = build_database(ds)
    q = query_for(db, rng.normal(size=ds.ds), min_similarity=-1.0)
    a = retrieve_target(db, q.state, q)
    b = retrieve_target(db, q.state, q)
    assert a.entry_index == b.entry_index and a.similarity == b.similarity


def test_default_query_parameters():
    q = RetrievalQuery(state=np.zeros(2))
    assert q.top_k == 6
    assert q.min_similarity == 0.9


# --- persistence ----------------------------------------------------------------------


def test_database_round_trip(tmp_path, rng):
    ds = random_dataset(rng, n_traj=4)
    db = build_database(ds)
    path = tmp_path / "db.npz"
    save_database(db, path)
    loaded = load_database(path, ds)
    assert np.array_equal(loaded.states, db.states)
    assert np.array_equal(loaded.suffix_returns, db.suffix_returns)
    assert loaded.traj_lengths == db.traj_lengths
    assert loaded.gamma == db.gamma
    q = query_for(db, rng.normal(size=ds.ds), min_similarity=-1.0)
    assert retrieve_target(loaded, q.state, q).entry_index == retrieve_target(db, q.state, q).entry_index


def test_database_hash_validation(tmp_path, rng):
    ds = random_dataset(rng, n_traj=3)
    other = random_dataset(np.random.default_rng(999), n_traj=3)
    path = tmp_path / "db.npz"
    save_database(build_database(ds), path)
    with pytest.raises(DatabaseError):
        load_database(path, other)
