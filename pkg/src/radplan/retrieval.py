"""Target selection: a dense per-state database with exact cosine top-k search.

The database indexes every state of every trajectory together with its
trajectory id, timestep and full-suffix discounted return. A query retrieves
the top-k most similar states above a minimum similarity, then picks the
target among them by (a) keeping candidates whose short-horizon segment
return is within a tolerance of the best and (b) taking the one with the
longest remaining trajectory.

The search is an exact scan with precomputed norms; the database is immutable
after build and safe for concurrent queries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trajectory import OfflineDataset, NormStats, discounted_suffix_return


class RetrievalMiss(RuntimeError):
    """No database state cleared the minimum similarity threshold."""


class DatabaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class DbEntry:
    state: np.ndarray
    traj_id: int
    timestep: int
    suffix_return: float


@dataclass(frozen=True)
class RetrievalQuery:
    state: np.ndarray
    top_k: int = 6
    min_similarity: float = 0.9
    return_tolerance: float = 0.1
    horizon: int = 32
    exclude_traj: int | None = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.return_tolerance < 0:
            raise ValueError("return_tolerance must be >= 0")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")


@dataclass(frozen=True)
class RetrievalResult:
    target_state: np.ndarray
    entry: DbEntry
    entry_index: int
    similarity: float
    segment_return: float
    remaining_length: int


class StateDatabase:
    """All dataset states with retrieval metadata, grouped by trajectory.

    Carries everything a planner needs at query time (per-entry rewards and
    normalization statistics included), so a persisted database is
    self-contained.
    """

    def __init__(
        self,
        states: np.ndarray,
        traj_ids: np.ndarray,
        timesteps: np.ndarray,
        rewards: np.ndarray,
        suffix_returns: np.ndarray,
        traj_lengths: dict[int, int],
        traj_offsets: dict[int, int],
        gamma: float,
        ds: int,
        da: int,
        norm_stats: NormStats,
        dataset_hash: str,
    ):
        self.states = states
        self.traj_ids = traj_ids
        self.timesteps = timesteps
        self.rewards = rewards
        self.suffix_returns = suffix_returns
        self.traj_lengths = traj_lengths
        self.traj_offsets = traj_offsets
        self.gamma = gamma
        self.ds = ds
        self.da = da
        self.norm_stats = norm_stats
        self.dataset_hash = dataset_hash
        self.norms = np.linalg.norm(states, axis=1)
        for arr in (self.states, self.traj_ids, self.timesteps, self.rewards,
                    self.suffix_returns, self.norms):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.states.shape[0]

    def entry(self, index: int) -> DbEntry:
        return DbEntry(
            state=self.states[index],
            traj_id=int(self.traj_ids[index]),
            timestep=int(self.timesteps[index]),
            suffix_return=float(self.suffix_returns[index]),
        )

    def remaining_length(self, index: int) -> int:
        traj_id = int(self.traj_ids[index])
        return self.traj_lengths[traj_id] - int(self.timesteps[index])

    def segment_return(self, index: int, horizon: int) -> float:
        """Discounted return of the segment of length horizon-1 following the entry."""
        traj_id = int(self.traj_ids[index])
        t = int(self.timesteps[index])
        offset = self.traj_offsets[traj_id]
        length = self.traj_lengths[traj_id]
        end = min(length, t + horizon - 1)
        total, weight = 0.0, 1.0
        for j in range(t, end):
            total += weight * float(self.rewards[offset + j])
            weight *= self.gamma
        return total


def build_database(dataset: OfflineDataset, gamma: float | None = None) -> StateDatabase:
    """Index every state of every trajectory with its retrieval metadata."""
    gamma = dataset.gamma if gamma is None else gamma
    states, traj_ids, timesteps, rewards, suffix = [], [], [], [], []
    lengths, offsets = {}, {}
    offset = 0
    for traj in dataset.trajectories:
        T = len(traj)
        lengths[traj.id] = T
        offsets[traj.id] = offset
        offset += T
        states.append(traj.states)
        rewards.append(traj.rewards)
        traj_ids.append(np.full(T, traj.id, dtype=np.int64))
        timesteps.append(np.arange(T, dtype=np.int64))
        suffix.append(np.array(
            [discounted_suffix_return(traj, t, gamma) for t in range(T)]
        ))
    return StateDatabase(
        states=np.concatenate(states, axis=0),
        traj_ids=np.concatenate(traj_ids),
        timesteps=np.concatenate(timesteps),
        rewards=np.concatenate(rewards).astype(np.float64),
        suffix_returns=np.concatenate(suffix),
        traj_lengths=lengths,
        traj_offsets=offsets,
        gamma=gamma,
        ds=dataset.ds,
        da=dataset.da,
        norm_stats=dataset.norm_stats,
        dataset_hash=dataset.content_hash(),
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """(a.b)/(|a||b|); zero-norm inputs are defined as similarity 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def retrieve_candidates(db: StateDatabase, query: RetrievalQuery) -> list[RetrievalResult]:
    """Exact top-k by cosine similarity, hard-filtered at the threshold first.

    Returned candidates are sorted by similarity descending with ties broken
    by (lower traj_id, lower timestep); an empty list signals a retrieval
    miss. segment_return and remaining_length are filled in for each
    candidate so selection can run without touching the arrays again.
    """
    q = np.asarray(query.state, dtype=np.float64)
    if q.shape != (db.ds,):
        raise ValueError(f"query state has shape {q.shape}, database stores ({db.ds},)")
    qnorm = np.linalg.norm(q)
    if qnorm == 0.0 or len(db) == 0:
        sims = np.zeros(len(db))
    else:
        denom = db.norms * qnorm
        sims = np.divide(db.states @ q, denom, out=np.zeros(len(db)), where=denom > 0)
    mask = sims >= query.min_similarity
    if query.exclude_traj is not None:
        mask &= db.traj_ids != query.exclude_traj
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return []
    order = np.lexsort((db.timesteps[idx], db.traj_ids[idx], -sims[idx]))
    chosen = idx[order[: query.top_k]]
    return [
        RetrievalResult(
            target_state=db.states[i],
            entry=db.entry(int(i)),
            entry_index=int(i),
            similarity=float(sims[i]),
            segment_return=db.segment_return(int(i), query.horizon),
            remaining_length=db.remaining_length(int(i)),
        )
        for i in chosen
    ]


def select_target(candidates: list[RetrievalResult], query: RetrievalQuery) -> RetrievalResult:
    """Pick the target: best-return tolerance filter, then longest remainder.

    Keeps candidates with |segment_return - best| <= return_tolerance, then
    returns the one with the largest remaining_length; ties broken by higher
    segment_return, then lower traj_id, then lower timestep (a total order).
    """
    if not candidates:
        raise ValueError("select_target requires a non-empty candidate list")
    best = max(c.segment_return for c in candidates)
    kept = [c for c in candidates if abs(c.segment_return - best) <= query.return_tolerance]
    return max(
        kept,
        key=lambda c: (c.remaining_length, c.segment_return, -c.entry.traj_id, -c.entry.timestep),
    )


def retrieve_target(db: StateDatabase, state: np.ndarray, query_config: RetrievalQuery) -> RetrievalResult:
    """Full retrieval for one query state: candidate scan then target selection."""
    query = RetrievalQuery(
        state=np.asarray(state, dtype=np.float64),
        top_k=query_config.top_k,
        min_similarity=query_config.min_similarity,
        return_tolerance=query_config.return_tolerance,
        horizon=query_config.horizon,
        exclude_traj=query_config.exclude_traj,
    )
    candidates = retrieve_candidates(db, query)
    if not candidates:
        raise RetrievalMiss(
            f"no database state reached similarity {query.min_similarity}"
        )
    return select_target(candidates, query)


# --- persistence ----------------------------------------------------------------

DB_FORMAT_VERSION = 1


def save_database(db: StateDatabase, path) -> None:
    """Persist the database as a binary sidecar keyed to its dataset hash."""
    ids = sorted(db.traj_lengths)
    meta = {
        "version": DB_FORMAT_VERSION,
        "gamma": db.gamma,
        "ds": db.ds,
        "da": db.da,
        "dataset_hash": db.dataset_hash,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            states=db.states,
            traj_ids=db.traj_ids,
            timesteps=db.timesteps,
            rewards=db.rewards,
            suffix_returns=db.suffix_returns,
            index_ids=np.array(ids, dtype=np.int64),
            index_lengths=np.array([db.traj_lengths[i] for i in ids], dtype=np.int64),
            index_offsets=np.array([db.traj_offsets[i] for i in ids], dtype=np.int64),
            stats=np.stack([
                db.norm_stats.state_min, db.norm_stats.state_max,
            ]),
            action_stats=np.stack([
                db.norm_stats.action_min, db.norm_stats.action_max,
            ]),
        )


def load_database(path, dataset: OfflineDataset | None = None) -> StateDatabase:
    """Load a persisted database; verifies the dataset hash when one is given."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("version") != DB_FORMAT_VERSION:
            raise DatabaseError(f"{path}: unsupported database version {meta.get('version')}")
        ids = data["index_ids"]
        lengths = {int(i): int(n) for i, n in zip(ids, data["index_lengths"])}
        offsets = {int(i): int(o) for i, o in zip(ids, data["index_offsets"])}
        stats = NormStats(
            state_min=data["stats"][0], state_max=data["stats"][1],
            action_min=data["action_stats"][0], action_max=data["action_stats"][1],
        )
        db = StateDatabase(
            states=data["states"].copy(),
            traj_ids=data["traj_ids"].copy(),
            timesteps=data["timesteps"].copy(),
            rewards=data["rewards"].copy(),
            suffix_returns=data["suffix_returns"].copy(),
            traj_lengths=lengths,
            traj_offsets=offsets,
            gamma=float(meta["gamma"]),
            ds=int(meta["ds"]),
            da=int(meta["da"]),
            norm_stats=stats,
            dataset_hash=meta["dataset_hash"],
        )
    if dataset is not None and dataset.content_hash() != db.dataset_hash:
        raise DatabaseError(
            f"{path}: stored dataset hash {db.dataset_hash[:12]}... does not match the loaded dataset"
        )
    return db
