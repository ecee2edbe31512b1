"""Offline trajectories, supervision targets and the PADF file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binfmt
from .binfmt import CorruptFileError, UnsupportedVersionError
from .envs import StateCodec, encode_state
from .teammates import PolicyPool, TeammatePolicy, sample_team

MAGIC = b"PADF"
VERSION = 1


@dataclass
class Trajectory:
    """One episode seen from the ego seat.

    ``states`` holds s_0..s_L (the post-terminal state included, so goals can
    clamp to it); actions and rewards hold L entries.
    """

    episode_id: int
    env_name: str
    seed: int
    teammate_ids: list
    states: np.ndarray       # (L+1, D_s) uint8
    ego_actions: np.ndarray  # (L,) int
    team_actions: np.ndarray  # (L, n_mates) int
    rewards: np.ndarray      # (L,) float64
    terminal: bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.uint8)
        self.ego_actions = np.asarray(self.ego_actions, dtype=np.int64)
        self.team_actions = np.asarray(self.team_actions, dtype=np.int64).reshape(len(self.ego_actions), -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        L = len(self.ego_actions)
        if L == 0:
            raise ValueError("trajectory must be non-empty")
        if self.states.shape[0] != L + 1 or len(self.rewards) != L:
            raise ValueError("states must have one more row than actions and rewards")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("non-finite reward in trajectory")

    def __len__(self) -> int:
        return len(self.ego_actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def steps(self) -> list:
        return [(self.states[t], int(self.ego_actions[t]), tuple(int(a) for a in self.team_actions[t]),
                 float(self.rewards[t])) for t in range(len(self))]

    def equals(self, other: "Trajectory") -> bool:
        return (self.episode_id == other.episode_id and self.env_name == other.env_name
                and self.seed == other.seed and list(self.teammate_ids) == list(other.teammate_ids)
                and self.terminal == other.terminal
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.ego_actions, other.ego_actions)
                and np.array_equal(self.team_actions, other.team_actions)
                and self.rewards.tobytes() == other.rewards.tobytes())


# ---------------------------------------------------------------------------
# collection

class ScriptedEgo:
    """Adapts a teammate policy to the ego interface ``ego(state, history) -> action``."""

    def __init__(self, policy: TeammatePolicy, seat: int = 0):
        self.policy, self.seat = policy, seat

    def __call__(self, state, history) -> int:
        return self.policy.act(state, self.seat)


class RandomEgo:
    def __init__(self, n_actions: int, seed: int = 0):
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)

    def __call__(self, state, history) -> int:
        return int(self.rng.integers(self.n_actions))


def collect_episode(env, ego, team: list, seed: int, episode_id: int = 0) -> Trajectory:
    """Roll one episode; ``ego`` sees the state and all encoded states so far."""
    codec = env.codec
    state = env.reset(seed)
    history = [encode_state(state, codec)]
    ego_actions, team_actions, rewards = [], [], []
    done = False
    while not done:
        a = ego(state, history)
        if not isinstance(a, (int, np.integer)) or not 0 <= a < env.n_actions:
            raise ValueError(f"ego emitted invalid action {a!r} at step {len(ego_actions)} "
                             f"(episode {episode_id}, seed {seed}, |A|={env.n_actions})")
        mates = [p.act(state, i + 1) for i, p in enumerate(team)]
        state, r, done = env.step(state, [int(a)] + mates)
        history.append(encode_state(state, codec))
        ego_actions.append(int(a))
        team_actions.append(mates)
        rewards.append(r)
    return Trajectory(episode_id, env.name, seed, [p.policy_id for p in team], np.stack(history),
                      np.array(ego_actions), np.array(team_actions), np.array(rewards), True)


def collect_dataset(env, ego_policy: TeammatePolicy, pools: list, episodes_per_pool: int | None = None,
                    seed: int = 0, total: int | None = None) -> list:
    """Round-robin over pools; episode g uses env seed ``seed + g``.

    Give either ``episodes_per_pool`` or an overall ``total``.
    """
    if not pools:
        raise ValueError("no pools to collect from")
    if (episodes_per_pool is None) == (total is None):
        raise ValueError("give exactly one of episodes_per_pool and total")
    if total is None:
        total = episodes_per_pool * len(pools)
    trajs = []
    for g in range(total):
        pool: PolicyPool = pools[g % len(pools)]
        rng = np.random.default_rng([seed, g])
        team = sample_team(pool, rng, env.n_agents - 1)
        for p in team:
            p.reseed(int(rng.integers(2**62)))
        ego = ego_policy.clone()
        ego.reseed(int(rng.integers(2**62)))
        trajs.append(collect_episode(env, ScriptedEgo(ego), team, seed + g, episode_id=g))
    return trajs


# ---------------------------------------------------------------------------
# supervision targets

def returns_to_go(rewards) -> np.ndarray:
    """All suffix sums, accumulated back to front so R_t = r_t + R_{t+1} exactly."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + acc
        out[t] = acc
    return out


def return_to_go(traj: Trajectory, t: int) -> float:
    if not 0 <= t < len(traj):
        raise IndexError(f"step {t} outside trajectory of length {len(traj)}")
    acc = 0.0
    for r in traj.rewards[t:][::-1]:
        acc = float(r) + acc
    return acc


def goal_target(traj: Trajectory, t: int, n: int) -> np.ndarray:
    """Encoded s_{min(t+n, L)}; n=0 gives the current state."""
    if n < 0:
        raise ValueError("goal horizon must be non-negative")
    return traj.states[min(t + n, len(traj))]


def state_window(states: np.ndarray, t: int, m: int) -> tuple:
    """(window (m+1, D) float, mask (m+1,)) ending at s_t, zero-padded before the start."""
    D = states.shape[1]
    window = np.zeros((m + 1, D))
    mask = np.zeros(m + 1)
    for j in range(m + 1):
        src = t - m + j
        if src >= 0:
            window[j] = states[src]
            mask[j] = 1.0
    return window, mask


@dataclass
class TrainingTuple:
    window: np.ndarray
    mask: np.ndarray
    action: np.ndarray  # one-hot over |A|
    ret: float
    goal: np.ndarray


def make_tuple(traj: Trajectory, t: int, m: int, n: int, n_actions: int) -> TrainingTuple:
    window, mask = state_window(traj.states, t, m)
    onehot = np.zeros(n_actions)
    onehot[traj.ego_actions[t]] = 1.0
    return TrainingTuple(window, mask, onehot, return_to_go(traj, t), goal_target(traj, t, n))


@dataclass
class TrainingSet:
    """All (trajectory, t) tuples of a dataset, gathered lazily per batch.

    States of every trajectory are stacked once; a tuple is the row of its s_t
    plus its position in the episode.
    """

    states: np.ndarray    # (rows, D) uint8
    rows: np.ndarray      # (N,) row of s_t
    steps: np.ndarray     # (N,) t within its episode
    goal_rows: np.ndarray  # (N,)
    actions: np.ndarray   # (N,)
    returns: np.ndarray   # (N,) raw R_t
    m: int
    n: int
    normalizer: float = field(default=1.0)

    @classmethod
    def build(cls, trajs: list, m: int = 5, n: int = 5, normalizer: float | None = None) -> "TrainingSet":
        if not trajs:
            raise ValueError("empty dataset")
        blocks, rows, steps, goals, actions, rets = [], [], [], [], [], []
        base = 0
        for tr in trajs:
            L = len(tr)
            blocks.append(tr.states)
            t = np.arange(L)
            rows.append(base + t)
            steps.append(t)
            goals.append(base + np.minimum(t + n, L))
            actions.append(tr.ego_actions)
            rets.append(returns_to_go(tr.rewards))
            base += L + 1
        returns = np.concatenate(rets)
        if normalizer is None:
            peak = float(np.max(np.abs(returns)))
            normalizer = peak if peak > 0 else 1.0
        return cls(np.concatenate(blocks), np.concatenate(rows), np.concatenate(steps),
                   np.concatenate(goals), np.concatenate(actions), returns, m, n, float(normalizer))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def batch(self, idx) -> dict:
        idx = np.asarray(idx)
        offs = np.arange(-self.m, 1)
        valid = (self.steps[idx, None] + offs) >= 0
        src = np.where(valid, self.rows[idx, None] + offs, 0)
        windows = self.states[src].astype(np.float64) * valid[..., None]
        return {"window": windows, "mask": valid.astype(np.float64),
                "state": self.states[self.rows[idx]].astype(np.float64),
                "action": self.actions[idx], "ret": self.returns[idx] / self.normalizer,
                "goal": self.states[self.goal_rows[idx]].astype(np.float64)}


# ---------------------------------------------------------------------------
# file format

def _traj_payload(tr: Trajectory) -> bytes:
    w = binfmt.Writer()
    w.i64(tr.episode_id)
    w.i64(tr.seed)
    w.str(tr.env_name)
    w.u16(len(tr.teammate_ids))
    for pid in tr.teammate_ids:
        w.str(pid)
    w.u8(1 if tr.terminal else 0)
    L, D = len(tr), tr.state_dim
    mates = tr.team_actions.shape[1]
    w.u32(L)
    w.u32(D)
    w.u16(mates)
    w.blob(np.packbits(tr.states, axis=None).tobytes())
    w.blob(tr.ego_actions.astype("<u1").tobytes())
    w.blob(tr.team_actions.astype("<u1").tobytes())
    w.blob(tr.rewards.astype("<f8").tobytes())
    return w.getvalue()


def _traj_from_payload(payload: bytes, index: int) -> Trajectory:
    r = binfmt.Reader(payload, "dataset")
    episode_id, seed, env_name = r.i64(), r.i64(), r.str()
    ids = [r.str() for _ in range(r.u16())]
    terminal = bool(r.u8())
    L, D, mates = r.u32(), r.u32(), r.u16()
    bits = np.frombuffer(r.blob(), dtype=np.uint8)
    ego = np.frombuffer(r.blob(), dtype="<u1")
    team = np.frombuffer(r.blob(), dtype="<u1")
    rewards = np.frombuffer(r.blob(), dtype="<f8")
    if not r.done() or len(ego) != L or len(team) != L * mates or len(rewards) != L:
        raise CorruptFileError(f"corrupt dataset: malformed record {index}")
    states = np.unpackbits(bits, count=(L + 1) * D).reshape(L + 1, D)
    try:
        return Trajectory(episode_id, env_name, seed, ids, states, ego.astype(np.int64),
                          team.astype(np.int64).reshape(L, mates), rewards.astype(np.float64), terminal)
    except ValueError as exc:
        raise CorruptFileError(f"corrupt dataset: record {index}: {exc}") from exc


@dataclass
class DatasetHeader:
    env_name: str
    codec: StateCodec | None
    count: int


def encode_dataset(trajs: list, env_name: str, codec: StateCodec | None) -> bytes:
    h = binfmt.Writer()
    h.str(env_name)
    h.str(json.dumps(codec.describe() if codec else None, sort_keys=True))
    h.u64(len(trajs))
    return binfmt.pack_file(MAGIC, VERSION, [h.getvalue()] + [_traj_payload(t) for t in trajs])


def decode_dataset(data: bytes) -> tuple:
    payloads = binfmt.unpack_file(data, MAGIC, VERSION, "dataset")
    if not payloads:
        raise CorruptFileError("corrupt dataset: missing header")
    h = binfmt.Reader(payloads[0], "dataset")
    env_name = h.str()
    try:
        desc = json.loads(h.str())
    except json.JSONDecodeError as exc:
        raise CorruptFileError("corrupt dataset: bad codec descriptor") from exc
    count = h.u64()
    if len(payloads) - 1 != count:
        raise CorruptFileError(f"corrupt dataset: header promises {count} records, found {len(payloads) - 1}")
    header = DatasetHeader(env_name, StateCodec.from_description(desc) if desc else None, count)
    trajs = [_traj_from_payload(p, i) for i, p in enumerate(payloads[1:])]
    if header.codec is not None and any(t.state_dim != header.codec.length for t in trajs):
        raise CorruptFileError("corrupt dataset: state length disagrees with codec")
    return header, trajs


def write_dataset(trajs: list, path, env_name: str | None = None, codec: StateCodec | None = None) -> None:
    if env_name is None:
        env_name = trajs[0].env_name if trajs else ""
    Path(path).write_bytes(encode_dataset(trajs, env_name, codec))


def read_dataset(path) -> list:
    return read_dataset_with_header(path)[1]


def read_dataset_with_header(path) -> tuple:
    return decode_dataset(Path(path).read_bytes())


def summary(header: DatasetHeader, trajs: list) -> dict:
    lengths = np.array([len(t) for t in trajs]) if trajs else np.zeros(0)
    returns = np.array([t.rewards.sum() for t in trajs]) if trajs else np.zeros(0)
    return {"env": header.env_name, "version": VERSION, "episodes": header.count,
            "state_dim": header.codec.length if header.codec else None,
            "steps": int(lengths.sum()),
            "mean_length": float(lengths.mean()) if trajs else 0.0,
            "mean_return": float(returns.mean()) if trajs else 0.0,
            "teammates": sorted({pid for t in trajs for pid in t.teammate_ids})}


__all__ = ["Trajectory", "TrainingTuple", "TrainingSet", "collect_episode", "collect_dataset",
           "return_to_go", "returns_to_go", "goal_target", "make_tuple", "state_window",
           "write_dataset", "read_dataset", "read_dataset_with_header", "CorruptFileError",
           "UnsupportedVersionError", "ScriptedEgo", "RandomEgo", "summary"]
