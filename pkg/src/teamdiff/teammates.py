"""Scripted teammate archetypes, policy pools and cross-play."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .envs import (DOWN, LEFT, LOAD, NOOP, RIGHT, STAY, UP, GridWorldState, LevelForaging,
                   PredatorPrey, manhattan, moved)

PP_ARCHETYPES = ("flanker-N", "flanker-S", "flanker-E", "flanker-W",
                 "mirror-chaser", "interceptor", "lazy-guard")
LBF_ARCHETYPES = ("nearest-food", "highest-level-food", "follow-ego",
                  "corner-sweeper-NW", "corner-sweeper-NE", "corner-sweeper-SW", "corner-sweeper-SE")

# scripted near-expert egos used to generate offline data; never pool members
EGO_ARCHETYPES = {"pp": "interceptor", "lbf": "nearest-feasible-food"}

_SIDE = {"N": (0, -1), "S": (0, 1), "E": (1, 0), "W": (-1, 0)}


def step_toward(state: GridWorldState, pos: tuple, target: tuple, idle: int = STAY,
                first: str = "larger") -> int:
    """One greedy Manhattan step towards ``target``, sidestepping occupied cells.

    ``first`` picks which axis to close first: the "larger" or "smaller" gap,
    or always "x" / "y".
    """
    dx, dy = target[0] - pos[0], target[1] - pos[1]
    if dx == 0 and dy == 0:
        return idle
    horiz = RIGHT if dx > 0 else LEFT
    vert = DOWN if dy > 0 else UP
    if dx == 0:
        order = [vert]
    elif dy == 0:
        order = [horiz]
    else:
        x_first = {"larger": abs(dx) >= abs(dy), "smaller": abs(dx) < abs(dy),
                   "x": True, "y": False}[first]
        order = [horiz, vert] if x_first else [vert, horiz]
    occupied = state.occupied()
    for a in order:
        p = moved(state, pos, a)
        if p != pos and p not in occupied:
            return a
    return order[0]


def _in_grid(state, p):
    return 0 <= p[0] < state.grid_w and 0 <= p[1] < state.grid_h


def _prey_slots(state: GridWorldState) -> list:
    prey = state.entities[-1].position
    out = []
    for side in "NSEW":
        dx, dy = _SIDE[side]
        p = (prey[0] + dx, prey[1] + dy)
        if _in_grid(state, p):
            out.append(p)
    return out


def _pp_rule(archetype: str, state: GridWorldState, me: int, guard_radius: int) -> int:
    pos = state.entities[me].position
    prey = state.entities[-1].position
    if archetype.startswith("flanker-"):
        dx, dy = _SIDE[archetype[-1]]
        target = (prey[0] + dx, prey[1] + dy)
        if not _in_grid(state, target):
            target = min(_prey_slots(state), key=lambda c: manhattan(c, pos))
        # get onto our own side of the prey first, then slide in
        if dy:
            wrong_side = (pos[1] - target[1]) * dy < 0
            first = "y" if wrong_side else "x"
        else:
            wrong_side = (pos[0] - target[0]) * dx < 0
            first = "x" if wrong_side else "y"
        return step_toward(state, pos, target, first=first)
    if archetype == "mirror-chaser":
        ego = state.entities[0].position
        ex, ey = prey[0] - ego[0], prey[1] - ego[1]
        if abs(ex) >= abs(ey):
            target = (prey[0] + (1 if ex >= 0 else -1), prey[1])
        else:
            target = (prey[0], prey[1] + (1 if ey >= 0 else -1))
        if not _in_grid(state, target):
            target = min(_prey_slots(state), key=lambda c: manhattan(c, pos))
        return step_toward(state, pos, target, first="smaller")
    if archetype == "interceptor":
        others = [p for i, p in enumerate(state.positions("predator")) if i != me]
        slots = _prey_slots(state)

        def claim(c):
            rival = min((manhattan(c, o) for o in others), default=99)
            return (manhattan(c, pos) - rival, manhattan(c, pos))

        return step_toward(state, pos, min(slots, key=claim))
    if archetype == "lazy-guard":
        if manhattan(pos, prey) > guard_radius:
            return STAY
        return step_toward(state, pos, min(_prey_slots(state), key=lambda c: manhattan(c, pos)))
    raise ValueError(f"unknown predator-prey archetype {archetype!r}")


def _corner(state: GridWorldState, tag: str) -> tuple:
    x = 0 if tag[1] == "W" else state.grid_w - 1
    y = 0 if tag[0] == "N" else state.grid_h - 1
    return (x, y)


def _lbf_rule(archetype: str, state: GridWorldState, me: int, n_agents: int) -> int:
    pos = state.entities[me].position
    foods = [e for e in state.entities[n_agents:] if e.alive]
    if not foods:
        return NOOP
    if archetype == "nearest-food":
        target = min(foods, key=lambda f: (manhattan(f.position, pos), f.position))
    elif archetype == "highest-level-food":
        target = min(foods, key=lambda f: (-f.level, manhattan(f.position, pos), f.position))
    elif archetype == "nearest-feasible-food":
        # food we can lift with the team's strongest partner, nearest first
        mine = state.entities[me].level
        best = max(e.level for i, e in enumerate(state.entities[:n_agents]) if i != me)
        ok = [f for f in foods if f.level <= mine + best] or foods
        target = min(ok, key=lambda f: (f.level > mine, manhattan(f.position, pos), f.position))
    elif archetype == "follow-ego":
        ego = state.entities[0].position
        target = min(foods, key=lambda f: (manhattan(f.position, ego), f.position))
    elif archetype.startswith("corner-sweeper-"):
        corner = _corner(state, archetype[-2:])
        target = min(foods, key=lambda f: (manhattan(f.position, corner), f.position))
    else:
        raise ValueError(f"unknown foraging archetype {archetype!r}")
    if manhattan(target.position, pos) == 1:
        return LOAD
    # head for the free neighbour of the food nearest to us
    fx, fy = target.position
    cells = [(fx + dx, fy + dy) for dx, dy in _SIDE.values()]
    occ = state.occupied()
    cells = [c for c in cells if _in_grid(state, c) and c not in occ] or [target.position]
    return step_toward(state, pos, min(cells, key=lambda c: (manhattan(c, pos), c)), idle=NOOP)


@dataclass
class TeammatePolicy:
    policy_id: str
    env: str  # pp | lbf
    archetype: str
    noise_rate: float = 0.0
    seed: int = 0
    guard_radius: int = 3
    n_agents: int = 3
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        known = (PP_ARCHETYPES if self.env == "pp" else LBF_ARCHETYPES) + (EGO_ARCHETYPES[self.env],)
        if self.archetype not in known:
            raise ValueError(f"unknown {self.env} archetype {self.archetype!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        self.rng = np.random.default_rng(self.seed)

    @property
    def n_actions(self) -> int:
        return PredatorPrey.n_actions if self.env == "pp" else LevelForaging.n_actions

    @property
    def key(self) -> tuple:
        return (self.archetype, self.noise_rate)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def clone(self) -> "TeammatePolicy":
        return copy.deepcopy(self)

    def rule_action(self, state: GridWorldState, me: int) -> int:
        if self.env == "pp":
            return _pp_rule(self.archetype, state, me, self.guard_radius)
        return _lbf_rule(self.archetype, state, me, self.n_agents)

    def act(self, state: GridWorldState, me: int) -> int:
        if self.noise_rate > 0 and self.rng.random() < self.noise_rate:
            return int(self.rng.integers(self.n_actions))
        return self.rule_action(state, me)


def policy_act(p: TeammatePolicy, state: GridWorldState, me: int) -> int:
    return p.act(state, me)


@dataclass
class PolicyPool:
    pool_id: str
    role: str  # train | test
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError(f"pool {self.pool_id} is empty")

    @property
    def designated(self) -> TeammatePolicy:
        """The member that plays the ego seat in cross-play."""
        return self.members[0]

    def subset(self, pool_id: str, indices) -> "PolicyPool":
        return PolicyPool(pool_id, self.role, [self.members[i] for i in indices])

    def describe(self) -> dict:
        return {"pool_id": self.pool_id, "role": self.role,
                "members": [{"policy_id": m.policy_id, "env": m.env, "archetype": m.archetype,
                             "noise_rate": m.noise_rate, "seed": m.seed} for m in self.members]}


def sample_team(pool: PolicyPool, rng: np.random.Generator, count: int = 2) -> list:
    """Draw ``count`` teammates uniformly with replacement; each draw is a private clone."""
    if not pool.members:
        raise ValueError("cannot sample from an empty pool")
    picks = rng.integers(len(pool.members), size=count)
    return [pool.members[int(i)].clone() for i in picks]


# ---------------------------------------------------------------------------
# default pools

_PP_TRAIN = ("interceptor", "mirror-chaser", "lazy-guard")
_PP_TEST = ("flanker-N", "flanker-S", "flanker-E", "flanker-W")
_LBF_TRAIN = ("nearest-food", "highest-level-food", "follow-ego")
_LBF_TEST = ("corner-sweeper-NW", "corner-sweeper-NE", "corner-sweeper-SW", "corner-sweeper-SE")
TRAIN_NOISE = (0.0, 0.1, 0.2)
TEST_NOISE = (0.0, 0.05, 0.1)


@dataclass
class PoolSet:
    """Train pools, the held-out test pool, and its 4/8 evaluation groups.

    ``populations`` splits the test pool by archetype; cross-play runs on it.
    """

    train: list
    test: PolicyPool
    groups: dict
    populations: list

    def all_pools(self) -> list:
        return self.train + [self.test]


def _population(env: str, archetype: str, role: str, noises, seed: int, n_agents: int) -> PolicyPool:
    members = [TeammatePolicy(f"{archetype}@{nz:g}", env, archetype, nz, seed + k, n_agents=n_agents)
               for k, nz in enumerate(noises)]
    return PolicyPool(archetype, role, members)


def default_pools(env: str, seed: int = 0, n_agents: int = 3) -> PoolSet:
    train_arch, test_arch = (_PP_TRAIN, _PP_TEST) if env == "pp" else (_LBF_TRAIN, _LBF_TEST)
    train = [_population(env, a, "train", TRAIN_NOISE, seed + 10 * i, n_agents)
             for i, a in enumerate(train_arch)]
    pops = [_population(env, a, "test", TEST_NOISE, seed + 100 + 10 * i, n_agents)
            for i, a in enumerate(test_arch)]
    test = PolicyPool("test", "test", [m for p in pops for m in p.members])
    # the 4-group holds one noiseless checkpoint per archetype, the 8-group the rest
    g4 = [i for i, m in enumerate(test.members) if m.noise_rate == TEST_NOISE[0]]
    g8 = [i for i in range(len(test.members)) if i not in g4]
    groups = {4: test.subset("test-4", g4), 8: test.subset("test-8", g8)}
    return PoolSet(train, test, groups, pops)


def pools_disjoint(train: list, test: PolicyPool) -> bool:
    seen = {m.key for p in train for m in p.members}
    return not any(m.key in seen for m in test.members)


def disagreement_rate(a: TeammatePolicy, b: TeammatePolicy, states, me: int = 1) -> float:
    diff = [a.rule_action(s, me) != b.rule_action(s, me) for s in states]
    return float(np.mean(diff))


# ---------------------------------------------------------------------------
# roll-outs and cross-play

def episode_seeds(seed: int, episode: int) -> tuple:
    """(env seed, teammate-draw rng, per-seat policy seeds) for one episode."""
    ss = np.random.SeedSequence([seed, episode])
    env_seed, draw, *seats = ss.generate_state(6)
    return int(env_seed), np.random.default_rng(int(draw)), [int(s) for s in seats]


def play_episode(env, policies: list, env_seed: int) -> float:
    state = env.reset(env_seed)
    total, done = 0.0, False
    while not done:
        joint = [p.act(state, i) for i, p in enumerate(policies)]
        state, r, done = env.step(state, joint)
        total += r
    return total


def crossplay_matrix(env, pools: list, episodes_per_cell: int, seed: int = 0) -> np.ndarray:
    """cell (i, j): mean return of pool j's designated agent with teammates from pool i.

    Every cell reuses the same per-episode seeds, so entries in a row differ
    only through the ego.
    """
    if episodes_per_cell < 1:
        raise ValueError("empty evaluation")
    if len(pools) < 2:
        raise ValueError("cross-play needs at least two pools")
    n = len(pools)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            returns = []
            for e in range(episodes_per_cell):
                env_seed, draw, seats = episode_seeds(seed, e)
                ego = pools[j].designated.clone()
                ego.reseed(seats[0])
                mates = sample_team(pools[i], draw, env.n_agents - 1)
                for m, s in zip(mates, seats[1:]):
                    m.reseed(s)
                returns.append(play_episode(env, [ego] + mates, env_seed))
            out[i, j] = np.mean(returns)
    return out


def diagonal_dominant(matrix: np.ndarray) -> bool:
    """Every diagonal entry strictly beats each other entry in its row."""
    m = np.asarray(matrix)
    return all(m[i, i] > np.delete(m[i], i).max() for i in range(m.shape[0]))
