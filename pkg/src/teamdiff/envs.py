"""Seedable grid worlds: Predator-Prey and Level-Based Foraging.

States are immutable-by-convention dataclasses; ``step`` returns a fresh
state. Coordinates are (x, y) with y growing downwards, so "up" is y - 1.
Entity 0 is always the ego agent.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


UP, DOWN, LEFT, RIGHT, STAY = 0, 1, 2, 3, 4
LOAD, NOOP = 4, 5
MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}


@dataclass(frozen=True)
class Entity:
    role: str  # predator | prey | agent | food
    position: tuple
    level: int = 1
    alive: bool = True


@dataclass(frozen=True)
class GridWorldState:
    grid_w: int
    grid_h: int
    entities: tuple
    step_index: int = 0
    horizon: int = 50
    food_total: int = 0

    def with_(self, **kw) -> "GridWorldState":
        return dataclasses.replace(self, **kw)

    def positions(self, role: str) -> list:
        return [e.position for e in self.entities if e.role == role and e.alive]

    def occupied(self) -> set:
        return {e.position for e in self.entities if e.alive}

    def codec_view(self) -> tuple:
        """The part of a state the binary codec preserves."""
        return (self.grid_w, self.grid_h,
                tuple((e.role, e.position, e.level) if e.alive else (e.role, None, None)
                      for e in self.entities))


@dataclass(frozen=True)
class StateCodec:
    """Maps each (entity slot, cell) pair to one bit.

    A slot is (entity index, role, level); an entity with several possible
    levels owns one slot per level so the level survives the round trip.
    """

    grid_w: int
    grid_h: int
    slots: tuple  # ((entity_index, role, level), ...)

    @property
    def length(self) -> int:
        return len(self.slots) * self.grid_w * self.grid_h

    def describe(self) -> dict:
        return {"grid_w": self.grid_w, "grid_h": self.grid_h, "slots": [list(s) for s in self.slots]}

    @classmethod
    def from_description(cls, d: dict) -> "StateCodec":
        return cls(int(d["grid_w"]), int(d["grid_h"]),
                   tuple((int(i), str(r), int(lv)) for i, r, lv in d["slots"]))


def encode_state(state: GridWorldState, codec: StateCodec) -> np.ndarray:
    cells = codec.grid_w * codec.grid_h
    vec = np.zeros(codec.length, dtype=np.uint8)
    index = {(i, r, lv): n for n, (i, r, lv) in enumerate(codec.slots)}
    for i, e in enumerate(state.entities):
        if not e.alive:
            continue
        slot = index.get((i, e.role, e.level))
        if slot is None:
            raise ValueError(f"entity {i} ({e.role}, level {e.level}) has no codec slot")
        x, y = e.position
        vec[slot * cells + y * codec.grid_w + x] = 1
    return vec


def decode_state(vector, codec: StateCodec, horizon: int = 50) -> GridWorldState:
    vec = np.asarray(vector)
    if vec.shape != (codec.length,):
        raise ValueError("decode: vector length does not match codec")
    if not np.all((vec == 0) | (vec == 1)):
        raise ValueError("decode: vector has non-binary entries")
    cells = codec.grid_w * codec.grid_h
    n_entities = max(i for i, _, _ in codec.slots) + 1
    roles = {}
    found = {}
    for n, (i, role, lv) in enumerate(codec.slots):
        roles[i] = role
        hits = np.flatnonzero(vec[n * cells:(n + 1) * cells])
        if hits.size > 1:
            raise ValueError("decode: entity slot occupies several cells")
        if hits.size == 1:
            if i in found:
                raise ValueError("decode: entity present at several levels")
            c = int(hits[0])
            found[i] = ((c % codec.grid_w, c // codec.grid_w), lv)
    ents = []
    for i in range(n_entities):
        if i in found:
            pos, lv = found[i]
            ents.append(Entity(roles[i], pos, lv, True))
        else:
            ents.append(Entity(roles[i], (0, 0), 0, False))
    return GridWorldState(codec.grid_w, codec.grid_h, tuple(ents), 0, horizon)


def empty_state(codec: StateCodec) -> GridWorldState:
    n_entities = max(i for i, _, _ in codec.slots) + 1
    roles = {i: r for i, r, _ in codec.slots}
    ents = tuple(Entity(roles[i], (0, 0), 0, False) for i in range(n_entities))
    return GridWorldState(codec.grid_w, codec.grid_h, ents)


def _clamp(state: GridWorldState, x: int, y: int) -> tuple:
    return (min(max(x, 0), state.grid_w - 1), min(max(y, 0), state.grid_h - 1))


def moved(state: GridWorldState, pos: tuple, action: int) -> tuple:
    dx, dy = MOVES.get(action, (0, 0))
    return _clamp(state, pos[0] + dx, pos[1] + dy)


def manhattan(a: tuple, b: tuple) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def chebyshev(a: tuple, b: tuple) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def neighbours(state: GridWorldState, pos: tuple) -> list:
    out = []
    for a in (UP, DOWN, LEFT, RIGHT):
        p = moved(state, pos, a)
        if p != pos:
            out.append(p)
    return out


def _distinct_cells(rng: np.random.Generator, w: int, h: int, count: int) -> list:
    if count > w * h:
        raise ConfigError(f"grid {w}x{h} cannot host {count} entities")
    cells = rng.choice(w * h, size=count, replace=False)
    return [(int(c) % w, int(c) // w) for c in cells]


@dataclass
class PredatorPrey:
    """Predators (entity 0 is the ego) chase one greedily evading prey."""

    grid_w: int = 10
    grid_h: int = 10
    n_predators: int = 3
    horizon: int = 50
    capture_reward: float = 10.0
    shaping: float = 0.05
    name: str = field(default="pp", init=False)

    n_actions = 5
    ACTIONS = ("up", "down", "left", "right", "stay")

    def __post_init__(self):
        if self.n_predators < 2:
            raise ConfigError("predator-prey needs at least 2 predators")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.n_predators + 1 > self.grid_w * self.grid_h:
            raise ConfigError(f"grid {self.grid_w}x{self.grid_h} cannot host "
                              f"{self.n_predators + 1} entities")

    @property
    def n_agents(self) -> int:
        return self.n_predators

    @property
    def codec(self) -> StateCodec:
        slots = tuple((i, "predator", 1) for i in range(self.n_predators))
        return StateCodec(self.grid_w, self.grid_h, slots + ((self.n_predators, "prey", 1),))

    def reset(self, seed) -> GridWorldState:
        rng = np.random.default_rng(seed)
        cells = _distinct_cells(rng, self.grid_w, self.grid_h, self.n_predators + 1)
        ents = [Entity("predator", c) for c in cells[:-1]] + [Entity("prey", cells[-1])]
        return GridWorldState(self.grid_w, self.grid_h, tuple(ents), 0, self.horizon)

    def captured(self, state: GridWorldState) -> bool:
        prey = state.entities[-1].position
        return sum(manhattan(p, prey) == 1 for p in state.positions("predator")) >= 2

    def prey_action(self, state: GridWorldState) -> int:
        """Greedy evasion: maximise the minimum Chebyshev distance to any predator."""
        prey = state.entities[-1].position
        preds = state.positions("predator")
        best, best_score = STAY, None
        for a in (UP, DOWN, LEFT, RIGHT, STAY):
            p = moved(state, prey, a)
            if p != prey and p in preds:
                continue
            score = min(chebyshev(p, q) for q in preds)
            if best_score is None or score > best_score:
                best, best_score = a, score
        return best

    def step(self, state: GridWorldState, joint) -> tuple:
        joint = [int(a) for a in joint]
        if len(joint) != self.n_predators:
            raise ValueError(f"expected {self.n_predators} actions, got {len(joint)}")
        for a in joint:
            if not 0 <= a < self.n_actions:
                raise ValueError(f"action {a} out of range for predator-prey")
        if state.step_index >= state.horizon:
            raise ValueError("step called on a terminal state")
        ents = list(state.entities)
        occupied = {e.position for e in ents}
        for i, a in enumerate(joint):  # index order is the collision priority
            cur = ents[i].position
            nxt = moved(state, cur, a)
            if nxt != cur and nxt not in occupied:
                occupied.discard(cur)
                occupied.add(nxt)
                ents[i] = dataclasses.replace(ents[i], position=nxt)
        mid = state.with_(entities=tuple(ents), step_index=state.step_index + 1)
        if self.captured(mid):
            return mid, self.capture_reward, True
        prey_pos = moved(mid, ents[-1].position, self.prey_action(mid))
        if prey_pos not in mid.positions("predator"):
            ents[-1] = dataclasses.replace(ents[-1], position=prey_pos)
        nxt_state = mid.with_(entities=tuple(ents))
        if self.captured(nxt_state):
            return nxt_state, self.capture_reward, True
        prey = ents[-1].position
        dist = np.mean([manhattan(p, prey) for p in nxt_state.positions("predator")])
        reward = -self.shaping * dist / (self.grid_w + self.grid_h)
        return nxt_state, float(reward), nxt_state.step_index >= nxt_state.horizon


@dataclass
class LevelForaging:
    """Agents (entity 0 is the ego) jointly load foods whose level needs teamwork."""

    grid_w: int = 8
    grid_h: int = 8
    n_agents: int = 3
    n_foods: int = 3
    agent_levels: tuple = (1, 2)
    food_levels: tuple = (1, 4)
    horizon: int = 50
    name: str = field(default="lbf", init=False)

    n_actions = 6
    ACTIONS = ("up", "down", "left", "right", "load", "noop")

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if (self.n_foods > (self.grid_w - 2) * (self.grid_h - 2)
                or self.n_agents + self.n_foods > self.grid_w * self.grid_h):
            raise ConfigError(f"grid {self.grid_w}x{self.grid_h} cannot host "
                              f"{self.n_agents + self.n_foods} entities")
        if self.food_levels[1] > self.n_agents * self.agent_levels[1]:
            raise ConfigError("food level exceeds what the whole team can load")

    @property
    def codec(self) -> StateCodec:
        slots = []
        for i in range(self.n_agents):
            slots += [(i, "agent", lv) for lv in range(self.agent_levels[0], self.agent_levels[1] + 1)]
        for j in range(self.n_foods):
            slots += [(self.n_agents + j, "food", lv)
                      for lv in range(self.food_levels[0], self.food_levels[1] + 1)]
        return StateCodec(self.grid_w, self.grid_h, tuple(slots))

    def reset(self, seed) -> GridWorldState:
        rng = np.random.default_rng(seed)
        # foods sit off the border so every food keeps four loading cells
        inner = [(x, y) for y in range(1, self.grid_h - 1) for x in range(1, self.grid_w - 1)]
        picks = rng.choice(len(inner), size=self.n_foods, replace=False)
        food_cells = [inner[int(i)] for i in picks]
        free = [(x, y) for y in range(self.grid_h) for x in range(self.grid_w)
                if (x, y) not in food_cells]
        picks = rng.choice(len(free), size=self.n_agents, replace=False)
        cells = [free[int(i)] for i in picks] + food_cells
        a_lv = rng.integers(self.agent_levels[0], self.agent_levels[1] + 1, size=self.n_agents)
        f_lv = rng.integers(self.food_levels[0], self.food_levels[1] + 1, size=self.n_foods)
        ents = [Entity("agent", c, int(lv)) for c, lv in zip(cells[:self.n_agents], a_lv)]
        ents += [Entity("food", c, int(lv)) for c, lv in zip(cells[self.n_agents:], f_lv)]
        return GridWorldState(self.grid_w, self.grid_h, tuple(ents), 0, self.horizon,
                              food_total=int(f_lv.sum()))

    def step(self, state: GridWorldState, joint) -> tuple:
        joint = [int(a) for a in joint]
        if len(joint) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(joint)}")
        for a in joint:
            if not 0 <= a < self.n_actions:
                raise ValueError(f"action {a} out of range for level-based foraging")
        if state.step_index >= state.horizon:
            raise ValueError("step called on a terminal state")
        ents = list(state.entities)
        foods = range(self.n_agents, len(ents))
        reward = 0.0
        # loading is resolved against pre-move positions
        for j in foods:
            f = ents[j]
            if not f.alive:
                continue
            loaders = [i for i in range(self.n_agents)
                       if joint[i] == LOAD and manhattan(ents[i].position, f.position) == 1]
            if loaders and sum(ents[i].level for i in loaders) >= f.level:
                reward += f.level / state.food_total
                ents[j] = Entity("food", (0, 0), 0, False)
        occupied = {e.position for e in ents if e.alive}
        for i, a in enumerate(joint):
            if a not in MOVES:
                continue
            cur = ents[i].position
            nxt = moved(state, cur, a)
            if nxt != cur and nxt not in occupied:
                occupied.discard(cur)
                occupied.add(nxt)
                ents[i] = dataclasses.replace(ents[i], position=nxt)
        nxt_state = state.with_(entities=tuple(ents), step_index=state.step_index + 1)
        done = all(not ents[j].alive for j in foods) or nxt_state.step_index >= nxt_state.horizon
        return nxt_state, float(reward), done


# named variants; "lbf-coop" makes every food need two loaders
PRESETS = {
    "pp": ("pp", {}),
    "lbf": ("lbf", {}),
    "lbf-coop": ("lbf", {"agent_levels": (1, 1), "food_levels": (2, 3)}),
}


def make_env(name: str, **kw):
    if name not in PRESETS:
        raise ConfigError(f"unknown environment {name!r}")
    kind, base = PRESETS[name]
    args = {**base, **kw}
    try:
        return PredatorPrey(**args) if kind == "pp" else LevelForaging(**args)
    except TypeError as exc:
        raise ConfigError(f"bad option for environment {name!r}: {exc}") from exc
