import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teamdiff.envs import (LEFT, LOAD, NOOP, RIGHT, STAY, UP, ConfigError, Entity, GridWorldState,
                           LevelForaging, PredatorPrey, decode_state, empty_state, encode_state, make_env)


def pp_state(preds, prey, w=10, h=10, horizon=50):
    ents = tuple(Entity("predator", p) for p in preds) + (Entity("prey", prey),)
    return GridWorldState(w, h, ents, 0, horizon)


def lbf_state(agents, foods, w=8, h=8, horizon=50):
    ents = tuple(Entity("agent", p, lv) for p, lv in agents) + tuple(Entity("food", p, lv) for p, lv in foods)
    return GridWorldState(w, h, ents, 0, horizon, sum(lv for _, lv in foods))


# ---------------------------------------------------------------------------
# predator-prey

def test_pp_reset_deterministic_and_distinct():
    env = PredatorPrey()
    a, b = env.reset(5), env.reset(5)
    assert np.array_equal(encode_state(a, env.codec), encode_state(b, env.codec))
    cells = [e.position for e in a.entities]
    assert len(a.entities) == 4 and len(set(cells)) == 4
    assert (a.grid_w, a.grid_h) == (10, 10)


def test_pp_grid_too_small():
    with pytest.raises(ConfigError):
        PredatorPrey(grid_w=2, grid_h=1, n_predators=3)


def test_pp_wall_clamps():
    env = PredatorPrey()
    s = pp_state([(0, 0), (5, 5), (9, 9)], (3, 7))
    s2, _, _ = env.step(s, [UP, STAY, STAY])
    assert s2.entities[0].position == (0, 0)
    s3, _, _ = env.step(s, [LEFT, STAY, STAY])
    assert s3.entities[0].position == (0, 0)


def test_pp_capture_on_small_grid():
    env = PredatorPrey(grid_w=3, grid_h=3)
    # prey at centre, predators move to its north and west sides
    s = pp_state([(1, 0), (0, 2), (2, 2)], (1, 1), w=3, h=3)
    s2, r, done = env.step(s, [STAY, UP, STAY])
    assert done and r == 10.0


def test_pp_shaped_reward_range_and_horizon():
    env = PredatorPrey(horizon=3)
    s = env.reset(0)
    rng = np.random.default_rng(0)
    for t in range(3):
        s, r, done = env.step(s, list(rng.integers(5, size=3)))
        assert -0.05 <= r <= 10.0
        if done:
            break
    assert done


def test_pp_invalid_action():
    env = PredatorPrey()
    with pytest.raises(ValueError):
        env.step(env.reset(0), [7, 0, 0])
    with pytest.raises(ValueError):
        env.step(env.reset(0), [0, 0])


def test_pp_prey_evades():
    env = PredatorPrey()
    s = pp_state([(4, 5), (0, 0), (9, 0)], (5, 5))
    a = env.prey_action(s)
    assert a == RIGHT


def test_pp_random_episode_replays():
    def run():
        env = PredatorPrey()
        rng = np.random.default_rng(3)
        s, done, out = env.reset(11), False, []
        while not done:
            s, r, done = env.step(s, list(rng.integers(5, size=3)))
            out.append((encode_state(s, env.codec).tobytes(), r))
        return out
    assert run() == run()


# ---------------------------------------------------------------------------
# level-based foraging

def test_lbf_reset_default():
    env = LevelForaging()
    s = env.reset(2)
    agents = [e for e in s.entities if e.role == "agent"]
    foods = [e for e in s.entities if e.role == "food"]
    assert len(agents) == 3 and len(foods) == 3
    assert all(1 <= a.level <= 2 for a in agents) and all(1 <= f.level <= 4 for f in foods)
    assert len({e.position for e in s.entities}) == 6


def test_lbf_level_gate():
    env = LevelForaging()
    s = lbf_state([((2, 2), 1), ((6, 6), 1), ((7, 0), 1)], [((3, 2), 3), ((0, 7), 1), ((5, 3), 1)])
    s2, r, done = env.step(s, [LOAD, NOOP, NOOP])
    assert r == 0.0 and s2.entities[3].alive


def test_lbf_co_load():
    env = LevelForaging()
    foods = [((3, 2), 3), ((0, 7), 1), ((5, 5), 2)]
    s = lbf_state([((2, 2), 1), ((4, 2), 2), ((7, 0), 1)], foods)
    s2, r, done = env.step(s, [LOAD, LOAD, NOOP])
    assert not s2.entities[3].alive
    assert r == pytest.approx(3 / 6)
    assert not done


def test_lbf_all_collected_returns_one():
    env = LevelForaging()
    s = lbf_state([((2, 2), 2), ((4, 2), 2), ((7, 0), 1)], [((3, 2), 4), ((7, 1), 1)])
    s2, r1, done = env.step(s, [LOAD, LOAD, NOOP])
    assert not done
    s3, r2, done = env.step(s2, [NOOP, NOOP, LOAD])
    assert done and r1 + r2 == pytest.approx(1.0)


def test_lbf_collision_priority():
    env = LevelForaging()
    s = lbf_state([((2, 2), 1), ((4, 2), 1), ((0, 0), 1)], [((6, 6), 1)])
    s2, _, _ = env.step(s, [RIGHT, LEFT, NOOP])
    assert s2.entities[0].position == (3, 2) and s2.entities[1].position == (4, 2)


def test_lbf_config_errors():
    with pytest.raises(ConfigError):
        LevelForaging(grid_w=2, grid_h=2)
    with pytest.raises(ConfigError):
        LevelForaging(agent_levels=(1, 1), food_levels=(1, 4))
    with pytest.raises(ConfigError):
        make_env("overcooked")


def test_lbf_episode_return_bounded():
    env = LevelForaging()
    rng = np.random.default_rng(1)
    for seed in range(5):
        s, done, total = env.reset(seed), False, 0.0
        while not done:
            s, r, done = env.step(s, list(rng.integers(6, size=3)))
            total += r
        assert 0.0 <= total <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# codec

@pytest.mark.parametrize("env", [PredatorPrey(), LevelForaging()], ids=["pp", "lbf"])
def test_codec_length_and_empty(env):
    codec = env.codec
    assert codec.length == len(codec.slots) * codec.grid_w * codec.grid_h
    assert not encode_state(empty_state(codec), codec).any()


@pytest.mark.parametrize("env", [PredatorPrey(), LevelForaging()], ids=["pp", "lbf"])
def test_codec_round_trip_1000_states(env):
    rng = np.random.default_rng(0)
    codec = env.codec
    for i in range(1000):
        s = env.reset(i)
        # wander a few random steps so round trips also cover dead foods
        for _ in range(int(rng.integers(0, 8))):
            s, _, done = env.step(s, list(rng.integers(env.n_actions, size=env.n_agents)))
            if done:
                break
        v = encode_state(s, codec)
        assert set(np.unique(v)) <= {0, 1}
        assert decode_state(v, codec).entities == s.entities


def test_decode_rejects_non_binary():
    env = PredatorPrey()
    v = encode_state(env.reset(0), env.codec).astype(int)
    v[0] = 2
    with pytest.raises(ValueError):
        decode_state(v, env.codec)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_pp_hamming_bound(seed, joint):
    env = PredatorPrey()
    s = env.reset(seed)
    s2, _, _ = env.step(s, joint)
    moved = sum(a.position != b.position for a, b in zip(s.entities, s2.entities))
    d = int(np.abs(encode_state(s, env.codec).astype(int) - encode_state(s2, env.codec)).sum())
    assert d <= 2 * moved
