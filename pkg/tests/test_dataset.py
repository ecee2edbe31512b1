import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teamdiff.binfmt import CorruptFileError, UnsupportedVersionError
from teamdiff.dataset import (RandomEgo, ScriptedEgo, TrainingSet, Trajectory, collect_dataset, collect_episode,
                              goal_target, make_tuple, read_dataset, read_dataset_with_header, return_to_go,
                              returns_to_go, write_dataset)
from teamdiff.envs import PredatorPrey
from teamdiff.teammates import TeammatePolicy, default_pools, sample_team


def random_traj(rng, i, D=20, L=None, mates=2):
    L = L or int(rng.integers(1, 30))
    return Trajectory(i, "pp", int(rng.integers(1000)), [f"mate{j}" for j in range(mates)],
                      (rng.random((L + 1, D)) < 0.2).astype(np.uint8), rng.integers(5, size=L),
                      rng.integers(5, size=(L, mates)), rng.normal(size=L), bool(rng.integers(2)))


def team(seed=0):
    pool = default_pools("pp").train[0]
    return sample_team(pool, np.random.default_rng(seed), 2)


def test_horizon_one_gives_one_step():
    env = PredatorPrey(horizon=1)
    tr = collect_episode(env, RandomEgo(5, 0), team(), seed=3)
    assert len(tr) == 1 and tr.states.shape == (2, env.codec.length)


def test_collect_episode_deterministic():
    env = PredatorPrey()
    ego = TeammatePolicy("ego", "pp", "interceptor", 0.1, 4)
    a = collect_episode(env, ScriptedEgo(ego.clone()), team(), seed=8)
    b = collect_episode(env, ScriptedEgo(ego.clone()), team(), seed=8)
    assert a.equals(b)


def test_invalid_ego_action_aborts():
    env = PredatorPrey()
    with pytest.raises(ValueError, match="invalid action"):
        collect_episode(env, lambda s, h: 9, team(), seed=0)


def test_collect_dataset_count():
    env = PredatorPrey(horizon=5)
    pools = default_pools("pp").train
    ego = TeammatePolicy("ego", "pp", "interceptor", 0.1)
    trajs = collect_dataset(env, ego, pools, episodes_per_pool=4, seed=0)
    assert len(trajs) == 12
    assert [t.seed for t in trajs] == list(range(12))


def test_return_to_go_examples():
    tr = Trajectory(0, "pp", 0, [], np.zeros((4, 3)), [0, 0, 0], np.zeros((3, 0)), [1.0, 2.0, 3.0], True)
    assert return_to_go(tr, 0) == 6.0
    assert return_to_go(tr, 2) == 3.0
    with pytest.raises(IndexError):
        return_to_go(tr, 3)


def test_return_to_go_loop_oracle():
    rng = np.random.default_rng(0)
    r = rng.normal(size=200)
    tr = Trajectory(0, "pp", 0, [], np.zeros((201, 2)), np.zeros(200, int), np.zeros((200, 0)), r, True)
    all_r = returns_to_go(r)
    for t in range(200):
        acc = 0.0
        for x in reversed(list(r[t:])):
            acc = x + acc
        assert return_to_go(tr, t) == acc == all_r[t]
    assert np.all(all_r[:-1] == r[:-1] + all_r[1:])


def test_goal_target_clamps():
    rng = np.random.default_rng(1)
    tr = random_traj(rng, 0, L=10)
    assert np.array_equal(goal_target(tr, 2, 5), tr.states[7])
    assert np.array_equal(goal_target(tr, 8, 5), tr.states[10])
    assert np.array_equal(goal_target(tr, 10, 5), tr.states[10])
    assert np.array_equal(goal_target(tr, 4, 0), tr.states[4])
    g = goal_target(tr, 3, 5)
    assert g.shape == (tr.state_dim,) and set(np.unique(g)) <= {0, 1}


def test_training_tuple_window_and_mask():
    rng = np.random.default_rng(2)
    tr = random_traj(rng, 0, L=10)
    tup = make_tuple(tr, 2, m=5, n=5, n_actions=5)
    assert tup.window.shape == (6, tr.state_dim)
    assert tup.mask.tolist() == [0, 0, 0, 1, 1, 1]
    assert not tup.window[:3].any()
    assert np.array_equal(tup.window[5], tr.states[2])
    assert tup.action.sum() == 1 and tup.action[tr.ego_actions[2]] == 1
    assert tup.ret == return_to_go(tr, 2)


def test_training_set_batch_matches_tuples():
    rng = np.random.default_rng(3)
    trajs = [random_traj(rng, i) for i in range(6)]
    data = TrainingSet.build(trajs, m=3, n=2)
    assert len(data) == sum(len(t) for t in trajs)
    pairs = [(ti, t) for ti, tr in enumerate(trajs) for t in range(len(tr))]
    idx = rng.permutation(len(data))[:20]
    b = data.batch(idx)
    for row, i in enumerate(idx):
        ti, t = pairs[i]
        tup = make_tuple(trajs[ti], t, 3, 2, 5)
        assert np.array_equal(b["window"][row], tup.window)
        assert np.array_equal(b["mask"][row], tup.mask)
        assert b["action"][row] == trajs[ti].ego_actions[t]
        assert b["ret"][row] * data.normalizer == pytest.approx(tup.ret, abs=1e-12)
        assert np.array_equal(b["goal"][row], tup.goal)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    trajs = [random_traj(rng, i) for i in range(100)]
    p = tmp_path / "d.padf"
    write_dataset(trajs, p)
    back = read_dataset(p)
    assert len(back) == 100 and all(a.equals(b) for a, b in zip(trajs, back))
    write_dataset(back, tmp_path / "e.padf")
    assert p.read_bytes() == (tmp_path / "e.padf").read_bytes()


def test_empty_dataset_file(tmp_path):
    p = tmp_path / "empty.padf"
    write_dataset([], p, env_name="pp")
    header, trajs = read_dataset_with_header(p)
    assert header.count == 0 and trajs == []


def test_truncated_and_corrupt_rejected(tmp_path):
    rng = np.random.default_rng(5)
    p = tmp_path / "d.padf"
    write_dataset([random_traj(rng, i) for i in range(5)], p)
    raw = p.read_bytes()
    (tmp_path / "t.padf").write_bytes(raw[:-11])
    with pytest.raises(CorruptFileError, match="corrupt dataset"):
        read_dataset(tmp_path / "t.padf")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "f.padf").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFileError, match="corrupt dataset"):
        read_dataset(tmp_path / "f.padf")
    bad_version = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    (tmp_path / "v.padf").write_bytes(bad_version)
    with pytest.raises(UnsupportedVersionError, match="unsupported version"):
        read_dataset(tmp_path / "v.padf")
    (tmp_path / "m.padf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFileError):
        read_dataset(tmp_path / "m.padf")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 64), st.integers(0, 3))
def test_round_trip_property(seed, L, D, mates):
    import os
    import tempfile
    rng = np.random.default_rng(seed)
    tr = random_traj(rng, seed, D=D, L=L, mates=mates)
    fd, name = tempfile.mkstemp(suffix=".padf")
    os.close(fd)
    try:
        write_dataset([tr], name)
        assert read_dataset(name)[0].equals(tr)
    finally:
        os.unlink(name)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(0, "pp", 0, [], np.zeros((1, 2)), [], np.zeros((0, 0)), [], True)
    with pytest.raises(ValueError):
        Trajectory(0, "pp", 0, [], np.zeros((2, 2)), [0], np.zeros((1, 0)), [np.inf], True)
