import csv
from dataclasses import replace

import numpy as np
import pytest

from teamdiff.config import parse_config
from teamdiff.dataset import TrainingSet, collect_dataset
from teamdiff.envs import ConfigError, LevelForaging, PredatorPrey
from teamdiff.evaluation import (VARIANTS, EvalReport, ModeProbe, ablate, ci_half_width, evaluate, heldout_group,
                                 mode_probe, random_ego, run_training, scripted_ego, sweep, variant_config,
                                 write_runs)
from teamdiff.pipeline import TrainConfig
from teamdiff.teammates import TeammatePolicy, default_pools

WIDTHS = dict(d_z=3, d_c=4, d_h=6, d_a=3, enc_hidden=6, film_hidden=4, ff_hidden=8)
ENV = {"preset": "pp", "horizon": 6}


@pytest.fixture(scope="module")
def small_data():
    env = PredatorPrey(horizon=6)
    pools = default_pools("pp").train
    trajs = collect_dataset(env, TeammatePolicy("ego", "pp", "interceptor", 0.1), pools, seed=0, total=6)
    return TrainingSet.build(trajs, m=2, n=2)


def small_cfg(**kw):
    base = dict(K=3, m=2, n=2, batch_size=16, epochs=2, eval_episodes=3, eval_every=0, seed=5)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# reports

def test_ci_formula():
    assert ci_half_width(1.0, 50) == pytest.approx(0.2772, abs=1e-4)
    assert ci_half_width(1.0, 50) == 1.96 / np.sqrt(50)


def test_all_zero_returns():
    rep = EvalReport.from_returns("pp", 4, np.zeros(50))
    assert rep.mean == 0.0 and rep.ci_half == 0.0


def test_ci_recomputed_from_returns():
    rep = EvalReport.from_returns("pp", 4, np.random.default_rng(0).normal(3, 2, 50))
    r = np.asarray(rep.returns)
    assert abs(1.96 * r.std(ddof=1) / np.sqrt(len(r)) - rep.ci_half) < 1e-12


def test_empty_evaluation():
    with pytest.raises(ValueError, match="empty evaluation"):
        EvalReport.from_returns("pp", 4, [])
    with pytest.raises(ValueError, match="empty evaluation"):
        evaluate(random_ego(5), PredatorPrey(), heldout_group("pp", 4), episodes=0)


def test_pool_env_mismatch():
    with pytest.raises(ValueError, match="does not belong"):
        evaluate(random_ego(5), PredatorPrey(), heldout_group("lbf", 4), episodes=2)


def test_unknown_group():
    with pytest.raises(ValueError):
        heldout_group("pp", 5)


def test_interceptor_beats_random():
    env, pool = PredatorPrey(), heldout_group("pp", 4)
    smart = evaluate(scripted_ego("pp", "interceptor"), env, pool, 50, seed=0)
    rand = evaluate(random_ego(5), env, pool, 50, seed=0)
    assert smart.beats(rand), (smart.interval, rand.interval)


def test_common_random_numbers():
    env, pool = LevelForaging(), heldout_group("lbf", 8)
    a = evaluate(scripted_ego("lbf", "nearest-feasible-food"), env, pool, 5, seed=3)
    b = evaluate(scripted_ego("lbf", "nearest-feasible-food"), env, pool, 5, seed=3)
    assert a.returns == b.returns and a.group == 8


# ---------------------------------------------------------------------------
# mode probe

class FixedLaw:
    def __init__(self, probs):
        self.probs = np.asarray(probs)
        self.n_actions = len(probs)

    def sample(self, window, mask, rng, n=1):
        return rng.choice(self.n_actions, size=n, p=self.probs)


def test_probe_delta_policy():
    p = mode_probe(FixedLaw([0, 0, 1.0, 0]), None, None, 1000)
    assert p.modes == 1 and p.entropy == 0.0 and p.histogram.sum() == 1000


def test_probe_two_modes():
    p = mode_probe(FixedLaw([0.5, 0, 0, 0.5]), None, None, 1000, seed=4)
    assert p.modes == 2 and abs(p.entropy - np.log(2)) < 0.05
    assert p.histogram.sum() == p.samples == 1000


def test_probe_threshold():
    p = ModeProbe.from_actions(None, [0] * 95 + [1] * 5, 3, threshold=0.1)
    assert p.modes == 1
    assert ModeProbe.from_actions(None, [0] * 95 + [1] * 5, 3, threshold=0.05).modes == 2


# ---------------------------------------------------------------------------
# ablations and sweeps

def test_variant_names():
    cfg = small_cfg()
    assert variant_config("no_coreturn", cfg)[0].alpha == 0.0
    assert variant_config("no_cogoal", cfg)[0].beta == 0.0
    assert variant_config("unet_denoiser", cfg)[1] == "unet"
    with pytest.raises(ValueError, match="unknown ablation variant"):
        variant_config("no_film", cfg)


def test_full_variant_equals_standard_run(small_data):
    cfg = small_cfg()
    (_, res), = ablate(["full"], cfg, small_data, ENV, WIDTHS)
    ref = run_training(cfg, small_data, ENV, widths=WIDTHS)
    assert res.metrics == ref.metrics and res.report.returns == ref.report.returns


def test_no_coreturn_has_no_gradient_effect(small_data):
    zero = run_training(small_cfg(alpha=0.0, eval_episodes=0), small_data, ENV, widths=WIDTHS)
    tiny = run_training(small_cfg(alpha=1e-12, eval_episodes=0), small_data, ENV, widths=WIDTHS)
    assert zero.metrics[-1]["L_CoReturn"] > 0  # still reported
    for k, t in zero.learner.model.params.items():
        assert np.allclose(t.data, tiny.learner.model.params[k].data, atol=1e-8), k


def test_ablation_and_sweep_csv(small_data, tmp_path):
    cfg = small_cfg(epochs=1)
    runs = ablate(VARIANTS, cfg, small_data, ENV, WIDTHS)
    write_runs([({"variant": v}, r) for v, r in runs], tmp_path / "a.csv", ("variant",))
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["variant"] for r in rows] == list(VARIANTS)
    assert all(r["mean"] != "" for r in rows)

    grid = sweep({"K": (2, 10, 20, 30)}, cfg, small_data, ENV, WIDTHS)
    write_runs(grid, tmp_path / "s.csv", ("K",))
    again = sweep({"K": (2, 10, 20, 30)}, cfg, small_data, ENV, WIDTHS)
    write_runs(again, tmp_path / "s2.csv", ("K",))
    text = (tmp_path / "s.csv").read_text()
    assert len(text.splitlines()) == 5
    assert text == (tmp_path / "s2.csv").read_text()


def test_sweep_two_axes(small_data):
    grid = sweep({"K": (2, 3), "dropout": (0.0, 0.5)}, small_cfg(epochs=1, eval_episodes=0), small_data, ENV,
                 WIDTHS)
    assert [s for s, _ in grid] == [{"K": 2, "dropout": 0.0}, {"K": 2, "dropout": 0.5},
                                    {"K": 3, "dropout": 0.0}, {"K": 3, "dropout": 0.5}]
    assert grid[1][1].learner.model.cfg.dropout == 0.5


# ---------------------------------------------------------------------------
# config files

def test_config_parse():
    cfg = parse_config("""
        [env]
        preset = lbf-coop   # cooperative variant
        horizon = 30
        [train]
        K = 10
        clip_norm = none
        [eval]
        episodes = 7
    """.replace("        ", ""))
    assert cfg.env == {"preset": "lbf-coop", "horizon": 30}
    assert cfg.train.K == 10 and cfg.train.clip_norm is None and cfg.train.env == "lbf"
    assert cfg.eval.episodes == 7
    assert cfg.make_env().horizon == 30


@pytest.mark.parametrize("text,msg", [
    ("[train]\nepochz = 3\n", "unknown key"),
    ("[training]\nK = 3\n", "unknown section"),
    ("[train]\nK = ten\n", "bad value"),
    ("[train]\nK = 0\n", "invalid"),
    ("[env]\npreset = chess\n", "chess"),
    ("K = 3\n", "cannot parse"),
    ("[model]\nbody = rnn\n", "body"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_config_defaults_match_dataclasses():
    cfg = parse_config("")
    assert cfg.train == replace(TrainConfig(), env="pp")
