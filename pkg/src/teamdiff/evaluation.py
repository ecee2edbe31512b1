"""Held-out evaluation, mode probes, ablations and sweeps."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import BCPolicy
from .binfmt import fmt_float
from .dataset import RandomEgo, ScriptedEgo, TrainingSet, collect_episode, state_window
from .envs import encode_state, make_env
from .pipeline import (Checkpoint, DiffusionEgo, DiffusionPolicy, Learner, TrainConfig, checkpoint_from,
                       fit, make_learner)
from .teammates import PolicyPool, TeammatePolicy, default_pools, episode_seeds, sample_team

Z95 = 1.96


@dataclass
class EvalReport:
    env: str
    group: int
    n: int
    mean: float
    std: float
    ci_half: float
    returns: list = field(repr=False)

    @classmethod
    def from_returns(cls, env: str, group: int, returns) -> "EvalReport":
        r = np.asarray(returns, dtype=np.float64)
        if r.size == 0:
            raise ValueError("empty evaluation")
        std = float(r.std(ddof=1)) if r.size > 1 else 0.0
        return cls(env, group, int(r.size), float(r.mean()), std, ci_half_width(std, r.size), r.tolist())

    @property
    def interval(self) -> tuple:
        return self.mean - self.ci_half, self.mean + self.ci_half

    def beats(self, other: "EvalReport") -> bool:
        """True when this interval lies strictly above the other."""
        return self.interval[0] > other.interval[1]


def ci_half_width(std: float, n: int) -> float:
    return Z95 * std / np.sqrt(n)


REPORT_FIELDS = ("label", "env", "group", "n", "mean", "std", "ci_half", "returns")


def write_reports(rows: list, path, extra: tuple = ()) -> None:
    """``rows`` holds (label, EvalReport, extra-dict) triples."""
    fields = ("label",) + tuple(extra) + REPORT_FIELDS[1:]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for label, rep, more in rows:
            w.writerow({"label": label, **more, "env": rep.env, "group": rep.group, "n": rep.n,
                        "mean": fmt_float(rep.mean), "std": fmt_float(rep.std),
                        "ci_half": fmt_float(rep.ci_half),
                        "returns": " ".join(fmt_float(x) for x in rep.returns)})


def heldout_group(env_name: str, group: int, n_agents: int = 3, pool_seed: int = 0) -> PolicyPool:
    groups = default_pools(env_name, pool_seed, n_agents).groups
    if group not in groups:
        raise ValueError(f"no test group of size {group}; choose from {sorted(groups)}")
    return groups[group]


def evaluate(make_ego, env, group: PolicyPool, episodes: int = 50, seed: int = 0,
             group_size: int | None = None) -> EvalReport:
    """Mean held-out return; ``make_ego(seat_seed)`` builds a fresh ego per episode.

    Episode seeds depend only on (seed, episode) so different egos face the
    same starts and teammate draws.
    """
    if episodes < 1:
        raise ValueError("empty evaluation")
    if any(m.env != env.name for m in group.members):
        raise ValueError(f"pool {group.pool_id} does not belong to environment {env.name}")
    returns = []
    for e in range(episodes):
        env_seed, draw, seats = episode_seeds(seed, e)
        mates = sample_team(group, draw, env.n_agents - 1)
        for p, s in zip(mates, seats[1:]):
            p.reseed(s)
        traj = collect_episode(env, make_ego(seats[0]), mates, env_seed, episode_id=e)
        returns.append(float(traj.rewards.sum()))
    return EvalReport.from_returns(env.name, group_size or len(group.members), returns)


def policy_ego(policy: DiffusionPolicy, m: int):
    return lambda s: DiffusionEgo(policy, m, s)


def random_ego(n_actions: int):
    return lambda s: RandomEgo(n_actions, s)


def scripted_ego(env_name: str, archetype: str, noise: float = 0.0):
    def make(s):
        return ScriptedEgo(TeammatePolicy("ego", env_name, archetype, noise, s))
    return make


def env_from_config(env_cfg: dict):
    kw = {k: v for k, v in env_cfg.items() if k != "preset"}
    return make_env(env_cfg.get("preset", "pp"), **kw)


def evaluate_checkpoint(ck: Checkpoint, group: int = 4, episodes: int = 50, seed: int = 0,
                        pool_seed: int = 0) -> EvalReport:
    env = env_from_config(ck.env_cfg)
    if ck.model_cfg.n_actions != env.n_actions or ck.model_cfg.state_dim != env.codec.length:
        raise ValueError("checkpoint does not match its environment")
    pool = heldout_group(env.name, group, env.n_agents, pool_seed)
    return evaluate(policy_ego(ck.policy(), ck.model_cfg.m), env, pool, episodes, seed, group)


# ---------------------------------------------------------------------------
# mode probe

@dataclass
class ModeProbe:
    window: np.ndarray = field(repr=False)
    samples: int
    histogram: np.ndarray
    modes: int
    entropy: float
    threshold: float

    @classmethod
    def from_actions(cls, window, actions, n_actions: int, threshold: float = 0.1) -> "ModeProbe":
        hist = np.bincount(np.asarray(actions), minlength=n_actions)
        freq = hist / hist.sum()
        nz = freq[freq > 0]
        entropy = float(-(nz * np.log(nz)).sum())
        return cls(np.asarray(window), int(hist.sum()), hist, int((freq >= threshold).sum()), entropy, threshold)


def mode_probe(policy, window, mask, samples: int = 1000, threshold: float = 0.1, seed: int = 0,
               n_actions: int | None = None) -> ModeProbe:
    """Sample the policy ``samples`` times on one window (as one batch of chains)."""
    rng = np.random.default_rng(seed)
    actions = policy.sample(window, mask, rng, samples)
    A = n_actions if n_actions is not None else policy.n_actions
    return ModeProbe.from_actions(window, actions, A, threshold)


def initial_window(env, state_seed: int, m: int) -> tuple:
    s = encode_state(env.reset(state_seed), env.codec)
    return state_window(s[None], 0, m)


def write_probe(probe: ModeProbe, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["action", "count", "frequency"])
        for a, c in enumerate(probe.histogram):
            w.writerow([a, int(c), fmt_float(c / probe.samples)])
        w.writerow([])
        w.writerow(["samples", "modes", "entropy", "threshold"])
        w.writerow([probe.samples, probe.modes, fmt_float(probe.entropy), probe.threshold])


# ---------------------------------------------------------------------------
# training runs, ablations, sweeps

VARIANTS = ("full", "no_coreturn", "no_cogoal", "mlp_denoiser", "unet_denoiser")


@dataclass
class RunResult:
    learner: Learner
    metrics: list
    report: EvalReport | None
    seconds: float
    rng_state: dict | None = None


def run_training(cfg: TrainConfig, data: TrainingSet, env_cfg: dict, body: str = "afm",
                 widths: dict | None = None, pool_seed: int = 0, eval_seed: int = 0,
                 metrics_path=None, log=None) -> RunResult:
    """Train from scratch with ``cfg.seed`` and evaluate on the held-out group."""
    env = env_from_config(env_cfg)
    pool = heldout_group(env.name, cfg.eval_group, env.n_agents, pool_seed)
    learner = make_learner(cfg, data.state_dim, env.n_actions, data.normalizer, body=body, widths=widths)
    report_box = {}

    def evaluate_fn(lr: Learner):
        pol = DiffusionPolicy(lr.model, lr.sched)
        rep = evaluate(policy_ego(pol, cfg.m), env, pool, cfg.eval_episodes, eval_seed, cfg.eval_group)
        report_box["last"] = rep
        return rep.mean, rep.ci_half

    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    rows = fit(data, learner, rng, evaluate_fn if cfg.eval_episodes > 0 else None, metrics_path, log)
    return RunResult(learner, rows, report_box.get("last"), time.perf_counter() - t0, rng.bit_generator.state)


def variant_config(variant: str, cfg: TrainConfig) -> tuple:
    """(train config, denoiser body) for an ablation variant."""
    if variant == "full":
        return cfg, "afm"
    if variant == "no_coreturn":
        return replace(cfg, alpha=0.0), "afm"
    if variant == "no_cogoal":
        return replace(cfg, beta=0.0), "afm"
    if variant == "mlp_denoiser":
        return cfg, "mlp"
    if variant == "unet_denoiser":
        return cfg, "unet"
    raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(VARIANTS)}")


def ablate(variants, cfg: TrainConfig, data: TrainingSet, env_cfg: dict, widths: dict | None = None,
           log=None) -> list:
    out = []
    for v in variants:
        vcfg, body = variant_config(v, cfg)
        res = run_training(vcfg, data, env_cfg, body=body, widths=widths, log=log)
        out.append((v, res))
    return out


SWEEP_AXES = {"K": (2, 10, 20, 30), "dropout": (0.0, 0.1, 0.2, 0.5)}


def sweep(axes: dict, cfg: TrainConfig, data: TrainingSet, env_cfg: dict, widths: dict | None = None,
          log=None) -> list:
    """Cartesian grid over the given axes; every cell trains with the same seed."""
    names = list(axes)
    grid = [()]
    for n in names:
        grid = [g + (v,) for g in grid for v in axes[n]]
    out = []
    for point in grid:
        settings = dict(zip(names, point))
        kw = {}
        if "K" in settings:
            kw["K"] = int(settings["K"])
        if "dropout" in settings:
            kw["dropout_rate"] = float(settings["dropout"])
        res = run_training(replace(cfg, **kw), data, env_cfg, widths=widths, log=log)
        out.append((settings, res))
    return out


def write_runs(rows: list, path, key_fields: tuple, timing: bool = False) -> None:
    """One CSV row per run: settings, final losses and eval summary.

    Wall-clock time per epoch is only added with ``timing`` since it does not
    reproduce across reruns.
    """
    fields = tuple(key_fields) + ("L_diff", "L_CoReturn", "L_CoGoal", "L_total", "n", "mean", "std", "ci_half")
    if timing:
        fields += ("seconds_per_epoch",)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for settings, res in rows:
            last = res.metrics[-1]
            rep = res.report
            row = {k: settings[k] for k in key_fields}
            row.update({k: fmt_float(last[k]) for k in ("L_diff", "L_CoReturn", "L_CoGoal", "L_total")})
            if rep is not None:
                row.update({"n": rep.n, "mean": fmt_float(rep.mean), "std": fmt_float(rep.std),
                            "ci_half": fmt_float(rep.ci_half)})
            if timing:
                row["seconds_per_epoch"] = f"{res.seconds / len(res.metrics):.3f}"
            w.writerow(row)


__all__ = ["EvalReport", "ModeProbe", "evaluate", "evaluate_checkpoint", "mode_probe", "ablate", "sweep",
           "run_training", "BCPolicy", "VARIANTS", "SWEEP_AXES", "checkpoint_from"]
