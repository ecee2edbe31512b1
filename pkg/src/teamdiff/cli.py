"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 data error
(missing, corrupt or mismatched dataset / checkpoint files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .binfmt import CorruptFileError, UnsupportedVersionError, fmt_float
from .config import RunConfig, load_config
from .dataset import TrainingSet, collect_dataset, read_dataset_with_header, summary, write_dataset
from .envs import ConfigError, make_env
from .evaluation import (SWEEP_AXES, VARIANTS, ablate, evaluate_checkpoint, initial_window, mode_probe,
                         run_training, sweep, write_probe, write_reports, write_runs)
from .pipeline import checkpoint_from, load_checkpoint, save_checkpoint
from .teammates import EGO_ARCHETYPES, TeammatePolicy, crossplay_matrix, default_pools

log = logging.getLogger("teamdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class DataError(Exception):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: Path, command: str, argv: list, cfg: RunConfig | None, seed, outputs: list) -> None:
    manifest = {"command": command, "argv": list(argv), "seed": seed, "version": version_string(),
                "config": cfg.snapshot() if cfg else None, "config_text": cfg.text if cfg else None,
                "outputs": [str(o) for o in outputs]}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _ego(cfg: RunConfig, env) -> TeammatePolicy:
    return TeammatePolicy("ego", env.name, EGO_ARCHETYPES[env.name], cfg.data.ego_noise, cfg.data.seed)


def _collect(cfg: RunConfig, episodes: int, seed: int) -> tuple:
    env = cfg.make_env()
    pools = default_pools(env.name, cfg.data.pool_seed, env.n_agents)
    trajs = collect_dataset(env, _ego(cfg, env), pools.train, seed=seed, total=episodes)
    return env, trajs


def _training_set(cfg: RunConfig, path: Path) -> TrainingSet:
    env = cfg.make_env()
    if not path.exists():
        log.info("dataset %s not found; collecting %d episodes", path, cfg.data.episodes)
        _, trajs = _collect(cfg, cfg.data.episodes, cfg.data.seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(trajs, path, env.name, env.codec)
    header, trajs = _read_dataset(path)
    if header.env_name != env.name or (header.codec and header.codec.length != env.codec.length):
        raise DataError(f"dataset {path} was collected for {header.env_name}, not the configured {env.name}")
    if not trajs:
        raise DataError(f"dataset {path} holds no episodes")
    return TrainingSet.build(trajs, cfg.train.m, cfg.train.n)


def _read_dataset(path: Path):
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    return read_dataset_with_header(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_collect(args, argv) -> int:
    cfg = _config(args)
    seed = cfg.data.seed if args.seed is None else args.seed
    episodes = cfg.data.episodes if args.episodes is None else args.episodes
    out = Path(args.out or cfg.data.path)
    env, trajs = _collect(cfg, episodes, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(trajs, out, env.name, env.codec)
    write_manifest(_file_manifest(out), "collect", argv, cfg, seed, [out])
    print(f"wrote {len(trajs)} episodes to {out}")
    return EXIT_OK


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    import dataclasses
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    if getattr(args, "episodes", None) is not None:
        kw["eval_episodes"] = args.episodes
    if kw:
        cfg.train = dataclasses.replace(cfg.train, **kw)
    return cfg


def cmd_train(args, argv) -> int:
    cfg = _with_overrides(_config(args), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _training_set(cfg, Path(args.data or cfg.data.path))
    res = run_training(cfg.train, data, cfg.env, body=cfg.model.body, widths=cfg.model.widths(),
                       pool_seed=cfg.data.pool_seed, eval_seed=cfg.eval.seed,
                       metrics_path=out / "metrics.csv", log=lambda r: log.info("epoch %s", r))
    ck = checkpoint_from(res.learner, cfg.env)
    ck.rng_state = res.rng_state
    save_checkpoint(ck, out / "ckpt")
    outputs = [out / "ckpt", out / "metrics.csv"]
    if res.report is not None:
        write_reports([("train-final", res.report, {})], out / "eval.csv")
        outputs.append(out / "eval.csv")
        print(f"final eval: {res.report.mean:.4f} ± {res.report.ci_half:.4f} (n={res.report.n})")
    write_manifest(out / "manifest.json", "train", argv, cfg, cfg.train.seed, outputs)
    print(f"checkpoint written to {out / 'ckpt'}")
    return EXIT_OK


def _load_ckpt(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    return load_checkpoint(p, skip_pgb=True)


def cmd_eval(args, argv) -> int:
    cfg = load_config(args.config) if args.config else None
    ck = _load_ckpt(args.checkpoint)
    episodes = args.episodes or (cfg.eval.episodes if cfg else 50)
    group = args.group or (cfg.eval.group if cfg else 4)
    seed = args.seed if args.seed is not None else (cfg.eval.seed if cfg else 0)
    try:
        rep = evaluate_checkpoint(ck, group, episodes, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    write_reports([(str(args.checkpoint), rep, {})], out)
    write_manifest(_file_manifest(out), "eval", argv, cfg, seed, [out])
    print(f"{rep.env} group-{rep.group}: {rep.mean:.4f} ± {rep.ci_half:.4f} over {rep.n} episodes")
    return EXIT_OK


def cmd_crossplay(args, argv) -> int:
    cfg = load_config(args.config) if args.config else None
    preset = args.env or (cfg.env.get("preset") if cfg else "lbf-coop")
    env_kw = {k: v for k, v in cfg.env.items() if k != "preset"} if cfg and not args.env else {}
    env = make_env(preset, **env_kw)
    pool_seed = cfg.data.pool_seed if cfg else 0
    ps = default_pools(env.name, pool_seed, env.n_agents)
    pools = {"test": ps.populations, "train": ps.train, "all": ps.train + ps.populations}[args.pools]
    episodes = args.episodes if args.episodes is not None else (cfg.eval.crossplay_episodes if cfg else 20)
    seed = args.seed if args.seed is not None else 0
    mat = crossplay_matrix(env, pools, episodes, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["teammates\\ego"] + [p.pool_id for p in pools])
        for p, row in zip(pools, mat):
            w.writerow([p.pool_id] + [fmt_float(v) for v in row])
    write_manifest(_file_manifest(out), "crossplay", argv, cfg, seed, [out])
    print(np.array2string(mat, precision=3))
    return EXIT_OK


def cmd_probe(args, argv) -> int:
    cfg = load_config(args.config) if args.config else None
    ck = _load_ckpt(args.checkpoint)
    from .evaluation import env_from_config
    env = env_from_config(ck.env_cfg)
    window, mask = initial_window(env, args.state_seed, ck.model_cfg.m)
    probe = mode_probe(ck.policy(), window, mask, args.samples, args.threshold, args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("probe.csv")
    write_probe(probe, out)
    write_manifest(_file_manifest(out), "probe", argv, cfg, args.seed, [out])
    print(f"histogram {probe.histogram.tolist()} modes {probe.modes} entropy {probe.entropy:.4f}")
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    cfg = _with_overrides(_config(args), args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown ablation variant(s): {', '.join(bad)}")
    data = _training_set(cfg, Path(args.data or cfg.data.path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = ablate(variants, cfg.train, data, cfg.env, widths=cfg.model.widths())
    write_runs([({"variant": v}, r) for v, r in runs], out / "ablation.csv", ("variant",))
    write_runs([({"variant": v}, r) for v, r in runs], out / "ablation_timing.csv", ("variant",), timing=True)
    write_manifest(out / "manifest.json", "ablate", argv, cfg, cfg.train.seed, [out / "ablation.csv"])
    print(f"wrote {len(runs)} variants to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    cfg = _with_overrides(_config(args), args)
    axes = {}
    for name in args.axis:
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; choose from {', '.join(SWEEP_AXES)}")
        axes[name] = SWEEP_AXES[name]
    if args.values:
        if len(axes) != 1:
            raise ConfigError("--values needs exactly one --axis")
        cast = int if "K" in axes else float
        axes = {next(iter(axes)): tuple(cast(v) for v in args.values.split(","))}
    data = _training_set(cfg, Path(args.data or cfg.data.path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = sweep(axes, cfg.train, data, cfg.env, widths=cfg.model.widths())
    keys = tuple(axes)
    write_runs(runs, out / "sweep.csv", keys)
    write_runs(runs, out / "sweep_timing.csv", keys, timing=True)
    write_manifest(out / "manifest.json", "sweep", argv, cfg, cfg.train.seed, [out / "sweep.csv"])
    print(f"wrote {len(runs)} grid rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_dataset_info(args, argv) -> int:
    header, trajs = _read_dataset(Path(args.path))
    print(json.dumps(summary(header, trajs), indent=2))
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    p = Path(args.manifest)
    if not p.is_file():
        raise ConfigError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text())
        old = list(manifest["argv"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"unreadable manifest {p}: {exc}") from exc
    text = manifest.get("config_text")
    if "--config" not in old or text is None:
        return main(old)
    # replay the stored config text rather than whatever the path holds now
    with tempfile.TemporaryDirectory() as tmp:
        cfg_file = Path(tmp) / "config.cfg"
        cfg_file.write_text(text)
        old[old.index("--config") + 1] = str(cfg_file)
        return main(old)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="teamdiff", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run configuration file")
        return p

    p = add("collect", cmd_collect, "collect an offline dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")

    p = add("train", cmd_train, "train a diffusion ego policy")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes", type=int, help="evaluation episodes")
    p.add_argument("--data", help="dataset path (collected if missing)")
    p.add_argument("--out", default="out")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a held-out group")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--group", type=int, choices=(4, 8))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("crossplay", cmd_crossplay, "cross-play matrix of scripted pools")
    p.add_argument("--pools", choices=("test", "train", "all"), default="test")
    p.add_argument("--env", choices=("pp", "lbf", "lbf-coop"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="crossplay.csv")

    p = add("probe", cmd_probe, "action histogram of a checkpoint at one state")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-seed", type=int, default=0)
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, "train and evaluate ablation variants")
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--data")
    p.add_argument("--out", default="ablate")

    p = add("sweep", cmd_sweep, "hyperparameter grid")
    p.add_argument("--axis", action="append", required=True, help="K or dropout (repeatable)")
    p.add_argument("--values", help="comma list replacing the default axis values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--data")
    p.add_argument("--out", default="sweep")

    p = add("dataset-info", cmd_dataset_info, "print a dataset header and summary")
    p.add_argument("path")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.set_defaults(fn=cmd_rerun)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorruptFileError, UnsupportedVersionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # mismatched checkpoints and datasets surface as ValueError from the loaders
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
