"""Training loop, ancestral sampler, Adam and the PADC checkpoint format."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import binfmt
from .binfmt import CorruptFileError, fmt_float
from .dataset import TrainingSet, state_window
from .diffusion import (NoiseSchedule, build_uniform_schedule, reverse_batch, sample_categorical,
                        sample_forward, vlb_loss)
from .pgb import LossWeights, init_heads, pgb_losses, total_loss
from .policy import Denoiser, ModelConfig, init_params

CKPT_MAGIC = b"PADC"
CKPT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    K: int = 20
    m: int = 5
    n: int = 5
    alpha: float = 0.5
    beta: float = 0.5
    dropout_rate: float = 0.1
    batch_size: int = 128
    epochs: int = 20
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 10.0
    seed: int = 0
    env: str = "pp"
    pools: str = "default"
    eval_every: int = 2
    eval_episodes: int = 50
    eval_group: int = 4

    def __post_init__(self):
        if not 1 <= self.K <= 1024:
            raise ValueError("K must be in 1..1024")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.m < 0 or self.n < 0:
            raise ValueError("window and goal horizon must be non-negative")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of every tensor in ``params``."""
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def collect_grads(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
        p.grad = None
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class Learner:
    """Everything that changes during training."""

    model: Denoiser
    heads: dict | None
    sched: NoiseSchedule
    cfg: TrainConfig
    normalizer: float = 1.0
    opt: AdamState = field(default_factory=AdamState)
    epoch: int = 0

    def trainable(self) -> dict:
        out = dict(self.model.params)
        if self.heads is not None:
            out.update(self.heads)
        return out


def make_learner(cfg: TrainConfig, state_dim: int, n_actions: int, normalizer: float = 1.0,
                 with_pgb: bool = True, body: str = "afm", widths: dict | None = None) -> Learner:
    mcfg = ModelConfig(state_dim=state_dim, n_actions=n_actions, K=cfg.K, m=cfg.m,
                       dropout=cfg.dropout_rate, body=body, seed=cfg.seed, **(widths or {}))
    model = Denoiser(mcfg)
    heads = init_heads(mcfg.d_h, state_dim, seed=cfg.seed + 1) if with_pgb else None
    return Learner(model, heads, build_uniform_schedule(cfg.K, n_actions), cfg, normalizer)


def batch_losses(learner: Learner, b: dict, k: np.ndarray, a_k: np.ndarray, rng) -> dict:
    """Forward pass of one batch; call inside a tape to differentiate."""
    out = learner.model.denoise(a_k, b["window"], b["mask"], k, rng, train=True)
    l_diff = vlb_loss(out.x0_logits, b["action"], a_k, k, learner.sched)
    if learner.heads is None:
        return {"diff": l_diff, "total": l_diff}
    l_ret, l_goal = pgb_losses(out.h, b["state"], b["ret"], b["goal"], learner.heads)
    return {"diff": l_diff, "ret": l_ret, "goal": l_goal,
            "total": total_loss(l_diff, l_ret, l_goal, learner.cfg.weights)}


def train_epoch(data: TrainingSet, learner: Learner, rng: np.random.Generator) -> dict:
    """One pass over a fresh permutation of all tuples, one Adam step per batch."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    cfg, sched = learner.cfg, learner.sched
    params = learner.trainable()
    order = rng.permutation(len(data))
    sums = {"diff": 0.0, "ret": 0.0, "goal": 0.0, "total": 0.0}
    per_batch = []
    n_batches = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        b = data.batch(idx)
        k = rng.integers(1, sched.K + 1, size=len(idx))
        a_k = sample_forward(b["action"], k, sched, rng)
        try:
            with ag.Tape() as tape:
                losses = batch_losses(learner, b, k, a_k, rng)
            tape.backward(losses["total"])
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite loss in epoch {learner.epoch}: {exc}",
                                   {"batch_indices": idx.tolist(), "k": k.tolist(),
                                    "epoch": learner.epoch}) from exc
        grads = collect_grads(params)
        clip_by_global_norm(grads, cfg.clip_norm)
        adam_step(params, grads, learner.opt, cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2),
                  cfg.adam_eps)
        vals = {name: t.item() for name, t in losses.items()}
        per_batch.append(vals["diff"])
        for name, v in vals.items():
            sums[name] += v
        n_batches += 1
    learner.epoch += 1
    metrics = {f"L_{name}": v / n_batches for name, v in sums.items()}
    metrics["batch_diff"] = per_batch
    return metrics


METRIC_FIELDS = ("epoch", "L_diff", "L_CoReturn", "L_CoGoal", "L_total", "eval_return_mean", "eval_return_ci")


def fit(data: TrainingSet, learner: Learner, rng: np.random.Generator, evaluate_fn=None,
        metrics_path=None, log=None) -> list:
    """Run ``cfg.epochs`` epochs; ``evaluate_fn(learner) -> (mean, ci)`` every eval_every epochs
    and always after the last one."""
    cfg = learner.cfg
    rows = []
    for _ in range(cfg.epochs):
        m = train_epoch(data, learner, rng)
        row = {"epoch": learner.epoch, "L_diff": m["L_diff"], "L_CoReturn": m["L_ret"],
               "L_CoGoal": m["L_goal"], "L_total": m["L_total"],
               "eval_return_mean": "", "eval_return_ci": ""}
        last = learner.epoch == cfg.epochs
        if evaluate_fn is not None and (last or (cfg.eval_every > 0 and learner.epoch % cfg.eval_every == 0)):
            mean, ci = evaluate_fn(learner)
            row["eval_return_mean"], row["eval_return_ci"] = mean, ci
        rows.append(row)
        if log:
            log(row)
        if metrics_path is not None:
            write_metrics(rows, metrics_path)
    return rows


def write_metrics(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (fmt_float(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# inference

class DiffusionPolicy:
    """Inference view of a trained denoiser. It holds no prediction heads."""

    def __init__(self, model: Denoiser, sched: NoiseSchedule):
        self.model, self.sched = model, sched

    @property
    def n_actions(self) -> int:
        return self.sched.n_actions

    def sample(self, window, mask, rng, n: int = 1) -> np.ndarray:
        """``n`` independent chains on one (m+1, D) window, run as a batch."""
        window = np.asarray(window, dtype=np.float64)[None]
        mask = np.asarray(mask, dtype=np.float64)[None]
        z = self.model.latent(window, mask).z
        z = ag.Tensor(np.repeat(z.data, n, axis=0))
        A = self.sched.n_actions
        a = rng.integers(A, size=n)  # a^K from the uniform terminal marginal
        for k in range(self.sched.K, 0, -1):
            logits, _ = self.model.from_latent(a, z, k)
            x = logits.data
            probs = np.exp(x - x.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            a = sample_categorical(reverse_batch(probs, a, k, self.sched), rng)
        return a

    def act(self, window, mask, rng) -> int:
        return int(self.sample(window, mask, rng, 1)[0])


def act(model: Denoiser, sched: NoiseSchedule, window, mask, rng) -> int:
    return DiffusionPolicy(model, sched).act(window, mask, rng)


class DiffusionEgo:
    """Ego adapter for roll-outs: keeps the last m+1 encoded states as the window."""

    def __init__(self, policy: DiffusionPolicy, m: int, seed: int = 0):
        self.policy, self.m = policy, m
        self.rng = np.random.default_rng(seed)

    def __call__(self, state, history) -> int:
        states = np.asarray(history)
        window, mask = state_window(states, len(states) - 1, self.m)
        return self.policy.act(window, mask, self.rng)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    env_cfg: dict
    params: dict
    heads: dict | None
    normalizer: float
    rng_state: dict | None
    epoch: int
    opt: AdamState | None = None

    def policy(self) -> DiffusionPolicy:
        return DiffusionPolicy(Denoiser(self.model_cfg, self.params),
                               build_uniform_schedule(self.model_cfg.K, self.model_cfg.n_actions))

    def learner(self) -> Learner:
        sched = build_uniform_schedule(self.model_cfg.K, self.model_cfg.n_actions)
        return Learner(Denoiser(self.model_cfg, self.params), self.heads, sched, self.train_cfg,
                       self.normalizer, self.opt or AdamState(), self.epoch)


def checkpoint_from(learner: Learner, env_cfg: dict, rng: np.random.Generator | None = None) -> Checkpoint:
    return Checkpoint(learner.model.cfg, learner.cfg, dict(env_cfg), learner.model.params, learner.heads,
                      learner.normalizer, rng.bit_generator.state if rng is not None else None,
                      learner.epoch, learner.opt)


def _tensor_payload(name: str, arr: np.ndarray) -> bytes:
    w = binfmt.Writer()
    w.str(name)
    w.u8(arr.ndim)
    for d in arr.shape:
        w.u32(d)
    w.blob(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return w.getvalue()


def encode_checkpoint(ck: Checkpoint) -> bytes:
    tensors = {f"model/{k}": v.data for k, v in ck.params.items()}
    if ck.heads is not None:
        tensors.update({f"pgb/{k}": v.data for k, v in ck.heads.items()})
    if ck.opt is not None:
        tensors.update({f"adam.m/{k}": v for k, v in ck.opt.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in ck.opt.v.items()})
    meta = {"model": ck.model_cfg.to_dict(), "train": asdict(ck.train_cfg), "env": ck.env_cfg,
            "normalizer": ck.normalizer, "rng_state": ck.rng_state, "epoch": ck.epoch,
            "adam_t": ck.opt.t if ck.opt is not None else None, "tensors": sorted(tensors)}
    w = binfmt.Writer()
    w.str(json.dumps(meta, sort_keys=True))
    payloads = [w.getvalue()] + [_tensor_payload(n, tensors[n]) for n in sorted(tensors)]
    return binfmt.pack_file(CKPT_MAGIC, CKPT_VERSION, payloads)


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def decode_checkpoint(data: bytes, skip_pgb: bool = False, n_actions: int | None = None) -> Checkpoint:
    payloads = binfmt.unpack_file(data, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
    if not payloads:
        raise CorruptFileError("corrupt checkpoint: missing header")
    try:
        meta = json.loads(binfmt.Reader(payloads[0], "checkpoint").str())
        mcfg = ModelConfig(**meta["model"])
        tcfg = TrainConfig(**meta["train"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"corrupt checkpoint: bad header ({exc})") from exc
    if n_actions is not None and mcfg.n_actions != n_actions:
        raise ValueError(f"checkpoint has {mcfg.n_actions} actions, expected {n_actions}")
    tensors = {}
    for p in payloads[1:]:
        r = binfmt.Reader(p, "checkpoint")
        name = r.str()
        shape = tuple(r.u32() for _ in range(r.u8()))
        raw = r.blob()
        if not r.done() or len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptFileError(f"corrupt checkpoint: malformed tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if sorted(tensors) != meta["tensors"]:
        raise CorruptFileError("corrupt checkpoint: tensor list disagrees with header")

    expected = {k: v.shape for k, v in init_params(mcfg).items()}
    params = {}
    for name, shape in expected.items():
        arr = tensors.get(f"model/{name}")
        if arr is None:
            raise ValueError(f"checkpoint lacks parameter {name}")
        if arr.shape != shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {shape}")
        params[name] = ag.Tensor(arr, requires_grad=True, name=name)
    heads = None
    head_names = [k[4:] for k in tensors if k.startswith("pgb/")]
    if head_names and not skip_pgb:
        heads = {k: ag.Tensor(tensors[f"pgb/{k}"], requires_grad=True, name=k) for k in sorted(head_names)}
    opt = None
    if meta.get("adam_t") is not None and not skip_pgb:
        opt = AdamState({k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.m/")},
                        {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.v/")},
                        int(meta["adam_t"]))
    return Checkpoint(mcfg, tcfg, meta["env"], params, heads, float(meta["normalizer"]),
                      meta["rng_state"], int(meta["epoch"]), opt)


def load_checkpoint(path, skip_pgb: bool = False, n_actions: int | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), skip_pgb, n_actions)


def strip_pgb(data: bytes) -> bytes:
    """Re-encode a checkpoint file without its prediction heads or optimizer state."""
    ck = decode_checkpoint(data, skip_pgb=True)
    return encode_checkpoint(ck)
