"""Training-only prediction heads on the denoiser feature h.

The return head regresses the (normalized) return-to-go from (h, s); the goal
head predicts the binary future state from (predicted return, s). Neither is
used when acting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for v in (self.alpha, self.beta):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")


def init_heads(d_h: int, state_dim: int, hidden: int = 64, seed: int = 0) -> dict:
    """First layers random, last layers zero so both heads start flat."""
    rng = np.random.default_rng(seed)

    def t(arr, name):
        return Tensor(arr, requires_grad=True, name=name)

    return {
        "pgb.ret.l1.w": t(rng.normal(0, 1 / np.sqrt(d_h + state_dim), (d_h + state_dim, hidden)), "pgb.ret.l1.w"),
        "pgb.ret.l1.b": t(np.zeros(hidden), "pgb.ret.l1.b"),
        "pgb.ret.l2.w": t(np.zeros((hidden, 1)), "pgb.ret.l2.w"),
        "pgb.ret.l2.b": t(np.zeros(1), "pgb.ret.l2.b"),
        "pgb.goal.l1.w": t(rng.normal(0, 1 / np.sqrt(1 + state_dim), (1 + state_dim, hidden)), "pgb.goal.l1.w"),
        "pgb.goal.l1.b": t(np.zeros(hidden), "pgb.goal.l1.b"),
        "pgb.goal.l2.w": t(np.zeros((hidden, state_dim)), "pgb.goal.l2.w"),
        "pgb.goal.l2.b": t(np.zeros(state_dim), "pgb.goal.l2.b"),
    }


def _mlp(heads: dict, name: str, x) -> Tensor:
    u = ag.silu(ag.linear(x, heads[f"{name}.l1.w"], heads[f"{name}.l1.b"]))
    return ag.linear(u, heads[f"{name}.l2.w"], heads[f"{name}.l2.b"])


def predict_coreturn(h, s, heads: dict) -> Tensor:
    """(B, d_h), (B, D_s) -> (B, 1)."""
    return _mlp(heads, "pgb.ret", ag.concat([ag.as_tensor(h), ag.as_tensor(s)]))


def predict_cogoal(r_hat, s, heads: dict) -> Tensor:
    """(B, 1), (B, D_s) -> per-dimension probabilities (B, D_s)."""
    return ag.sigmoid(_mlp(heads, "pgb.goal", ag.concat([ag.as_tensor(r_hat), ag.as_tensor(s)])))


def coreturn_loss(r_hat, R) -> Tensor:
    r_hat = ag.as_tensor(r_hat)
    return ag.mse(r_hat, np.asarray(R, dtype=np.float64).reshape(r_hat.shape))


def cogoal_loss(g_hat, G) -> Tensor:
    return ag.bce(g_hat, G)


def total_loss(diff_loss, ret_loss, goal_loss, w: LossWeights) -> Tensor:
    return ag.add(ag.add(diff_loss, ag.mul(ret_loss, w.alpha)), ag.mul(goal_loss, w.beta))


def pgb_losses(h, s, R, G, heads: dict) -> tuple:
    r_hat = predict_coreturn(h, s, heads)
    g_hat = predict_cogoal(r_hat, s, heads)
    return coreturn_loss(r_hat, R), cogoal_loss(g_hat, G)
