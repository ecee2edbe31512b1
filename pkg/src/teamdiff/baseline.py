"""Greedy behaviour-cloning foil: cross-entropy on (window, action), argmax at test time."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .pipeline import AdamState, adam_step, collect_grads


class BCPolicy:
    def __init__(self, in_dim: int, n_actions: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_actions = n_actions
        self.params = {
            "l1.w": Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)), requires_grad=True),
            "l1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "l2.w": Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, n_actions)), requires_grad=True),
            "l2.b": Tensor(np.zeros(n_actions), requires_grad=True),
        }
        self.opt = AdamState()

    def logits(self, flat) -> Tensor:
        p = self.params
        u = ag.silu(ag.linear(flat, p["l1.w"], p["l1.b"]))
        return ag.linear(u, p["l2.w"], p["l2.b"])

    @staticmethod
    def flatten(window, mask) -> np.ndarray:
        window, mask = np.asarray(window, float), np.asarray(mask, float)
        if window.ndim == 2:
            window, mask = window[None], mask[None]
        B = window.shape[0]
        return np.concatenate([(window * mask[..., None]).reshape(B, -1), mask], axis=1)

    def train_step(self, window, mask, actions, lr: float = 1e-3) -> float:
        flat = self.flatten(window, mask)
        target = np.eye(self.n_actions)[np.asarray(actions)]
        with ag.Tape() as tape:
            loss = ag.categorical_kl(target, self.logits(flat))
        tape.backward(loss)
        adam_step(self.params, collect_grads(self.params), self.opt, lr)
        return loss.item()

    def sample(self, window, mask, rng, n: int = 1) -> np.ndarray:
        """Greedy: every draw is the argmax, whatever the rng."""
        a = int(np.argmax(self.logits(self.flatten(window, mask)).data[0]))
        return np.full(n, a)

    def act(self, window, mask, rng=None) -> int:
        return int(self.sample(window, mask, rng, 1)[0])
