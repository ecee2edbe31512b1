"""Categorical diffusion over one-hot actions with a uniform-mixing schedule.

Step k mixes the identity with the uniform distribution at rate beta_k. The
denoiser predicts the clean action; the reverse kernel is the Bayes posterior
averaged under that prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    n_actions: int
    beta: np.ndarray  # (K,), beta[k-1] is beta_k
    Q: np.ndarray     # (K, A, A), Q[k-1] is Q_k
    Qbar: np.ndarray  # (K+1, A, A), Qbar[k] is Q_1...Q_k; Qbar[0] = I

    def check_step(self, k, lo: int = 1):
        ks = np.asarray(k)
        if np.any(ks < lo) or np.any(ks > self.K):
            raise ValueError(f"diffusion step {k} outside [{lo}, {self.K}]")


def schedule_from_betas(betas, n_actions: int) -> NoiseSchedule:
    """Any beta_k in [0, 1]; beta_k = 0 gives Q_k = I (used by tests)."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("need at least one diffusion step")
    if n_actions < 2:
        raise ValueError("need at least two actions")
    if np.any(betas < 0) or np.any(betas > 1):
        raise ValueError("corruption rates must lie in [0, 1]")
    A = n_actions
    eye, uni = np.eye(A), np.full((A, A), 1.0 / A)
    Q = np.stack([(1.0 - b) * eye + b * uni for b in betas])
    Qbar = [eye]
    for q in Q:
        Qbar.append(Qbar[-1] @ q)
    return NoiseSchedule(len(betas), A, betas, Q, np.stack(Qbar))


def build_uniform_schedule(K: int, n_actions: int) -> NoiseSchedule:
    """beta_k = 1/(K-k+1), so the last step is fully uniform."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(1, K + 1)
    sched = schedule_from_betas(1.0 / (K - k + 1), n_actions)
    # the last factor is exactly uniform, so the product is too; pin it against rounding
    sched.Qbar[K] = 1.0 / n_actions
    return sched


def _index(a) -> int:
    a = np.asarray(a)
    if a.ndim == 0:
        return int(a)
    if a.ndim != 1 or not np.isclose(a.sum(), 1.0) or np.count_nonzero(a) != 1:
        raise ValueError("expected an action index or a one-hot row")
    return int(np.argmax(a))


def one_hot(index, n: int) -> np.ndarray:
    out = np.zeros(n)
    out[index] = 1.0
    return out


def forward_marginal(a0, k: int, sched: NoiseSchedule) -> np.ndarray:
    """q(a^k | a^0) = a0 Qbar_k."""
    sched.check_step(k, lo=0)
    return sched.Qbar[k][_index(a0)].copy()


def sample_forward(a0: np.ndarray, k: np.ndarray, sched: NoiseSchedule, rng) -> np.ndarray:
    """Batched draw of a^k for integer arrays a0 and k."""
    probs = sched.Qbar[k, a0]  # (B, A)
    return sample_categorical(probs, rng)


def sample_categorical(probs: np.ndarray, rng) -> np.ndarray:
    """Inverse-CDF draw from each row of ``probs``."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    out = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(out, probs.shape[1] - 1)


def posterior(a_k, a0, k: int, sched: NoiseSchedule) -> np.ndarray:
    """q(a^{k-1} | a^k, a^0) over a^{k-1}; at k=1 it is the delta on a^0."""
    sched.check_step(k)
    i, j = _index(a_k), _index(a0)
    num = sched.Q[k - 1][:, i] * sched.Qbar[k - 1][j]
    z = sched.Qbar[k][j, i]
    if z <= 0:
        raise ValueError(f"unreachable corruption pair (a0={j}, a_k={i}, k={k})")
    return num / z


def posterior_table(a_k: np.ndarray, k: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Batched posteriors P[b, a0, :] = q(a^{k-1} | a_k[b], a0, k[b]).

    Rows whose a0 cannot reach a_k are left at zero.
    """
    a_k, k = np.asarray(a_k), np.asarray(k)
    sched.check_step(k)
    col = sched.Q[k - 1, :, a_k]          # (B, A) over a^{k-1}
    num = sched.Qbar[k - 1] * col[:, None, :]  # (B, a0, a^{k-1})
    z = sched.Qbar[k, :, a_k]              # (B, a0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(z[..., None] > 0, num / z[..., None], 0.0)
    return out


def _softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reverse_distribution(x0_logits, a_k, k: int, sched: NoiseSchedule) -> np.ndarray:
    """p(a^{k-1} | a^k) = sum over a0 of posterior(a_k, a0, k) * softmax(logits)[a0]."""
    logits = x0_logits.data if isinstance(x0_logits, ag.Tensor) else np.asarray(x0_logits, float)
    p0 = _softmax(logits)
    if k == 1:
        return p0
    sched.check_step(k)
    table = posterior_table(np.array([_index(a_k)]), np.array([k]), sched)[0]
    return p0 @ table


def reverse_batch(x0_probs: np.ndarray, a_k: np.ndarray, k: int, sched: NoiseSchedule) -> np.ndarray:
    """Batched reverse kernel for one shared step k, from predicted clean-action probs."""
    if k == 1:
        return x0_probs
    table = posterior_table(a_k, np.full(len(a_k), k), sched)
    return np.einsum("ba,bac->bc", x0_probs, table)


def vlb_loss(x0_logits, a0, a_k, k, sched: NoiseSchedule):
    """Mean per-tuple bound term: KL(posterior || reverse) for k>=2, -log p(a0) at k=1.

    Accepts one tuple (logits of shape (A,), scalar a0/a_k/k) or a batch.
    With the k=1 table equal to the identity both cases are the same KL.
    """
    logits = ag.as_tensor(x0_logits)
    single = logits.ndim == 1
    if single:
        logits = ag.reshape(logits, (1, -1))
    a0, a_k, k = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (a0, a_k, k))
    table = posterior_table(a_k, k, sched)
    target = table[np.arange(len(a0)), a0]
    if np.any(np.abs(target.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("unreachable corruption pair in batch")
    with np.errstate(divide="ignore"):
        log_table = np.log(table)
    log_rev = ag.log_mix(logits, log_table)
    return ag.categorical_kl(target, log_rev)


def chain_distribution(x0_probs_fn, sched: NoiseSchedule) -> np.ndarray:
    """Exact law of a^0 under ancestral sampling from a uniform a^K.

    ``x0_probs_fn(a_k, k)`` returns the predicted clean-action probabilities.
    """
    A = sched.n_actions
    law = np.full(A, 1.0 / A)
    for k in range(sched.K, 0, -1):
        step = np.stack([reverse_distribution(np.log(np.maximum(x0_probs_fn(a, k), 1e-300)), a, k, sched)
                         for a in range(A)])
        law = law @ step
    return law
