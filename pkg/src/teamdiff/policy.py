"""Denoiser network: windowed Gaussian state encoder, step embedding, and a
body of two FiLM-modulated residual blocks (or an ablation body).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

BODIES = ("afm", "mlp", "unet")
SIGMA_FLOOR = 1e-4


@dataclass
class ModelConfig:
    state_dim: int
    n_actions: int
    K: int = 20
    m: int = 5
    d_z: int = 16
    d_c: int = 32
    d_h: int = 64
    d_a: int = 32
    enc_hidden: int = 64
    film_hidden: int = 64
    ff_hidden: int = 128
    dropout: float = 0.1
    body: str = "afm"
    seed: int = 0

    def __post_init__(self):
        if self.body not in BODIES:
            raise ValueError(f"unknown denoiser body {self.body!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentContext:
    mu: Tensor
    sigma: Tensor
    z: Tensor


@dataclass
class FiLMParams:
    gamma1: Tensor
    beta1: Tensor
    gamma2: Tensor
    beta2: Tensor


@dataclass
class DenoiseOutput:
    x0_logits: Tensor
    h: Tensor
    latent: LatentContext


def _dense(rng, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))


def _linear_params(params: dict, rng, name: str, fan_in: int, fan_out: int, scale: float = 1.0):
    params[f"{name}.w"] = Tensor(_dense(rng, fan_in, fan_out, scale), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def film_identity_bias(width: int) -> np.ndarray:
    """Bias giving gamma = 1, beta = 0 for the (gamma1, beta1, gamma2, beta2) layout."""
    one, zero = np.ones(width), np.zeros(width)
    return np.concatenate([one, zero, one, zero])


def init_params(cfg: ModelConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    p: dict = {}
    enc_in = (cfg.m + 1) * (cfg.state_dim + 1)
    _linear_params(p, rng, "encoder.l1", enc_in, cfg.enc_hidden)
    _linear_params(p, rng, "encoder.l2", cfg.enc_hidden, cfg.enc_hidden)
    _linear_params(p, rng, "encoder.mu", cfg.enc_hidden, cfg.d_z)
    _linear_params(p, rng, "encoder.sigma", cfg.enc_hidden, cfg.d_z)
    _linear_params(p, rng, "embed.z", cfg.d_z, cfg.d_c)
    _linear_params(p, rng, "embed.step", cfg.d_c, cfg.d_c)
    p["embed.action"] = Tensor(rng.normal(0.0, 1.0, (cfg.n_actions, cfg.d_a)), requires_grad=True,
                               name="embed.action")
    d = cfg.d_h
    if cfg.body == "afm":
        _linear_params(p, rng, "embed.in", cfg.d_a, d)
        for blk in ("afm1", "afm2"):
            p[f"{blk}.ln.g"] = Tensor(np.ones(d), requires_grad=True, name=f"{blk}.ln.g")
            p[f"{blk}.ln.b"] = Tensor(np.zeros(d), requires_grad=True, name=f"{blk}.ln.b")
            _linear_params(p, rng, f"{blk}.ff1", d, cfg.ff_hidden)
            _linear_params(p, rng, f"{blk}.ff2", cfg.ff_hidden, d)
            film = blk.replace("afm", "film")
            _linear_params(p, rng, f"{film}.l1", cfg.d_c, cfg.film_hidden)
            p[f"{film}.l2.w"] = Tensor(np.zeros((cfg.film_hidden, 4 * d)), requires_grad=True,
                                       name=f"{film}.l2.w")
            p[f"{film}.l2.b"] = Tensor(film_identity_bias(d), requires_grad=True, name=f"{film}.l2.b")
    elif cfg.body == "mlp":
        _linear_params(p, rng, "mlp.l1", cfg.d_a + cfg.d_c, cfg.ff_hidden)
        _linear_params(p, rng, "mlp.l2", cfg.ff_hidden, d)
    else:
        widths = [d, max(d // 2, 1), max(d // 4, 1)]
        _linear_params(p, rng, "unet.in", cfg.d_a + cfg.d_c, widths[0])
        _linear_params(p, rng, "unet.down1", widths[0] + cfg.d_c, widths[1])
        _linear_params(p, rng, "unet.down2", widths[1] + cfg.d_c, widths[2])
        _linear_params(p, rng, "unet.up2", widths[2] + cfg.d_c, widths[1])
        _linear_params(p, rng, "unet.up1", widths[1] + cfg.d_c, widths[0])
    # small output weights keep the initial clean-action guess near uniform
    _linear_params(p, rng, "head.out", d, cfg.n_actions, scale=1e-2)
    return p


def _lin(p: dict, name: str, x):
    return ag.linear(x, p[f"{name}.w"], p[f"{name}.b"])


# ---------------------------------------------------------------------------
# pieces

def encode_history(window, mask, params: dict, rng=None, train: bool = False) -> LatentContext:
    """Gaussian latent from a (B, m+1, D_s) window; padded slots are zeroed."""
    window = np.asarray(window, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if window.ndim != 3 or mask.shape != window.shape[:2]:
        raise ValueError(f"window {window.shape} and mask {mask.shape} do not agree")
    B = window.shape[0]
    flat = np.concatenate([(window * mask[..., None]).reshape(B, -1), mask], axis=1)
    if flat.shape[1] != params["encoder.l1.w"].shape[0]:
        raise ValueError(f"window of width {flat.shape[1]} does not match the encoder "
                         f"({params['encoder.l1.w'].shape[0]})")
    h = ag.silu(_lin(params, "encoder.l1", flat))
    h = ag.silu(_lin(params, "encoder.l2", h))
    mu = _lin(params, "encoder.mu", h)
    sigma = ag.add(ag.softplus(_lin(params, "encoder.sigma", h)), SIGMA_FLOOR)
    if train:
        eps = rng.standard_normal(mu.shape)
        z = ag.add(mu, ag.mul(sigma, eps))
    else:
        z = mu
    return LatentContext(mu, sigma, z)


def sinusoid(k, width: int) -> np.ndarray:
    """Fixed sin/cos features of the integer step(s) k, shape (B, width)."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = k[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if width % 2:
        out = np.concatenate([out, np.zeros((len(k), 1))], axis=1)
    return out


def embed_step(k, params: dict) -> Tensor:
    width = params["embed.step.w"].shape[0]
    return _lin(params, "embed.step", sinusoid(k, width))


def condition(z: Tensor, k, params: dict) -> Tensor:
    return ag.add(_lin(params, "embed.z", z), embed_step(k, params))


def film_params(c: Tensor, params: dict, head: str) -> FiLMParams:
    hidden = ag.silu(_lin(params, f"{head}.l1", c))
    out = _lin(params, f"{head}.l2", hidden)
    d = out.shape[-1] // 4
    parts = [ag.slice_last(out, i * d, (i + 1) * d) for i in range(4)]
    return FiLMParams(*parts)


def afm_block(x: Tensor, fp: FiLMParams, params: dict, block: str, dropout_rate: float = 0.0,
              rng=None, train: bool = False) -> Tensor:
    """gamma2 * MLP(gamma1 * LN(x) + beta1) + beta2 + x."""
    u = ag.layer_norm(x, params[f"{block}.ln.g"], params[f"{block}.ln.b"])
    u = ag.add(ag.mul(fp.gamma1, u), fp.beta1)
    u = ag.silu(_lin(params, f"{block}.ff1", u))
    u = ag.dropout(u, dropout_rate, rng, train)
    u = _lin(params, f"{block}.ff2", u)
    return ag.add(ag.add(ag.mul(fp.gamma2, u), fp.beta2), x)


def _body(a_k, c: Tensor, params: dict, cfg: ModelConfig, rng, train: bool) -> Tensor:
    emb = ag.embedding(params["embed.action"], np.asarray(a_k))
    rate = cfg.dropout
    if cfg.body == "afm":
        x = _lin(params, "embed.in", emb)
        x = afm_block(x, film_params(c, params, "film1"), params, "afm1", rate, rng, train)
        return afm_block(x, film_params(c, params, "film2"), params, "afm2", rate, rng, train)
    if cfg.body == "mlp":
        u = ag.silu(_lin(params, "mlp.l1", ag.concat([emb, c])))
        u = ag.dropout(u, rate, rng, train)
        return _lin(params, "mlp.l2", u)
    x0 = ag.silu(_lin(params, "unet.in", ag.concat([emb, c])))
    d1 = ag.silu(_lin(params, "unet.down1", ag.concat([x0, c])))
    d2 = ag.silu(_lin(params, "unet.down2", ag.concat([d1, c])))
    d2 = ag.dropout(d2, rate, rng, train)
    u1 = ag.add(ag.silu(_lin(params, "unet.up2", ag.concat([d2, c]))), d1)
    return ag.add(_lin(params, "unet.up1", ag.concat([u1, c])), x0)


# ---------------------------------------------------------------------------

class Denoiser:
    """Predicts clean-action logits from (a^k, state window, k)."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def latent(self, window, mask, rng=None, train: bool = False) -> LatentContext:
        return encode_history(window, mask, self.params, rng, train)

    def from_latent(self, a_k, z: Tensor, k, rng=None, train: bool = False) -> tuple:
        k = np.broadcast_to(np.asarray(k), (z.shape[0],))
        c = condition(z, k, self.params)
        h = _body(a_k, c, self.params, self.cfg, rng, train)
        return _lin(self.params, "head.out", h), h

    def denoise(self, a_k, window, mask, k, rng=None, train: bool = False) -> DenoiseOutput:
        lat = self.latent(window, mask, rng, train)
        logits, h = self.from_latent(a_k, lat.z, k, rng, train)
        return DenoiseOutput(logits, h, lat)

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))
