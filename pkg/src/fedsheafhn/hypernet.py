"""Attention hypernetwork that emits every client's backbone in one batch."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .params import ParamSet, glorot

__all__ = ["HyperNet", "attention", "generate", "server_surrogate_loss"]


class HyperNet:
    """Attention (A_Q, A_K, A_V, each h x h) followed by a two-layer MLP
    h -> hidden -> P, where P is the flat backbone length."""

    def __init__(self, h: int, out_size: int, hidden: int = 128, dropout: float = 0.3,
                 use_attention: bool = True, rng=None, out_gain: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.h, self.out_size, self.hidden = h, out_size, hidden
        self.dropout = dropout
        self.use_attention = use_attention
        self.params = ParamSet()
        if use_attention:
            for name in ("att_q", "att_k", "att_v"):
                self.params[name] = glorot(rng, h, h)
        self.params["mlp_w1"] = glorot(rng, h, hidden)
        self.params["mlp_b1"] = np.zeros(hidden)
        # Uniform(+-1/sqrt(fan_in)) keeps generated weights near a standard init scale
        bound = out_gain / np.sqrt(hidden)
        self.params["mlp_w2"] = rng.uniform(-bound, bound, size=(hidden, out_size))
        self.params["mlp_b2"] = np.zeros(out_size)


def attention(x: ad.Tensor, p: dict) -> ad.Tensor:
    """softmax((X A_Q)(X A_K)^T) X A_V, row-wise softmax and no score scaling."""
    q = ad.matmul(x, p["att_q"])
    k = ad.matmul(x, p["att_k"])
    weights = ad.row_softmax(ad.matmul(q, ad.transpose(k)))
    return ad.matmul(ad.matmul(weights, x), p["att_v"])


def generate(x: ad.Tensor, hn: HyperNet, params: dict | None = None,
             rng: np.random.Generator | None = None) -> ad.Tensor:
    """Omega_b = H(X; phi), one backbone row per client.

    Dropout after the attention layer is active only when `rng` is given.
    """
    p = params if params is not None else hn.params.constants()
    if not isinstance(x, ad.Tensor):
        x = ad.constant(x)
    if x.shape[1] != hn.h:
        raise ValueError(f"input width {x.shape[1]} does not match hypernetwork width {hn.h}")
    z = attention(x, p) if hn.use_attention else x
    z = ad.dropout(z, hn.dropout, rng)
    hid = ad.relu(ad.matmul(z, p["mlp_w1"]) + p["mlp_b1"])
    return ad.matmul(hid, p["mlp_w2"]) + p["mlp_b2"]


def server_surrogate_loss(omega: ad.Tensor, delta) -> ad.Tensor:
    """<Omega, Delta> with Delta held constant.

    Its gradient w.r.t. any upstream parameter is J^T Delta, so one
    backward pass gives the chain-rule server updates for both the
    hypernetwork and the diffusion stack.
    """
    delta = np.asarray(delta.data if isinstance(delta, ad.Tensor) else delta, dtype=np.float64)
    if omega.shape != delta.shape:
        raise ValueError(f"surrogate shape mismatch: {omega.shape} vs {delta.shape}")
    return ad.inner(omega, ad.constant(delta))
