"""Selective state-space encoder stack and the prediction head.

Each block is pre-normalized with a residual connection: the input is
projected to an expanded width, passed through a short depthwise causal
convolution and SiLU, then through a diagonal selective scan whose step size,
input and readout maps depend on the current token; a SiLU gate and an output
projection close the block. The state matrix is parameterized as
``-exp(a_log)`` so every discrete transition ``exp(dt * a)`` has magnitude
below one for positive step sizes.

This is a functional stand-in for a fused-kernel implementation: same
recurrence, plain numpy scan, float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import xavier_uniform


@dataclass
class SsmBlockParams:
    ln_gain: Tensor
    ln_bias: Tensor
    in_proj: Tensor       # D -> 2*E*D (token branch, gate branch)
    conv_w: Tensor        # (E*D, d_conv) depthwise causal taps
    conv_b: Tensor
    dt_w: Tensor          # E*D -> E*D step-size projection
    dt_b: Tensor
    b_w: Tensor           # E*D -> d_state
    c_w: Tensor           # E*D -> d_state
    a_log: Tensor         # (E*D, d_state); state matrix is -exp(a_log)
    out_proj: Tensor      # E*D -> D

    def tensors(self):
        return {k: getattr(self, k) for k in (
            "ln_gain", "ln_bias", "in_proj", "conv_w", "conv_b",
            "dt_w", "dt_b", "b_w", "c_w", "a_log", "out_proj")}


@dataclass
class StackNormParams:
    """Final normalization closing the pre-norm block stack."""

    gain: Tensor
    bias: Tensor

    def tensors(self):
        return {"norm_gain": self.gain, "norm_bias": self.bias}


@dataclass
class HeadParams:
    weight: Tensor   # (D, 1)
    bias: Tensor     # (1,)

    def tensors(self):
        return {"head_w": self.weight, "head_b": self.bias}


def init_block(rng: np.random.Generator, dim: int, d_state: int, d_conv: int,
               expand: int) -> SsmBlockParams:
    inner = expand * dim
    # step sizes start log-uniform in [1e-3, 1e-1] via the softplus inverse
    dt_init = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=inner))
    dt_bias = np.log(np.expm1(dt_init))
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1)))
    return SsmBlockParams(
        ln_gain=ad.parameter(np.ones(dim)),
        ln_bias=ad.parameter(np.zeros(dim)),
        in_proj=ad.parameter(xavier_uniform(rng, (dim, 2 * inner), dim, 2 * inner)),
        conv_w=ad.parameter(xavier_uniform(rng, (inner, d_conv), d_conv, 1)),
        conv_b=ad.parameter(np.zeros(inner)),
        dt_w=ad.parameter(xavier_uniform(rng, (inner, inner), inner, inner) * 0.1),
        dt_b=ad.parameter(dt_bias),
        b_w=ad.parameter(xavier_uniform(rng, (inner, d_state), inner, d_state)),
        c_w=ad.parameter(xavier_uniform(rng, (inner, d_state), inner, d_state)),
        a_log=ad.parameter(a_log),
        out_proj=ad.parameter(xavier_uniform(rng, (inner, dim), inner, dim)),
    )


def init_stack_norm(dim: int) -> StackNormParams:
    return StackNormParams(gain=ad.parameter(np.ones(dim)),
                           bias=ad.parameter(np.zeros(dim)))


def init_head(rng: np.random.Generator, dim: int) -> HeadParams:
    # zero start: the readout begins as plain logistic regression on the
    # normalized final state, which conditions early training
    return HeadParams(weight=ad.parameter(np.zeros((dim, 1))),
                      bias=ad.parameter(np.zeros(1)))


def causal_conv(u: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution along the token axis of ``(B, N, C)``."""
    d_conv = w.shape[1]
    out = None
    for i in range(d_conv):
        tap = ad.reshape(ad.take(w, np.array([i]), axis=1), (w.shape[0],))
        term = ad.mul(ad.shift_tokens(u, i, axis=1), tap)
        out = term if out is None else ad.add(out, term)
    return ad.add(out, b)


def block_forward(x: Tensor, p: SsmBlockParams, training: bool = False,
                  drop_rate: float = 0.0,
                  drop_rng: np.random.Generator | None = None) -> Tensor:
    """One pre-norm residual block over ``x (B, N, D)``."""
    inner2 = p.in_proj.shape[1]
    inner = inner2 // 2
    h = ad.layer_norm(x, p.ln_gain, p.ln_bias)
    uz = ad.matmul(h, p.in_proj)
    u = ad.take(uz, np.arange(inner), axis=2)
    gate = ad.take(uz, np.arange(inner, inner2), axis=2)
    u = ad.silu(causal_conv(u, p.conv_w, p.conv_b))
    dt = ad.softplus(ad.add(ad.matmul(u, p.dt_w), p.dt_b))
    b_in = ad.matmul(u, p.b_w)
    c_out = ad.matmul(u, p.c_w)
    a = ad.neg(ad.exp(p.a_log))
    y = ad.selective_scan(dt, a, b_in, c_out, u)
    y = ad.mul(y, ad.silu(gate))
    out = ad.matmul(y, p.out_proj)
    if training and drop_rate > 0.0 and drop_rng is not None:
        out = ad.dropout(out, drop_rate, drop_rng)
    return ad.add(x, out)


def encode(tokens: Tensor, blocks, stack_norm: StackNormParams | None = None,
           training: bool = False, drop_rate: float = 0.0,
           drop_rng: np.random.Generator | None = None) -> Tensor:
    """Apply the block stack and close it with the final normalization.

    Causal, linear in sequence length. Accepts ``(N, D)`` or ``(B, N, D)``;
    aborts with diagnostics if any block produces non-finite activations.
    With all output projections zeroed the result is the normalized
    pass-through of the input.
    """
    squeeze = tokens.ndim == 2
    h = ad.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    if h.shape[1] < 1:
        raise ValueError("empty token sequence")
    for li, p in enumerate(blocks):
        h = block_forward(h, p, training=training, drop_rate=drop_rate,
                          drop_rng=drop_rng)
        if not np.isfinite(h.data).all():
            bad = int(np.argwhere(~np.isfinite(h.data))[0][0])
            raise FloatingPointError(
                f"non-finite activations in block {li} (first bad batch row {bad}); "
                f"|h| max before failure unavailable, check learning rate / inputs")
    if stack_norm is not None:
        h = ad.layer_norm(h, stack_norm.gain, stack_norm.bias)
    return ad.reshape(h, tokens.shape) if squeeze else h


LOGIT_CLAMP = 30.0


def pool_and_predict(h: Tensor, head: HeadParams):
    """Last-token readout: ``(logit, probability)``.

    The logit is clamped to +/-30 before the sigmoid; the raw (unclamped)
    logit is returned for loss computation.
    """
    n = h.shape[-2]
    last = ad.take(h, np.array([n - 1]), axis=h.ndim - 2)
    pooled = ad.reshape(last, h.shape[:-2] + (h.shape[-1],))
    logit = ad.add(ad.matmul(pooled, head.weight), head.bias)
    logit = ad.reshape(logit, h.shape[:-2])
    prob = ad.sigmoid(ad.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP))
    return logit, prob


def transition_magnitudes(p: SsmBlockParams, dt: np.ndarray) -> np.ndarray:
    """|exp(dt * a)| for given positive step sizes (stability diagnostic)."""
    a = -np.exp(p.a_log.data)
    return np.abs(np.exp(dt[..., None, None] * a))
