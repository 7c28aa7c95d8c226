"""Fusing prior features into sensor features.

``conv_fuse`` serves grid-aligned (BEV) sensor maps, ``token_fuse`` serves
sparse query tokens that cannot be aligned with the prior grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor_nn import (
    AttentionWeights,
    Params,
    attention_backward,
    attention_forward,
    conv3x3_backward,
    conv3x3_forward,
)


@dataclass
class ConvFuseWeights:
    kernel: np.ndarray  # (3, 3, cs + cp, cs)
    bias: np.ndarray  # (cs,)
    pos_sensor: np.ndarray  # (h, w, cs)
    pos_prior: np.ndarray  # (h, w, cp)

    @classmethod
    def init(cls, h: int, w: int, cs: int, cp: int, rng: np.random.Generator, dtype=np.float64):
        fan_in = 9 * (cs + cp)
        bound = math.sqrt(6.0 / fan_in)
        return cls(
            rng.uniform(-bound, bound, (3, 3, cs + cp, cs)).astype(dtype),
            np.zeros(cs, dtype=dtype),
            rng.normal(0, 0.02, (h, w, cs)).astype(dtype),
            rng.normal(0, 0.02, (h, w, cp)).astype(dtype),
        )

    def named(self, prefix: str = "fuse") -> Params:
        return {
            f"{prefix}.kernel": self.kernel,
            f"{prefix}.bias": self.bias,
            f"{prefix}.pos_sensor": self.pos_sensor,
            f"{prefix}.pos_prior": self.pos_prior,
        }


def conv_fuse_forward(x_sensor: np.ndarray, x_prior: np.ndarray, fw: ConvFuseWeights):
    if x_sensor.shape[:2] != x_prior.shape[:2]:
        raise DimensionError(f"sensor {x_sensor.shape} and prior {x_prior.shape} extents differ")
    cs = x_sensor.shape[2]
    if fw.kernel.shape[2:] != (cs + x_prior.shape[2], cs):
        raise DimensionError(f"kernel {fw.kernel.shape} does not fit the inputs")
    stacked = np.concatenate([x_sensor + fw.pos_sensor, x_prior + fw.pos_prior], axis=2)
    pre, conv_cache = conv3x3_forward(stacked, fw.kernel, fw.bias)
    return np.maximum(pre, 0), (conv_cache, pre, cs)


def conv_fuse(x_sensor: np.ndarray, x_prior: np.ndarray, fw: ConvFuseWeights) -> np.ndarray:
    """ReLU(conv3x3(concat(sensor + pos, prior + pos))) with sensor-width output."""
    return conv_fuse_forward(x_sensor, x_prior, fw)[0]


def conv_fuse_backward(fw: ConvFuseWeights, cache, grad_out: np.ndarray, prefix: str = "fuse"):
    """Returns ``(grad_sensor, grad_prior, grads)``."""
    conv_cache, pre, cs = cache
    g_pre = grad_out * (pre > 0)
    g_stacked, g_k, g_b = conv3x3_backward(conv_cache, g_pre)
    g_sensor, g_prior = g_stacked[..., :cs], g_stacked[..., cs:]
    grads = {
        f"{prefix}.kernel": g_k,
        f"{prefix}.bias": g_b,
        f"{prefix}.pos_sensor": g_sensor.copy(),
        f"{prefix}.pos_prior": g_prior.copy(),
    }
    return g_sensor, g_prior, grads


@dataclass
class PriorPosEmbed:
    e_prior: np.ndarray  # (h, w, de) free parameters, one per prior cell
    w_query_pos: np.ndarray  # (dq, c) projection of decoder positional embeddings


@dataclass
class TokenFuseWeights:
    w_prior: np.ndarray  # (cp, c)
    w_epos: np.ndarray  # (de, c)
    attn: AttentionWeights

    @classmethod
    def init(cls, cp: int, de: int, c: int, rng: np.random.Generator, dtype=np.float64):
        return cls(
            rng.normal(0, 1 / math.sqrt(cp), (cp, c)).astype(dtype),
            rng.normal(0, 1 / math.sqrt(de), (de, c)).astype(dtype),
            AttentionWeights.init(c, rng, dtype=dtype),
        )

    def named(self, prefix: str = "token") -> Params:
        return {
            f"{prefix}.w_prior": self.w_prior,
            f"{prefix}.w_epos": self.w_epos,
            **self.attn.named(f"{prefix}.attn"),
        }


def token_fuse_forward(
    queries: np.ndarray,
    x_prior: np.ndarray,
    pos: PriorPosEmbed,
    query_pos: np.ndarray,
    tw: TokenFuseWeights,
):
    h, w, cp = x_prior.shape
    if pos.e_prior.shape[:2] != (h, w):
        raise DimensionError(f"prior embedding {pos.e_prior.shape} does not match prior grid {(h, w)}")
    if query_pos.shape[0] != queries.shape[0]:
        raise DimensionError("one positional embedding per query required")
    prior_tokens = x_prior.reshape(h * w, cp)
    epos = pos.e_prior.reshape(h * w, -1)
    tokens = prior_tokens @ tw.w_prior + epos @ tw.w_epos
    q_in = queries + query_pos @ pos.w_query_pos
    delta, attn_cache = attention_forward(q_in, tokens, tw.attn)
    return queries + delta, (prior_tokens, epos, query_pos, attn_cache, (h, w, cp))


def token_fuse(queries, x_prior, pos: PriorPosEmbed, query_pos, tw: TokenFuseWeights) -> np.ndarray:
    """Cross-attend sparse queries to flattened prior cells, added residually."""
    return token_fuse_forward(queries, x_prior, pos, query_pos, tw)[0]


def token_fuse_backward(pos: PriorPosEmbed, tw: TokenFuseWeights, cache, grad_out, prefix: str = "token"):
    """Returns ``(grad_queries, grad_prior, grads)``; ``grads`` also covers the embeddings."""
    prior_tokens, epos, query_pos, attn_cache, (h, w, cp) = cache
    g_qin, g_tokens, grads = attention_backward(tw.attn, attn_cache, grad_out, f"{prefix}.attn")
    g_queries = grad_out + g_qin
    grads[f"{prefix}.w_prior"] = prior_tokens.T @ g_tokens
    grads[f"{prefix}.w_epos"] = epos.T @ g_tokens
    grads[f"{prefix}.e_prior"] = (g_tokens @ tw.w_epos.T).reshape(pos.e_prior.shape)
    grads[f"{prefix}.w_query_pos"] = query_pos.T @ g_qin
    g_prior = (g_tokens @ tw.w_prior.T).reshape(h, w, cp)
    return g_queries, g_prior, grads
