"""Attention mechanisms that condition the state-action stream on returns.

Three pieces: causal multi-head self-attention over the state-action
sequence; a sequence return aligner (cross-attention whose keys and values
are return tokens only, merged through an adaptive dimension-wise gate);
and a stepwise return aligner (layer normalization whose scale and shift
are predicted from the same-timestep return token).

Windows are left-padded. Mask builders keep padded queries attending a
single same-timestep slot so every softmax row stays well defined; padded
positions are masked out as keys everywhere, so they never leak into real
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .layers import Linear, Mlp, dropout
from .tensor import (Tensor, add, concat_last, index_select, layer_norm,
                     matmul, mul, reshape, softmax_masked, swap_axes,
                     transpose_last)

ScoreSink = Callable[[str, np.ndarray], None]


@dataclass
class Runtime:
    """Per-forward execution state; the default is deterministic eval."""
    training: bool = False
    drop_rate: float = 0.0
    rng: Optional[np.random.Generator] = None
    score_sink: Optional[ScoreSink] = None


EVAL = Runtime()


class AttentionParams:
    """Projections for one multi-head attention (query/key/value/output)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng=rng)
        # a key bias adds a per-row constant to the scores, which the
        # softmax cancels exactly; it would be a dead parameter
        self.wk = Linear(d_model, d_model, rng=rng, bias=False)
        self.wv = Linear(d_model, d_model, rng=rng)
        self.wo = Linear(d_model, d_model, rng=rng)

    def parameters(self) -> List[Tensor]:
        return [p for l in (self.wq, self.wk, self.wv, self.wo) for p in l.parameters()]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, l in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(l.named_parameters(f"{prefix}.{name}"))
        return out


class SeqRaParams:
    """Cross-attention onto return tokens plus the zero-initialized gate."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.attention = AttentionParams(d_model, n_heads, rng)
        self.scale_proj = Linear(2 * d_model, d_model, init="zero")

    def parameters(self) -> List[Tensor]:
        return self.attention.parameters() + self.scale_proj.parameters()

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = self.attention.named_parameters(f"{prefix}.attention")
        out.update(self.scale_proj.named_parameters(f"{prefix}.scale_proj"))
        return out


class StepRaParams:
    """Gamma and beta heads over return tokens; exact zeros at construction."""

    def __init__(self, d_model: int, rng: np.random.Generator, eps: float = 1e-5):
        self.eps = eps
        self.mlp_gamma = Mlp([d_model, d_model, d_model], rng=rng,
                             activation="silu", final_zero=True)
        self.mlp_beta = Mlp([d_model, d_model, d_model], rng=rng,
                            activation="silu", final_zero=True)

    def parameters(self) -> List[Tensor]:
        return self.mlp_gamma.parameters() + self.mlp_beta.parameters()

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = self.mlp_gamma.named_parameters(f"{prefix}.mlp_gamma")
        out.update(self.mlp_beta.named_parameters(f"{prefix}.mlp_beta"))
        return out


@dataclass(frozen=True)
class TimestepMap:
    """Window-local layout of the state-action sequence.

    Position i (1-based, i in 1..2K-1) holds the state token of timestep
    ceil(i/2) when odd and the action token when even; the window ends at
    the final state token.
    """

    k: int
    timesteps: np.ndarray = field(repr=False, default=None)
    is_state: np.ndarray = field(repr=False, default=None)
    gather_idx: np.ndarray = field(repr=False, default=None)
    state_positions: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        pos = np.arange(1, 2 * self.k)
        ts = (pos + 1) // 2
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "is_state", pos % 2 == 1)
        object.__setattr__(self, "gather_idx", ts - 1)
        object.__setattr__(self, "state_positions", np.nonzero(pos % 2 == 1)[0])

    @property
    def length(self) -> int:
        return 2 * self.k - 1


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return swap_axes(reshape(x, (b, l, n_heads, d // n_heads)), 1, 2)


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, hd = x.shape
    return reshape(swap_axes(x, 1, 2), (b, l, h * hd))


def self_attention_mask(real: np.ndarray) -> np.ndarray:
    """Causal-and-real mask [B,1,L,L]; padded queries attend themselves."""
    b, l = real.shape
    allowed = np.tril(np.ones((l, l), dtype=bool))[None, :, :] & real[:, None, :]
    empty = ~allowed.any(axis=-1)
    if empty.any():
        bi, qi = np.nonzero(empty)
        allowed[bi, qi, qi] = True
    return allowed[:, None, :, :]


def seqra_mask(tmap: TimestepMap, r_real: np.ndarray) -> np.ndarray:
    """Return-token mask [B,1,L_sa,K]: position i may see timesteps <= t(i).

    Real queries always have their own timestep's return token available;
    padded queries fall back to that same slot.
    """
    b, k = r_real.shape
    causal = np.arange(1, k + 1)[None, :] <= tmap.timesteps[:, None]  # [L_sa, K]
    allowed = causal[None, :, :] & r_real[:, None, :]
    empty = ~allowed.any(axis=-1)
    if empty.any():
        bi, qi = np.nonzero(empty)
        allowed[bi, qi, tmap.gather_idx[qi]] = True
    return allowed[:, None, :, :]


def _attend(params: AttentionParams, q_src: Tensor, kv_src: Tensor,
            allowed: np.ndarray, runtime: Runtime, scale_scores: bool,
            sink_tag: str) -> Tensor:
    q = split_heads(params.wq(q_src), params.n_heads)
    k = split_heads(params.wk(kv_src), params.n_heads)
    v = split_heads(params.wv(kv_src), params.n_heads)
    scores = matmul(q, transpose_last(k))
    if scale_scores:
        scores = mul(scores, 1.0 / math.sqrt(params.head_dim))
    alpha = softmax_masked(scores, allowed)
    if runtime.score_sink is not None:
        runtime.score_sink(sink_tag, alpha.data.copy())
    alpha = dropout(alpha, runtime.drop_rate, runtime.training, runtime.rng)
    ctx = merge_heads(matmul(alpha, v))
    return params.wo(ctx)


def causal_self_attention(params: AttentionParams, sa: Tensor, real: np.ndarray,
                          runtime: Runtime = EVAL, scale_scores: bool = True) -> Tensor:
    """Multi-head causal self-attention over the state-action sequence."""
    return _attend(params, sa, sa, self_attention_mask(real), runtime,
                   scale_scores, "self")


def seqra_attention(params: AttentionParams, sa: Tensor, r: Tensor,
                    allowed: np.ndarray, runtime: Runtime = EVAL,
                    scale_scores: bool = True) -> Tensor:
    """Cross-attention: queries from state-action tokens, keys and values
    from return tokens only, so all attention mass lands on returns."""
    return _attend(params, sa, r, allowed, runtime, scale_scores, "seqra")


def adaptive_scale(scale_proj: Linear, z: Tensor, sa: Tensor) -> Tensor:
    """Gated residual merge: ``(1 + lambda) * z + sa`` with
    ``lambda = scale_proj([z; sa])``. Zero init makes this ``z + sa``."""
    lam = scale_proj(concat_last(z, sa))
    return add(mul(add(lam, 1.0), z), sa)


def stepra(params: StepRaParams, sa: Tensor, r: Tensor, tmap: TimestepMap) -> Tensor:
    """Modulated layer norm: ``(1 + gamma_j) * LN(x_i) + beta_j`` where j is
    position i's timestep and gamma/beta come from that timestep's return
    token. State and action tokens of one timestep share gamma and beta."""
    normed = layer_norm(sa, params.eps)
    gamma = index_select(params.mlp_gamma(r), 1, tmap.gather_idx)
    beta = index_select(params.mlp_beta(r), 1, tmap.gather_idx)
    return add(mul(add(gamma, 1.0), normed), beta)
