"""Model assembly for the return-aligned variant and the DT-style baseline.

Both variants embed raw windows with per-modality linear layers plus a
learned absolute-timestep embedding, run causal transformer blocks, and
predict the action from each processed state token. The aligned variant
keeps the return sequence separate and conditions on it through the
sequence and stepwise return aligners; the baseline interleaves
return/state/action tokens into a single stream.

Blocks are post-LN: normalization is applied to (residual + sublayer
output), and the stepwise aligner replaces that normalization when enabled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import layers as L
from .aligners import (EVAL, AttentionParams, Runtime, SeqRaParams,
                       StepRaParams, TimestepMap, adaptive_scale,
                       causal_self_attention, seqra_attention, seqra_mask,
                       stepra)
from .envs import ActionSpace
from .layers import Embedding, Linear, Mlp, dropout
from .tensor import (Tensor, add, concat_last, index_select, layer_norm,
                     log_softmax, mul, narrow, no_grad, reshape, sum_all, tanh)

RETURN_SCALE_KEY = "meta.return_scale"


@dataclass(frozen=True)
class RadtConfig:
    """Architecture plus ablation switches for one model instance."""
    variant: str = "radt"          # "radt" | "dt"
    n_layers: int = 2
    n_heads: int = 1
    d_model: int = 64
    context_len: int = 10
    dropout: float = 0.1
    max_timesteps: int = 64
    use_seqra: bool = True
    use_stepra: bool = True
    use_adaptive_scaling: bool = True
    state_dim: int = 3
    action_space: ActionSpace = field(default_factory=lambda: ActionSpace("continuous", 1, (-1.0,), (1.0,)))
    ln_eps: float = 1e-5
    scale_scores: bool = True
    loss_last_only: bool = False

    def __post_init__(self):
        if self.variant not in ("radt", "dt"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["action_space"] = self.action_space.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RadtConfig":
        d = dict(d)
        d["action_space"] = ActionSpace.from_dict(d["action_space"])
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()


class FeedForward:
    """Standard 4x expansion MLP with GELU."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.net = Mlp([d_model, 4 * d_model, d_model], rng=rng, activation="gelu")

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self, prefix: str):
        return self.net.named_parameters(f"{prefix}.net")


class RadtBlock:
    """Self-attention, return cross-attention, feed-forward; each sublayer
    closed by the stepwise aligner (or plain layer norm when ablated)."""

    def __init__(self, cfg: RadtConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.attn = AttentionParams(cfg.d_model, cfg.n_heads, rng)
        self.seqra = SeqRaParams(cfg.d_model, cfg.n_heads, rng) if cfg.use_seqra else None
        if cfg.use_stepra:
            self.norm1 = StepRaParams(cfg.d_model, rng, cfg.ln_eps)
            self.norm2 = StepRaParams(cfg.d_model, rng, cfg.ln_eps) if cfg.use_seqra else None
            self.norm3 = StepRaParams(cfg.d_model, rng, cfg.ln_eps)
        else:
            self.norm1 = self.norm2 = self.norm3 = None
        self.ff = FeedForward(cfg.d_model, rng)

    def _norm(self, which, x: Tensor, r: Tensor, tmap: TimestepMap) -> Tensor:
        if which is None:
            return layer_norm(x, self.cfg.ln_eps)
        return stepra(which, x, r, tmap)

    def __call__(self, sa: Tensor, r: Tensor, sa_real: np.ndarray,
                 r_allowed: np.ndarray, tmap: TimestepMap, runtime: Runtime) -> Tensor:
        h = causal_self_attention(self.attn, sa, sa_real, runtime, self.cfg.scale_scores)
        h = dropout(h, runtime.drop_rate, runtime.training, runtime.rng)
        x = self._norm(self.norm1, add(sa, h), r, tmap)
        if self.seqra is not None:
            z = seqra_attention(self.seqra.attention, x, r, r_allowed, runtime,
                                self.cfg.scale_scores)
            z = dropout(z, runtime.drop_rate, runtime.training, runtime.rng)
            if self.cfg.use_adaptive_scaling:
                merged = adaptive_scale(self.seqra.scale_proj, z, x)
            else:
                merged = add(z, x)
            x = self._norm(self.norm2, merged, r, tmap)
        f = dropout(self.ff(x), runtime.drop_rate, runtime.training, runtime.rng)
        return self._norm(self.norm3, add(x, f), r, tmap)

    def parameters(self):
        out = self.attn.parameters() + self.ff.parameters()
        if self.seqra is not None:
            out += self.seqra.parameters()
        for n in (self.norm1, self.norm2, self.norm3):
            if n is not None:
                out += n.parameters()
        return out

    def named_parameters(self, prefix: str):
        out = self.attn.named_parameters(f"{prefix}.attn")
        if self.seqra is not None:
            out.update(self.seqra.named_parameters(f"{prefix}.seqra"))
        for name, n in (("norm1", self.norm1), ("norm2", self.norm2), ("norm3", self.norm3)):
            if n is not None:
                out.update(n.named_parameters(f"{prefix}.{name}"))
        out.update(self.ff.named_parameters(f"{prefix}.ff"))
        return out


class DtBlock:
    """Post-LN causal transformer block over the interleaved stream."""

    def __init__(self, cfg: RadtConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.attn = AttentionParams(cfg.d_model, cfg.n_heads, rng)
        self.ff = FeedForward(cfg.d_model, rng)

    def __call__(self, x: Tensor, real: np.ndarray, runtime: Runtime) -> Tensor:
        h = causal_self_attention(self.attn, x, real, runtime, self.cfg.scale_scores)
        h = dropout(h, runtime.drop_rate, runtime.training, runtime.rng)
        x = layer_norm(add(x, h), self.cfg.ln_eps)
        f = dropout(self.ff(x), runtime.drop_rate, runtime.training, runtime.rng)
        return layer_norm(add(x, f), self.cfg.ln_eps)

    def parameters(self):
        return self.attn.parameters() + self.ff.parameters()

    def named_parameters(self, prefix: str):
        out = self.attn.named_parameters(f"{prefix}.attn")
        out.update(self.ff.named_parameters(f"{prefix}.ff"))
        return out


class PolicyModel:
    """Shared embedding, head, and bookkeeping for both variants."""

    def __init__(self, cfg: RadtConfig, seed: int, return_scale: float = 1.0):
        self.cfg = cfg
        self.return_scale = float(return_scale)
        rng = L.init_rng(seed)
        space = cfg.action_space
        self.embed_return = Linear(1, cfg.d_model, rng=rng)
        self.embed_state = Linear(cfg.state_dim, cfg.d_model, rng=rng)
        if space.kind == "continuous":
            self.embed_action = Linear(space.dim, cfg.d_model, rng=rng)
        else:
            self.embed_action = Embedding(space.dim, cfg.d_model, rng=rng)
        self.embed_timestep = Embedding(cfg.max_timesteps, cfg.d_model, rng=rng)
        self._build_blocks(rng)
        out_dim = space.dim
        self.head = Linear(cfg.d_model, out_dim, rng=rng)
        if space.kind == "continuous":
            self._act_center = (np.asarray(space.high) + np.asarray(space.low)) / 2.0
            self._act_half = (np.asarray(space.high) - np.asarray(space.low)) / 2.0

    # -- embedding ----------------------------------------------------

    def _embed_modalities(self, batch):
        """Per-modality tokens [B,K,D] with timestep embeddings added."""
        b, k = batch.timesteps.shape
        rtg = np.asarray(batch.rtg, dtype=np.float64) / self.return_scale
        r_tok = self.embed_return(Tensor(rtg.reshape(b, k, 1)))
        s_tok = self.embed_state(Tensor(batch.states))
        if self.cfg.action_space.kind == "continuous":
            a_tok = self.embed_action(Tensor(batch.actions))
        else:
            a_tok = self.embed_action(np.asarray(batch.actions, dtype=np.int64))
        tt = self.embed_timestep(np.asarray(batch.timesteps, dtype=np.int64))
        return add(r_tok, tt), add(s_tok, tt), add(a_tok, tt)

    # -- prediction head ------------------------------------------------

    def _predict(self, feats: Tensor) -> Tensor:
        """Map processed state tokens to actions (or logits)."""
        raw = self.head(feats)
        if self.cfg.action_space.kind == "continuous":
            return add(mul(tanh(raw), Tensor(self._act_half)), Tensor(self._act_center))
        return raw

    def act(self, batch) -> np.ndarray:
        """Greedy action at the final state token of each window."""
        with no_grad():
            preds = self.forward(batch, EVAL)
        last = preds.data[:, -1]
        if self.cfg.action_space.kind == "continuous":
            return last
        return np.argmax(last, axis=-1)

    # -- parameter bookkeeping --------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self) -> Dict[str, Tensor]:
        out = self.embed_return.named_parameters("embed_return")
        out.update(self.embed_state.named_parameters("embed_state"))
        out.update(self.embed_action.named_parameters("embed_action"))
        out.update(self.embed_timestep.named_parameters("embed_timestep"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"blocks.{i}"))
        out.update(self._final_named_parameters())
        out.update(self.head.named_parameters("head"))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters().items()}
        out[RETURN_SCALE_KEY] = np.array(self.return_scale)
        return out

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named) - {RETURN_SCALE_KEY}
        if missing or extra:
            raise L.CheckpointError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in named.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise L.CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
        if RETURN_SCALE_KEY in arrays:
            self.return_scale = float(arrays[RETURN_SCALE_KEY])

    def save(self, path) -> None:
        L.save_checkpoint(path, self.state_dict(), self.cfg.digest())

    def summary(self) -> dict:
        groups: Dict[str, List[str]] = {}
        for name in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return {"config": self.cfg.to_dict(),
                "parameter_count": self.parameter_count(),
                "return_scale": self.return_scale,
                "parameters": {k: sorted(v) for k, v in sorted(groups.items())}}

    def train_runtime(self, rng: np.random.Generator,
                      probe: Optional[Callable] = None) -> Runtime:
        return Runtime(training=True, drop_rate=self.cfg.dropout, rng=rng,
                       score_sink=probe)


def _interleave_drop_last(parts: List[Tensor], b: int, k: int, d: int) -> Tensor:
    """Row-major interleave of per-timestep tokens, dropping the last slot
    so the sequence ends at the final state token."""
    stacked = parts[0]
    for p in parts[1:]:
        stacked = concat_last(stacked, p)
    n = len(parts)
    seq = reshape(stacked, (b, n * k, d))
    return narrow(seq, 1, 0, n * k - 1)


class RadtModel(PolicyModel):
    """Variant with a separate return stream entering every block."""

    def _build_blocks(self, rng):
        self.blocks = [RadtBlock(self.cfg, rng) for _ in range(self.cfg.n_layers)]
        self.final_norm = (StepRaParams(self.cfg.d_model, rng, self.cfg.ln_eps)
                           if self.cfg.use_stepra else None)
        self.tmap = TimestepMap(self.cfg.context_len)

    def _final_named_parameters(self):
        if self.final_norm is None:
            return {}
        return self.final_norm.named_parameters("final_norm")

    def forward(self, batch, runtime: Runtime = EVAL,
                probe: Optional[Callable] = None) -> Tensor:
        """Action predictions at every state token position, [B,K,out]."""
        cfg = self.cfg
        b, k = batch.timesteps.shape
        if k != cfg.context_len:
            raise ValueError(f"window has {k} timesteps, model expects {cfg.context_len}")
        tmap = self.tmap
        r_tok, s_tok, a_tok = self._embed_modalities(batch)
        sa = _interleave_drop_last([s_tok, a_tok], b, k, cfg.d_model)
        step_real = np.asarray(batch.mask, dtype=bool)
        sa_real = step_real[:, tmap.gather_idx]
        r_allowed = seqra_mask(tmap, step_real)
        rt = runtime
        for i, blk in enumerate(self.blocks):
            if probe is not None:
                rt = Runtime(runtime.training, runtime.drop_rate, runtime.rng,
                             score_sink=(lambda tag, a, i=i: probe(i, tag, a)))
            sa = blk(sa, r_tok, sa_real, r_allowed, tmap, rt)
        if self.final_norm is not None:
            sa = stepra(self.final_norm, sa, r_tok, tmap)
        else:
            sa = layer_norm(sa, cfg.ln_eps)
        feats = index_select(sa, 1, tmap.state_positions)
        return self._predict(feats)


class DtModel(PolicyModel):
    """Baseline over the interleaved return/state/action stream."""

    def _build_blocks(self, rng):
        self.blocks = [DtBlock(self.cfg, rng) for _ in range(self.cfg.n_layers)]

    def _final_named_parameters(self):
        return {}

    @property
    def state_positions(self) -> np.ndarray:
        return np.arange(self.cfg.context_len) * 3 + 1

    def forward(self, batch, runtime: Runtime = EVAL,
                probe: Optional[Callable] = None) -> Tensor:
        cfg = self.cfg
        b, k = batch.timesteps.shape
        if k != cfg.context_len:
            raise ValueError(f"window has {k} timesteps, model expects {cfg.context_len}")
        r_tok, s_tok, a_tok = self._embed_modalities(batch)
        x = _interleave_drop_last([r_tok, s_tok, a_tok], b, k, cfg.d_model)
        step_real = np.asarray(batch.mask, dtype=bool)
        seq_real = np.repeat(step_real, 3, axis=1)[:, :3 * k - 1]
        rt = runtime
        for i, blk in enumerate(self.blocks):
            if probe is not None:
                rt = Runtime(runtime.training, runtime.drop_rate, runtime.rng,
                             score_sink=(lambda tag, a, i=i: probe(i, tag, a)))
            x = blk(x, seq_real, rt)
        x = layer_norm(x, cfg.ln_eps)
        feats = index_select(x, 1, self.state_positions)
        return self._predict(feats)


def build_model(cfg: RadtConfig, seed: int, return_scale: float = 1.0) -> PolicyModel:
    cls = RadtModel if cfg.variant == "radt" else DtModel
    return cls(cfg, seed, return_scale)


def load_model(path, cfg: RadtConfig) -> PolicyModel:
    """Rebuild a model from a checkpoint; the stored config digest must match."""
    digest, arrays = L.load_checkpoint(path)
    if digest != cfg.digest():
        raise L.CheckpointError("checkpoint config digest does not match the supplied config")
    model = build_model(cfg, seed=0)
    model.load_state_dict(arrays)
    return model


def action_loss(preds: Tensor, batch, action_space: ActionSpace,
                last_only: bool = False) -> Tensor:
    """Mean loss over unmasked state positions: MSE for continuous actions,
    cross-entropy for discrete."""
    mask = np.asarray(batch.mask, dtype=bool)
    if last_only:
        keep = np.zeros_like(mask)
        keep[:, -1] = True
        mask = mask & keep
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss: every position is masked")
    if action_space.kind == "continuous":
        targets = np.asarray(batch.actions, dtype=np.float64)
        diff = add(preds, Tensor(-targets))
        sq = mul(diff, diff)
        weights = np.repeat(mask[:, :, None], action_space.dim, axis=2).astype(np.float64)
        return mul(sum_all(mul(sq, Tensor(weights))), 1.0 / (n * action_space.dim))
    targets = np.asarray(batch.actions, dtype=np.int64)
    onehot = np.zeros(preds.shape)
    b_idx, k_idx = np.nonzero(mask)
    onehot[b_idx, k_idx, targets[mask]] = 1.0
    picked = sum_all(mul(log_softmax(preds), Tensor(onehot)))
    return mul(picked, -1.0 / n)
