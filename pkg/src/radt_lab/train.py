"""Supervised training: warmup schedule, global-norm clipping, AdamW loop."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, sample_batch
from .model import PolicyModel, action_loss
from .tensor import Tensor, backward, zero_grads


def single_thread_blas():
    """Pin BLAS pools to one thread; the models here only ever multiply
    small matrices, where pool fan-out costs more than it buys."""
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 64
    base_lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    seed: int = 0
    eval_every: int = 0            # 0: checkpoint only at the end
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    cosine_decay: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must be <= steps")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.95)))
        return cls(**d)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to base_lr, then constant (or cosine decay to 0)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine_decay:
        return cfg.base_lr
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step + 1 - cfg.warmup_steps) / span)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most ``max_norm``;
    returns the applied scale (1.0 when no clipping happened)."""
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            data = np.array(p.data)  # params update out of place; graphs hold the old buffer
            if self.weight_decay:
                data *= 1.0 - lr * self.weight_decay
            g = p.grad
            if g is None:
                g = np.zeros_like(data)
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            data -= (lr / bc1) * m / denom
            p.data = data


def train(model: PolicyModel, dataset: Dataset, cfg: TrainConfig,
          metrics_sink: Optional[Callable[[Dict], None]] = None,
          checkpoint_sink: Optional[Callable[[int, PolicyModel], None]] = None
          ) -> List[Dict]:
    """Run the training loop; returns the per-step metrics rows.

    Fully reproducible: the config seed drives batch sampling and dropout.
    A checkpoint is emitted at the end and every ``eval_every`` steps.
    Raises ``DivergenceError`` on a non-finite loss.
    """
    spec = dataset.spec()
    if model.cfg.action_space != spec.action_space:
        raise ValueError(f"model action space {model.cfg.action_space} does not match "
                         f"env {spec.id}")
    if model.cfg.state_dim != spec.state_dim:
        raise ValueError(f"model state_dim {model.cfg.state_dim} != env {spec.state_dim}")
    seqs = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(seqs[0])
    drop_rng = np.random.default_rng(seqs[1])
    runtime = model.train_runtime(drop_rng)
    params = model.parameters()
    opt = AdamW(params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rows: List[Dict] = []
    with single_thread_blas():
        _train_loop(model, dataset, cfg, runtime, batch_rng, params, opt, rows,
                    metrics_sink, checkpoint_sink)
    return rows


def _train_loop(model, dataset, cfg, runtime, batch_rng, params, opt, rows,
                metrics_sink, checkpoint_sink):
    last_norm = 0.0
    for step in range(cfg.steps):
        lr = lr_at(cfg, step)
        batch = sample_batch(dataset, model.cfg.context_len, cfg.batch_size, batch_rng)
        loss = action_loss(model.forward(batch, runtime), batch,
                           model.cfg.action_space, model.cfg.loss_last_only)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(f"non-finite loss at step {step} "
                                  f"(lr={lr:.3e}, last grad_norm={last_norm:.3e})")
        zero_grads(params)
        backward(loss)
        last_norm = global_grad_norm(params)
        clip_grad_norm(params, cfg.grad_clip)
        opt.step(lr)
        row = {"step": step, "lr": lr, "loss": loss_val, "grad_norm": last_norm}
        rows.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        if checkpoint_sink is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            checkpoint_sink(step + 1, model)
    if checkpoint_sink is not None:
        checkpoint_sink(cfg.steps, model)
