"""Return-alignment evaluation: target grid, rollouts, error reports, probes.

The protocol: seven target returns spanning the dataset's bottom-5% to
top-5% return quantiles; rollouts feed the model the live return-to-go
(target minus rewards received, negative values included as-is); the
normalized absolute error places the smallest grid target at 0 and the
largest at 100, dividing errors by the quantile spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import envs
from .data import Batch, Dataset
from .envs import EnvSpec
from .model import PolicyModel

N_TARGETS = 7


class DegenerateSpreadError(ValueError):
    """Dataset returns have no q05-q95 spread to build a grid from."""


@dataclass(frozen=True)
class TargetGrid:
    """Seven equally spaced target returns, endpoints inclusive."""
    values: tuple

    def __post_init__(self):
        if len(self.values) != N_TARGETS:
            raise ValueError(f"target grid needs {N_TARGETS} entries")
        if not all(b > a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("target grid must be strictly increasing")

    @property
    def lo(self) -> float:
        return self.values[0]

    @property
    def hi(self) -> float:
        return self.values[-1]

    @property
    def spread(self) -> float:
        return self.hi - self.lo

    def normalize(self, x: float) -> float:
        return 100.0 * (x - self.lo) / self.spread

    def normalized(self) -> List[float]:
        return [self.normalize(v) for v in self.values]


def grid_from_bounds(lo: float, hi: float) -> TargetGrid:
    if not hi > lo:
        raise DegenerateSpreadError(f"grid bounds collapsed: [{lo}, {hi}]")
    step = (hi - lo) / (N_TARGETS - 1)
    return TargetGrid(tuple(lo + i * step for i in range(N_TARGETS)))


def build_target_grid(dataset: Dataset) -> TargetGrid:
    """Grid over the dataset's q05..q95 return quantiles (linear interpolation)."""
    if len(dataset.trajectories) < 20:
        raise ValueError("target grid needs at least 20 trajectories")
    returns = dataset.returns
    q05 = float(np.quantile(returns, 0.05))
    q95 = float(np.quantile(returns, 0.95))
    if q05 == q95:
        raise DegenerateSpreadError(f"q05 == q95 == {q05}")
    return grid_from_bounds(q05, q95)


@dataclass
class EpisodeRecord:
    """One evaluation episode with exact return-to-go bookkeeping:
    rtg_before_step[t] = target - sum(rewards[:t]), accumulated left to right."""
    target_return: float
    seed: int
    states: List[np.ndarray] = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    rtg_before_step: List[float] = field(default_factory=list)

    @property
    def actual_return(self) -> float:
        acc = 0.0
        for r in self.rewards:
            acc += r
        return acc

    @property
    def final_rtg(self) -> float:
        return self.target_return - self.actual_return


def _episode_seed(seed: int, target_index: int, episode: int) -> int:
    return int(np.random.SeedSequence((seed, target_index, episode)).generate_state(1)[0])


def _live_window(spec: EnvSpec, k: int, rtgs, states, actions):
    """Window row over the last k live timesteps (current step has no action yet)."""
    t = len(states)
    n = min(t, k)
    space = spec.action_space
    rtg = np.zeros(k)
    st = np.zeros((k, spec.state_dim))
    ts = np.zeros(k, dtype=np.int64)
    mask = np.zeros(k, dtype=bool)
    act = (np.zeros((k, space.dim)) if space.kind == "continuous"
           else np.zeros(k, dtype=np.int64))
    rtg[k - n:] = rtgs[t - n:]
    st[k - n:] = states[t - n:]
    ts[k - n:] = np.arange(t - n + 1, t + 1)
    mask[k - n:] = True
    past = actions[t - n:]  # one short: the action at the current step is pending
    for i, a in enumerate(past):
        act[k - n + i] = a
    return rtg, st, act, ts, mask


def rollout_many(model: PolicyModel, spec: EnvSpec, target_return: float,
                 seeds: Sequence[int]) -> List[EpisodeRecord]:
    """Run full-horizon episodes in lockstep, conditioning on the live rtg.

    Greedy action selection; the rtg may go negative and is fed unclamped.
    """
    k = model.cfg.context_len
    records = [EpisodeRecord(target_return=target_return, seed=s) for s in seeds]
    cur_states = [envs.reset(spec, s) for s in seeds]
    cum = [0.0 for _ in seeds]
    for _ in range(spec.horizon):
        rows = []
        for rec, state, c in zip(records, cur_states, cum):
            rec.rtg_before_step.append(target_return - c)
            rec.states.append(state)
            rows.append(_live_window(spec, k, rec.rtg_before_step, rec.states, rec.actions))
        batch = Batch(*(np.stack(col) for col in zip(*rows)))
        acts = model.act(batch)
        for i, (rec, state) in enumerate(zip(records, cur_states)):
            res = envs.step(spec, state, acts[i])
            rec.actions.append(acts[i])
            rec.rewards.append(res.reward)
            cum[i] = cum[i] + res.reward
            cur_states[i] = res.next_state
    return records


def rollout(model: PolicyModel, spec: EnvSpec, target_return: float,
            seed: int) -> EpisodeRecord:
    return rollout_many(model, spec, target_return, [seed])[0]


# -- alignment report ---------------------------------------------------------

def evaluate_alignment(model: PolicyModel, spec: EnvSpec, grid: TargetGrid,
                       n_episodes: int, seeds: Sequence[int],
                       seed_label=None) -> List[dict]:
    """Long-format rows {seed, target, episode, actual, abs_err_norm}.

    ``seeds`` drive the episode start states; ``seed_label`` overrides the
    seed column (used when one trained instance is evaluated per seed).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rows = []
    for seed in seeds:
        label = seed if seed_label is None else seed_label
        for ti, target in enumerate(grid.values):
            ep_seeds = [_episode_seed(seed, ti, e) for e in range(n_episodes)]
            for ep, rec in enumerate(rollout_many(model, spec, target, ep_seeds)):
                err = abs(target - rec.actual_return)
                rows.append({"seed": label, "target": target, "episode": ep,
                             "actual": rec.actual_return,
                             "abs_err_norm": 100.0 * err / grid.spread})
    return rows


@dataclass
class AlignmentReport:
    """Per-target mean and standard error of normalized absolute errors,
    aggregated per seed first; grand mean is the mean of per-target means."""
    grid: TargetGrid
    per_target: List[dict]
    per_seed: Dict[str, float]
    grand_mean: float

    def to_dict(self) -> dict:
        return {"targets": list(self.grid.values),
                "targets_norm": self.grid.normalized(),
                "spread": self.grid.spread,
                "per_target": self.per_target,
                "per_seed": self.per_seed,
                "grand_mean": self.grand_mean}


def summarize(rows: Sequence[dict], grid: TargetGrid) -> AlignmentReport:
    seeds = sorted({r["seed"] for r in rows})
    per_target = []
    for target in grid.values:
        seed_means = []
        for seed in seeds:
            errs = [r["abs_err_norm"] for r in rows
                    if r["seed"] == seed and r["target"] == target]
            if errs:
                seed_means.append(float(np.mean(errs)))
        mean = float(np.mean(seed_means))
        stderr = (float(np.std(seed_means, ddof=1) / np.sqrt(len(seed_means)))
                  if len(seed_means) > 1 else 0.0)
        per_target.append({"target": target, "target_norm": grid.normalize(target),
                           "mean": mean, "stderr": stderr, "n_seeds": len(seed_means)})
    per_seed = {}
    for seed in seeds:
        errs = [r["abs_err_norm"] for r in rows if r["seed"] == seed]
        per_seed[str(seed)] = float(np.mean(errs))
    grand = float(np.mean([t["mean"] for t in per_target]))
    return AlignmentReport(grid=grid, per_target=per_target,
                           per_seed=per_seed, grand_mean=grand)


# -- probes ------------------------------------------------------------------

def attention_probe(model: PolicyModel, spec: EnvSpec,
                    records: Sequence[EpisodeRecord]) -> dict:
    """First-layer attention mass from the final state-token query onto the
    return/state/action token groups, averaged over episode steps.

    The aligned variant reports its return cross-attention scores, whose
    keys are return tokens only: the non-return mass is structurally zero
    and the return share is exactly 1. The baseline reports self-attention
    over the interleaved stream.
    """
    want_kind = "seqra" if model.cfg.variant == "radt" else "self"
    if model.cfg.variant == "radt" and not model.cfg.use_seqra:
        raise ValueError("attention probe requested on a variant without the "
                         "return cross-attention layer")
    k = model.cfg.context_len
    masses = {"return": [], "state": [], "action": []}

    def classify_columns(n_keys: int) -> Dict[str, np.ndarray]:
        if want_kind == "seqra":
            return {"return": np.arange(n_keys), "state": np.array([], int),
                    "action": np.array([], int)}
        pos = np.arange(n_keys)
        return {"return": pos[pos % 3 == 0], "state": pos[pos % 3 == 1],
                "action": pos[pos % 3 == 2]}

    for rec in records:
        for t in range(1, len(rec.states) + 1):
            rows = [_live_window(spec, k, rec.rtg_before_step[:t],
                                 rec.states[:t], rec.actions[:t - 1])]
            batch = Batch(*(np.stack(col) for col in zip(*rows)))
            captured = []

            def probe(layer, kind, alpha):
                if layer == 0 and kind == want_kind:
                    captured.append(alpha)

            model.forward(batch, probe=probe)
            alpha = captured[0]              # [1, H, Lq, Lk]
            row = alpha[0].mean(axis=0)[-1]  # final state-token query
            groups = classify_columns(row.shape[0])
            total = row.sum()
            for name, cols in groups.items():
                masses[name].append(float(row[cols].sum() / total))
    return {name: float(np.mean(vals)) for name, vals in masses.items()}


def rtg_trace(records_by_target: Dict[float, Sequence[EpisodeRecord]]) -> List[dict]:
    """Per-step mean and standard error of the live rtg, one row per
    (target, step); step 1 equals the target exactly."""
    table = []
    for target in sorted(records_by_target):
        records = records_by_target[target]
        steps = len(records[0].rtg_before_step)
        for t in range(steps):
            vals = np.array([rec.rtg_before_step[t] for rec in records])
            stderr = (float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
                      if len(vals) > 1 else 0.0)
            table.append({"target": target, "step": t + 1,
                          "mean": float(vals.mean()), "stderr": stderr})
    return table


def max_return_eval(model: PolicyModel, spec: EnvSpec, grid: TargetGrid,
                    n_episodes: int, seeds: Sequence[int]) -> dict:
    """Mean return at the top grid target, normalized so the env's max
    return bound maps to 100 (and the min bound to 0)."""
    lo, hi = envs.return_bounds(spec)
    top = grid.hi
    returns = []
    for seed in seeds:
        ep_seeds = [_episode_seed(seed, N_TARGETS - 1, e) for e in range(n_episodes)]
        for rec in rollout_many(model, spec, top, ep_seeds):
            returns.append(rec.actual_return)
    mean = float(np.mean(returns))
    return {"target": top, "mean_return": mean,
            "normalized": 100.0 * (mean - lo) / (hi - lo)}
