"""Offline datasets: generation, return-to-go annotation, windowing, IO.

Datasets serialize as JSON Lines: a metadata record followed by one record
per trajectory ({states, actions, rewards, total_return}). Returns-to-go
are recomputed on load as exact suffix sums, so the bookkeeping identity
rtg[t] - rtg[t+1] == reward[t] holds bit-exactly (env rewards sit on a
dyadic grid).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from . import __version__, envs
from .envs import EnvSpec


class GenerationError(RuntimeError):
    """Behavior policies failed to produce the required return spread."""


class DatasetFormatError(ValueError):
    """Dataset file malformed; message carries the offending line number."""


def annotate_rtg(rewards) -> np.ndarray:
    """Suffix sums of rewards, built right to left."""
    rewards = np.asarray(rewards, dtype=np.float64)
    rtg = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + acc
        rtg[i] = acc
    return rtg


@dataclass
class Trajectory:
    """One complete episode with return-to-go annotation."""
    states: np.ndarray          # [T, state_dim]
    actions: np.ndarray         # [T, act_dim] float or [T] int
    rewards: np.ndarray         # [T]
    returns_to_go: np.ndarray = field(default=None)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.returns_to_go is None:
            self.returns_to_go = annotate_rtg(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.returns_to_go[0])

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class Dataset:
    env_id: str
    trajectories: List[Trajectory]
    return_scale: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise DatasetFormatError("dataset has no trajectories")

    @property
    def returns(self) -> np.ndarray:
        return np.array([t.total_return for t in self.trajectories])

    def spec(self) -> EnvSpec:
        return envs.make(self.env_id)


@dataclass
class Batch:
    """Left-padded K-timestep windows ending at a state token.

    ``actions`` double as model inputs (all but each window's final
    timestep) and as training targets (every unmasked timestep).
    """
    rtg: np.ndarray          # [B, K]
    states: np.ndarray       # [B, K, state_dim]
    actions: np.ndarray      # [B, K, act_dim] or [B, K] int
    timesteps: np.ndarray    # [B, K] absolute 1-based, 0 on padding
    mask: np.ndarray         # [B, K] bool, True on real timesteps


def generate_dataset(spec: Union[EnvSpec, str], policy_mix: str, n_traj: int,
                     seed: int, min_spread: float = 0.6) -> Dataset:
    """Roll scripted behavior policies into a dataset of complete episodes.

    ``mixed`` draws one skill level per trajectory, producing the wide
    return spread the alignment protocol needs; the achieved spread must
    cover ``min_spread`` of the env's return range (pass 0 to disable,
    e.g. for intentionally degenerate single-policy datasets).
    """
    if isinstance(spec, str):
        spec = envs.make(spec)
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    master = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):
        skill = float(master.uniform())
        ep_seed = int(master.integers(0, 2 ** 62))
        policy = envs.behavior_policy(spec, policy_mix, skill)
        states, actions, rewards = envs.rollout_scripted(spec, policy, ep_seed)
        if spec.action_space.kind == "continuous":
            acts = np.asarray(actions, dtype=np.float64).reshape(spec.horizon, spec.action_space.dim)
        else:
            acts = np.asarray(actions, dtype=np.int64)
        trajectories.append(Trajectory(np.asarray(states), acts, rewards))
    returns = np.array([t.total_return for t in trajectories])
    lo, hi = envs.return_bounds(spec)
    if min_spread > 0.0 and hi > lo:
        achieved = (returns.max() - returns.min()) / (hi - lo)
        if achieved < min_spread:
            raise GenerationError(
                f"return spread {achieved:.3f} below required {min_spread:.3f} "
                f"(returns in [{returns.min():.3f}, {returns.max():.3f}], "
                f"bounds [{lo:.3f}, {hi:.3f}])")
    scale = float(np.max(np.abs(returns)))
    return Dataset(env_id=spec.id, trajectories=trajectories,
                   return_scale=scale if scale > 0 else 1.0,
                   provenance={"env": spec.id, "policy_mix": policy_mix,
                               "n_traj": n_traj, "seed": seed,
                               "version": __version__})


def extract_window(traj: Trajectory, end_t: int, k: int,
                   action_space: envs.ActionSpace):
    """Window of the last ``k`` timesteps ending at ``end_t`` (1-based),
    left-padded with zeros. Returns (rtg, states, actions, timesteps, mask)."""
    if not 1 <= end_t <= traj.length:
        raise ValueError(f"end_t {end_t} outside 1..{traj.length}")
    n = min(end_t, k)
    start = end_t - n  # 0-based slice start
    state_dim = traj.states.shape[1]
    rtg = np.zeros(k)
    states = np.zeros((k, state_dim))
    timesteps = np.zeros(k, dtype=np.int64)
    mask = np.zeros(k, dtype=bool)
    if action_space.kind == "continuous":
        actions = np.zeros((k, action_space.dim))
    else:
        actions = np.zeros(k, dtype=np.int64)
    rtg[k - n:] = traj.returns_to_go[start:end_t]
    states[k - n:] = traj.states[start:end_t]
    actions[k - n:] = traj.actions[start:end_t]
    timesteps[k - n:] = np.arange(start + 1, end_t + 1)
    mask[k - n:] = True
    return rtg, states, actions, timesteps, mask


def sample_batch(dataset: Dataset, k: int, batch_size: int,
                 rng: np.random.Generator) -> Batch:
    """Uniform over (trajectory, end-timestep) pairs across the dataset."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    space = dataset.spec().action_space
    lengths = np.array([t.length for t in dataset.trajectories])
    cum = np.cumsum(lengths)
    total = int(cum[-1])
    rows = []
    for flat in rng.integers(0, total, size=batch_size):
        ti = int(np.searchsorted(cum, flat, side="right"))
        end_t = int(flat - (cum[ti - 1] if ti else 0)) + 1
        rows.append(extract_window(dataset.trajectories[ti], end_t, k, space))
    rtg, states, actions, timesteps, mask = (np.stack(cols) for cols in zip(*rows))
    return Batch(rtg, states, actions, timesteps, mask)


# -- persistence -------------------------------------------------------------

def _traj_record(traj: Trajectory, continuous: bool) -> dict:
    return {
        "states": [[float(v) for v in row] for row in traj.states],
        "actions": ([[float(v) for v in row] for row in traj.actions]
                    if continuous else [int(a) for a in traj.actions]),
        "rewards": [float(r) for r in traj.rewards],
        "total_return": traj.total_return,
    }


def save_dataset(path, dataset: Dataset) -> None:
    spec = dataset.spec()
    continuous = spec.action_space.kind == "continuous"
    meta = {"kind": "radt-lab-dataset", "format_version": 1,
            "env": dataset.env_id, "return_scale": dataset.return_scale,
            "provenance": dataset.provenance}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
        for traj in dataset.trajectories:
            fh.write(json.dumps(_traj_record(traj, continuous),
                                sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    """Parse a JSONL dataset; returns-to-go are recomputed from rewards."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError("line 1: empty dataset file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: {exc}") from None
    if meta.get("kind") != "radt-lab-dataset":
        raise DatasetFormatError("line 1: not a radt-lab dataset file")
    spec = envs.make(meta["env"])
    continuous = spec.action_space.kind == "continuous"
    trajectories = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise DatasetFormatError(f"line {lineno}: blank line")
        try:
            rec = json.loads(line)
            states = np.asarray(rec["states"], dtype=np.float64)
            rewards = np.asarray(rec["rewards"], dtype=np.float64)
            if continuous:
                actions = np.asarray(rec["actions"], dtype=np.float64)
            else:
                actions = np.asarray(rec["actions"], dtype=np.int64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
        if len(states) != len(rewards) or len(actions) != len(rewards):
            raise DatasetFormatError(f"line {lineno}: field lengths disagree")
        trajectories.append(Trajectory(states, actions, rewards))
    if not trajectories:
        raise DatasetFormatError("line 1: dataset has a header but no trajectories")
    return Dataset(env_id=meta["env"], trajectories=trajectories,
                   return_scale=float(meta["return_scale"]),
                   provenance=meta.get("provenance", {}))


def dataset_digest(dataset: Dataset) -> str:
    """Stable content hash used for provenance and reproducibility keys."""
    spec = dataset.spec()
    continuous = spec.action_space.kind == "continuous"
    h = hashlib.sha256()
    h.update(dataset.env_id.encode())
    h.update(repr(dataset.return_scale).encode())
    for traj in dataset.trajectories:
        h.update(json.dumps(_traj_record(traj, continuous), sort_keys=True,
                            separators=(",", ":")).encode())
    return h.hexdigest()


def dataset_stats(dataset: Dataset) -> dict:
    """Return quantiles and a histogram; feeds target-grid construction."""
    returns = dataset.returns
    lo, hi = envs.return_bounds(dataset.spec())
    edges = np.linspace(lo, hi, 11)
    counts, _ = np.histogram(returns, bins=edges)
    return {
        "env": dataset.env_id,
        "n_trajectories": len(dataset.trajectories),
        "return_scale": dataset.return_scale,
        "quantiles": {f"q{int(100 * q):02d}": float(np.quantile(returns, q))
                      for q in (0.05, 0.25, 0.5, 0.75, 0.95)},
        "min": float(returns.min()),
        "max": float(returns.max()),
        "mean": float(returns.mean()),
        "histogram": {"edges": [float(e) for e in edges],
                      "counts": [int(c) for c in counts]},
    }
