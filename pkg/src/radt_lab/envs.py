"""Three deterministic-dynamics toy environments plus scripted behavior.

All episodes run exactly ``horizon`` steps. Dynamics are pure functions of
(state, action); the only randomness is the seeded start state, so a replay
of the recorded actions reproduces rewards bit-exactly.

Rewards land on a dyadic grid (multiples of 1/256 or integers) so that
return-to-go suffix sums are exact in 64-bit floats.

State layouts (all float64 rows):
  linewalk    [t/T, position/T, velocity]
  gridcollect [t/T, x/(W-1), y/(W-1), item flags (W*W)]
  delaychain  [t/T, presses/T]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

REWARD_QUANTUM = 1.0 / 256.0  # velocity grid; keeps reward sums exact


@dataclass(frozen=True)
class ActionSpace:
    """Continuous (dim, bounds) or discrete (n) action description."""
    kind: str                      # "continuous" | "discrete"
    dim: int                       # action dim or number of actions
    low: tuple = ()
    high: tuple = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ValueError(f"unknown action space kind {self.kind!r}")
        if self.kind == "continuous" and (len(self.low) != self.dim or len(self.high) != self.dim):
            raise ValueError("continuous action space needs per-dim bounds")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim,
                "low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSpace":
        return cls(kind=d["kind"], dim=int(d["dim"]),
                   low=tuple(d.get("low", ())), high=tuple(d.get("high", ())))


@dataclass(frozen=True)
class EnvSpec:
    id: str
    horizon: int
    state_dim: int
    action_space: ActionSpace
    reward_range: Tuple[float, float]
    grid: int = 0
    n_items: int = 0


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


class InvalidActionError(ValueError):
    pass


LINEWALK = EnvSpec("linewalk", horizon=40, state_dim=3,
                   action_space=ActionSpace("continuous", 1, (-1.0,), (1.0,)),
                   reward_range=(0.0, 1.0))
GRIDCOLLECT = EnvSpec("gridcollect", horizon=30, state_dim=3 + 36,
                      action_space=ActionSpace("discrete", 5),
                      reward_range=(0.0, 1.0), grid=6, n_items=12)
DELAYCHAIN = EnvSpec("delaychain", horizon=30, state_dim=2,
                     action_space=ActionSpace("discrete", 2),
                     reward_range=(0.0, 29.0))

REGISTRY: Dict[str, EnvSpec] = {s.id: s for s in (LINEWALK, GRIDCOLLECT, DELAYCHAIN)}


def make(env_id: str) -> EnvSpec:
    try:
        return REGISTRY[env_id]
    except KeyError:
        raise KeyError(f"unknown env {env_id!r}; known: {sorted(REGISTRY)}") from None


def _steps_taken(spec: EnvSpec, state: np.ndarray) -> int:
    return int(round(state[0] * spec.horizon))


def _quant(v: float) -> float:
    return round(v / REWARD_QUANTUM) * REWARD_QUANTUM


def reset(spec: EnvSpec, seed: int) -> np.ndarray:
    """Deterministic start state for (spec, seed)."""
    rng = np.random.default_rng(seed)
    if spec.id == "linewalk":
        jitter = 0.05 * rng.random()  # position only; velocity starts exactly 0
        return np.array([0.0, jitter / spec.horizon, 0.0])
    if spec.id == "gridcollect":
        cells = [(x, y) for x in range(spec.grid) for y in range(spec.grid) if (x, y) != (0, 0)]
        chosen = rng.choice(len(cells), size=spec.n_items, replace=False)
        items = np.zeros(spec.grid * spec.grid)
        for c in chosen:
            x, y = cells[int(c)]
            items[x * spec.grid + y] = 1.0
        return np.concatenate([[0.0, 0.0, 0.0], items])
    if spec.id == "delaychain":
        return np.array([0.0, 0.0])
    raise KeyError(spec.id)


def step(spec: EnvSpec, state: np.ndarray, action) -> StepResult:
    """Pure transition; raises ``InvalidActionError`` outside the action set."""
    t = _steps_taken(spec, state)
    if t >= spec.horizon:
        raise ValueError("episode already finished")
    now = t + 1  # this call plays timestep `now` in 1..T
    done = now == spec.horizon
    tnorm = now / spec.horizon

    if spec.id == "linewalk":
        a = float(np.asarray(action).reshape(-1)[0])
        if not np.isfinite(a) or abs(a) > 1.0 + 1e-9:
            raise InvalidActionError(f"linewalk action must be in [-1, 1], got {a}")
        vel = _quant(min(max(state[2] + 0.1 * a, 0.0), 1.0))
        pos = state[1] + vel / spec.horizon
        return StepResult(np.array([tnorm, pos, vel]), vel, done)

    if spec.id == "gridcollect":
        a = int(action)
        if a not in range(5):
            raise InvalidActionError(f"gridcollect action must be in 0..4, got {action}")
        w = spec.grid
        x = int(round(state[1] * (w - 1)))
        y = int(round(state[2] * (w - 1)))
        dx, dy = [(0, 0), (0, 1), (0, -1), (-1, 0), (1, 0)][a]  # stay/up/down/left/right
        x = min(max(x + dx, 0), w - 1)
        y = min(max(y + dy, 0), w - 1)
        items = state[3:].copy()
        reward = 0.0
        cell = x * w + y
        if items[cell] == 1.0:
            items[cell] = 0.0
            reward = 1.0
        nxt = np.concatenate([[tnorm, x / (w - 1), y / (w - 1)], items])
        return StepResult(nxt, reward, done)

    if spec.id == "delaychain":
        a = int(action)
        if a not in (0, 1):
            raise InvalidActionError(f"delaychain action must be 0 or 1, got {action}")
        count = int(round(state[1] * spec.horizon))
        if done:
            # final step pays out; the final action is not counted
            return StepResult(np.array([tnorm, count / spec.horizon]), float(count), True)
        count += a
        return StepResult(np.array([tnorm, count / spec.horizon]), 0.0, False)

    raise KeyError(spec.id)


def rollout_scripted(spec: EnvSpec, policy: Callable, seed: int):
    """Run one episode under ``policy(state, rng) -> action``.

    Returns (states[T], actions[T], rewards[T]); the policy rng is derived
    from the episode seed so replays are reproducible.
    """
    state = reset(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    states, actions, rewards = [], [], []
    for _ in range(spec.horizon):
        action = policy(state, rng)
        res = step(spec, state, action)
        states.append(state)
        actions.append(action)
        rewards.append(res.reward)
        state = res.next_state
    return states, actions, rewards


def return_bounds(spec: EnvSpec) -> Tuple[float, float]:
    """Analytic or simulated min/max episode return."""
    if spec.id == "linewalk":
        # velocity starts at exactly 0 for every seed, so the max-throttle
        # return is a constant; min is the zero-action return
        _, _, rewards = rollout_scripted(spec, lambda s, r: np.array([1.0]), seed=0)
        return 0.0, float(sum(rewards))
    if spec.id == "gridcollect":
        return 0.0, float(spec.n_items)
    if spec.id == "delaychain":
        _, _, rewards = rollout_scripted(spec, lambda s, r: 1, seed=0)
        return 0.0, float(sum(rewards))
    raise KeyError(spec.id)


# -- scripted behavior policies ------------------------------------------------

def behavior_policy(spec: EnvSpec, policy_mix: str, skill: float) -> Callable:
    """Scripted controller at a given skill level in [0, 1].

    ``mixed`` draws behavior quality from the skill knob; ``zero`` and
    ``max`` are the degenerate endpoints used in tests.
    """
    if policy_mix not in ("mixed", "zero", "max"):
        raise ValueError(f"unknown policy mix {policy_mix!r}")

    if spec.id == "linewalk":
        if policy_mix == "zero":
            return lambda state, rng: np.array([0.0])
        if policy_mix == "max":
            return lambda state, rng: np.array([1.0])
        target_speed = skill

        def controller(state, rng):
            correction = (target_speed - state[2]) / 0.1
            a = min(max(correction, -1.0), 1.0) + 0.1 * rng.standard_normal()
            return np.array([min(max(a, -1.0), 1.0)])

        return controller

    if spec.id == "gridcollect":
        if policy_mix == "zero":
            return lambda state, rng: 0
        greed = 1.0 if policy_mix == "max" else skill

        def seeker(state, rng):
            w = spec.grid
            if rng.random() >= greed:
                return int(rng.integers(0, 5))
            x = int(round(state[1] * (w - 1)))
            y = int(round(state[2] * (w - 1)))
            items = state[3:]
            best, best_dist = 0, None
            for cell in np.nonzero(items == 1.0)[0]:
                cx, cy = divmod(int(cell), w)
                dist = abs(cx - x) + abs(cy - y)
                if best_dist is None or dist < best_dist:
                    best, best_dist = (cx, cy), dist
            if best_dist is None:
                return 0
            cx, cy = best
            if cx > x:
                return 4
            if cx < x:
                return 3
            if cy > y:
                return 1
            if cy < y:
                return 2
            return 0

        return seeker

    if spec.id == "delaychain":
        if policy_mix == "zero":
            return lambda state, rng: 0
        if policy_mix == "max":
            return lambda state, rng: 1
        press_prob = skill
        return lambda state, rng: int(rng.random() < press_prob)

    raise KeyError(spec.id)
