"""Ground-truth simulator: hidden chain, disorder time, observed arrivals.

A scenario draws the initial state and absorption time from the prior, then
lays down a Poisson stream at the pre-disorder rate before the disorder and
at the post-disorder rate after it, truncated at a finite horizon.  Batches
use counter-based per-scenario substreams keyed by (seed, index) so the same
seed reproduces the batch bit for bit and scenarios can be generated in any
order or in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .flow import ModelSpec
from .phase_type import BeliefPoint, sample_absorption

__all__ = ["Scenario", "scenario_rng", "sample_scenario", "sample_batch",
           "save_jsonl", "load_jsonl"]


@dataclass(frozen=True)
class Scenario:
    """One realization: hidden start, disorder time, observed arrival times.

    ``initial_state`` indexes transient states 0..n-1; n means the chain
    started absorbed (disorder at time 0).
    """

    initial_state: int
    theta: float
    arrivals: np.ndarray
    horizon: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.arrivals, dtype=float).reshape(-1)
        if arr.size and ((np.diff(arr) <= 0).any() or arr[0] <= 0):
            raise ValueError("arrival times must be strictly increasing and positive")
        if arr.size and arr[-1] > self.horizon:
            raise ValueError("arrivals exceed the horizon")
        arr.setflags(write=False)
        object.__setattr__(self, "arrivals", arr)


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for scenario ``index`` of batch ``seed``."""
    return np.random.Generator(np.random.Philox(key=(seed & (2**64 - 1), index)))


def _poisson_times(rng: np.random.Generator, rate: float, start: float, end: float) -> np.ndarray:
    length = end - start
    if length <= 0:
        return np.empty(0)
    count = rng.poisson(rate * length)
    return start + np.sort(rng.random(count)) * length


def sample_scenario(
    model: ModelSpec, pi: BeliefPoint, horizon: float, rng: np.random.Generator
) -> Scenario:
    """Draw (state, disorder time) from the prior, then the observed stream:
    rate lam0 on [0, theta), rate lam1 on [theta, horizon]."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    state, theta = sample_absorption(model.gen, pi, rng)
    cut = min(theta, horizon)
    before = _poisson_times(rng, model.lam0, 0.0, cut)
    after = _poisson_times(rng, model.lam1, cut, horizon) if theta < horizon else np.empty(0)
    arrivals = np.concatenate([before, after])
    return Scenario(initial_state=state, theta=theta, arrivals=arrivals, horizon=horizon)


def sample_batch(
    model: ModelSpec, pi: BeliefPoint, horizon: float, count: int, seed: int
) -> list[Scenario]:
    """Deterministic batch: same seed gives a bit-identical batch."""
    if count < 0:
        raise ValueError(f"count must be nonnegative, got {count}")
    return [
        sample_scenario(model, pi, horizon, scenario_rng(seed, index))
        for index in range(count)
    ]


def save_jsonl(scenarios, path) -> None:
    with open(path, "w") as fh:
        for sc in scenarios:
            fh.write(json.dumps({
                "initial_state": int(sc.initial_state),
                "theta": float(sc.theta),
                "arrivals": [float(t) for t in sc.arrivals],
                "horizon": float(sc.horizon),
            }) + "\n")


def load_jsonl(path) -> list[Scenario]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Scenario(
                initial_state=int(rec.get("initial_state", -1)),
                theta=float(rec["theta"]),
                arrivals=np.array(rec["arrivals"], dtype=float),
                horizon=float(rec["horizon"]),
            ))
    return out
