"""Closed-form posterior-belief dynamics.

Between arrivals the conditional law of the hidden chain follows a
deterministic curve; at an arrival it jumps.  With ``rho = lam1 - lam0`` and
``a(t) = pi_T expm(t R)`` the curve is

    transient_i(t) = a_i(t) / N(t)
    absorbed(t)    = G(t) / N(t)

where ``G(t) = pi_abs e^{-rho t} + int_0^t e^{-rho (t-s)} f(s) ds`` and the
normalizer ``N(t) = a(t).1 + G(t)`` is the discounted survival functional.
All three come out of one exponential of the augmented block matrix
``[[R, r], [0, -rho]]``.  The jump map at an arrival is

    transient_i -> lam0 transient_i / (lam0 (1-p) + lam1 p)
    absorbed    -> lam1 p           / (lam0 (1-p) + lam1 p)

with ``p`` the pre-jump absorbed mass.  The law of the first arrival is
``P{first arrival > t} = e^{-lam0 t} N(t)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .phase_type import (
    TAU_RATE,
    TAU_SIMPLEX,
    BeliefPoint,
    PhaseTypeGenerator,
    augmented_decay_matrix,
    validate_generator,
)

__all__ = [
    "ModelSpec",
    "Trajectory",
    "flow",
    "jump",
    "flow_array",
    "jump_array",
    "first_arrival_law",
    "build_trajectory",
    "trajectory",
    "trajectory_to_csv",
]


class ModelSpec:
    """Problem data: disorder prior, the two arrival rates, the delay cost.

    Derived matrices used by every numeric routine are cached on first use;
    instances are immutable in practice and safe to share across threads.
    """

    def __init__(self, gen: PhaseTypeGenerator, lam0: float, lam1: float, c: float) -> None:
        if lam0 <= 0 or lam1 <= 0:
            raise ValueError(f"arrival rates must be positive, got {lam0}, {lam1}")
        if c <= 0:
            raise ValueError(f"delay cost must be positive, got {c}")
        report = validate_generator(gen)
        if not report.ok:
            raise ValueError("invalid generator: " + "; ".join(report.violations))
        self.gen = gen
        self.lam0 = float(lam0)
        self.lam1 = float(lam1)
        self.c = float(c)

    @property
    def n(self) -> int:
        return self.gen.n

    @cached_property
    def rate_gap(self) -> float:
        """lam1 - lam0, clamped to exactly 0 below TAU_RATE."""
        gap = self.lam1 - self.lam0
        return 0.0 if abs(gap) < TAU_RATE else gap

    @cached_property
    def lam_max(self) -> float:
        return max(self.lam0, self.lam1)

    @cached_property
    def obs_matrix(self) -> np.ndarray:
        """Augmented block matrix [[R, r], [0, -(lam1-lam0)]]."""
        return augmented_decay_matrix(self.gen, self.rate_gap)

    @cached_property
    def decay_matrix(self) -> np.ndarray:
        """obs_matrix - lam0 I; its exponential carries e^{-lam0 t} factors."""
        return self.obs_matrix - self.lam0 * np.eye(self.n + 1)

    @cached_property
    def decay_inverse(self) -> np.ndarray:
        # Always invertible: eigenvalues are eig(R) - lam0 and -lam1.
        return np.linalg.inv(self.decay_matrix)

    @cached_property
    def absorb_max(self) -> float:
        """Largest direct absorption rate (bounds the prior density)."""
        return float(self.gen.r.max())

    @cached_property
    def absorb_min(self) -> float:
        """Smallest direct absorption rate (lower bound on the hazard)."""
        return float(self.gen.r.min())

    @cached_property
    def guaranteed_stop_level(self) -> float:
        """Absorbed-mass level above which stopping immediately is optimal:
        (max(lam0,lam1) + B) / (c + max(lam0,lam1) + B) with B = max absorption rate."""
        top = self.lam_max + self.absorb_max
        return top / (self.c + top)

    @cached_property
    def mean_absorption_by_state(self) -> np.ndarray:
        """Expected absorption time from each transient state, -R^{-1} 1."""
        return -np.linalg.solve(self.gen.R, np.ones(self.n))

    @cached_property
    def split_interval(self) -> float:
        """Flow evaluations are chunked to this length so that no exponential
        factor strays past e^{+-50} before renormalization."""
        scale = max(self.lam0, self.lam1, abs(self.rate_gap),
                    float(np.abs(np.diag(self.gen.R)).max()))
        return 50.0 / scale

    @cached_property
    def model_hash(self) -> str:
        payload = json.dumps(
            {
                "R": self.gen.R.tolist(),
                "r": self.gen.r.tolist(),
                "lam0": self.lam0,
                "lam1": self.lam1,
                "c": self.c,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "generator": {"R": self.gen.R.tolist(), "r": self.gen.r.tolist()},
            "lambda0": self.lam0,
            "lambda1": self.lam1,
            "cost": self.c,
        }

    def __repr__(self) -> str:
        return (f"ModelSpec(n={self.n}, lam0={self.lam0}, lam1={self.lam1}, "
                f"c={self.c})")


def propagator(model: ModelSpec, t: float) -> np.ndarray:
    """expm(t * obs_matrix); blocks give expm(tR), the convolution column
    and e^{-rho t}."""
    return expm(t * model.obs_matrix)


def flow_pieces(
    model: ModelSpec, beliefs: np.ndarray, E: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unnormalized flow components for a batch of beliefs under a shared
    propagator E = expm(t * obs_matrix).

    Returns (a, G, N): transient masses (m, n), discounted absorbed mass (m,)
    and the normalizer (m,).
    """
    n = model.n
    pt = beliefs[:, :n]
    a = pt @ E[:n, :n]
    G = pt @ E[:n, n] + beliefs[:, n] * E[n, n]
    N = a.sum(axis=1) + G
    return a, G, N


def _flow_step(model: ModelSpec, beliefs: np.ndarray, t: float) -> np.ndarray:
    a, G, N = flow_pieces(model, beliefs, propagator(model, t))
    if (N <= TAU_SIMPLEX).any():
        raise ValueError("belief degenerate: flow normalizer underflow")
    out = np.empty_like(beliefs)
    out[:, : model.n] = a / N[:, None]
    out[:, model.n] = G / N
    return out


def flow_array(model: ModelSpec, beliefs: np.ndarray, t: float) -> np.ndarray:
    """Deterministic belief flow for a batch of beliefs (rows), time t >= 0.

    Long horizons are split into chunks (exact by the semigroup property)
    so exponential factors stay in a well-conditioned range.
    """
    if t < 0:
        raise ValueError(f"time {t} negative")
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    if t == 0.0:
        return beliefs.copy()
    chunk = model.split_interval
    out = beliefs
    remaining = t
    while remaining > chunk:
        out = _flow_step(model, out, chunk)
        remaining -= chunk
    return _flow_step(model, out, remaining)


def flow(model: ModelSpec, pi: BeliefPoint, t: float) -> BeliefPoint:
    """Belief reached from pi after a quiet interval of length t."""
    return BeliefPoint(flow_array(model, pi.vec[None, :], t)[0])


def jump_array(model: ModelSpec, beliefs: np.ndarray) -> np.ndarray:
    """Jump map at an arrival for a batch of beliefs (rows)."""
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
    p = beliefs[:, -1]
    den = model.lam0 * (1.0 - p) + model.lam1 * p
    out = np.empty_like(beliefs)
    out[:, :-1] = model.lam0 * beliefs[:, :-1] / den[:, None]
    out[:, -1] = model.lam1 * p / den
    return out


def jump(model: ModelSpec, pi: BeliefPoint) -> BeliefPoint:
    """Belief immediately after an arrival observed at belief pi."""
    return BeliefPoint(jump_array(model, pi.vec[None, :])[0])


def first_arrival_law(model: ModelSpec, pi: BeliefPoint, t: float) -> tuple[float, float]:
    """(survival, density) of the first observed arrival started from pi.

    survival = e^{-lam0 t} N(t); the density weighs the pre- and
    post-disorder rates by the corresponding (discounted) masses:
    e^{-lam0 t} [lam0 (1-F(t)) + lam1 G(t)].
    """
    if t < 0:
        raise ValueError(f"time {t} negative")
    a, G, N = flow_pieces(model, pi.vec[None, :], propagator(model, t))
    decay = math.exp(-model.lam0 * t)
    survival = decay * float(N[0])
    density = decay * (model.lam0 * float(a[0].sum()) + model.lam1 * float(G[0]))
    return survival, density


@dataclass(frozen=True)
class Trajectory:
    """Posterior path driven by a fixed arrival sequence.

    ``segment_starts[k]`` is the (right-continuous) belief at the start of the
    k-th quiet interval; segment 0 starts at time 0, segment k >= 1 at
    ``arrivals[k-1]`` just after the jump.
    """

    model: ModelSpec
    arrivals: np.ndarray
    segment_starts: tuple[BeliefPoint, ...]

    def segment_of(self, t: float, pre_jump: bool = False) -> int:
        arr = self.arrivals
        if pre_jump:
            return int(np.searchsorted(arr, t, side="left"))
        return int(np.searchsorted(arr, t, side="right"))

    def evaluate(self, queries, pre_jump: bool = False) -> list[BeliefPoint]:
        """Beliefs at the query times.

        Queries exactly at an arrival return the post-jump value (paths are
        right-continuous); ``pre_jump=True`` requests the left limit instead.
        """
        out = []
        for t in np.asarray(queries, dtype=float).reshape(-1):
            if t < 0:
                raise ValueError(f"query time {t} negative")
            k = self.segment_of(t, pre_jump=pre_jump)
            start = 0.0 if k == 0 else float(self.arrivals[k - 1])
            out.append(flow(self.model, self.segment_starts[k], t - start))
        return out


def build_trajectory(model: ModelSpec, pi: BeliefPoint, arrivals) -> Trajectory:
    """Alternate flow and jump along the arrival sequence."""
    arrivals = np.asarray(arrivals, dtype=float).reshape(-1)
    if arrivals.size and (np.diff(arrivals) <= 0).any():
        raise ValueError("arrival times must be strictly increasing")
    if arrivals.size and arrivals[0] < 0:
        raise ValueError("arrival times must be nonnegative")
    starts = [pi]
    prev_time = 0.0
    for s in arrivals:
        pre = flow(model, starts[-1], s - prev_time)
        starts.append(jump(model, pre))
        prev_time = s
    return Trajectory(model=model, arrivals=arrivals, segment_starts=tuple(starts))


def trajectory(
    model: ModelSpec, pi: BeliefPoint, arrivals, queries, pre_jump: bool = False
) -> list[BeliefPoint]:
    """Posterior beliefs at the query times given the arrival sequence."""
    queries = np.asarray(queries, dtype=float).reshape(-1)
    if queries.size > 1 and (np.diff(queries) < 0).any():
        raise ValueError("query times must be sorted")
    return build_trajectory(model, pi, arrivals).evaluate(queries, pre_jump=pre_jump)


def trajectory_to_csv(traj: Trajectory, queries, path) -> None:
    """Write columns t, transient beliefs, absorbed belief, is_arrival."""
    queries = np.asarray(queries, dtype=float).reshape(-1)
    points = traj.evaluate(queries)
    arrivals = set(np.round(traj.arrivals, 12).tolist())
    n = traj.model.n
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *[f"pi{i + 1}" for i in range(n)], "pi", "is_arrival"])
        for t, point in zip(queries, points):
            is_arr = int(round(float(t), 12) in arrivals)
            writer.writerow([f"{t:.12g}", *[f"{v:.12g}" for v in point.vec], is_arr])
