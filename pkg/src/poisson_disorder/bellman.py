"""Value iteration for the optimal-alarm problem on the belief simplex.

The minimal Bayes risk is the limit of iterates ``v_{m+1} = T v_m`` started
at the terminal cost ``h``, where ``(T w)(pi)`` minimizes over the waiting
time ``t`` the expected cost of: waiting until ``t`` or the first arrival,
paying the running cost ``k`` along the deterministic belief flow, stopping
with cost ``h`` if no arrival came, and continuing with value ``w`` at the
post-arrival belief otherwise.  Writing ``x(s)`` for the flow, ``D(s)`` for
the first-arrival density and ``S(s)`` for its survival, the waiting cost is

    cost(t) = int_0^t S-weighted running cost
            + int_0^t D(s) w(jump(x(s))) ds
            + h(x(t)) S(t).

The first and third pieces are linear in the starting belief and reduce to
matrix exponentials of the decayed block matrix (no quadrature); only the
middle, concave piece needs numeric integration.  Iterates decrease, stay in
[0, h], remain concave, and approach the true value function with the
certified rate sqrt((1/c + E[prior]) max(lam0, lam1) / (m-1)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .flow import ModelSpec, flow_array
from .grid import SimplexGrid
from .phase_type import TAU_SIMPLEX, BeliefPoint, PhaseTypeGenerator, mean_absorption

__all__ = [
    "TAU_QUAD",
    "TAU_CONC",
    "DELTA_FLOOR",
    "SolverError",
    "costs",
    "waiting_cost",
    "waiting_cost_profile",
    "minimize_waiting_cost",
    "hitting_time_bound",
    "truncation_time",
    "quadrature_horizon",
    "bounded_iteration_count",
    "truncated_iteration_count",
    "convergence_bound",
    "IterationPlan",
    "iteration_plan",
    "ValueTable",
    "value_iterate",
    "StoppingRegion",
    "stopping_region",
    "near_optimal_wait",
    "table_to_json",
    "table_from_json",
]

TAU_QUAD = 1e-8     # absolute quadrature tolerance per waiting-cost evaluation
TAU_CONC = 1e-4     # midpoint-concavity slack for table diagnostics
DELTA_FLOOR = 1e-9  # tail mass used to cap open-ended time horizons
PROBE_HEAD = 64     # geometric probe points near t = 0 in the sweep grid
PROBE_TAIL = 576    # uniform probe points across the rest of the horizon


class SolverError(RuntimeError):
    """Numerical failure inside the solver (non-finite node values)."""


# ---------------------------------------------------------------------------
# costs and closed-form pieces


def costs(model: ModelSpec, pi: BeliefPoint) -> tuple[float, float]:
    """(running cost rate, terminal cost) at a belief: (c * absorbed, 1 - absorbed)."""
    return model.c * pi.absorbed, 1.0 - pi.absorbed


def truncation_time(model: ModelSpec, delta: float) -> float:
    """Horizon beyond which the waiting cost moves by at most delta:
    -(1/lam0) log(delta / (4 + 2c/lam0))."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    scale = 4.0 + 2.0 * model.c / model.lam0
    return max(0.0, -math.log(delta / scale) / model.lam0)


def quadrature_horizon(model: ModelSpec) -> float:
    """Default cap for conceptually unbounded waiting-time searches."""
    return truncation_time(model, DELTA_FLOOR)


def _as_value_fn(w):
    """Normalize a value-function argument: ValueTable or vectorized callable."""
    if isinstance(w, ValueTable):
        return w.grid.interpolator(w.values)
    if callable(w):
        return w
    raise TypeError(f"cannot interpret {type(w).__name__} as a value function")


def _probe_grid(t_limit: float, lam_scale: float,
                n_head: int = PROBE_HEAD, n_tail: int = PROBE_TAIL) -> np.ndarray:
    """Probe times on [0, t_limit]: geometric head resolving the region near
    zero, uniform tail across the horizon."""
    if t_limit <= 0:
        return np.array([0.0])
    head_end = min(0.5 / lam_scale, t_limit / 8.0)
    head = np.geomspace(t_limit * 1e-7, head_end, n_head)
    tail = np.linspace(head_end, t_limit, n_tail + 1)[1:]
    return np.concatenate([[0.0], head, tail])


class _OperatorGrid:
    """Shared time grid for evaluating the waiting cost of many beliefs.

    Precomputes, per quadrature time, the transient propagator blocks, the
    first-arrival density of every belief, and (when an interpolation grid is
    supplied) the barycentric cell of every post-jump belief, so that one
    value-iteration sweep is a handful of gathers and matrix products.
    """

    def __init__(
        self,
        model: ModelSpec,
        beliefs: np.ndarray,
        t_limit: float | None = None,
        locate_grid: SimplexGrid | None = None,
        n_head: int = PROBE_HEAD,
        n_tail: int = PROBE_TAIL,
        probe: np.ndarray | None = None,
    ) -> None:
        self.model = model
        self.beliefs = np.atleast_2d(np.asarray(beliefs, dtype=float))
        if probe is None:
            probe = _probe_grid(t_limit, model.lam_max, n_head, n_tail)
        self.probe = np.asarray(probe, dtype=float)
        np_probe = self.probe.size
        # Quadrature grid = probe points plus panel midpoints (one Simpson
        # panel per probe interval).
        mids = 0.5 * (self.probe[:-1] + self.probe[1:])
        quad = np.empty(2 * np_probe - 1)
        quad[0::2] = self.probe
        quad[1::2] = mids
        self.quad = quad
        self._locate_grid = locate_grid
        self._precompute()

    def _precompute(self) -> None:
        model, beliefs = self.model, self.beliefs
        n = model.n
        S = beliefs.shape[0]
        nq = self.quad.size
        np_probe = self.probe.size
        pt = beliefs[:, :n]
        p_abs = beliefs[:, n]
        lam0, lam1, c = model.lam0, model.lam1, model.c
        eye = np.eye(n + 1)

        self.dens = np.empty((nq, S))
        self.flow_abs = np.empty((np_probe, S))  # absorbed flow coordinate at probes
        self.term_static = np.empty((np_probe, S))
        if self._locate_grid is not None:
            self.jump_rows = np.empty((nq, S, n + 1), dtype=np.int32)
            self.jump_wts = np.empty((nq, S, n + 1))
            self.jump_points = None
        else:
            self.jump_rows = self.jump_wts = None
            self.jump_points = np.empty((nq, S, n + 1))

        for k, t in enumerate(self.quad):
            E = expm(t * model.obs_matrix)
            a = pt @ E[:n, :n]
            G = pt @ E[:n, n] + p_abs * E[n, n]
            unnorm = lam0 * a.sum(axis=1) + lam1 * G
            decay = math.exp(-lam0 * t)
            self.dens[k] = decay * unnorm
            # Post-jump beliefs, normalized by the jump denominator directly.
            xj = np.empty((S, n + 1))
            xj[:, :n] = lam0 * a / unnorm[:, None]
            xj[:, n] = lam1 * G / unnorm
            if self._locate_grid is not None:
                rows, wts = self._locate_grid.locate(xj)
                self.jump_rows[k] = rows
                self.jump_wts[k] = wts
            else:
                self.jump_points[k] = xj
            if k % 2 == 0:  # probe point
                j = k // 2
                N = a.sum(axis=1) + G
                self.flow_abs[j] = G / np.maximum(N, TAU_SIMPLEX)
                E1 = decay * E
                I1 = model.decay_inverse @ (E1 - eye)
                run_vec = c * I1[:n, n]                  # transient running-cost column
                stop_vec = E1[:n, :n] @ np.ones(n)       # stop-term column
                if t == 0.0:
                    run_abs = 0.0
                else:
                    run_abs = c / lam1 * (1.0 - math.exp(-lam1 * t))
                self.term_static[j] = pt @ (run_vec + stop_vec) + p_abs * run_abs

        # Simpson panel weights: h/6 (f0 + 4 fm + f1) per probe interval.
        self._panel_h = np.diff(self.probe)

    def cost_matrix(self, w) -> np.ndarray:
        """Waiting cost of every belief at every probe time, (n_probe, S)."""
        if self._locate_grid is not None and isinstance(w, np.ndarray):
            vals = w
            W = (vals[self.jump_rows] * self.jump_wts).sum(axis=2)
        else:
            fn = _as_value_fn(w)
            nq, S, _ = self.jump_points.shape
            W = fn(self.jump_points.reshape(nq * S, -1)).reshape(nq, S)
        if W.min() < -1e-9 or W.max() > 1.0 + 1e-9:
            raise ValueError(
                f"value function leaves [0, 1] at a probed point "
                f"(range [{W.min():.3g}, {W.max():.3g}])"
            )
        f = self.dens * W
        panels = (self._panel_h[:, None] / 6.0) * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2])
        out = np.empty_like(self.term_static)
        out[0] = 0.0
        np.cumsum(panels, axis=0, out=out[1:])
        out += self.term_static
        return out

    def minimize(self, w, t_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(min waiting cost, argmin time) per belief, restricted per belief
        to probe times where t_mask is True (time 0 is always allowed)."""
        J = self.cost_matrix(w)
        if t_mask is not None:
            J = np.where(t_mask, J, np.inf)
        best = np.argmin(J, axis=0)  # first minimizer: ties toward smaller t
        S = J.shape[1]
        cols = np.arange(S)
        values = J[best, cols]
        times = self.probe[best]
        # Parabolic refinement through the bracketing probe triple.
        inner = (best > 0) & (best < self.probe.size - 1)
        if t_mask is not None:
            up = np.minimum(best + 1, self.probe.size - 1)
            inner &= t_mask[up, cols] & t_mask[np.maximum(best - 1, 0), cols]
        idx = np.nonzero(inner)[0]
        if idx.size:
            j = best[idx]
            t1, t2, t3 = self.probe[j - 1], self.probe[j], self.probe[j + 1]
            y1, y2, y3 = J[j - 1, idx], J[j, idx], J[j + 1, idx]
            d21 = (y2 - y1) / (t2 - t1)
            d32 = (y3 - y2) / (t3 - t2)
            curv = (d32 - d21) / (t3 - t1)
            ok = curv > 0
            tv = 0.5 * (t1 + t2) - np.where(ok, d21 / (2.0 * np.where(ok, curv, 1.0)), 0.0)
            tv = np.clip(tv, t1, t3)
            qv = y1 + d21 * (tv - t1) + curv * (tv - t1) * (tv - t2)
            qv = np.clip(qv, 0.0, None)
            better = ok & (qv < values[idx])
            values[idx] = np.where(better, qv, values[idx])
            times[idx] = np.where(better, tv, times[idx])
        return values, times


def waiting_cost_profile(model: ModelSpec, w, pi: BeliefPoint, times) -> np.ndarray:
    """Waiting cost of one belief on an ascending time grid (starting at 0)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    og = _OperatorGrid(model, pi.vec[None, :], probe=times)
    return og.cost_matrix(w)[:, 0]


def _adaptive_simpson(f, a: float, b: float, tol: float, max_depth: int = 48) -> float:
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2.0, depth + 1))

    if b <= a:
        return 0.0
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


def waiting_cost(model: ModelSpec, w, t: float, pi: BeliefPoint,
                 tau_quad: float = TAU_QUAD) -> float:
    """Expected cost of waiting until ``t`` or the first arrival: running
    cost along the flow, terminal cost if quiet, ``w`` after a jump.

    The running and stop terms are evaluated in closed form; the jump term by
    adaptive Simpson quadrature with absolute tolerance ``tau_quad``.
    ``t = inf`` means the capped horizon ``quadrature_horizon(model)``.
    """
    if t < 0:
        raise ValueError(f"time {t} negative")
    h0 = 1.0 - pi.absorbed
    if t == 0.0:
        return h0
    if math.isinf(t):
        t = quadrature_horizon(model)
    fn = _as_value_fn(w)
    n = model.n
    lam0, lam1, c = model.lam0, model.lam1, model.c
    pt, p_abs = pi.transient, pi.absorbed
    E1 = math.exp(-lam0 * t) * expm(t * model.obs_matrix)
    I1 = model.decay_inverse @ (E1 - np.eye(n + 1))
    static = float(
        pt @ (c * I1[:n, n] + E1[:n, :n] @ np.ones(n))
        + p_abs * (c / lam1) * (1.0 - math.exp(-lam1 * t))
    )

    def integrand(s: float) -> float:
        E = expm(s * model.obs_matrix)
        a = pt @ E[:n, :n]
        G = float(pt @ E[:n, n] + p_abs * E[n, n])
        unnorm = lam0 * float(a.sum()) + lam1 * G
        xj = np.empty(n + 1)
        xj[:n] = lam0 * a / unnorm
        xj[n] = lam1 * G / unnorm
        wv = float(fn(xj[None, :])[0])
        if wv < -1e-9 or wv > 1.0 + 1e-9:
            raise ValueError(f"value function leaves [0, 1] at a probed point ({wv:.6g})")
        return math.exp(-lam0 * s) * unnorm * wv

    return static + _adaptive_simpson(integrand, 0.0, t, tau_quad)


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def minimize_waiting_cost(
    model: ModelSpec,
    w,
    pi: BeliefPoint,
    horizon: float = math.inf,
    n_probe: int = 64,
    tau_t_rel: float = 1e-6,
) -> tuple[float, float]:
    """Minimize the waiting cost over t in [0, horizon].

    A coarse probe grid (geometric near 0, uniform beyond) guards the global
    search; golden-section refinement around the best bracket resolves the
    minimizer to ``tau_t_rel * horizon``.  Ties break toward smaller t.
    Returns (value, minimizer).
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    t_limit = min(horizon, quadrature_horizon(model))
    head = max(8, n_probe // 4)
    probes = _probe_grid(t_limit, model.lam_max, n_head=head, n_tail=n_probe - head)
    fn = _as_value_fn(w)
    J = waiting_cost_profile(model, fn, pi, probes)  # guide for the global search
    best = int(np.argmin(J))
    best_t = float(probes[best])
    # Re-evaluate the winner adaptively so the returned value has quadrature
    # accuracy regardless of the probe panel width.
    best_val = waiting_cost(model, fn, best_t, pi) if best > 0 else 1.0 - pi.absorbed
    if 0 < best < probes.size - 1:
        a, b = probes[best - 1], probes[best + 1]
        tol = max(tau_t_rel * t_limit, 1e-14)
        c1 = b - _INV_PHI * (b - a)
        c2 = a + _INV_PHI * (b - a)
        f1 = waiting_cost(model, fn, c1, pi)
        f2 = waiting_cost(model, fn, c2, pi)
        while b - a > tol:
            if f1 <= f2:
                b, c2, f2 = c2, c1, f1
                c1 = b - _INV_PHI * (b - a)
                f1 = waiting_cost(model, fn, c1, pi)
            else:
                a, c1, f1 = c1, c2, f2
                c2 = a + _INV_PHI * (b - a)
                f2 = waiting_cost(model, fn, c2, pi)
        t_ref = 0.5 * (a + b)
        v_ref = waiting_cost(model, fn, t_ref, pi)
        if v_ref < best_val:
            best_val, best_t = v_ref, t_ref
    # Stopping immediately costs exactly h; prefer t = 0 on a near-tie so the
    # guaranteed stopping set reports (h, 0) without quadrature noise.
    h0 = 1.0 - pi.absorbed
    if h0 <= best_val + 1e-9:
        return h0, 0.0
    return best_val, best_t


# ---------------------------------------------------------------------------
# horizon, iteration counts, certified bounds


def hitting_time_bound(model: ModelSpec) -> float:
    """Uniform bound on the time the quiet flow needs to reach the guaranteed
    stopping level, from the comparison equation
    x' = (B_min - (lam1-lam0) x)(1 - x), x(0) = 0.

    Finite only when B_min > 0 and B_min - lam1 + lam0 >= 0; returns inf
    otherwise (the caller then falls back to the truncated scheme).
    """
    b_min = model.absorb_min
    if b_min <= 0.0:
        return math.inf
    gap = b_min - model.lam1 + model.lam0
    x_hat = model.guaranteed_stop_level
    if abs(gap) < 1e-13:
        return x_hat / ((1.0 - x_hat) * b_min)
    if gap < 0.0:
        return math.inf
    rho = model.lam1 - model.lam0
    return math.log((b_min - rho * x_hat) / (b_min * (1.0 - x_hat))) / gap


def bounded_iteration_count(model: ModelSpec, pi: BeliefPoint, eps: float) -> float:
    """Iterations certifying sup error <= eps in the bounded-horizon scheme:
    1 + max(lam0, lam1) (1/c + E[prior]) / eps^2."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mean_theta = mean_absorption(model.gen, pi)
    return 1.0 + model.lam_max * (1.0 / model.c + mean_theta) / eps**2


def truncated_iteration_count(model: ModelSpec, pi: BeliefPoint, eps: float) -> tuple[float, float]:
    """(iteration count, truncation delta) for the truncated scheme:
    M = 1 + [1 + sqrt((1/c + E[prior]) max(lam0,lam1))] / eps^2 and
    delta = 1 / (M sqrt(M - 1))."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mean_theta = mean_absorption(model.gen, pi)
    root = math.sqrt((1.0 / model.c + mean_theta) * model.lam_max)
    m = 1.0 + (1.0 + root) / eps**2
    delta = 1.0 / (m * math.sqrt(m - 1.0)) if m > 1.0 else 1.0
    return m, delta


def convergence_bound(model: ModelSpec, pi: BeliefPoint, m: int) -> float:
    """Certified distance of iterate m from the value function:
    sqrt((1/c + E[prior]) max(lam0, lam1) / (m - 1)).  Needs m >= 2."""
    if m < 2:
        raise ValueError(f"bound undefined for m = {m} < 2")
    mean_theta = mean_absorption(model.gen, pi)
    return math.sqrt((1.0 / model.c + mean_theta) * model.lam_max / (m - 1))


def _sup_mean_absorption(model: ModelSpec) -> float:
    return float(model.mean_absorption_by_state.max())


def _certified_bound(model: ModelSpec, mode: str, m: int, delta: float) -> float:
    if m < 2:
        return math.inf
    base = math.sqrt((1.0 / model.c + _sup_mean_absorption(model)) * model.lam_max / (m - 1))
    return base + (m * delta if mode == "truncated" else 0.0)


@dataclass(frozen=True)
class IterationPlan:
    """How to run the iteration: which scheme, how many iterations certify
    the requested accuracy, the truncation delta, and the time horizon of the
    per-step minimization."""

    mode: str            # "bounded" | "truncated"
    m_target: int
    delta: float         # 0 in bounded mode
    t_limit: float
    epsilon: float
    m_bounded_raw: float
    m_truncated_raw: float


def iteration_plan(model: ModelSpec, pi: BeliefPoint, eps: float) -> IterationPlan:
    """Choose the scheme: bounded horizon when the comparison bound is
    finite, otherwise truncated with the matching delta."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    t_star = hitting_time_bound(model)
    m_b = bounded_iteration_count(model, pi, eps)
    m_t, delta = truncated_iteration_count(model, pi, eps)
    if math.isfinite(t_star):
        return IterationPlan(
            mode="bounded", m_target=max(1, math.ceil(m_b)), delta=0.0,
            t_limit=t_star, epsilon=eps, m_bounded_raw=m_b, m_truncated_raw=m_t,
        )
    return IterationPlan(
        mode="truncated", m_target=max(1, math.ceil(m_t)), delta=delta,
        t_limit=truncation_time(model, delta), epsilon=eps,
        m_bounded_raw=m_b, m_truncated_raw=m_t,
    )


# ---------------------------------------------------------------------------
# the value table and the iteration itself


@dataclass
class ValueTable:
    """Iterate values on a simplex grid plus the certification metadata."""

    model: ModelSpec
    grid: SimplexGrid
    values: np.ndarray
    m: int
    mode: str
    horizon: float
    delta: float
    epsilon: float
    certified_bound: float
    empirical_residual: float
    history: list[float] = field(default_factory=list)
    stack: tuple[np.ndarray, ...] | None = None

    @property
    def h_nodes(self) -> np.ndarray:
        return 1.0 - self.grid.nodes[:, -1]

    def interpolator(self):
        return self.grid.interpolator(self.values)

    def value_at(self, pi: BeliefPoint) -> float:
        return float(self.grid.interpolate(self.values, pi.vec[None, :])[0])


def value_iterate(
    model: ModelSpec,
    grid: SimplexGrid,
    plan: IterationPlan,
    empirical_stop: float | None = None,
    keep_stack: bool = False,
    on_iteration=None,
) -> ValueTable:
    """Run the iteration on the grid per the plan.

    Starts at the terminal cost, applies the minimized one-arrival operator
    (restricted per node to its own hitting bound in bounded mode, to the
    truncation horizon otherwise), clips each iterate into [0, previous] to
    pin monotonicity against round-off, and stops at the plan's iteration
    count or once the sup-norm step falls below ``empirical_stop``.  Nodes in
    the guaranteed stopping set keep value == terminal cost exactly.
    """
    if grid.n != model.n:
        raise ValueError(f"grid dimension {grid.n} != model dimension {model.n}")
    engine = _OperatorGrid(model, grid.nodes, plan.t_limit, locate_grid=grid)
    h_nodes = 1.0 - grid.nodes[:, -1]
    pinned = grid.nodes[:, -1] >= model.guaranteed_stop_level - 1e-12

    n_probe = engine.probe.size
    n_nodes = grid.node_count
    if plan.mode == "bounded":
        # First probe index whose flow already reached the guaranteed level;
        # restricting the minimization there is exact (the optimum occurs no
        # later) and pins the guaranteed set to the terminal cost.
        reached = engine.flow_abs >= model.guaranteed_stop_level - 1e-12
        first_hit = np.where(reached.any(axis=0), reached.argmax(axis=0), n_probe - 1)
        t_mask = np.arange(n_probe)[:, None] <= first_hit[None, :]
    else:
        t_mask = np.ones((n_probe, n_nodes), dtype=bool)
        t_mask[1:, pinned] = False

    values = h_nodes.copy()
    stack = [values.copy()]
    history: list[float] = []
    m_done = 0
    for m in range(1, plan.m_target + 1):
        new, _ = engine.minimize(values, t_mask=t_mask)
        new = np.clip(new, 0.0, values)
        new[pinned] = h_nodes[pinned]
        if not np.isfinite(new).all():
            bad = int(np.nonzero(~np.isfinite(new))[0][0])
            raise SolverError(
                f"non-finite value at node {bad} (coords {grid.nodes[bad]}) "
                f"on iteration {m}"
            )
        sup_delta = float(np.abs(new - values).max())
        history.append(sup_delta)
        values = new
        m_done = m
        if keep_stack:
            stack.append(values.copy())
        if on_iteration is not None:
            on_iteration(m, values, sup_delta)
        if empirical_stop is not None and sup_delta <= empirical_stop:
            break

    return ValueTable(
        model=model,
        grid=grid,
        values=values,
        m=m_done,
        mode=plan.mode,
        horizon=plan.t_limit,
        delta=plan.delta,
        epsilon=plan.epsilon,
        certified_bound=_certified_bound(model, plan.mode, m_done, plan.delta),
        empirical_residual=history[-1] if history else math.inf,
        history=history,
        stack=tuple(stack) if keep_stack else None,
    )


# ---------------------------------------------------------------------------
# stopping region and the near-optimal waiting time


@dataclass(frozen=True)
class StoppingRegion:
    epsilon: float
    member: np.ndarray           # per-node membership
    boundary: np.ndarray | None  # polyline coordinates for n == 2, else None
    convex: bool
    convexity_violations: int


def stopping_region(table: ValueTable, eps: float) -> StoppingRegion:
    """Nodes where stopping within eps/2 of the table value is optimal:
    h(node) <= value(node) + eps/2.

    For two transient states also emits the level line of h - value at
    eps/2, traced by linear interpolation along triangulation edges and
    ordered by angle around the region's centroid (the region is convex).
    The convexity check verifies that lattice midpoints of member pairs are
    members.
    """
    grid = table.grid
    h = table.h_nodes
    member = h <= table.values + eps / 2.0
    boundary = None
    if grid.n == 2 and member.any() and not member.all():
        level = eps / 2.0
        excess = h - table.values - level
        pts = []
        for tri in grid.triangles:
            for i in range(3):
                a, b = tri[i], tri[(i + 1) % 3]
                fa, fb = excess[a], excess[b]
                if fa == fb:
                    continue
                if (fa <= 0.0 < fb) or (fb <= 0.0 < fa):
                    lam = fa / (fa - fb)
                    pts.append((1 - lam) * grid.nodes[a] + lam * grid.nodes[b])
        if pts:
            pts = np.unique(np.round(np.vstack(pts), 12), axis=0)
            center = grid.nodes[member].mean(axis=0)
            ang = np.arctan2(pts[:, 2] - center[2], pts[:, 1] - center[1])
            boundary = pts[np.argsort(ang)]
    violations = _midpoint_convexity_violations(grid, member)
    return StoppingRegion(
        epsilon=eps, member=member, boundary=boundary,
        convex=violations == 0, convexity_violations=violations,
    )


def _midpoint_convexity_violations(grid: SimplexGrid, member: np.ndarray) -> int:
    rows = np.nonzero(member)[0]
    if rows.size < 2:
        return 0
    lat = grid.lattice[rows]
    count = 0
    chunk = 512
    for start in range(0, rows.size, chunk):
        block = lat[start : start + chunk]
        sums = block[:, None, :] + lat[None, :, :]
        even = (sums % 2 == 0).all(axis=2)
        pairs = np.nonzero(even)
        if pairs[0].size == 0:
            continue
        mids = sums[pairs[0], pairs[1]] // 2
        mid_rows = grid.node_index(mids)
        count += int((~member[mid_rows]).sum())
    return count


def near_optimal_wait(
    model: ModelSpec,
    stack: tuple[np.ndarray, ...] | list[np.ndarray],
    grid: SimplexGrid,
    m: int,
    eps: float,
    pi: BeliefPoint,
    n_probe: int = 256,
    tau_t_rel: float = 1e-6,
) -> float:
    """Smallest positive waiting time whose cost is within eps of the
    minimized cost under iterate m; inf when none exists below the capped
    horizon and the tail bound excludes later times.

    Scans the probe grid for the first qualifying time and refines the entry
    point by bisection over the bracketing interval.
    """
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    w = grid.interpolator(stack[m])
    t_cap = quadrature_horizon(model)
    base, _ = minimize_waiting_cost(model, w, pi, horizon=t_cap)
    # Slack absorbs quadrature noise; essential at eps = 0 where the cost
    # only touches its minimum instead of crossing the threshold.
    slack = max(1e-7, 1e-3 * eps)
    target = base + eps
    head = max(8, n_probe // 4)
    probes = _probe_grid(t_cap, model.lam_max, n_head=head, n_tail=n_probe - head)
    J = waiting_cost_profile(model, w, pi, probes)
    hits = np.nonzero(J[1:] <= target + slack)[0]
    if hits.size == 0:
        if J[-1] > target + DELTA_FLOOR:
            return math.inf
        return t_cap
    j = int(hits[0]) + 1
    if j == 1:
        return float(probes[1])  # qualifies already at the first positive probe
    # Confirm the bracket with the adaptive evaluator before bisecting.
    while j < probes.size and waiting_cost(model, w, float(probes[j]), pi) > target + slack:
        j += 1
    if j >= probes.size:
        return math.inf if J[-1] > target + DELTA_FLOOR else t_cap
    lo, hi = float(probes[j - 1]), float(probes[j])
    tol = max(tau_t_rel * t_cap, 1e-14)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if waiting_cost(model, w, mid, pi) <= target + slack:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# serialization


def table_to_json(table: ValueTable) -> dict:
    doc = {
        "model": table.model.to_dict(),
        "model_hash": table.model.model_hash,
        "n": table.grid.n,
        "resolution": table.grid.resolution,
        "mode": table.mode,
        "m": table.m,
        "delta": table.delta,
        "epsilon": table.epsilon,
        "horizon": table.horizon,
        "certified_bound": table.certified_bound,
        "empirical_residual": table.empirical_residual,
        "history": list(table.history),
        "values": table.values.tolist(),
    }
    if table.stack is not None:
        doc["stack"] = [v.tolist() for v in table.stack]
    return doc


def table_from_json(doc: dict) -> ValueTable:
    from .phase_type import generator_from_dict

    gen = generator_from_dict(doc["model"]["generator"])
    model = ModelSpec(gen, doc["model"]["lambda0"], doc["model"]["lambda1"],
                      doc["model"]["cost"])
    grid = SimplexGrid(doc["n"], doc["resolution"])
    values = np.array(doc["values"], dtype=float)
    if values.shape[0] != grid.node_count:
        raise ValueError("value table does not match its grid resolution")
    stack = None
    if "stack" in doc:
        stack = tuple(np.array(v, dtype=float) for v in doc["stack"])
    return ValueTable(
        model=model, grid=grid, values=values, m=int(doc["m"]), mode=doc["mode"],
        horizon=float(doc["horizon"]), delta=float(doc["delta"]),
        epsilon=float(doc.get("epsilon", 0.0)),
        certified_bound=float(doc["certified_bound"]),
        empirical_residual=float(doc["empirical_residual"]),
        history=[float(x) for x in doc.get("history", [])],
        stack=stack,
    )
