"""Deterministic solver for the large-N limit of the window/queue system.

The limit is a per-class probability measure over window sizes coupled to
a deterministic fluid queue.  The delayed loss term needs the conditional
expectation of the window one RTT in the past given the window now, so the
plain marginal is not a state.  The scheme therefore keeps, per class, a
ring of one-step transition kernels spanning exactly one RTT together with
the marginal at the ring's tail: Bayes inversion of the accumulated kernel
product recovers the needed conditional without ever inverting a matrix.

Per-class time grids satisfy ``t[k+S] - R_c(t[k+S]) = t[k]`` where ``S``
is the number of sub-steps per RTT, so the next grid time is always the
tail time plus the RTT of a packet departing then.  Classes advance under
a global smallest-next-time ordering while the queue integrates on its own
uniform grid between events; the measure means entering the queue drift
are frozen between the owning class's updates.

One-step kernels are sparse row-stochastic matrices: the growth branch
moves each node's mass to the node one growth increment up (split linearly
between the bracketing grid nodes, which preserves the first moment), the
halving branch moves it to half the window (same linear split) with the
per-step loss probability of that node.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .core import (GENTLE, InitialLaw, ModelConfig, current_loss_probability,
                   drop_prob, validate_config, window_bound)
from .delay import QueuePath, past_state, rtt_at_arrival

_MASS_TOL = 1e-9
_ROW_TOL = 1e-12
_RING_TOL = 1e-9

CLOSURES = ("bayes", "shift", "decorrelate")


@dataclass
class WindowMeasure:
    """Gridded window distribution of one class at one instant.

    ``weights[j]`` is the probability mass at window ``grid[j]``; the
    weights are nonnegative and sum to one.
    """

    grid: np.ndarray
    weights: np.ndarray
    class_id: int
    t: float

    def total(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> float:
        return float(self.grid @ self.weights)

    def copy(self) -> "WindowMeasure":
        return WindowMeasure(self.grid, self.weights.copy(), self.class_id, self.t)


@dataclass(frozen=True)
class StepKernel:
    """One-step transition kernel on the window grid (row-stochastic)."""

    mat: sp.csr_matrix
    t: float
    h: float
    row_sum_dev: float


def init_measure(law: InitialLaw, dw: float, J: int, class_id: int = 0) -> WindowMeasure:
    """Deposit an initial law on the grid by conservative linear allocation.

    Each atom is split between its two bracketing nodes with linear
    weights, which conserves total mass exactly and the first moment up to
    the clamp at the grid edge.
    """
    pts, wts = law.atoms()
    if np.any(pts < -1e-12) or np.any(pts > J * dw + 1e-12):
        raise ValueError(
            f"initial law support [{pts.min()}, {pts.max()}] exceeds the "
            f"window grid [0, {J * dw}]")
    x = np.clip(pts, 0.0, J * dw) / dw
    lo = np.minimum(x.astype(int), J - 1)
    fr = x - lo
    weights = np.zeros(J + 1)
    np.add.at(weights, lo, wts * (1.0 - fr))
    np.add.at(weights, lo + 1, wts * fr)
    weights /= weights.sum()
    return WindowMeasure(np.arange(J + 1) * dw, weights, class_id, 0.0)


class KernelRing:
    """The last ``S`` one-step kernels of one class, spanning one RTT.

    Holds the per-class grid times ``t[m-S] .. t[m]`` (the kernel at slot
    ``i`` maps the measure at ``times[i]`` to ``times[i+1]``), the marginal
    stored at the tail time, and the machinery to form the running product
    of the ring.  Before time zero windows are frozen, so the ring starts
    primed with identity kernels over a uniformly subdivided initial RTT;
    no warm-up special case is needed anywhere else.
    """

    def __init__(self, substeps: int, grid: np.ndarray, tail_weights: np.ndarray,
                 rtt0: float):
        self.S = substeps
        self.grid = grid
        self.times = deque(-rtt0 + np.arange(substeps + 1) * (rtt0 / substeps))
        eye = sp.identity(len(grid), format="csr")
        self.kernels: deque[StepKernel] = deque(
            StepKernel(eye, float(t), rtt0 / substeps, 0.0)
            for t in list(self.times)[:-1])
        self.tail_weights = tail_weights.copy()
        self._version = 0
        self._prod_cache: tuple[int, sp.csr_matrix] | None = None

    @property
    def t_frontier(self) -> float:
        return self.times[-1]

    @property
    def t_tail(self) -> float:
        return self.times[0]

    def push(self, kernel: StepKernel, t_new: float) -> None:
        """Rotate: the new kernel enters, the tail kernel advances the tail marginal."""
        self.kernels.append(kernel)
        self.times.append(t_new)
        dropped = self.kernels.popleft()
        self.times.popleft()
        self.tail_weights = self.tail_weights @ dropped.mat
        self._version += 1

    def chain(self, v: np.ndarray) -> np.ndarray:
        """Propagate a row vector through every kernel in ring order."""
        for k in self.kernels:
            v = v @ k.mat
        return v

    def product(self) -> sp.csr_matrix:
        """Running product of the ring contents (cached per rotation)."""
        if self._prod_cache is not None and self._prod_cache[0] == self._version:
            return self._prod_cache[1]
        mats = [k.mat for k in self.kernels]
        # pairwise tree keeps the factor count logarithmic
        while len(mats) > 1:
            mats = [mats[i] @ mats[i + 1] if i + 1 < len(mats) else mats[i]
                    for i in range(0, len(mats), 2)]
        self._prod_cache = (self._version, mats[0])
        return mats[0]

    def product_foldl(self) -> sp.csr_matrix:
        """Left-to-right explicit product, used as the consistency reference."""
        out = self.kernels[0].mat
        for k in list(self.kernels)[1:]:
            out = out @ k.mat
        return out

    def consistency_error(self) -> float:
        """Elementwise gap between the running product and the explicit fold."""
        diff = (self.product() - self.product_foldl()).tocoo()
        return float(np.abs(diff.data).max()) if diff.nnz else 0.0


def conditional_expectation(ring: KernelRing, w_index: int | None = None):
    """Expected window one RTT ago, conditioned on the window now.

    Bayes inversion of the ring product against the tail marginal:
    ``e(w_j) = sum_i w_i M_tail(i) S(i, j) / sum_i M_tail(i) S(i, j)``.
    Implemented by propagating the tail marginal (and its first-moment
    weighting) through the ring, which is the same arithmetic without
    forming the product.  Nodes carrying no mass fall back to
    ``e(w_j) = w_j``.
    """
    denom = ring.chain(ring.tail_weights)
    numer = ring.chain(ring.grid * ring.tail_weights)
    e = np.where(denom > 0.0, numer / np.where(denom > 0.0, denom, 1.0), ring.grid)
    if w_index is not None:
        return float(e[w_index])
    return np.clip(e, ring.grid[0], ring.grid[-1])


@dataclass
class MeanFieldState:
    """Mutable state of the deterministic solver."""

    config: ModelConfig
    substeps: int
    dw: float
    grid: np.ndarray
    dt_queue: float
    measures: list[WindowMeasure]
    rings: list[KernelRing]
    wbar: np.ndarray
    path: QueuePath
    closure: str = "bayes"
    check_every: int = 0
    pending_Q: float = 0.0
    on_boundary: bool = False
    events: int = 0
    clamp_events: int = 0
    max_mass_dev: float = 0.0
    max_row_dev: float = 0.0
    max_ring_dev: float = 0.0
    max_span_dev: float = 0.0
    ring_checks: int = 0
    _warned_coarse: bool = False

    def next_event_time(self, c: int) -> float:
        """Next grid time of class ``c``: tail-successor time plus its RTT."""
        ring = self.rings[c]
        s = ring.times[1]
        q_s = self.path.lookup(s)[0] if s >= self.path.t0 else self.path.q0
        return s + self.config.classes[c].T + q_s / self.config.red.L


def init_state(cfg: ModelConfig, substeps: int = 32, dw: float | None = None,
               dt_queue: float | None = None, closure: str = "bayes",
               check_every: int | None = None) -> MeanFieldState:
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    if closure not in CLOSURES:
        raise ValueError(f"closure must be one of {CLOSURES}")
    if substeps < 1:
        raise ValueError("need at least one sub-step per RTT")
    a_T = window_bound(cfg.horizon, cfg.W_max, cfg.T_min)
    if dw is None:
        dw = a_T / 2000.0
    J = int(math.ceil(a_T / dw))
    if dt_queue is None:
        dt_queue = cfg.T_min / 100.0
    if dt_queue >= cfg.T_min:
        raise ValueError("queue step must be below the smallest delay")
    grid = np.arange(J + 1) * dw
    measures, rings = [], []
    for c, law in enumerate(cfg.initial):
        m = init_measure(law, dw, J, class_id=c)
        rtt0 = cfg.classes[c].T + cfg.q0 / cfg.red.L
        measures.append(m)
        rings.append(KernelRing(substeps, grid, m.weights, rtt0))
    k0 = drop_prob(cfg.red, cfg.q0)
    path = QueuePath(0.0, dt_queue, cfg.q0, k0, cfg.red.L, cfg.red.queue_ceiling)
    return MeanFieldState(
        config=cfg, substeps=substeps, dw=dw, grid=grid, dt_queue=dt_queue,
        measures=measures, rings=rings,
        wbar=np.array([m.mean() for m in measures]), path=path,
        closure=closure, pending_Q=cfg.q0,
        check_every=check_every if check_every is not None else substeps)


def queue_rhs(state: MeanFieldState) -> float:
    """Effective queue drift at the current frontier of the queue grid.

    Sums the admitted per-class rates minus the link rate, removing the
    negative part while the queue sits at zero and switching to the jitter
    branch (zero drift, adjusted loss probability) while it sits at
    ``q_max``.
    """
    u = state.path.t0 + len(state.path) * state.path.dt
    drift, _, _ = _drift_at(state, u)
    return drift


def _drift_at(state: MeanFieldState, u: float) -> tuple[float, float, np.ndarray]:
    cfg = state.config
    R_now = np.array([rtt_at_arrival(state.path, u, c.T).R for c in cfg.classes])
    kappa = np.array([c.kappa for c in cfg.classes])
    S_bar = float(np.sum(kappa * state.wbar / R_now))
    Q = state.pending_Q
    K, state.on_boundary = current_loss_probability(cfg.red, Q, S_bar)
    drift = S_bar * (1.0 - K) - cfg.red.L
    if Q <= 0.0 and drift < 0.0:
        drift = 0.0
    if state.on_boundary:
        drift = 0.0
    return drift, K, R_now


def _queue_substep(state: MeanFieldState, rows: list) -> None:
    """Record the current instant and advance the queue one uniform step."""
    cfg = state.config
    u = state.path.t0 + len(state.path) * state.path.dt
    drift, K, R_now = _drift_at(state, u)
    kappa = np.array([c.kappa for c in cfg.classes])
    S_bar = float(np.sum(kappa * state.wbar / R_now))
    state.path.record(u, state.pending_Q, K)
    rows.append((u, state.pending_Q, K, S_bar, state.wbar.copy(), R_now))
    Q_next = state.pending_Q + state.dt_queue * drift
    if Q_next < 0.0:
        Q_next = 0.0
    ceiling = cfg.red.queue_ceiling if cfg.red.variant == "gentle" else cfg.red.q_max
    if Q_next > ceiling:
        Q_next = ceiling
    state.pending_Q = Q_next


def build_step_kernel(state: MeanFieldState, c: int) -> StepKernel:
    """One-step kernel of class ``c`` over its next grid interval.

    Growth moves mass up by ``h/R_c`` evaluated at the interval start;
    halving moves mass from ``w`` to ``w/2`` with probability
    ``h * e(w) * K(t-R) / R(t-R)`` (clamped to one with a warning when the
    sub-step is too coarse to resolve it).
    """
    cfg = state.config
    ring = state.rings[c]
    t_cur = ring.t_frontier
    t_new = state.next_event_time(c)
    h = t_new - t_cur
    p_state = past_state(state.path, t_cur, cfg.classes[c].T)

    if state.closure == "bayes":
        e = conditional_expectation(ring)
    elif state.closure == "decorrelate":
        e = state.grid
    else:  # "shift": past window is roughly current minus one RTT of growth,
        # or twice the current value when a loss intervened
        base = np.maximum(state.grid - 1.0, 0.0)
        pi = np.clip(base * p_state.K_past / p_state.R_past * p_state.R, 0.0, 1.0)
        e = (1.0 - pi) * base + pi * 2.0 * state.grid

    p = h * e * (p_state.K_past / p_state.R_past)
    over = p > 1.0
    if np.any(over):
        if np.any(state.measures[c].weights[over] > 1e-15):
            if not state._warned_coarse:
                warnings.warn("per-step halving probability clamped at 1; "
                              "increase sub-steps per RTT", stacklevel=2)
                state._warned_coarse = True
            state.clamp_events += 1
        p = np.clip(p, 0.0, 1.0)

    J = len(state.grid) - 1
    idx = np.arange(J + 1)
    x = idx + (h / p_state.R) / state.dw
    lo_raw = x.astype(int)
    lo = np.minimum(lo_raw, J)
    fr = np.where(lo_raw >= J, 0.0, x - lo_raw)
    hi = np.minimum(lo + 1, J)
    xh = idx * 0.5
    lo_h = xh.astype(int)
    fr_h = xh - lo_h
    hi_h = np.minimum(lo_h + 1, J)

    rows = np.repeat(idx, 4)
    cols = np.stack([lo, hi, lo_h, hi_h], axis=1).ravel()
    vals = np.stack([(1.0 - p) * (1.0 - fr), (1.0 - p) * fr,
                     p * (1.0 - fr_h), p * fr_h], axis=1).ravel()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(J + 1, J + 1)).tocsr()
    row_dev = float(np.abs(np.asarray(mat.sum(axis=1)).ravel() - 1.0).max())
    if row_dev > _ROW_TOL:
        raise RuntimeError(f"kernel rows deviate from stochasticity by {row_dev}")
    return StepKernel(mat, t_cur, h, row_dev)


def advance(state: MeanFieldState) -> MeanFieldState:
    """One scheme event: integrate the queue to the earliest class grid
    time, then rotate that class's kernel ring and update its measure."""
    cfg = state.config
    rows_sink = getattr(state, "_rows", None)
    if rows_sink is None:
        rows_sink = []
        state._rows = rows_sink
    nxt = [state.next_event_time(c) for c in range(len(cfg.classes))]
    c = int(np.argmin(nxt))
    t_new = nxt[c]
    while state.path.t0 + len(state.path) * state.path.dt <= t_new + 1e-12:
        _queue_substep(state, rows_sink)

    ring = state.rings[c]
    kernel = build_step_kernel(state, c)
    state.max_row_dev = max(state.max_row_dev, kernel.row_sum_dev)

    # ring spans one RTT: frontier minus its RTT equals the tail time
    span_dev = abs((ring.t_frontier - past_state(state.path, ring.t_frontier,
                                                 cfg.classes[c].T).R) - ring.t_tail)
    state.max_span_dev = max(state.max_span_dev, span_dev)

    m = state.measures[c]
    m.weights = m.weights @ kernel.mat
    m.t = t_new
    ring.push(kernel, t_new)
    state.wbar[c] = m.mean()
    state.max_mass_dev = max(state.max_mass_dev, abs(m.total() - 1.0))
    if state.max_mass_dev > _MASS_TOL:
        raise RuntimeError(f"measure mass drifted by {state.max_mass_dev}")

    state.events += 1
    if state.check_every and state.events % state.check_every == 0:
        state.max_ring_dev = max(state.max_ring_dev, ring.consistency_error())
        state.ring_checks += 1
        if state.max_ring_dev > _RING_TOL:
            raise RuntimeError(f"kernel-ring product drifted by {state.max_ring_dev}")
    return state


@dataclass
class MeanFieldResult:
    """Deterministic solution series on the queue grid, plus snapshots."""

    t: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    S_bar: np.ndarray
    W_bar: np.ndarray
    R: np.ndarray
    snapshots: dict
    diagnostics: dict

    @property
    def times(self) -> np.ndarray:
        return self.t


def solve(cfg: ModelConfig, substeps: int = 32, dw: float | None = None,
          dt_queue: float | None = None, snapshot_times=(),
          closure: str = "bayes", check_every: int | None = None) -> MeanFieldResult:
    """Run the scheme to the horizon; fully deterministic.

    Emits the queue series ``Q(t), K(t)``, per-class mean windows and RTTs
    on the uniform queue grid, and per-class measure snapshots at the
    requested times (captured at the first class grid time past each).
    """
    state = init_state(cfg, substeps, dw, dt_queue, closure, check_every)
    horizon = cfg.horizon
    rows: list = []
    state._rows = rows
    want = sorted(float(ts) for ts in snapshot_times)
    got: dict[float, list] = {}

    def capture(ts: float, when_all_cross: float):
        if ts in got:
            return
        if all(r.t_frontier >= when_all_cross for r in state.rings):
            got[ts] = [m.copy() for m in state.measures]

    for ts in want:
        if ts <= 0.0:
            got[ts] = [m.copy() for m in state.measures]

    n_records = int(round(horizon / state.dt_queue)) + 1
    while True:
        nxt = min(state.next_event_time(c) for c in range(len(cfg.classes)))
        if nxt > horizon:
            break
        advance(state)
        for ts in want:
            capture(ts, ts)
    while len(state.path) < n_records:
        _queue_substep(state, rows)
    for ts in want:
        if ts not in got:
            got[ts] = [m.copy() for m in state.measures]

    diagnostics = {
        "max_mass_dev": state.max_mass_dev,
        "max_row_dev": state.max_row_dev,
        "max_ring_dev": state.max_ring_dev,
        "ring_checks": state.ring_checks,
        "max_span_dev": state.max_span_dev,
        "clamp_events": state.clamp_events,
        "events": state.events,
    }
    return MeanFieldResult(
        t=np.array([r[0] for r in rows]),
        Q=np.array([r[1] for r in rows]),
        K=np.array([r[2] for r in rows]),
        S_bar=np.array([r[3] for r in rows]),
        W_bar=np.array([r[4] for r in rows]),
        R=np.array([r[5] for r in rows]),
        snapshots=got, diagnostics=diagnostics)


@dataclass(frozen=True)
class FixedPoint:
    """Equilibrium of the limit system under the decorrelation closure."""

    q: float
    K: float
    W_bar: np.ndarray
    R: np.ndarray
    residuals: dict
    boundary: bool


def fixed_point(cfg: ModelConfig) -> FixedPoint:
    """Algebraic equilibrium: queue balance, drop curve, RTT and the
    stationary window relation ``W_bar = sqrt(2/K)``.

    Solved by bracketing root-finding in the queue level; when no interior
    root exists the queue equilibrium sits pinned at ``q_max`` and the
    jitter loss probability is solved for instead.  This closure assumes
    windows one RTT apart are uncorrelated, so treat the answer as a
    diagnostic anchor rather than a claim about the full measure dynamics.
    """
    red = cfg.red
    kappa = np.array([c.kappa for c in cfg.classes])
    T = np.array([c.T for c in cfg.classes])

    def balance(q: float) -> float:
        K = drop_prob(red, q)
        if K <= 0.0:
            return math.inf
        R = T + q / red.L
        return float(np.sum(kappa * math.sqrt(2.0 / K) * (1.0 - K) / R)) - red.L

    span = red.q_max - red.q_min
    lo = red.q_min + 1e-9 * span
    hi = red.q_max - 1e-9 * span
    interior = red.p_max > 0.0 and balance(hi) < 0.0
    if interior:
        q_star = float(brentq(balance, lo, hi, xtol=1e-14, rtol=8.9e-16))
        K_star = drop_prob(red, q_star)
        boundary = False
    else:
        # demand exceeds the link even at maximal ramp drop: jitter regime
        q_star = red.q_max
        R = T + q_star / red.L

        def jitter(K: float) -> float:
            return float(np.sum(kappa * math.sqrt(2.0 / K) * (1.0 - K) / R)) - red.L

        k_lo = max(red.p_max, 1e-12)
        if jitter(k_lo) < 0.0:
            K_star = k_lo
        else:
            K_star = float(brentq(jitter, k_lo, 1.0 - 1e-12, xtol=1e-15))
        boundary = True

    R_star = T + q_star / red.L
    W_star = np.full(len(T), math.sqrt(2.0 / K_star))
    residuals = {
        "queue_balance": float(np.sum(kappa * W_star * (1.0 - K_star) / R_star))
                         - red.L,
        "drop_curve": (K_star - drop_prob(red, q_star)) if not boundary else 0.0,
        "rtt": float(np.abs(R_star - (T + q_star / red.L)).max()),
        "window_closure": float(np.abs(W_star - math.sqrt(2.0 / K_star)).max()),
    }
    return FixedPoint(q=q_star, K=K_star, W_bar=W_star, R=R_star,
                      residuals=residuals, boundary=boundary)
