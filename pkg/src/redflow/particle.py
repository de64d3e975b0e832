"""Stochastic simulator for N TCP flows sharing one RED bottleneck.

Each flow's window grows at rate ``1/R_c(t)`` and halves at the points of
a Poisson process whose intensity is the flow's transmission rate one RTT
in the past times the loss probability one RTT in the past.  The queue is
a fluid integrator of the aggregate admitted rate minus the link rate,
reflected at zero and pinned at ``q_max`` while the offered load exceeds
what maximal ramp dropping can absorb.

Loss events are drawn by thinning a dominating Poisson process: candidate
points are generated at the envelope rate ``a(t)/T_min`` (``a`` is the
deterministic window bound) and accepted with probability
``lambda_n(t)/envelope``.  The dominating process is realized from
counter-based streams keyed by (seed, wall-clock window), so its points do
not depend on the step size.  That one property buys three things at once:
runs are reproducible regardless of parallelism, halving the step keeps
the same underlying event realization (self-convergence is measurable),
and runs that differ only in the drop curve share every candidate (the
coupling used in the gentle-RED experiment).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .core import (GENTLE, ModelConfig, current_loss_probability, drop_prob,
                   validate_config, window_bound)
from .delay import PastState, QueuePath, past_state, rtt_at_arrival

_INIT_SALT = 1 << 48
_CAND_SALT = 0
_PIN_EPS = 1e-12


class CandidateStream:
    """Dominating-process realization, windowed and counter-keyed.

    Wall-clock windows of fixed width carry i.i.d. candidate points: per
    flow a Poisson count at the envelope rate of the window, each point
    with a uniform time and an acceptance mark.  Window ``w`` is generated
    from a Philox stream keyed by ``(seed, w)``, so any two runs with the
    same seed and flow count see identical candidates no matter how the
    step size chops the timeline.
    """

    def __init__(self, seed: int, n_flows: int, W_max: float, T_min: float,
                 window: float | None = None):
        if seed < 0 or seed >= 1 << 48:
            raise ValueError("seed must be a non-negative integer below 2**48")
        self.seed = int(seed)
        self.n_flows = int(n_flows)
        self.W_max = float(W_max)
        self.T_min = float(T_min)
        self.window = float(window) if window is not None else T_min / 10.0
        self._cache: dict[int, tuple] = {}

    def _block(self, w: int) -> tuple:
        blk = self._cache.get(w)
        if blk is not None:
            return blk
        t_hi = (w + 1) * self.window
        lam_bar = window_bound(t_hi, self.W_max, self.T_min) / self.T_min
        g = Generator(Philox(key=(self.seed, _CAND_SALT | w)))
        counts = g.poisson(lam_bar * self.window, self.n_flows)
        total = int(counts.sum())
        times = w * self.window + g.random(total) * self.window
        marks = g.random(total)
        flows = np.repeat(np.arange(self.n_flows), counts)
        order = np.argsort(times, kind="stable")
        blk = (times[order], flows[order], marks[order], lam_bar)
        if len(self._cache) > 4:
            self._cache.pop(min(self._cache))
        self._cache[w] = blk
        return blk

    def candidates(self, t0: float, t1: float):
        """Candidate (flows, marks, envelope rates) with time in (t0, t1]."""
        w_lo = int(math.floor(t0 / self.window + 1e-12))
        w_hi = int(math.floor(t1 / self.window - 1e-12))
        flows, marks, lam_bars = [], [], []
        for w in range(w_lo, w_hi + 1):
            times, fl, mk, lam_bar = self._block(w)
            lo = np.searchsorted(times, t0, side="right")
            hi = np.searchsorted(times, t1, side="right")
            if hi > lo:
                flows.append(fl[lo:hi])
                marks.append(mk[lo:hi])
                lam_bars.append(np.full(hi - lo, lam_bar))
        if not flows:
            return (np.empty(0, dtype=int), np.empty(0), np.empty(0))
        return (np.concatenate(flows), np.concatenate(marks),
                np.concatenate(lam_bars))


def draw_halvings(stream: CandidateStream, t: float, dt: float,
                  lam: np.ndarray) -> np.ndarray:
    """Per-flow count of accepted loss events in (t, t+dt].

    ``lam`` holds the intensities frozen at the step start; a candidate of
    flow ``n`` is accepted when its mark falls below ``lam[n]`` over the
    envelope rate of its window.
    """
    flows, marks, lam_bars = stream.candidates(t, t + dt)
    if len(flows) == 0:
        return np.zeros(len(lam), dtype=int)
    accepted = marks * lam_bars < lam[flows]
    return np.bincount(flows[accepted], minlength=len(lam))


class WindowHistory:
    """Ring of per-flow window samples on the step grid.

    Depth covers the largest possible RTT, so every delayed intensity
    lookup lands inside the ring.  Lookups take the nearest earlier grid
    sample: windows jump at halvings and interpolating across a jump would
    bias the intensity.  Before time zero every flow keeps its initial
    window.
    """

    def __init__(self, w_init: np.ndarray, dt: float, span: float):
        self.dt = dt
        self.depth = int(math.ceil(span / dt)) + 4
        self.w_init = w_init.copy()
        self._rows = np.empty((self.depth, len(w_init)))
        self._latest = -1

    def push(self, step_idx: int, W: np.ndarray) -> None:
        if step_idx != self._latest + 1:
            raise ValueError("history rows must be pushed in step order")
        self._rows[step_idx % self.depth] = W
        self._latest = step_idx

    def lookup(self, s: float) -> np.ndarray:
        if s < 0.0:
            return self.w_init
        j = int(math.floor(s / self.dt + 1e-9))
        j = min(j, self._latest)
        if self._latest - j >= self.depth:
            raise ValueError(f"window history at t={s} already evicted")
        return self._rows[j % self.depth]


@dataclass
class SimState:
    """Mutable state of one stochastic run."""

    config: ModelConfig
    N: int
    seed: int
    W: np.ndarray
    w_init: np.ndarray
    class_slices: list[slice]
    T: np.ndarray
    kappa_eff: np.ndarray
    t: float = 0.0
    step_idx: int = 0
    dt: float | None = None
    path: QueuePath | None = None
    history: WindowHistory | None = None
    stream: CandidateStream | None = None
    on_boundary: bool = False
    _pending_Q: float = 0.0
    _warned_coarse: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.class_slices)

    def class_windows(self, c: int) -> np.ndarray:
        return self.W[self.class_slices[c]]


@dataclass
class RunRecord:
    """Time series of one run, all columns on one grid.

    ``W_bar`` and ``R`` have one column per class; ``snapshots`` maps a
    sample time to the per-class window arrays captured there.
    """

    t: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    S_bar: np.ndarray
    W_bar: np.ndarray
    R: np.ndarray
    N: int
    seed: int
    dt: float
    kappa_eff: np.ndarray
    snapshots: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.t


def init_flows(cfg: ModelConfig, N: int, seed: int) -> SimState:
    """Populate the flows: class assignment, initial windows, initial queue.

    The first ``floor(N*kappa_1)`` flows go to class one and so on, the
    remainder to the last class; windows are sampled i.i.d. from the
    class's initial law (or assigned verbatim for an explicit list).
    """
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    if N < 1:
        raise ValueError("need at least one flow")
    if cfg.q0 >= cfg.red.q_max:
        raise ValueError("stochastic runs need q0 < q_max (path-split logic)")
    d = len(cfg.classes)
    counts = [int(math.floor(N * c.kappa)) for c in cfg.classes[:-1]]
    counts.append(N - sum(counts))
    if any(c <= 0 for c in counts):
        raise ValueError(f"a class rounds to zero flows at N={N}: counts={counts}")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    slices = [slice(int(bounds[c]), int(bounds[c + 1])) for c in range(d)]
    rng = Generator(Philox(key=(seed, _INIT_SALT)))
    W = np.empty(N)
    for c in range(d):
        W[slices[c]] = cfg.initial[c].draw(rng, counts[c])
    if not np.any(W > 0.0):
        raise ValueError("all initial windows are zero; the RTT map degenerates")
    return SimState(
        config=cfg, N=N, seed=seed, W=W, w_init=W.copy(),
        class_slices=slices, T=np.array([c.T for c in cfg.classes]),
        kappa_eff=np.asarray(counts, dtype=float) / N,
        _pending_Q=cfg.q0)


def _ensure_grid(state: SimState, dt: float) -> None:
    if state.dt is None:
        if dt <= 0.0 or dt >= state.config.T_min:
            raise ValueError(f"step dt={dt} must lie in (0, T_min)")
        cfg = state.config
        state.dt = dt
        state.path = QueuePath(0.0, dt, cfg.q0, drop_prob(cfg.red, cfg.q0),
                               cfg.red.L, cfg.red.queue_ceiling)
        state.history = WindowHistory(state.w_init, dt, cfg.rtt_ceiling)
        state.stream = CandidateStream(state.seed, state.N, cfg.W_max, cfg.T_min)
    elif abs(dt - state.dt) > 1e-15:
        raise ValueError("dt cannot change mid-run")


def _loss_probability(state: SimState, Q: float, S_bar: float) -> tuple[float, bool]:
    """Loss probability at the current instant and the boundary flag."""
    return current_loss_probability(state.config.red, Q, S_bar, _PIN_EPS)


def _step_core(state: SimState, dt: float) -> tuple:
    """Advance one step; returns the row recorded at the step's start time."""
    _ensure_grid(state, dt)
    cfg = state.config
    red = cfg.red
    t = state.step_idx * dt
    Q = state._pending_Q

    past: list[PastState] = [past_state(state.path, t, float(T)) for T in state.T]
    R_now = np.array([p.R for p in past])

    class_sums = np.array([state.W[s].sum() for s in state.class_slices])
    counts = np.array([s.stop - s.start for s in state.class_slices])
    W_bar = class_sums / counts
    S_bar = float(np.sum(class_sums / R_now)) / state.N

    K, state.on_boundary = _loss_probability(state, Q, S_bar)
    state.path.record(t, Q, K)
    state.history.push(state.step_idx, state.W)

    # delayed intensities, frozen over the step
    lam = np.empty(state.N)
    a_t = window_bound(t, cfg.W_max, cfg.T_min)
    for c, p in enumerate(past):
        w_past = state.history.lookup(t - p.R)[state.class_slices[c]]
        lam[state.class_slices[c]] = w_past * (p.K_past / p.R_past)
    if lam.max() > a_t / cfg.T_min + 1e-9:
        raise RuntimeError("loss intensity exceeded its deterministic bound")
    if not state._warned_coarse and (a_t / cfg.T_min) * dt > 0.1:
        warnings.warn(
            f"dominating rate times dt is {(a_t / cfg.T_min) * dt:.3f} > 0.1; "
            "per-step discretization error may be visible", stacklevel=3)
        state._warned_coarse = True

    halvings = draw_halvings(state.stream, t, dt, lam)

    # queue first (uses time-t windows), then the windows themselves
    drift = S_bar * (1.0 - K) - red.L
    Q_next = Q + dt * drift
    if Q_next < 0.0:
        Q_next = 0.0
    if red.variant == GENTLE:
        Q_next = min(Q_next, red.b)
    elif Q_next >= red.q_max:
        Q_next = red.q_max

    for c, s in enumerate(state.class_slices):
        state.W[s] += dt / R_now[c]
    if np.any(halvings):
        state.W *= np.exp2(-halvings.astype(float))

    if not np.all(np.isfinite(state.W)) or np.any(state.W < 0.0):
        raise RuntimeError("window invariant violated (NaN or negative)")
    if state.W.max() > window_bound(t + dt, cfg.W_max, cfg.T_min) + 1e-9:
        raise RuntimeError("window exceeded its deterministic bound")

    state._pending_Q = Q_next
    state.step_idx += 1
    state.t = state.step_idx * dt
    return (t, Q, K, S_bar, W_bar, R_now)


def step(state: SimState, dt: float) -> SimState:
    """Advance the system by one step of size ``dt`` (mutates ``state``)."""
    _step_core(state, dt)
    return state


def transmission_rate(state: SimState) -> float:
    """Aggregate rate ``S_bar = mean(W_n / R_c(n))`` at the current time."""
    out = 0.0
    for c, s in enumerate(state.class_slices):
        if state.path is not None and len(state.path) > 0:
            R = rtt_at_arrival(state.path, state.t, float(state.T[c])).R
        else:
            R = float(state.T[c]) + state.config.q0 / state.config.red.L
        out += state.W[s].sum() / R
    return out / state.N


def empirical_measure(state: SimState, c: int) -> np.ndarray:
    """Window values of class ``c`` (each carrying weight 1/count)."""
    values = state.class_windows(c)
    if len(values) == 0:
        raise ValueError(f"class {c} is empty")
    return values.copy()


def run(cfg: ModelConfig, N: int, seed: int, dt: float, horizon: float,
        snapshot_times=()) -> RunRecord:
    """Simulate to the horizon and record every step on the ``dt`` grid.

    Deterministic for fixed ``(seed, N, dt)``.  ``snapshot_times`` are
    snapped to the grid; at each one the full per-class window arrays are
    stored in the record.
    """
    state = init_flows(cfg, N, seed)
    n_steps = int(round(horizon / dt))
    snap_steps = {int(round(ts / dt)): float(ts) for ts in snapshot_times}
    rows = []
    snapshots = {}

    def take_snapshot(idx):
        if idx in snap_steps:
            snapshots[snap_steps[idx]] = [state.class_windows(c).copy()
                                          for c in range(state.n_classes)]

    for i in range(n_steps):
        take_snapshot(i)
        rows.append(_step_core(state, dt))

    # closing row at the horizon itself
    _ensure_grid(state, dt)
    take_snapshot(n_steps)
    t = state.step_idx * dt
    past = [past_state(state.path, t, float(T)) for T in state.T]
    R_now = np.array([p.R for p in past])
    class_sums = np.array([state.W[s].sum() for s in state.class_slices])
    counts = np.array([s.stop - s.start for s in state.class_slices])
    S_bar = float(np.sum(class_sums / R_now)) / state.N
    K, state.on_boundary = _loss_probability(state, state._pending_Q, S_bar)
    state.path.record(t, state._pending_Q, K)
    state.history.push(state.step_idx, state.W)
    rows.append((t, state._pending_Q, K, S_bar, class_sums / counts, R_now))

    return RunRecord(
        t=np.array([r[0] for r in rows]),
        Q=np.array([r[1] for r in rows]),
        K=np.array([r[2] for r in rows]),
        S_bar=np.array([r[3] for r in rows]),
        W_bar=np.array([r[4] for r in rows]),
        R=np.array([r[5] for r in rows]),
        N=N, seed=seed, dt=dt, kappa_eff=state.kappa_eff,
        snapshots=snapshots)
