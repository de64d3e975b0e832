"""Shared model types, drop-probability curves, and global bounds.

Everything here is per-flow normalized: queue levels are packets per flow
and the link rate is packets per second per flow, so the same numbers
describe both the finite-N system and its large-N limit. All objects are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RED = "red"
GENTLE = "gentle"
TAILDROP = "taildrop"

_VARIANTS = (RED, GENTLE, TAILDROP)

KAPPA_TOL = 1e-12


@dataclass(frozen=True)
class RedConfig:
    """Drop-curve and link parameters of the bottleneck.

    The drop probability is 0 below ``q_min``, rises linearly to ``p_max``
    at ``q_max`` and jumps to 1 there.  The gentle variant instead ramps
    linearly from ``p_max`` at ``q_max`` to 1 at ``q_max + delta``, which
    makes the curve Lipschitz.  Tail-drop keeps the queue lossless until
    the buffer ``b`` is full.

    Attributes:
        q_min: lower drop threshold (packets/flow).
        q_max: upper drop threshold (packets/flow).
        p_max: drop probability reached at ``q_max``.
        b: buffer capacity (packets/flow).
        L: link rate (packets/second/flow).
        variant: one of ``"red"``, ``"gentle"``, ``"taildrop"``.
        delta: width of the gentle ramp (packets/flow), gentle only.
    """

    q_min: float
    q_max: float
    p_max: float
    b: float
    L: float
    variant: str = RED
    delta: float = 0.0

    @staticmethod
    def red(q_min: float, q_max: float, p_max: float, b: float, L: float) -> "RedConfig":
        return RedConfig(q_min, q_max, p_max, b, L, RED)

    @staticmethod
    def gentle(q_min: float, q_max: float, p_max: float, b: float, L: float,
               delta: float) -> "RedConfig":
        return RedConfig(q_min, q_max, p_max, b, L, GENTLE, delta)

    @staticmethod
    def taildrop(b: float, L: float) -> "RedConfig":
        # tail-drop is the limiting curve q_min = 0, q_max = b, p_max = 0
        return RedConfig(0.0, b, 0.0, b, L, TAILDROP)

    @property
    def queue_ceiling(self) -> float:
        """Highest queue level the dynamics can reach under this curve."""
        if self.variant == GENTLE:
            return self.q_max + self.delta
        return self.q_max

    def violations(self) -> list[str]:
        out = []
        if not (0.0 <= self.q_min < self.q_max):
            out.append(f"drop thresholds need 0 <= q_min < q_max, got ({self.q_min}, {self.q_max})")
        if self.q_max > self.b:
            out.append(f"q_max={self.q_max} exceeds buffer b={self.b}")
        if not (0.0 <= self.p_max <= 1.0):
            out.append(f"p_max={self.p_max} outside [0, 1]")
        if not self.L > 0.0:
            out.append(f"link rate L={self.L} must be positive")
        if self.variant not in _VARIANTS:
            out.append(f"unknown variant {self.variant!r}")
        if self.variant == GENTLE:
            if not self.delta > 0.0:
                out.append(f"gentle ramp width delta={self.delta} must be positive")
            elif self.q_max + self.delta > self.b:
                out.append(
                    f"gentle ramp exceeds buffer: q_max + delta = "
                    f"{self.q_max + self.delta} > b = {self.b}")
        return out


@dataclass(frozen=True)
class FlowClass:
    """One class of flows: common propagation delay and population weight.

    Attributes:
        T: propagation (transmission) delay in seconds, T > 0.
        kappa: fraction of flows in this class; weights sum to 1.
    """

    T: float
    kappa: float


class InitialLaw:
    """Initial window distribution of one class, supported on [0, W_max].

    Four kinds are supported: ``point`` (all windows equal), ``uniform``
    (continuous uniform on an interval), ``samples`` (draw i.i.d. from a
    finite set), and ``explicit`` (assign a given list to the flows of the
    class verbatim, one value per flow).
    """

    def __init__(self, kind: str, **params):
        if kind not in ("point", "uniform", "samples", "explicit"):
            raise ValueError(f"unknown initial law kind {kind!r}")
        self.kind = kind
        self.params = params

    @staticmethod
    def point(w: float) -> "InitialLaw":
        return InitialLaw("point", w=float(w))

    @staticmethod
    def uniform(lo: float, hi: float) -> "InitialLaw":
        return InitialLaw("uniform", lo=float(lo), hi=float(hi))

    @staticmethod
    def samples(values) -> "InitialLaw":
        return InitialLaw("samples", values=np.asarray(values, dtype=float))

    @staticmethod
    def explicit(values) -> "InitialLaw":
        return InitialLaw("explicit", values=np.asarray(values, dtype=float))

    def support(self) -> tuple[float, float]:
        p = self.params
        if self.kind == "point":
            return p["w"], p["w"]
        if self.kind == "uniform":
            return p["lo"], p["hi"]
        v = p["values"]
        return float(v.min()), float(v.max())

    def mean(self) -> float:
        p = self.params
        if self.kind == "point":
            return p["w"]
        if self.kind == "uniform":
            return 0.5 * (p["lo"] + p["hi"])
        return float(p["values"].mean())

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.params
        if self.kind == "point":
            return np.full(size, p["w"])
        if self.kind == "uniform":
            return rng.uniform(p["lo"], p["hi"], size)
        if self.kind == "samples":
            return rng.choice(p["values"], size=size, replace=True)
        v = p["values"]
        if len(v) != size:
            raise ValueError(f"explicit initial list has {len(v)} values for {size} flows")
        return v.copy()

    def atoms(self, resolution: int = 2000) -> tuple[np.ndarray, np.ndarray]:
        """Finite atomization (points, weights) used to grid the law."""
        p = self.params
        if self.kind == "point":
            return np.array([p["w"]]), np.array([1.0])
        if self.kind == "uniform":
            lo, hi = p["lo"], p["hi"]
            if hi <= lo:
                return np.array([lo]), np.array([1.0])
            mids = lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
            return mids, np.full(resolution, 1.0 / resolution)
        v = p["values"]
        return v.astype(float), np.full(len(v), 1.0 / len(v))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k, v in self.params.items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d


@dataclass(frozen=True)
class ModelConfig:
    """Full model description shared by the simulator and the solver.

    Attributes:
        classes: flow classes (delays and weights).
        red: bottleneck drop curve and link rate.
        W_max: bound on the initial windows (packets).
        q0: initial per-flow queue (packets/flow).
        horizon: simulated time span (seconds).
        initial: one initial window law per class.
    """

    classes: tuple[FlowClass, ...]
    red: RedConfig
    W_max: float
    q0: float
    horizon: float
    initial: tuple[InitialLaw, ...]

    @property
    def T_min(self) -> float:
        return min(c.T for c in self.classes)

    @property
    def T_max(self) -> float:
        return max(c.T for c in self.classes)

    @property
    def rtt_ceiling(self) -> float:
        """Upper bound on every round trip time."""
        return self.T_max + self.red.queue_ceiling / self.red.L


def drop_prob(cfg: RedConfig, q):
    """Drop probability of the configured curve at queue level ``q``.

    Accepts a scalar or an array; raises ``ValueError`` when any value
    falls outside [0, b], which signals a queue-integration bug upstream.
    Nondecreasing in ``q`` and right-continuous at ``q_max``.
    """
    arr = np.asarray(q, dtype=float)
    if np.any(arr < -1e-9) or np.any(arr > cfg.b + 1e-9):
        raise ValueError(f"queue level {q} outside [0, {cfg.b}]")
    arr = np.clip(arr, 0.0, cfg.b)
    ramp = cfg.p_max * (arr - cfg.q_min) / (cfg.q_max - cfg.q_min)
    out = np.where(arr <= cfg.q_min, 0.0, np.where(arr < cfg.q_max, ramp, 1.0))
    if cfg.variant == GENTLE:
        upper = cfg.p_max + (1.0 - cfg.p_max) * (arr - cfg.q_max) / cfg.delta
        out = np.where((arr >= cfg.q_max) & (arr < cfg.q_max + cfg.delta), upper, out)
    if np.ndim(q) == 0:
        return float(out)
    return out


def boundary_loss_K(cfg: RedConfig, S_bar: float) -> float:
    """Loss probability while the queue jitters pinned at ``q_max``.

    The queue sticks at the threshold when the offered rate exceeds the
    link rate even under maximal ramp dropping; the loss probability then
    adjusts so that admitted inflow matches the link rate.  Returns
    ``max(p_max, 1 - L/S_bar)``; when the result equals ``p_max`` the
    caller must let the queue leave the boundary.

    Args:
        S_bar: aggregate transmission rate (packets/second/flow), > 0.
    """
    if not S_bar > 0.0:
        raise ValueError(f"transmission rate must be positive, got {S_bar}")
    return max(cfg.p_max, 1.0 - cfg.L / S_bar)


def current_loss_probability(red: RedConfig, Q: float, S_bar: float,
                             pin_eps: float = 1e-12) -> tuple[float, bool]:
    """Loss probability at queue level ``Q`` given the aggregate rate.

    Interior queue levels read the drop curve; at ``q_max`` the jitter
    branch applies (never for the gentle variant, whose curve continues
    above the threshold).  Returns ``(K, on_boundary)`` where the flag
    says whether the queue is actually stuck at ``q_max``.
    """
    if red.variant != GENTLE and Q >= red.q_max - pin_eps:
        return boundary_loss_K(red, S_bar), (1.0 - red.p_max) * S_bar > red.L
    return drop_prob(red, Q), False


def window_bound(t: float, W_max: float, T_min: float) -> float:
    """Deterministic bound on every window at time ``t``.

    Windows start below ``W_max`` and grow at most one packet per ``T_min``
    seconds, so ``W_max + t/T_min`` dominates every window and, divided by
    ``T_min``, every loss intensity.
    """
    return W_max + t / T_min


def validate_config(cfg: ModelConfig) -> list[str]:
    """Check every structural invariant; returns all violations, not just the first."""
    out = list(cfg.red.violations())
    if not cfg.classes:
        out.append("at least one flow class required")
        return out
    for i, c in enumerate(cfg.classes):
        if not c.T > 0.0:
            out.append(f"class {i}: delay T={c.T} must be positive")
        if not (0.0 <= c.kappa <= 1.0):
            out.append(f"class {i}: weight kappa={c.kappa} outside [0, 1]")
    total = math.fsum(c.kappa for c in cfg.classes)
    if abs(total - 1.0) > KAPPA_TOL:
        out.append(f"class weights sum to {total}, expected 1 within {KAPPA_TOL}")
    if not (0.0 <= cfg.q0 <= cfg.red.q_max):
        out.append(f"initial queue q0={cfg.q0} outside [0, q_max={cfg.red.q_max}]")
    if not cfg.W_max > 0.0:
        out.append(f"W_max={cfg.W_max} must be positive")
    if not cfg.horizon >= 0.0:
        out.append(f"horizon={cfg.horizon} must be nonnegative")
    if len(cfg.initial) != len(cfg.classes):
        out.append(f"{len(cfg.initial)} initial laws for {len(cfg.classes)} classes")
    else:
        for i, law in enumerate(cfg.initial):
            lo, hi = law.support()
            if lo < -1e-12 or hi > cfg.W_max + 1e-12:
                out.append(
                    f"class {i}: initial law support [{lo}, {hi}] "
                    f"not contained in [0, W_max={cfg.W_max}]")
    return out
