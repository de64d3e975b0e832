"""Queue trajectory storage and round-trip-time inversion.

The round trip time of a packet arriving at the bottleneck at time ``t``
satisfies the implicit equation ``R = T_c + Q(t - R)/L``: the packet left
its source one RTT ago and its RTT is the propagation delay plus the
queueing delay it saw on departure.  Writing ``g(s) = s + T_c + Q(s)/L``
for the arrival time of a packet departing at ``s``, ``g`` is strictly
increasing (the queue never drains faster than the link rate), so the
departure time solving ``g(s) = t`` is unique and monotone root-finding
applies.

``QueuePath`` stores ``(Q, K)`` on a uniform time grid.  ``K`` is stored
alongside ``Q`` rather than recomputed from it because on the ``q_max``
boundary the loss probability is not a function of the queue level alone.
Lookups interpolate ``Q`` linearly but take ``K`` from the nearest earlier
sample, since ``K`` may jump at the boundary and interpolating across a
jump would be wrong.

Concurrency: single writer, multiple readers.  The writer only appends;
readers must not look up beyond the last committed sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_REC_TOL = 1e-9  # grid-time slack and negative-Q reflection tolerance


@dataclass(frozen=True)
class RttSolution:
    """Solved round trip time: ``R = t - s`` with ``g(s) = t``."""

    R: float
    t: float
    s: float


@dataclass(frozen=True)
class PastState:
    """Delayed quantities one RTT in the past, as seen from time ``t``.

    ``R`` is the RTT at ``t``; ``Q_past``/``K_past`` are the queue and
    loss probability at ``s = t - R``; ``R_past`` is the RTT at ``s``,
    which requires a second inversion.
    """

    R: float
    Q_past: float
    K_past: float
    R_past: float


class QueuePath:
    """Uniformly sampled ``(Q, K)`` trajectory with constant prehistory.

    Before the start time the path is ``(q0, k0)``, matching the
    convention that windows and queue are frozen before time zero.
    Samples must arrive in grid order; small negative queue values from
    reflection round-off are clamped to zero.
    """

    def __init__(self, t0: float, dt: float, q0: float, k0: float, L: float,
                 q_cap: float):
        if dt <= 0.0:
            raise ValueError("sample spacing dt must be positive")
        self.t0 = float(t0)
        self.dt = float(dt)
        self.q0 = float(q0)
        self.k0 = float(k0)
        self.L = float(L)
        self.q_cap = float(q_cap)
        self._n = 0
        cap = 1024
        self._q = np.empty(cap)
        self._k = np.empty(cap)
        # arrival times g(s_i) = s_i + Q_i/L on the grid, kept sorted for
        # class-independent inversion (the T_c offset is applied per query)
        self._g = np.empty(cap)

    def __len__(self) -> int:
        return self._n

    @property
    def t_end(self) -> float:
        """Time of the last committed sample; t0 - dt when empty."""
        return self.t0 + (self._n - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self._n)

    @property
    def Q(self) -> np.ndarray:
        return self._q[:self._n]

    @property
    def K(self) -> np.ndarray:
        return self._k[:self._n]

    def _grow(self):
        cap = 2 * len(self._q)
        for name in ("_q", "_k", "_g"):
            arr = getattr(self, name)
            new = np.empty(cap)
            new[:self._n] = arr[:self._n]
            setattr(self, name, new)

    def record(self, t: float, Q: float, K: float) -> None:
        """Append the sample at the next grid time; out-of-order writes fail."""
        expected = self.t0 + self._n * self.dt
        if abs(t - expected) > _REC_TOL * self.dt:
            raise ValueError(
                f"record at t={t} but next grid time is {expected} (dt={self.dt})")
        if Q < 0.0:
            if Q < -_REC_TOL:
                raise ValueError(f"queue level {Q} below reflection tolerance")
            Q = 0.0
        if Q > self.q_cap:
            if Q > self.q_cap + _REC_TOL:
                raise ValueError(f"queue level {Q} above ceiling {self.q_cap}")
            Q = self.q_cap
        if self._n == len(self._q):
            self._grow()
        self._q[self._n] = Q
        self._k[self._n] = K
        self._g[self._n] = expected + Q / self.L
        self._n += 1

    def lookup(self, s: float) -> tuple[float, float]:
        """(Q, K) at time ``s``: Q linearly interpolated, K left-nearest."""
        if s < self.t0:
            return self.q0, self.k0
        if self._n == 0 or s > self.t_end + _REC_TOL * self.dt:
            raise ValueError(f"lookup at {s} beyond last sample {self.t_end}")
        x = (s - self.t0) / self.dt
        i = min(int(x), self._n - 1)
        frac = x - i
        # snap to grid points so float fuzz never smears K across a jump
        if frac > 1.0 - _REC_TOL and i + 1 < self._n:
            i, frac = i + 1, 0.0
        if i + 1 >= self._n or frac <= _REC_TOL:
            return float(self._q[i]), float(self._k[i])
        q = self._q[i] * (1.0 - frac) + self._q[i + 1] * frac
        return float(q), float(self._k[i])

    def lookup_q(self, s: np.ndarray) -> np.ndarray:
        """Vectorized linear interpolation of Q (prehistory included)."""
        s = np.asarray(s, dtype=float)
        if self._n == 0:
            return np.full(s.shape, self.q0)
        if self._n == 1:
            return np.where(s < self.t0, self.q0, self._q[0])
        x = np.clip((s - self.t0) / self.dt, 0.0, self._n - 1.0)
        i = np.minimum(x.astype(int), self._n - 2)
        frac = np.clip(x - i, 0.0, 1.0)
        q = self._q[i] * (1.0 - frac) + self._q[i + 1] * frac
        return np.where(s < self.t0, self.q0, q)


def rtt_at_arrival(path: QueuePath, t: float, T_c: float) -> RttSolution:
    """Solve ``R = T_c + Q(t - R)/L`` for a packet arriving at time ``t``.

    Monotone root-finding on ``g(s) = s + T_c + Q(s)/L``: a bisection over
    the sorted per-sample arrival times locates the bracketing grid cell,
    inside which ``Q`` is linear so the root is solved exactly.  Residual
    ``|g(t - R) - t|`` stays below 1e-9 seconds.
    """
    target = t - T_c  # find s with s + Q(s)/L = target
    g0 = path.t0 + path.q0 / path.L
    if path._n == 0 or target <= g0:
        # departure in the constant prehistory (Q = q0 before the start;
        # with an empty path the whole axis carries the prehistory value)
        s = target - path.q0 / path.L
        return RttSolution(R=t - s, t=t, s=s)
    g = path._g[:path._n]
    if target > g[-1] + _REC_TOL:
        raise ValueError(
            f"insufficient history: arrival {t} needs departures up to "
            f"{target} but path covers {g[-1]}")
    i = int(np.searchsorted(g, target, side="right")) - 1
    if i >= path._n - 1:
        s = path.t_end
    else:
        lo, hi = g[i], g[i + 1]
        frac = 0.0 if hi <= lo else (target - lo) / (hi - lo)
        s = path.t0 + (i + frac) * path.dt
    return RttSolution(R=t - s, t=t, s=s)


def past_state(path: QueuePath, t: float, T_c: float) -> PastState:
    """Delayed loss-intensity factors: RTT now, then (Q, K, RTT) one RTT back.

    Composes two inversions: the first gives ``s = t - R(t)``, the second
    evaluates the RTT at ``s`` itself, which controls how fast losses from
    around ``s`` were generated.
    """
    first = rtt_at_arrival(path, t, T_c)
    q_past, k_past = path.lookup(first.s) if first.s >= path.t0 else (path.q0, path.k0)
    second = rtt_at_arrival(path, first.s, T_c)
    return PastState(R=first.R, Q_past=q_past, K_past=k_past, R_past=second.R)
