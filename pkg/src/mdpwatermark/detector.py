"""Sequential change detection over reported (observation, action) pairs.

The detector watches the stream ``(Y_t, A_t)`` and tests whether
transitions ``Y_t -> Y_{t+1}`` given ``A_t`` still follow the nominal
kernel.  For a candidate change point ``k`` the segment score is the
count-weighted log-likelihood ratio

    S_{k:n} = sum over supported triples (l, j, l') of
              d * log(qhat / p),    qhat = d / D,

where ``d`` counts the triple inside the segment, ``D`` the (l, j) row
total, and ``p`` the nominal conditional probability.  Rows never
visited contribute zero (the empty estimate is the zero vector), and the
score regroups into a sum of count-weighted KL divergences, hence is
nonnegative; each row block is floored at zero to keep round-off from
leaking tiny negative values.  The running statistic is the maximum of
``S_{k:n}`` over retained candidates with at least ``M`` transitions,
and an alarm is raised at its first excursion above the threshold ``c``.

Candidate bookkeeping: every recorded transition spawns a candidate;
a finite window ``W`` retains the ``W`` most recent eligible candidates
plus the stream origin ``k = 0`` (``W=None`` retains everything, the
exact mode).  Observed transitions with nominal probability zero are
handled per the configured policy: ``"alarm"`` raises immediately,
``"clip"`` drops the transition from the counts entirely.

The detector never reads the true state; it is a pure function of the
reported stream and its configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import TransitionKernel

OFF_SUPPORT_POLICIES = ("alarm", "clip")


@dataclass(frozen=True)
class DetectorConfig:
    """Threshold ``c``, minimum segment length ``M``, candidate window ``W``."""

    c: float
    M: int
    W: int | None = 500
    off_support: str = "alarm"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"threshold c must be positive, got {self.c}")
        if self.M < 1:
            raise ValueError(f"minimum segment length M must be >= 1, got {self.M}")
        if self.W is not None and self.W < self.M:
            raise ValueError(f"candidate window W must be >= M, got W={self.W}, M={self.M}")
        if self.off_support not in OFF_SUPPORT_POLICIES:
            raise ValueError(f"off_support must be one of {OFF_SUPPORT_POLICIES}, got {self.off_support!r}")


class TransitionCounts:
    """Prefix counts of observed transitions, with the raw stream kept.

    ``cum[l, j, l']`` counts recorded transitions so far.  The stream is
    retained so that any segment can be recounted from scratch, which is
    the independent path used to validate the incremental statistic.
    """

    def __init__(self, n: int, m: int):
        self.n = int(n)
        self.m = int(m)
        self.cum = np.zeros((n, m, n), dtype=np.int64)
        self._ls: list[int] = []
        self._js: list[int] = []
        self._lps: list[int] = []

    @property
    def n_trans(self) -> int:
        return len(self._ls)

    def add(self, l: int, j: int, lp: int) -> None:
        self.cum[l, j, lp] += 1
        self._ls.append(l)
        self._js.append(j)
        self._lps.append(lp)

    def counts_between(self, k: int, end: int) -> np.ndarray:
        """Recount transitions with index in ``[k, end)`` from the stream."""
        if not 0 <= k <= end <= self.n_trans:
            raise ValueError(f"invalid transition range [{k}, {end})")
        out = np.zeros((self.n, self.m, self.n), dtype=np.int64)
        for s in range(k, end):
            out[self._ls[s], self._js[s], self._lps[s]] += 1
        return out


def qhat(counts: TransitionCounts, k: int, n: int, l: int, j: int) -> np.ndarray:
    """Plug-in conditional estimate for row ``(l, j)`` over segment ``k:n``.

    ``k`` is the candidate change point and ``n`` the observation count;
    the segment covers transitions ``k .. n-2``.  Returns the all-zero
    vector when the row was never visited.
    """
    d = counts.counts_between(k, n - 1)[l, j].astype(float)
    total = d.sum()
    if total == 0:
        return np.zeros(counts.n)
    return d / total


def score_from_counts(dcounts: np.ndarray, logp3: np.ndarray, support_mask: np.ndarray) -> float:
    """Segment score from a tensor of segment counts.

    Returns ``math.inf`` if any counted transition lies outside the
    nominal support (probability-zero under no attack).
    """
    if np.any(dcounts[~support_mask] > 0):
        return math.inf
    score = 0.0
    row_totals = dcounts.sum(axis=2)
    for l, j in np.argwhere(row_totals > 0):
        d = dcounts[l, j]
        pos = d > 0
        dpos = d[pos].astype(float)
        block = float(np.sum(dpos * (np.log(dpos / row_totals[l, j]) - logp3[l, j, pos])))
        score += max(block, 0.0)
    return score


def segment_score(counts: TransitionCounts, k: int, n: int, kernel: TransitionKernel,
                  support_mask: np.ndarray | None = None) -> float:
    """From-scratch segment score over transitions ``k .. n-2``."""
    p3 = kernel.as3d
    if support_mask is None:
        support_mask = p3 > 0.0
    logp3 = np.where(support_mask, np.log(np.where(support_mask, p3, 1.0)), -np.inf)
    return score_from_counts(counts.counts_between(k, n - 1), logp3, support_mask)


@dataclass
class _Candidate:
    k: int
    snapshot: np.ndarray  # prefix count tensor at spawn time


@dataclass
class DetectionOutcome:
    """Result of running the detector over one stream."""

    alarm_time: int | None
    censored: bool
    n_obs: int
    trace_nobs: np.ndarray | None = None
    trace_scores: np.ndarray | None = None

    @property
    def alarmed(self) -> bool:
        return self.alarm_time is not None


class DetectorState:
    """Streaming detector state: counts, candidates, running statistic.

    Single-threaded per stream; ``observe`` records one transition and
    returns the state, ``cusum_step`` refreshes the running maximum and
    the alarm flag.
    """

    def __init__(self, kernel: TransitionKernel, config: DetectorConfig):
        self.kernel = kernel
        self.config = config
        p3 = kernel.as3d
        self.support_mask = p3 > 0.0
        self._logp3 = np.where(self.support_mask, np.log(np.where(self.support_mask, p3, 1.0)), -np.inf)
        self.counts = TransitionCounts(kernel.n, kernel.m)
        self.n_obs = 0
        self.score = 0.0
        self.alarmed = False
        self.alarm_time: int | None = None
        self._cands: list[_Candidate] = [_Candidate(0, self.counts.cum.copy())]

    def observe(self, y_prev: int, a_prev: int, y_next: int) -> "DetectorState":
        """Record the transition ``(y_prev, a_prev) -> y_next``."""
        n = self.kernel.n
        if not (0 <= y_prev < n and 0 <= y_next < n and 0 <= a_prev < self.kernel.m):
            raise ValueError("observation or action index out of range")
        self.n_obs = 2 if self.n_obs == 0 else self.n_obs + 1
        if not self.support_mask[y_prev, a_prev, y_next]:
            if self.config.off_support == "alarm":
                if not self.alarmed:
                    self.alarmed = True
                    self.alarm_time = self.n_obs
            # clip: the impossible transition is dropped from the counts
            return self
        k_new = self.counts.n_trans
        if k_new > 0:
            self._cands.append(_Candidate(k_new, self.counts.cum.copy()))
        self.counts.add(y_prev, a_prev, y_next)
        if self.config.W is not None:
            cutoff = self.counts.n_trans - self.config.M - self.config.W
            self._cands = [c for c in self._cands if c.k == 0 or c.k > cutoff]
        return self

    def eligible_candidates(self) -> list[int]:
        limit = self.counts.n_trans - self.config.M
        return [c.k for c in self._cands if c.k <= limit]

    def cusum_step(self) -> tuple[float, bool]:
        """Refresh ``T_n(M)`` and the alarm flag; returns ``(score, alarmed)``."""
        n_trans = self.counts.n_trans
        if n_trans < self.config.M:
            return self.score, self.alarmed
        limit = n_trans - self.config.M
        best = 0.0
        for cand in self._cands:
            if cand.k > limit:
                continue
            s = score_from_counts(self.counts.cum - cand.snapshot, self._logp3, self.support_mask)
            assert s >= 0.0
            if s > best:
                best = s
        self.score = best
        if not self.alarmed and best > self.config.c:
            self.alarmed = True
            self.alarm_time = self.n_obs
        return self.score, self.alarmed


def run_detector(
    ys,
    acts,
    kernel: TransitionKernel,
    config: DetectorConfig,
    collect_trace: bool = False,
    engine: str = "auto",
) -> DetectionOutcome:
    """Run the detector over a full reported stream.

    ``ys`` are the observations and ``acts`` the issued actions (the
    final action is unused).  Stops at the first alarm.  ``engine``
    selects the pure-Python reference implementation or the compiled
    fast path (``"auto"`` prefers compiled when available); both produce
    the same outcomes.
    """
    ys = np.asarray(ys, dtype=np.int64)
    acts = np.asarray(acts, dtype=np.int64)
    if ys.ndim != 1 or len(ys) < 2:
        raise ValueError("need at least two observations")
    if len(acts) < len(ys) - 1:
        raise ValueError("need one action per transition")
    if engine not in ("auto", "reference", "compiled"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine != "reference":
        from . import _kernels

        if _kernels.HAVE_NUMBA or engine == "compiled":
            return _kernels.detect_stream(ys, acts, kernel, config, collect_trace)
    state = DetectorState(kernel, config)
    trace_nobs: list[int] = []
    trace_scores: list[float] = []
    for t in range(len(ys) - 1):
        before = state.counts.n_trans
        state.observe(int(ys[t]), int(acts[t]), int(ys[t + 1]))
        recorded = state.counts.n_trans > before
        score, alarmed = state.cusum_step()
        if collect_trace and recorded and state.counts.n_trans >= config.M:
            trace_nobs.append(state.n_obs)
            trace_scores.append(score)
        if alarmed:
            break
    return DetectionOutcome(
        alarm_time=state.alarm_time,
        censored=not state.alarmed,
        n_obs=state.n_obs,
        trace_nobs=np.asarray(trace_nobs, dtype=np.int64) if collect_trace else None,
        trace_scores=np.asarray(trace_scores, dtype=float) if collect_trace else None,
    )
