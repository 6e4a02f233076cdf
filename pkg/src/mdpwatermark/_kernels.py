"""Hot loops for simulation and detection, JIT-compiled when numba is present.

The core functions are written in plain array code so the same source
runs with or without numba; the compiled path only removes interpreter
overhead.  Monte Carlo batches call these per replicate.

Random-number contract: the simulation core consumes two plant uniforms
and two attacker uniforms per step, passed in as ``(horizon, 2)``
blocks.  Because the reference implementation in
:mod:`mdpwatermark.mdp` draws the same blocks from the same streams,
both paths produce bit-identical trajectories for a given
``(root_seed, replicate)``.
"""

from __future__ import annotations

import numpy as np

from . import rng as _rng

try:
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, kept soft for safety
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(f):
            return f

        return deco


KIND_NULL = 0
KIND_MATRIX = 1
KIND_PREDICTIVE = 2
KIND_VIRTUAL = 3


@njit(cache=True, nogil=True)
def _pick(cumrow, u):
    k = cumrow.shape[0]
    for i in range(k - 1):
        if cumrow[i] > u:
            return i
    return k - 1


@njit(cache=True, nogil=True)
def _sim_core(x0, horizon, tau, kind, map_mode, n, m, gcum, rcum,
              gam_att, rmat_att, gcum_att, rcum_att, phicum, plant_u, att_u):
    X = np.empty(horizon, dtype=np.int64)
    Y = np.empty(horizon, dtype=np.int64)
    A = np.empty(horizon, dtype=np.int64)
    x = x0
    xhat = 0
    for t in range(horizon):
        X[t] = x
        if t < tau:
            y = x
        elif t == tau:
            y = x
            if kind == KIND_VIRTUAL:
                xhat = x
        else:
            if kind == KIND_NULL:
                y = x
            elif kind == KIND_MATRIX:
                y = _pick(phicum[X[t - 1] * n + x], att_u[t, 0])
            elif kind == KIND_PREDICTIVE:
                xp = X[t - 1]
                total = 0.0
                best = 0
                best_w = -1.0
                for j in range(m):
                    w = gam_att[xp, j] * rmat_att[xp * m + j, x]
                    total += w
                    if w > best_w:
                        best_w = w
                        best = j
                if map_mode:
                    a_hat = best
                else:
                    target = att_u[t, 0] * total
                    acc = 0.0
                    a_hat = m - 1
                    for j in range(m - 1):
                        acc += gam_att[xp, j] * rmat_att[xp * m + j, x]
                        if acc > target:
                            a_hat = j
                            break
                y = _pick(rcum_att[xp * m + a_hat], att_u[t, 1])
            else:  # KIND_VIRTUAL
                a_hat = _pick(gcum_att[xhat], att_u[t, 0])
                xhat = _pick(rcum_att[xhat * m + a_hat], att_u[t, 1])
                y = xhat
        Y[t] = y
        a = _pick(gcum[y], plant_u[t, 0])
        A[t] = a
        if t + 1 < horizon:
            x = _pick(rcum[x * m + a], plant_u[t, 1])
    return X, Y, A


@njit(cache=True, nogil=True)
def _detect_core(ys, acts, tri_index, row_of_sup, logp_sup, row_ptr, row_sup,
                 M, W, c, off_alarm, collect, log_table):
    T = ys.shape[0] - 1
    s_count = row_of_sup.shape[0]
    nm = row_ptr.shape[0] - 1
    cap = T + 2 if W < 0 else W + M + 3
    cand_k = np.empty(cap, dtype=np.int64)
    cand_S = np.zeros(cap)
    cand_d = np.zeros((cap, s_count), dtype=np.int64)
    cand_D = np.zeros((cap, nm), dtype=np.int64)
    cand_blk = np.zeros((cap, nm))
    head = 0
    size = 0
    z_S = 0.0
    z_d = np.zeros(s_count, dtype=np.int64)
    z_D = np.zeros(nm, dtype=np.int64)
    z_blk = np.zeros(nm)
    trace_nobs = np.empty(T, dtype=np.int64)
    trace_scores = np.empty(T)
    trace_len = 0
    n_trans = 0
    alarm = np.int64(-1)
    n_obs = np.int64(1)
    for t in range(T):
        n_obs = t + 2
        pos = tri_index[ys[t], acts[t], ys[t + 1]]
        if pos < 0:
            if off_alarm:
                alarm = n_obs
                break
            continue  # clip: drop the transition entirely
        row = row_of_sup[pos]
        if n_trans > 0:
            slot = (head + size) % cap
            cand_k[slot] = n_trans
            cand_S[slot] = 0.0
            for i in range(s_count):
                cand_d[slot, i] = 0
            for i in range(nm):
                cand_D[slot, i] = 0
                cand_blk[slot, i] = 0.0
            size += 1
        z_d[pos] += 1
        z_D[row] += 1
        acc = 0.0
        logD = log_table[z_D[row]]
        for idx in range(row_ptr[row], row_ptr[row + 1]):
            sp = row_sup[idx]
            dd = z_d[sp]
            if dd > 0:
                acc += dd * (log_table[dd] - logD - logp_sup[sp])
        if acc < 0.0:
            acc = 0.0
        z_S += acc - z_blk[row]
        z_blk[row] = acc
        for r in range(size):
            slot = (head + r) % cap
            cand_d[slot, pos] += 1
            cand_D[slot, row] += 1
            acc = 0.0
            logD = log_table[cand_D[slot, row]]
            for idx in range(row_ptr[row], row_ptr[row + 1]):
                sp = row_sup[idx]
                dd = cand_d[slot, sp]
                if dd > 0:
                    acc += dd * (log_table[dd] - logD - logp_sup[sp])
            if acc < 0.0:
                acc = 0.0
            cand_S[slot] += acc - cand_blk[slot, row]
            cand_blk[slot, row] = acc
        n_trans += 1
        if n_trans >= M:
            if W >= 0:
                cutoff = n_trans - M - W
                while size > 0 and cand_k[head] <= cutoff:
                    head = (head + 1) % cap
                    size -= 1
            limit = n_trans - M
            best = z_S
            for r in range(size):
                slot = (head + r) % cap
                if cand_k[slot] > limit:
                    break
                if cand_S[slot] > best:
                    best = cand_S[slot]
            if collect:
                trace_nobs[trace_len] = n_obs
                trace_scores[trace_len] = best
                trace_len += 1
            if best > c:
                alarm = n_obs
                break
    if alarm < 0:
        n_obs = ys.shape[0]
    return alarm, n_obs, trace_nobs, trace_scores, trace_len


@njit(cache=True, nogil=True)
def discounted_path_cost(X, A, h, alpha):
    """Realized discounted cost of one trajectory, truncated at the horizon."""
    total = 0.0
    w = 1.0
    for t in range(X.shape[0]):
        total += w * h[X[t], A[t]]
        w *= alpha
    return total


class SimPlan:
    """Precomputed sampling tables for repeated trajectory simulation."""

    def __init__(self, R, gamma, attack):
        from .mdp import cumulative_rows

        self.n = R.n
        self.m = R.m
        self.gcum = cumulative_rows(gamma.matrix)
        self.rcum = cumulative_rows(R.matrix)
        self.kind = getattr(attack, "kind_code", None)
        if self.kind is None:
            raise ValueError("attack strategy does not expose a kind code")
        self.map_mode = getattr(attack, "mode", "sample") == "map"
        if self.kind == KIND_MATRIX:
            if attack.phi.n != R.n:
                raise ValueError("attack matrix state count does not match kernel")
            self.phicum = cumulative_rows(attack.phi.matrix)
        else:
            self.phicum = np.zeros((1, 1))
        if self.kind in (KIND_PREDICTIVE, KIND_VIRTUAL):
            if attack.R.n != R.n or attack.R.m != R.m:
                raise ValueError("attacker model dimensions do not match the plant")
            self.gam_att = attack.gamma.matrix
            self.rmat_att = attack.R.matrix
            self.gcum_att = cumulative_rows(attack.gamma.matrix)
            self.rcum_att = cumulative_rows(attack.R.matrix)
        else:
            self.gam_att = gamma.matrix
            self.rmat_att = R.matrix
            self.gcum_att = self.gcum
            self.rcum_att = self.rcum

    def run(self, horizon, tau, root_seed, replicate, x0=0):
        plant_rng, attacker_rng = _rng.replicate_streams(root_seed, replicate)
        plant_u = plant_rng.random((horizon, 2))
        att_u = attacker_rng.random((horizon, 2))
        tau_eff = horizon if tau is None else int(tau)
        return _sim_core(
            x0, horizon, tau_eff, self.kind, self.map_mode, self.n, self.m,
            self.gcum, self.rcum, self.gam_att, self.rmat_att,
            self.gcum_att, self.rcum_att, self.phicum, plant_u, att_u,
        )


def simulate_compiled(R, gamma, attack, horizon, tau, root_seed, replicate, x0):
    return SimPlan(R, gamma, attack).run(horizon, tau, root_seed, replicate, x0)


class DetectPlan:
    """Precomputed support tables for repeated detector runs."""

    def __init__(self, kernel, config):
        p3 = kernel.as3d
        self.n = kernel.n
        self.m = kernel.m
        mask = p3 > 0.0
        sup = np.argwhere(mask)
        self.tri_index = np.full((kernel.n, kernel.m, kernel.n), -1, dtype=np.int64)
        self.tri_index[sup[:, 0], sup[:, 1], sup[:, 2]] = np.arange(len(sup))
        self.row_of_sup = (sup[:, 0] * kernel.m + sup[:, 1]).astype(np.int64)
        self.logp_sup = np.log(p3[mask])
        nm = kernel.n * kernel.m
        counts = np.bincount(self.row_of_sup, minlength=nm)
        self.row_ptr = np.zeros(nm + 1, dtype=np.int64)
        np.cumsum(counts, out=self.row_ptr[1:])
        self.row_sup = np.arange(len(sup), dtype=np.int64)  # already grouped by row
        self.M = int(config.M)
        self.W = -1 if config.W is None else int(config.W)
        self.c = float(config.c)
        self.off_alarm = config.off_support == "alarm"

    def run(self, ys, acts, collect_trace=False):
        T = len(ys) - 1
        log_table = np.zeros(T + 2)
        log_table[1:] = np.log(np.arange(1, T + 2, dtype=float))
        return _detect_core(
            np.ascontiguousarray(ys, dtype=np.int64),
            np.ascontiguousarray(acts, dtype=np.int64),
            self.tri_index, self.row_of_sup, self.logp_sup, self.row_ptr, self.row_sup,
            self.M, self.W, self.c, self.off_alarm, collect_trace, log_table,
        )


def detect_stream(ys, acts, kernel, config, collect_trace=False):
    from .detector import DetectionOutcome

    plan = DetectPlan(kernel, config)
    alarm, n_obs, trace_nobs, trace_scores, trace_len = plan.run(ys, acts, collect_trace)
    return DetectionOutcome(
        alarm_time=None if alarm < 0 else int(alarm),
        censored=alarm < 0,
        n_obs=int(n_obs),
        trace_nobs=trace_nobs[:trace_len].copy() if collect_trace else None,
        trace_scores=trace_scores[:trace_len].copy() if collect_trace else None,
    )
