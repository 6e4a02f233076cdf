"""Experiment orchestration: config ingestion, seeded Monte Carlo, metrics.

An experiment is described by a JSON document with sections ``model``,
``policy``, ``watermark``, ``attack``, ``detector`` and ``run`` (plus an
optional ``sweep`` section); see the README for the schema.  The
harness builds the runtime objects once, fans replicates out over a
thread pool (the hot loops release the GIL), and reduces per-replicate
outcomes into a metrics row.  Aggregates depend only on the root seed
and the replicate index, never on scheduling order, so reruns are
byte-identical.

Censoring: replicates that never alarm within the horizon are excluded
from delay statistics and enter the mean-time-between-false-alarms
estimate at the horizon value, making it a conservative lower-bound
estimate.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, rng as _rng
from .attack import (
    AttackMatrix,
    MatrixAttack,
    NullAttack,
    PredictiveResamplingAttack,
    VirtualSystemAttack,
    null_attack_matrix,
)
from .bounds import BoundsReport, compute_report
from .detector import DetectorConfig, run_detector
from .mdp import CostFunction, Policy, TransitionKernel, joint_chain_preattack, simulate, stationary_distribution
from .sensornet import PowerModelParams, build_model, projected_kernel, state_index, threshold_policy
from .watermark import WatermarkSpec, control_loss_exact, mix_policy

DEFAULT_BETA_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2)

SWEEP_FIELDS = (
    "beta", "mean_delay", "delay_q25", "delay_q75", "censored_frac",
    "false_alarm_rate", "mtbfa_est", "mean_cost", "cost_se", "replicates", "seed",
)
OUTCOME_FIELDS = ("replicate", "alarm_time", "censored", "tau", "beta", "c", "M")
TRACE_FIELDS = ("t", "score", "alarmed")
LOSS_FIELDS = ("beta", "exact_loss", "empirical_loss")


class ConfigError(ValueError):
    """An experiment configuration is malformed; the message names the field."""


@dataclass(frozen=True)
class MetricsRow:
    """Aggregate metrics of one experiment run."""

    beta: float
    mean_delay: float
    delay_q25: float
    delay_q75: float
    censored_frac: float
    false_alarm_rate: float
    mtbfa_est: float
    mean_cost: float
    cost_se: float
    replicates: int
    seed: int

    def as_list(self) -> list:
        return [getattr(self, f) for f in SWEEP_FIELDS]


@dataclass
class ReplicateOutcomes:
    """Per-replicate raw results, indexed by replicate number."""

    alarm_time: np.ndarray  # -1 when censored
    cost: np.ndarray
    tau: float
    beta: float
    c: float
    M: int
    seed: int

    def rows(self) -> list[list]:
        out = []
        for r in range(len(self.alarm_time)):
            alarmed = self.alarm_time[r] >= 0
            out.append([
                r,
                int(self.alarm_time[r]) if alarmed else "",
                int(not alarmed),
                self.tau if math.isfinite(self.tau) else "inf",
                self.beta,
                self.c,
                self.M,
            ])
        return out


@dataclass
class ExperimentBundle:
    """Runtime objects assembled from a configuration."""

    R: TransitionKernel
    h: CostFunction
    alpha: float
    gamma_star: Policy
    nu: Policy
    beta: float
    gamma: Policy  # deployed (watermarked) policy
    attack: object
    attack_kind: str
    phi: AttackMatrix | None
    tau: int | None
    detector_config: DetectorConfig
    detector_kernel: TransitionKernel
    projection: str
    horizon: int
    replicates: int
    seed: int
    x0: int
    params: PowerModelParams | None
    obs_width: int  # divisor projecting composite observations, 0 = identity

    def project(self, Y: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.obs_width:
            return Y // self.obs_width, A
        return Y, A


def _section(cfg: dict, name: str, required: bool = True) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing config section '{name}'")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return dict(sec)


def _get(sec: dict, section: str, key: str, default=None, required: bool = False):
    if key in sec:
        return sec[key]
    if required:
        raise ConfigError(f"missing field '{section}.{key}'")
    return default


def _positive_int(value, where: str) -> int:
    try:
        iv = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be an integer, got {value!r}") from None
    if iv < 1:
        raise ConfigError(f"{where} must be >= 1, got {iv}")
    return iv


def build_bundle(cfg: dict) -> ExperimentBundle:
    """Validate a config dict and construct the runtime objects."""
    model = _section(cfg, "model")
    kind = _get(model, "model", "kind", required=True)
    params = None
    if kind == "sensornet":
        fields = {k: v for k, v in model.items() if k != "kind"}
        try:
            params = PowerModelParams(**fields)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None
        R, h = build_model(params)
        alpha = params.alpha
    elif kind == "explicit":
        try:
            R = TransitionKernel(
                n=_positive_int(_get(model, "model", "n", required=True), "model.n"),
                m=_positive_int(_get(model, "model", "m", required=True), "model.m"),
                matrix=np.asarray(_get(model, "model", "R", required=True), dtype=float),
            )
            h = CostFunction(np.asarray(_get(model, "model", "h", required=True), dtype=float))
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None
        if h.matrix.shape != (R.n, R.m):
            raise ConfigError(f"model.h must have shape {(R.n, R.m)}, got {h.matrix.shape}")
        alpha = float(_get(model, "model", "alpha", required=True))
        if not (0.0 < alpha < 1.0):
            raise ConfigError(f"model.alpha must lie in (0, 1), got {alpha}")
    else:
        raise ConfigError(f"model.kind must be 'sensornet' or 'explicit', got {kind!r}")

    pol = _section(cfg, "policy")
    pkind = _get(pol, "policy", "kind", required=True)
    if pkind == "threshold":
        if params is None:
            raise ConfigError("policy.kind 'threshold' requires the sensornet model")
        level = _get(pol, "policy", "level", required=True)
        try:
            gamma_star = threshold_policy(params, int(level))
        except ValueError as e:
            raise ConfigError(f"policy: {e}") from None
    elif pkind == "explicit":
        try:
            gamma_star = Policy(np.asarray(_get(pol, "policy", "gamma", required=True), dtype=float))
        except ValueError as e:
            raise ConfigError(f"policy: {e}") from None
        if gamma_star.matrix.shape != (R.n, R.m):
            raise ConfigError(f"policy.gamma must have shape {(R.n, R.m)}")
    else:
        raise ConfigError(f"policy.kind must be 'threshold' or 'explicit', got {pkind!r}")

    wm = _section(cfg, "watermark", required=False)
    beta = float(_get(wm, "watermark", "beta", default=0.0))
    if not (0.0 <= beta <= 1.0):
        raise ConfigError(f"watermark.beta must lie in [0, 1], got {beta}")
    nu_spec = _get(wm, "watermark", "nu", default="flip" if pkind == "threshold" else "uniform")
    if isinstance(nu_spec, str):
        if nu_spec == "uniform":
            nu = Policy(np.full((R.n, R.m), 1.0 / R.m))
        elif nu_spec == "flip":
            if pkind != "threshold":
                raise ConfigError("watermark.nu 'flip' is only defined for threshold policies")
            nu = threshold_policy(params, int(level), beta=1.0)
        else:
            raise ConfigError(f"watermark.nu must be 'uniform', 'flip' or a matrix, got {nu_spec!r}")
    else:
        try:
            nu = Policy(np.asarray(nu_spec, dtype=float))
        except ValueError as e:
            raise ConfigError(f"watermark.nu: {e}") from None
        if nu.matrix.shape != (R.n, R.m):
            raise ConfigError(f"watermark.nu must have shape {(R.n, R.m)}")
    gamma = mix_policy(gamma_star, WatermarkSpec(nu=nu, beta=beta))

    att = _section(cfg, "attack", required=False)
    akind = _get(att, "attack", "kind", default="null")
    tau = _get(att, "attack", "tau", default=None if akind == "null" else 0)
    if tau is not None:
        tau = int(tau)
        if tau < 0:
            raise ConfigError(f"attack.tau must be >= 0, got {tau}")
    phi = None
    if akind == "null":
        attack = NullAttack()
        tau = None
    elif akind == "matrix":
        rows = _get(att, "attack", "phi", required=True)
        try:
            phi = AttackMatrix(n=R.n, matrix=np.asarray(rows, dtype=float))
        except ValueError as e:
            raise ConfigError(f"attack.phi: {e}") from None
        attack = MatrixAttack(phi)
    elif akind == "predictive":
        mode = _get(att, "attack", "mode", default="sample")
        try:
            attack = PredictiveResamplingAttack(R, gamma, mode=mode)
        except ValueError as e:
            raise ConfigError(f"attack: {e}") from None
    elif akind == "virtual":
        attack = VirtualSystemAttack(R, gamma)
    else:
        raise ConfigError(f"attack.kind must be null/matrix/predictive/virtual, got {akind!r}")

    det = _section(cfg, "detector")
    c_raw = _get(det, "detector", "c", required=True)
    c = math.inf if isinstance(c_raw, str) and c_raw.lower() in ("inf", "infinity") else float(c_raw)
    W_raw = _get(det, "detector", "W", default=500)
    W = None if W_raw is None else int(W_raw)
    try:
        det_config = DetectorConfig(
            c=c,
            M=_positive_int(_get(det, "detector", "M", required=True), "detector.M"),
            W=W,
            off_support=_get(det, "detector", "off_support", default="alarm"),
        )
    except ValueError as e:
        raise ConfigError(f"detector: {e}") from None
    projection = _get(det, "detector", "projection", default="node" if params is not None else "full")
    if projection not in ("node", "full"):
        raise ConfigError(f"detector.projection must be 'node' or 'full', got {projection!r}")
    if projection == "node" and params is None:
        raise ConfigError("detector.projection 'node' requires the sensornet model")
    if projection == "node":
        det_kernel = projected_kernel(params)
        obs_width = params.n_queue + 1
    else:
        det_kernel = R
        obs_width = 0

    run = _section(cfg, "run")
    horizon = _positive_int(_get(run, "run", "horizon", required=True), "run.horizon")
    if horizon <= det_config.M + 1:
        raise ConfigError(f"run.horizon must exceed detector.M + 1 = {det_config.M + 1}")
    replicates = _positive_int(_get(run, "run", "replicates", required=True), "run.replicates")
    seed = int(_get(run, "run", "seed", default=0))
    x0 = int(_get(run, "run", "x0", default=state_index(0, 0, params.n_queue) if params else 0))
    if not (0 <= x0 < R.n):
        raise ConfigError(f"run.x0 must lie in [0, {R.n}), got {x0}")

    return ExperimentBundle(
        R=R, h=h, alpha=alpha, gamma_star=gamma_star, nu=nu, beta=beta, gamma=gamma,
        attack=attack, attack_kind=akind, phi=phi, tau=tau,
        detector_config=det_config, detector_kernel=det_kernel, projection=projection,
        horizon=horizon, replicates=replicates, seed=seed, x0=x0,
        params=params, obs_width=obs_width,
    )


def _run_replicates(bundle: ExperimentBundle, *, seed: int | None = None, engine: str = "auto") -> ReplicateOutcomes:
    seed = bundle.seed if seed is None else seed
    reps = bundle.replicates
    alarm = np.full(reps, -1, dtype=np.int64)
    cost = np.zeros(reps)
    h_mat = bundle.h.matrix

    if engine == "reference":
        for r in range(reps):
            traj = simulate(bundle.R, bundle.gamma, bundle.attack, bundle.horizon,
                            tau=bundle.tau, root_seed=seed, replicate=r, x0=bundle.x0,
                            engine="reference")
            obs, acts = bundle.project(traj.Y, traj.A)
            out = run_detector(obs, acts, bundle.detector_kernel, bundle.detector_config,
                               engine="reference")
            alarm[r] = -1 if out.alarm_time is None else out.alarm_time
            cost[r] = _kernels.discounted_path_cost(traj.X, traj.A, h_mat, bundle.alpha)
    else:
        sim_plan = _kernels.SimPlan(bundle.R, bundle.gamma, bundle.attack)
        det_plan = _kernels.DetectPlan(bundle.detector_kernel, bundle.detector_config)

        def work(block):
            for r in block:
                X, Y, A = sim_plan.run(bundle.horizon, bundle.tau, seed, r, bundle.x0)
                obs, acts = bundle.project(Y, A)
                a_time, _, _, _, _ = det_plan.run(obs, acts)
                alarm[r] = a_time
                cost[r] = _kernels.discounted_path_cost(X, A, h_mat, bundle.alpha)

        workers = min(os.cpu_count() or 1, reps)
        if workers > 1:
            blocks = np.array_split(np.arange(reps), workers * 4)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(work, [b for b in blocks if len(b)]))
        else:
            work(range(reps))

    return ReplicateOutcomes(
        alarm_time=alarm, cost=cost,
        tau=math.inf if bundle.tau is None else float(bundle.tau),
        beta=bundle.beta, c=bundle.detector_config.c, M=bundle.detector_config.M, seed=seed,
    )


def summarize(outcomes: ReplicateOutcomes, horizon: int, replicates: int) -> MetricsRow:
    """Reduce per-replicate outcomes to a metrics row."""
    alarm = outcomes.alarm_time
    alarmed = alarm >= 0
    tau = outcomes.tau
    if math.isfinite(tau):
        detections = alarmed & (alarm > tau)
        delays = (alarm[detections] - tau).astype(float)
        false_alarms = alarmed & (alarm <= tau)
        fa_rate = float(false_alarms.mean())
        mtbfa = math.nan
    else:
        delays = np.array([])
        fa_rate = float(alarmed.mean())
        mtbfa = float(np.where(alarmed, alarm, horizon).mean())
    has_delay = delays.size > 0
    return MetricsRow(
        beta=outcomes.beta,
        mean_delay=float(delays.mean()) if has_delay else math.nan,
        delay_q25=float(np.percentile(delays, 25)) if has_delay else math.nan,
        delay_q75=float(np.percentile(delays, 75)) if has_delay else math.nan,
        censored_frac=float((~alarmed).mean()),
        false_alarm_rate=fa_rate,
        mtbfa_est=mtbfa,
        mean_cost=float(outcomes.cost.mean()),
        cost_se=float(outcomes.cost.std(ddof=1) / math.sqrt(len(outcomes.cost))) if len(outcomes.cost) > 1 else 0.0,
        replicates=replicates,
        seed=outcomes.seed,
    )


def run_experiment(cfg: dict, *, engine: str = "auto") -> tuple[MetricsRow, ReplicateOutcomes]:
    """Run one configured experiment; returns the metrics row and raw outcomes."""
    bundle = build_bundle(cfg)
    outcomes = _run_replicates(bundle, engine=engine)
    return summarize(outcomes, bundle.horizon, bundle.replicates), outcomes


@dataclass
class SweepResult:
    rows: list[MetricsRow]
    losses: list[tuple[float, float, float]]  # (beta, exact, empirical)


def sweep_beta(cfg: dict, betas=None, *, engine: str = "auto") -> SweepResult:
    """Metrics and control loss across a watermark-magnitude grid.

    Delay-side metrics come from the configured attack starting at its
    onset; false-alarm, time-between-false-alarm and cost metrics come
    from a no-attack companion run at the same magnitude.  The exact
    loss column is the discounted-cost gap at the initial state from the
    linear solve; the empirical column is the companion run's mean cost
    minus the exact no-watermark cost.
    """
    base = build_bundle(cfg)
    if betas is None:
        betas = cfg.get("sweep", {}).get("betas", DEFAULT_BETA_GRID)
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("sweep.betas must be a nonempty list")
    from .mdp import discounted_cost

    eta_star = discounted_cost(base.R, base.gamma_star, base.h, base.alpha)[base.x0]
    rows: list[MetricsRow] = []
    losses: list[tuple[float, float, float]] = []
    for i, beta in enumerate(betas):
        sub = dict(cfg)
        sub["watermark"] = dict(cfg.get("watermark", {}), beta=beta)
        attacked_cfg = dict(sub)
        null_cfg = dict(sub, attack={"kind": "null"})

        att_bundle = build_bundle(attacked_cfg)
        att_out = _run_replicates(att_bundle, seed=_rng.derive_root(base.seed, 2 * i), engine=engine)
        att_row = summarize(att_out, att_bundle.horizon, att_bundle.replicates)

        null_bundle = build_bundle(null_cfg)
        null_out = _run_replicates(null_bundle, seed=_rng.derive_root(base.seed, 2 * i + 1), engine=engine)
        null_row = summarize(null_out, null_bundle.horizon, null_bundle.replicates)

        rows.append(MetricsRow(
            beta=beta,
            mean_delay=att_row.mean_delay,
            delay_q25=att_row.delay_q25,
            delay_q75=att_row.delay_q75,
            censored_frac=att_row.censored_frac,
            false_alarm_rate=null_row.false_alarm_rate,
            mtbfa_est=null_row.mtbfa_est,
            mean_cost=null_row.mean_cost,
            cost_se=null_row.cost_se,
            replicates=base.replicates,
            seed=base.seed,
        ))
        if beta == 0.0:
            exact = 0.0
        else:
            gap = control_loss_exact(base.R, base.gamma_star, null_bundle.gamma, base.h, base.alpha)
            exact = float(gap.direct[base.x0])
        losses.append((beta, exact, float(null_row.mean_cost - eta_star)))
    return SweepResult(rows=rows, losses=losses)


def emit_trace(cfg: dict, replicate: int = 0, *, engine: str = "auto") -> list[tuple[int, float, int]]:
    """Score trace of a single replicate: rows ``(t, score, alarmed)``."""
    bundle = build_bundle(cfg)
    traj = simulate(bundle.R, bundle.gamma, bundle.attack, bundle.horizon,
                    tau=bundle.tau, root_seed=bundle.seed, replicate=replicate, x0=bundle.x0,
                    engine=engine if engine != "auto" else "auto")
    obs, acts = bundle.project(traj.Y, traj.A)
    out = run_detector(obs, acts, bundle.detector_kernel, bundle.detector_config,
                       collect_trace=True, engine=engine)
    c = bundle.detector_config.c
    return [
        (int(t), float(s), int(s > c))
        for t, s in zip(out.trace_nobs, out.trace_scores)
    ]


@dataclass
class BoundsOutcome:
    """Bounds report, or the reason the configuration does not admit one."""

    report: BoundsReport | None
    unsupported_reason: str | None = None

    @property
    def supported(self) -> bool:
        return self.report is not None


def _effective_projected_policy(bundle: ExperimentBundle) -> Policy:
    """Stationary conditional law of the action given the node state.

    The node projection of the closed loop is not itself an MDP policy;
    this is the exact stationary action law per observed node state,
    which is the quantity entering the bound ingredients.
    """
    joint = joint_chain_preattack(bundle.R, bundle.gamma)
    pi = stationary_distribution(joint.P, check=False)
    mass = pi.pi.reshape(bundle.R.n, bundle.R.m)
    width = bundle.obs_width
    g = np.zeros((2, bundle.R.m))
    for s in (0, 1):
        block = mass[[x for x in range(bundle.R.n) if x // width == s], :]
        total = block.sum()
        if total <= 0:
            g[s] = 1.0 / bundle.R.m
        else:
            g[s] = block.sum(axis=0) / total
    # guard rounding so the rows pass construction-time validation
    g = g / g.sum(axis=1, keepdims=True)
    return Policy(g)


def bounds_report(cfg: dict) -> BoundsOutcome:
    """Bounds report for a configured experiment.

    Only matrix-form attacks (including the truthful-reporting encoding
    of no attack) admit a limiting conditional law; other strategies are
    reported as unsupported rather than failing.
    """
    bundle = build_bundle(cfg)
    if bundle.attack_kind in ("virtual", "predictive"):
        return BoundsOutcome(
            report=None,
            unsupported_reason=(
                f"unsupported: the limiting conditional law is undefined for "
                f"{bundle.attack_kind} attacks (strategy is not matrix-form)"
            ),
        )
    if bundle.projection == "node":
        kernel = bundle.detector_kernel
        gamma = _effective_projected_policy(bundle)
        phi = bundle.phi if bundle.phi is not None else null_attack_matrix(kernel.n)
        if phi.n != kernel.n:
            return BoundsOutcome(
                report=None,
                unsupported_reason="unsupported: attack matrix is not defined on the projected observation space",
            )
    else:
        kernel = bundle.R
        gamma = bundle.gamma
        phi = bundle.phi if bundle.phi is not None else null_attack_matrix(kernel.n)
    report = compute_report(kernel, gamma, phi, c=bundle.detector_config.c, M=bundle.detector_config.M)
    return BoundsOutcome(report=report)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
