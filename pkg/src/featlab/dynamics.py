"""Constant-stepsize GD trainer and verification pipelines.

run_gd trains the two-layer CNN under ERM, the penalized invariance
objective, or ERM-pretrain-then-penalty schedules, recording feature
probes along the way. The verify_* pipelines check the simulated
trajectories against the independent oracles in theory.py.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cnn import Activation, CnnParams, LINEAR, init_cnn, probe_features
from .data import EnvironmentSpec, TwoBitDataset, expected_group_counts, sample_dataset
from .objectives import erm_loss_grad, irmv1_loss_grad, irmv1_penalty
from .theory import (
    FixedPoint,
    RecursionState,
    closed_form_fixed_point,
    eta_window,
    iterate_recursion,
)

SCHEDULES = ("erm", "irmv1", "pretrain-irmv1")


class NumericAbortError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


class PreconditionError(ValueError):
    """Raised when a verification pipeline's parameter conditions fail."""


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce one trajectory."""

    envs: tuple[EnvironmentSpec, ...] = (
        EnvironmentSpec(0.25, 0.1, 2500),
        EnvironmentSpec(0.25, 0.2, 2500),
    )
    eta: float = 0.1
    steps: int = 2000
    lam: float = 1e8
    pretrain_steps: int = 0
    eta_irm: float | None = None
    record_every: int = 10
    activation: Activation = LINEAR
    sigma_0: float = 0.01
    sigma_p: float = 0.01
    m: int = 10
    d: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.pretrain_steps > self.steps:
            raise ValueError("pretrain_steps must be <= steps")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class TrajectoryRecord:
    """Probes at recorded steps plus the final parameters."""

    steps: np.ndarray
    agg_inv: np.ndarray
    agg_spu: np.ndarray
    c: np.ndarray  # (n_recorded, n_envs)
    c_norm: np.ndarray
    erm_loss: np.ndarray
    irm_loss: np.ndarray
    train_acc: np.ndarray
    max_xi: np.ndarray
    final_params: CnnParams
    switch_step: int | None = None

    @property
    def n_recorded(self) -> int:
        return len(self.steps)


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise NumericAbortError(f"{what} became non-finite at step {step}")


def run_gd(
    cfg: TrainConfig,
    schedule: str = "erm",
    ds: TwoBitDataset | None = None,
    params: CnnParams | None = None,
    stationary_tol: float | None = None,
    stationary_window: int = 50,
) -> TrajectoryRecord:
    """Full-batch GD with per-step feature probes.

    schedule: 'erm', 'irmv1', or 'pretrain-irmv1' (ERM for
    pretrain_steps, then the penalized objective at eta_irm). When
    stationary_tol is set, the ERM phase ends early once the aggregate
    features move less than the tolerance over stationary_window
    consecutive steps.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
    if ds is None:
        ds = sample_dataset(list(cfg.envs), d=cfg.d, sigma_p=cfg.sigma_p, seed=cfg.seed)
    if params is None:
        params = init_cnn(cfg.m, cfg.d, cfg.sigma_0, cfg.activation, seed=cfg.seed + 1)
    p = params.copy()

    if schedule == "erm":
        phase_of = lambda t: "erm"
        switch_at = None
    elif schedule == "irmv1":
        phase_of = lambda t: "irm"
        switch_at = 0
    else:
        switch_at = cfg.pretrain_steps
        phase_of = lambda t: "erm" if t < switch_at else "irm"

    eta_irm = cfg.eta_irm if cfg.eta_irm is not None else cfg.eta
    rec: dict[str, list] = {k: [] for k in (
        "steps", "agg_inv", "agg_spu", "c", "c_norm", "erm_loss", "irm_loss",
        "train_acc", "max_xi",
    )}

    def evaluate(pp: CnnParams, phase: str):
        if phase == "erm":
            report, grads = erm_loss_grad(pp, ds)
            report = replace(
                report,
                lam=cfg.lam,
                irm_total=report.erm_total + cfg.lam * float(np.sum(report.c**2)),
            )
        else:
            report, grads = irmv1_loss_grad(pp, ds, cfg.lam)
        return report, grads

    def record(t: int, pp: CnnParams, report) -> None:
        probe = probe_features(pp, ds)
        z = ds.y * _train_logits(pp, ds)
        rec["steps"].append(t)
        rec["agg_inv"].append(probe.agg_inv)
        rec["agg_spu"].append(probe.agg_spu)
        rec["c"].append(report.c.copy())
        rec["c_norm"].append(float(np.linalg.norm(report.c)))
        rec["erm_loss"].append(report.erm_total)
        rec["irm_loss"].append(report.irm_total)
        rec["train_acc"].append(float(np.mean(z > 0)))
        rec["max_xi"].append(probe.max_xi)

    recent_moves: list[float] = []
    last_agg: tuple[float, float] | None = None
    t = 0
    phase = phase_of(0) if cfg.steps > 0 else "erm"
    while t < cfg.steps:
        phase = phase_of(t)
        report, (g_pos, g_neg) = evaluate(p, phase)
        _check_finite(report.irm_total, t, "loss")
        if t % cfg.record_every == 0:
            record(t, p, report)
        eta_t = cfg.eta if phase == "erm" else eta_irm
        p.w_pos -= eta_t * g_pos
        p.w_neg -= eta_t * g_neg
        t += 1
        if stationary_tol is not None and phase == "erm":
            probe = probe_features(p)
            agg = (probe.agg_inv, probe.agg_spu)
            if last_agg is not None:
                recent_moves.append(abs(agg[0] - last_agg[0]) + abs(agg[1] - last_agg[1]))
                recent_moves = recent_moves[-stationary_window:]
            last_agg = agg
            if len(recent_moves) == stationary_window and max(recent_moves) < stationary_tol:
                if schedule == "erm":
                    break
                if schedule == "pretrain-irmv1" and t < switch_at:
                    # close out the pretrain phase early; the penalty
                    # phase keeps its configured length
                    remaining = cfg.steps - switch_at
                    switch_at = t
                    cfg = replace(cfg, steps=t + remaining, pretrain_steps=t)
                    phase_of = lambda s: "erm" if s < switch_at else "irm"
                    stationary_tol = None

    final_phase = phase_of(t) if schedule != "erm" else "erm"
    report, _ = evaluate(p, final_phase)
    _check_finite(report.irm_total, t, "loss")
    record(t, p, report)

    return TrajectoryRecord(
        steps=np.array(rec["steps"]),
        agg_inv=np.array(rec["agg_inv"]),
        agg_spu=np.array(rec["agg_spu"]),
        c=np.array(rec["c"]),
        c_norm=np.array(rec["c_norm"]),
        erm_loss=np.array(rec["erm_loss"]),
        irm_loss=np.array(rec["irm_loss"]),
        train_acc=np.array(rec["train_acc"]),
        max_xi=np.array(rec["max_xi"]),
        final_params=p,
        switch_step=switch_at,
    )


def _train_logits(p: CnnParams, ds: TwoBitDataset) -> np.ndarray:
    from .cnn import logits

    return logits(p, ds.x1, ds.x2)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise PreconditionError(msg)


def _race_preconditions(cfg: TrainConfig) -> tuple[float, float, float]:
    _require(cfg.activation.kind == "linear", "race analysis requires linear activation")
    _require(len(cfg.envs) == 2, "race analysis requires exactly two environments")
    alpha = cfg.envs[0].alpha
    _require(cfg.envs[1].alpha == alpha, "environments must share alpha")
    b1, b2 = cfg.envs[0].beta, cfg.envs[1].beta
    _require(alpha < 0.5 and b1 < 0.5 and b2 < 0.5, "alpha and betas must be < 1/2")
    _require(alpha > (b1 + b2) / 2.0, "requires alpha > (beta1 + beta2)/2")
    return alpha, b1, b2


def measured_increments(traj: TrajectoryRecord, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (Delta_inv, Delta_spu) implied by the aggregate probes.

    Each unit increment moves the aggregates by 2*eta (both filter
    signs receive the same update), so differencing recovers it.
    Requires record_every = 1.
    """
    d_inv = np.diff(traj.agg_inv) / (2.0 * eta)
    d_spu = np.diff(traj.agg_spu) / (2.0 * eta)
    return d_inv, d_spu


def verify_erm_race(cfg: TrainConfig, converge_eta: float = 0.5) -> dict:
    """Feature-race check: spurious increments dominate invariant ones.

    Runs ERM at a step size inside the admissible window and asserts
    (i) both composite increment sequences are positive and
    non-increasing after step 1, (ii) Delta_spu > Delta_inv > 0 at
    every step, (iii) the aggregates approach (and, in a faster-eta
    continuation, reach) the closed-form stationary point.
    """
    alpha, b1, b2 = _race_preconditions(cfg)
    counts = expected_group_counts(list(cfg.envs))
    lo, hi = eta_window(counts, cfg.m, cfg.steps)
    eta = cfg.eta if lo < cfg.eta < hi else 0.05 * hi
    cfg = replace(cfg, eta=eta, record_every=1)

    ds = sample_dataset(list(cfg.envs), d=cfg.d, sigma_p=cfg.sigma_p, seed=cfg.seed)
    traj = run_gd(cfg, "erm", ds=ds)
    d_inv, d_spu = measured_increments(traj, eta)
    comp_plus = d_spu + d_inv
    comp_minus = d_spu - d_inv

    race_ok = bool(np.all(d_spu > d_inv) and np.all(d_inv > 0))
    tol = 1e-12
    mono_ok = bool(
        np.all(np.diff(comp_plus[1:]) <= tol) and np.all(np.diff(comp_minus[1:]) <= tol)
        and np.all(comp_plus > 0) and np.all(comp_minus > 0)
    )

    fp = closed_form_fixed_point(alpha, b1, b2)
    gap0 = abs(traj.agg_inv[0] - fp.gamma1_inf) + abs(traj.agg_spu[0] - fp.gamma2_inf)
    gap1 = abs(traj.agg_inv[-1] - fp.gamma1_inf) + abs(traj.agg_spu[-1] - fp.gamma2_inf)
    approach_ok = bool(gap1 < gap0)

    # Convergence continuation at a faster step size; the target is the
    # stationary point implied by this dataset's empirical group counts
    # (the population value carries O(n^-1/2) sampling error on top).
    cont = run_gd(
        replace(cfg, eta=converge_eta, steps=100_000, record_every=1000),
        "erm",
        ds=ds,
        stationary_tol=1e-7,
    )
    from .data import group_counts
    from .theory import counts_fixed_point

    emp1, emp2 = counts_fixed_point(group_counts(ds))
    rel1 = abs(cont.agg_inv[-1] - emp1) / abs(emp1)
    rel2 = abs(cont.agg_spu[-1] - emp2) / abs(emp2)
    pop1 = abs(cont.agg_inv[-1] - fp.gamma1_inf) / fp.gamma1_inf
    pop2 = abs(cont.agg_spu[-1] - fp.gamma2_inf) / fp.gamma2_inf
    converge_ok = bool(rel1 < 0.02 and rel2 < 0.02)

    return {
        "eta": eta,
        "eta_window": (lo, hi),
        "fixed_point": {"gamma1_inf": fp.gamma1_inf, "gamma2_inf": fp.gamma2_inf},
        "race_positive_dominant": race_ok,
        "composites_monotone": mono_ok,
        "approaches_fixed_point": approach_ok,
        "converges_to_empirical_fp": converge_ok,
        "rel_err_empirical_fp": (float(rel1), float(rel2)),
        "rel_err_population_fp": (float(pop1), float(pop2)),
        "passed": race_ok and mono_ok and approach_ok and converge_ok,
    }


def verify_fixed_point(cfg: TrainConfig, rel_tol: float = 0.02) -> dict:
    """Run ERM to stationarity and compare against the closed form."""
    alpha, b1, b2 = _race_preconditions(cfg)
    fp = closed_form_fixed_point(alpha, b1, b2)
    traj = run_gd(cfg, "erm", stationary_tol=1e-7)
    rel1 = abs(traj.agg_inv[-1] - fp.gamma1_inf) / abs(fp.gamma1_inf)
    rel2 = abs(traj.agg_spu[-1] - fp.gamma2_inf) / abs(fp.gamma2_inf)
    return {
        "agg_inv": float(traj.agg_inv[-1]),
        "agg_spu": float(traj.agg_spu[-1]),
        "gamma1_inf": fp.gamma1_inf,
        "gamma2_inf": fp.gamma2_inf,
        "rel_err": (float(rel1), float(rel2)),
        "steps_run": int(traj.steps[-1]),
        "passed": bool(rel1 < rel_tol and rel2 < rel_tol),
    }


def verify_suppression(cfg: TrainConfig) -> dict:
    """From-scratch heavy-penalty run: no feature learning, shrinking
    penalty vector."""
    cfg = replace(cfg, record_every=1)
    traj = run_gd(cfg, "irmv1")
    max_agg = float(np.max(np.maximum(np.abs(traj.agg_inv), np.abs(traj.agg_spu))))
    init_agg = max(abs(traj.agg_inv[0]), abs(traj.agg_spu[0]), 1e-12)
    c0, cT = float(traj.c_norm[0]), float(traj.c_norm[-1])
    transient = 10
    descent_ok = bool(np.all(np.diff(traj.c_norm[transient:]) <= 1e-14))
    return {
        "max_abs_agg": max_agg,
        "agg_bounded_005": bool(max_agg < 0.05),
        "agg_under_5x_init": bool(max_agg < 5.0 * init_agg),
        "c_norm_initial": c0,
        "c_norm_final": cT,
        "c_decay_10x": bool(cT <= 0.1 * c0),
        "c_norm_descent_after_transient": descent_ok,
        "passed": bool(max_agg < 0.05 and cT <= 0.1 * c0 and descent_ok),
    }


def verify_irmv1_transfer(
    cfg: TrainConfig, post_steps: int = 500, c_sum_tol: float = 0.05
) -> dict:
    """Pretrain-then-penalty checks at the objective switch.

    (a) the per-environment penalty scalars nearly cancel at ERM
    stationarity, (b) after the switch the invariant aggregate rises
    strictly while the spurious one falls strictly over post_steps,
    (c) poorly learned invariant features degrade further: from
    aggregates (0.01, 1.0) one penalized step decreases agg_inv.
    """
    _race_preconditions(cfg)
    pre = cfg.pretrain_steps if cfg.pretrain_steps else max(cfg.steps - post_steps, 1)
    cfg = replace(cfg, steps=pre + post_steps, pretrain_steps=pre, record_every=1)
    traj = run_gd(cfg, "pretrain-irmv1", stationary_tol=1e-7)

    switch = traj.switch_step
    i_switch = int(np.searchsorted(traj.steps, switch))
    c_sum = float(np.sum(traj.c[i_switch]))
    post_inv = traj.agg_inv[i_switch:]
    post_spu = traj.agg_spu[i_switch:]
    inv_up = bool(np.all(np.diff(post_inv) > 0))
    spu_down = bool(np.all(np.diff(post_spu) < 0))

    cor = verify_corollary_degradation(cfg)

    return {
        "switch_step": int(switch),
        "c_sum_at_switch": c_sum,
        "c_sum_ok": bool(abs(c_sum) < c_sum_tol),
        "post_inv_strictly_up": inv_up,
        "post_spu_strictly_down": spu_down,
        "corollary_inv_decreases": cor["inv_decreases"],
        "passed": bool(abs(c_sum) < c_sum_tol and inv_up and spu_down
                       and cor["inv_decreases"]),
    }


def corollary_init(
    cfg: TrainConfig, agg_inv: float = 0.01, agg_spu: float = 1.0, noise: float = 1e-4
) -> CnnParams:
    """Filters aligned with the two features to hit prescribed aggregates.

    w_{j,r} = j*(gamma_inv*v1 + gamma_spu*v2)/2 + small Gaussian noise,
    so that the aggregate probes equal (agg_inv, agg_spu) up to noise.
    """
    rng = np.random.Generator(np.random.Philox(cfg.seed + 7))
    base = np.zeros(cfg.d)
    base[0] = agg_inv / 2.0
    base[1] = agg_spu / 2.0
    w_pos = base + rng.normal(0.0, noise, size=(cfg.m, cfg.d))
    w_neg = -base + rng.normal(0.0, noise, size=(cfg.m, cfg.d))
    return CnnParams(w_pos, w_neg, cfg.activation)


def verify_corollary_degradation(
    cfg: TrainConfig, agg_inv: float = 0.01, agg_spu: float = 1.0
) -> dict:
    """One penalized step from under-learned invariant features."""
    ds = sample_dataset(list(cfg.envs), d=cfg.d, sigma_p=cfg.sigma_p, seed=cfg.seed)
    p = corollary_init(cfg, agg_inv, agg_spu)
    before = probe_features(p)
    eta = cfg.eta_irm if cfg.eta_irm is not None else cfg.eta
    _, (g_pos, g_neg) = irmv1_loss_grad(p, ds, cfg.lam)
    p.w_pos -= eta * g_pos
    p.w_neg -= eta * g_neg
    after = probe_features(p)
    return {
        "agg_inv_before": before.agg_inv,
        "agg_inv_after": after.agg_inv,
        "inv_decreases": bool(after.agg_inv < before.agg_inv),
        "passed": bool(after.agg_inv < before.agg_inv),
    }


def verify_oracle(
    cfg: TrainConfig, horizon: int = 200, rel_tol: float = 0.01
) -> dict:
    """Simulated per-step increments vs the population recursion."""
    _race_preconditions(cfg)
    cfg = replace(cfg, steps=horizon, record_every=1)
    traj = run_gd(cfg, "erm")
    d_inv, d_spu = measured_increments(traj, cfg.eta)

    counts = expected_group_counts(list(cfg.envs))
    states = iterate_recursion(
        RecursionState(counts=counts, eta=cfg.eta, m=cfg.m), horizon
    )
    oracle_plus = np.array([s.last_delta_plus for s in states])
    oracle_minus = np.array([s.last_delta_minus for s in states])
    oracle_inv = (oracle_plus - oracle_minus) / 2.0
    oracle_spu = (oracle_plus + oracle_minus) / 2.0

    rel_inv = np.max(np.abs(d_inv - oracle_inv) / np.abs(oracle_inv))
    rel_spu = np.max(np.abs(d_spu - oracle_spu) / np.abs(oracle_spu))
    return {
        "max_rel_err_inv": float(rel_inv),
        "max_rel_err_spu": float(rel_spu),
        "passed": bool(rel_inv < rel_tol and rel_spu < rel_tol),
    }
