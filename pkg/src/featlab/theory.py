"""Independent theory oracles for the training dynamics.

These never touch the simulator: a population-level recursion for the
per-step feature increments, the closed-form stationary point of ERM
feature learning, the admissible step-size window, and the kernel
diagnostic governing the penalty-descent rate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cnn import CnnParams
from .data import GroupCounts, TwoBitDataset


@dataclass(frozen=True)
class RecursionState:
    """Population recursion over the composite increments.

    delta_plus tracks Delta_Gamma + Delta_Lambda, delta_minus tracks
    Delta_Gamma - Delta_Lambda; sums accumulate the respective series.
    delta is the concentration slack (0 in the population limit).
    """

    counts: GroupCounts
    eta: float
    m: int
    delta: float = 0.0
    t: int = 0
    sum_plus: float = 0.0
    sum_minus: float = 0.0
    last_delta_plus: float = 0.0
    last_delta_minus: float = 0.0


def _delta_step(c_hi: float, c_lo: float, accum: float, eta: float, m: int, slack: float) -> float:
    e = np.exp(2.0 * eta * accum)
    return (2.0 / m) * (c_hi * (1.0 + slack) - c_lo * e) / (1.0 + slack + e)


def step_recursion(st: RecursionState) -> RecursionState:
    """One step of the population increment recursion.

    delta_plus_t = (2/m) * (c_pp - c_mm * exp(2*eta*sum_plus))
                 / (1 + exp(2*eta*sum_plus))
    and the analogue with (c_mp, c_pm, sum_minus); the sums then absorb
    the new increments.
    """
    c = st.counts
    dp = _delta_step(c.c_pp, c.c_mm, st.sum_plus, st.eta, st.m, st.delta)
    dm = _delta_step(c.c_mp, c.c_pm, st.sum_minus, st.eta, st.m, st.delta)
    return replace(
        st,
        t=st.t + 1,
        sum_plus=st.sum_plus + dp,
        sum_minus=st.sum_minus + dm,
        last_delta_plus=dp,
        last_delta_minus=dm,
    )


def iterate_recursion(st: RecursionState, steps: int) -> list[RecursionState]:
    """Run the recursion, returning the state after each step."""
    out = []
    for _ in range(steps):
        st = step_recursion(st)
        out.append(st)
    return out


def recursion_features(st: RecursionState, eta: float) -> tuple[float, float]:
    """Predicted (agg_inv, agg_spu) implied by the accumulated sums.

    Each aggregate moves by 2*eta per unit increment (both filter signs
    receive the same update).
    """
    gamma_plus = 2.0 * eta * st.sum_plus   # agg_spu + agg_inv
    gamma_minus = 2.0 * eta * st.sum_minus  # agg_spu - agg_inv
    return (gamma_plus - gamma_minus) / 2.0, (gamma_plus + gamma_minus) / 2.0


@dataclass(frozen=True)
class FixedPoint:
    """Closed-form ERM stationary point of the aggregate features."""

    a_const: float
    b_const: float
    g_m: float
    g_b: float
    gamma1_inf: float
    gamma2_inf: float


def closed_form_fixed_point(alpha: float, beta1: float, beta2: float) -> FixedPoint:
    """Stationary aggregates for two environments (alpha, beta1/beta2).

    A = alpha(b1+b2)/((1-alpha)(2-b1-b2)), B = alpha(2-b1-b2)/((1-alpha)(b1+b2));
    G_m, G_b solve the quadratic stationarity conditions and
    gamma1 = log(G_m*G_b)/2, gamma2 = log(G_m/G_b)/2.
    """
    for name, v in (("alpha", alpha), ("beta1", beta1), ("beta2", beta2)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {v}")
    bsum = beta1 + beta2
    if bsum == 0.0 or bsum == 2.0:
        raise ValueError("beta1 + beta2 must lie strictly inside (0, 2)")
    a = alpha * bsum / ((1.0 - alpha) * (2.0 - bsum))
    b = alpha * (2.0 - bsum) / ((1.0 - alpha) * bsum)
    g_m = ((1.0 - a) + np.sqrt((a - 1.0) ** 2 + 4.0 * a)) / (2.0 * a)
    g_b = ((1.0 - b) + np.sqrt((b - 1.0) ** 2 + 4.0 * b)) / (2.0 * b)
    return FixedPoint(
        a_const=a,
        b_const=b,
        g_m=float(g_m),
        g_b=float(g_b),
        gamma1_inf=float(0.5 * np.log(g_m * g_b)),
        gamma2_inf=float(0.5 * np.log(g_m / g_b)),
    )


def counts_fixed_point(counts: GroupCounts) -> tuple[float, float]:
    """Stationary aggregates implied by arbitrary sign-group counts.

    The recursion increments vanish exactly when
    exp(2*eta*sum_plus) = c_pp/c_mm and exp(2*eta*sum_minus) =
    c_mp/c_pm, giving the aggregates directly; with population counts
    this coincides with closed_form_fixed_point.
    """
    c = counts
    if min(c.c_pp, c.c_pm, c.c_mp, c.c_mm) <= 0:
        raise ValueError("all four group counts must be positive")
    gamma_plus = np.log(c.c_pp / c.c_mm)
    gamma_minus = np.log(c.c_mp / c.c_pm)
    return float((gamma_plus - gamma_minus) / 2.0), float((gamma_plus + gamma_minus) / 2.0)


def eta_window(
    counts: GroupCounts, m: int, steps: int, delta: float = 0.0, eps_delta: float | None = None
) -> tuple[float, float]:
    """Admissible step-size window for the feature-race guarantees.

    Upper bound keeps both composite increment sequences positive over
    the horizon; the lower bound (0 in the population limit delta=0)
    keeps them above the concentration slack.
    """
    c = counts

    def upper(c_hi: float, c_lo: float) -> float:
        return (
            m * (2.0 + delta)
            / (4.0 * steps * (c_hi * (1.0 + delta) - c_lo))
            * np.log(c_hi / (c_lo * (1.0 + delta)))
        )

    hi = min(upper(c.c_pp, c.c_mm), upper(c.c_mp, c.c_pm))
    lo = 0.0
    if delta > 0.0:
        if eps_delta is None or eps_delta <= 0.0:
            raise ValueError("eps_delta required when delta > 0")
        lo = np.log(1.0 + delta) / eps_delta
    return float(lo), float(hi)


@dataclass(frozen=True)
class IrmKernelDiag:
    """Environment kernel whose smallest eigenvalue bounds the penalty
    contraction rate under heavy regularization."""

    h_matrix: np.ndarray
    lambda0: float

    @property
    def rank(self) -> int:
        vals = np.linalg.eigvalsh(self.h_matrix)
        return int(np.sum(np.abs(vals) > 1e-12 * max(1.0, np.max(np.abs(vals)))))


def irm_kernel(p: CnnParams, ds: TwoBitDataset) -> IrmKernelDiag:
    """Kernel over environments from label-aligned feature patches.

    H[e, e'] = (1/(2m)) * mean_{j,r} <s_e^{jr}, s_{e'}^{jr}> where
    s_e^{jr} = (1/n_e) sum_i psi'(<w_{j,r}, y_i x1_i>) y_i x1_i. For
    linear activation this is (1/(2m)) times the Gram matrix of the
    per-environment means of y*x1 (rank <= 2, since feature patches
    live in span{v1, v2}).
    """
    n_env = ds.n_envs
    act = p.activation
    v = ds.y[:, None] * ds.x1  # label-aligned feature patches
    filters = np.concatenate([p.w_pos, p.w_neg])  # (2m, d)
    s = np.empty((n_env, 2 * p.m, ds.d))
    for e in range(n_env):
        sl = ds.env_slice(e)
        ve = v[sl]
        s[e] = (act.dpsi(ve @ filters.T).T @ ve) / ds.envs[e].n
    h = np.einsum("afd,bfd->ab", s, s) / (2.0 * p.m * 2.0 * p.m)
    h = (h + h.T) / 2.0
    lam0 = float(np.linalg.eigvalsh(h)[0])
    return IrmKernelDiag(h_matrix=h, lambda0=lam0)
