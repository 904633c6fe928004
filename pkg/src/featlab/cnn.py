"""Two-layer CNN over (feature patch, noise patch) inputs.

The network computes f(W, x) = F_pos(x) - F_neg(x) where each branch
averages psi(<w_{j,r}, x1>) + psi(<w_{j,r}, x2>) over m filters; the
second-layer weights are fixed to +1/m and -1/m and never trained.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TwoBitDataset


@dataclass(frozen=True)
class Activation:
    """Filter nonlinearity psi with analytic derivative.

    kinds: 'linear' (exact theory regime), 'smoothed_relu' (softplus
    with sharpness beta_smooth, bounded first and second derivatives),
    'tanh'.
    """

    kind: str = "linear"
    beta_smooth: float = 5.0

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "smoothed_relu", "tanh"):
            raise ValueError(f"unknown activation kind: {self.kind}")

    def psi(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return z
        if self.kind == "smoothed_relu":
            b = self.beta_smooth
            return np.logaddexp(0.0, b * z) / b
        return np.tanh(z)

    def dpsi(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return np.ones_like(z)
        if self.kind == "smoothed_relu":
            with np.errstate(over="ignore"):
                return 1.0 / (1.0 + np.exp(-self.beta_smooth * z))
        return 1.0 - np.tanh(z) ** 2


LINEAR = Activation("linear")


@dataclass
class CnnParams:
    """Filter matrices for the two branches; m filters of dimension d each."""

    w_pos: np.ndarray
    w_neg: np.ndarray
    activation: Activation = LINEAR

    @property
    def m(self) -> int:
        return self.w_pos.shape[0]

    @property
    def d(self) -> int:
        return self.w_pos.shape[1]

    def copy(self) -> "CnnParams":
        return CnnParams(self.w_pos.copy(), self.w_neg.copy(), self.activation)

    @property
    def is_linear(self) -> bool:
        return self.activation.kind == "linear"

    @property
    def linear_head(self) -> np.ndarray:
        """For linear psi the whole network collapses to one d-vector."""
        return (self.w_pos.sum(axis=0) - self.w_neg.sum(axis=0)) / self.m


@dataclass(frozen=True)
class FeatureProbe:
    """Signal-noise decomposition probes of the filters.

    lam[j, r] = <w_{j,r}, j*v1>, gam[j, r] = <w_{j,r}, j*v2> with row 0
    for j=+1 and row 1 for j=-1; xi holds subsampled noise overlaps
    <w_{j,r}, j*xi_i>.
    """

    lam: np.ndarray
    gam: np.ndarray
    xi: np.ndarray
    agg_inv: float
    agg_spu: float

    @property
    def max_xi(self) -> float:
        return float(np.max(np.abs(self.xi))) if self.xi.size else 0.0


def init_cnn(
    m: int,
    d: int,
    sigma_0: float = 0.01,
    activation: Activation = LINEAR,
    seed: int = 0,
) -> CnnParams:
    """Gaussian N(0, sigma_0^2) initialization of both filter banks."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if d < 3:
        raise ValueError(f"d must be >= 3, got {d}")
    if sigma_0 < 0:
        raise ValueError(f"sigma_0 must be >= 0, got {sigma_0}")
    rng = np.random.Generator(np.random.Philox(seed))
    w_pos = rng.normal(0.0, sigma_0, size=(m, d))
    w_neg = rng.normal(0.0, sigma_0, size=(m, d))
    return CnnParams(w_pos, w_neg, activation)


def logit(p: CnnParams, x1: np.ndarray, x2: np.ndarray) -> float:
    """Forward pass for a single sample."""
    if x1.shape != (p.d,) or x2.shape != (p.d,):
        raise ValueError(f"patch dimension mismatch: expected ({p.d},)")
    act = p.activation
    pos = act.psi(p.w_pos @ x1) + act.psi(p.w_pos @ x2)
    neg = act.psi(p.w_neg @ x1) + act.psi(p.w_neg @ x2)
    return float((pos.sum() - neg.sum()) / p.m)


def logits(p: CnnParams, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Vectorized forward pass over an (n, d) batch of patch pairs."""
    if p.is_linear:
        return (x1 + x2) @ p.linear_head
    act = p.activation
    pos = act.psi(x1 @ p.w_pos.T) + act.psi(x2 @ p.w_pos.T)
    neg = act.psi(x1 @ p.w_neg.T) + act.psi(x2 @ p.w_neg.T)
    return (pos.sum(axis=1) - neg.sum(axis=1)) / p.m


def logit_grad(p: CnnParams, x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d(logit)/dw for a single sample; returns (g_pos, g_neg)."""
    act = p.activation
    g_pos = (act.dpsi(p.w_pos @ x1)[:, None] * x1 + act.dpsi(p.w_pos @ x2)[:, None] * x2) / p.m
    g_neg = -(act.dpsi(p.w_neg @ x1)[:, None] * x1 + act.dpsi(p.w_neg @ x2)[:, None] * x2) / p.m
    return g_pos, g_neg


def probe_features(
    p: CnnParams, ds: TwoBitDataset | None = None, xi_subsample: int = 64
) -> FeatureProbe:
    """Feature and noise overlaps of the current filters.

    lam/gam are exact inner products; xi overlaps use up to
    xi_subsample noise patches per environment (their magnitude is the
    quantity of interest).
    """
    lam = np.stack([p.w_pos[:, 0], -p.w_neg[:, 0]])
    gam = np.stack([p.w_pos[:, 1], -p.w_neg[:, 1]])
    if ds is not None and ds.n > 0:
        idx = np.concatenate(
            [np.arange(ds.env_slice(e).start, ds.env_slice(e).stop)[:xi_subsample]
             for e in range(ds.n_envs)]
        )
        noise = ds.x2[idx]
        xi = np.stack([p.w_pos @ noise.T, -(p.w_neg @ noise.T)])
    else:
        xi = np.zeros((2, p.m, 0))
    return FeatureProbe(
        lam=lam,
        gam=gam,
        xi=xi,
        agg_inv=float(lam.sum() / p.m),
        agg_spu=float(gam.sum() / p.m),
    )
