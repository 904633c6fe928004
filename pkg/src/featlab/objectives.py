"""Training objectives: ERM, the IRMv1 penalty, and the DRO+retention
composite used by the feature-augmented trainer.

All losses use the logistic loss l(z) = log(1 + exp(-z)) in its
log-sum-exp form; penalty weights up to 1e8 magnify rounding, so every
path stays in float64 and l' is clamped to [-1, 0].
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cnn import CnnParams
from .data import TwoBitDataset
from .mlp import Classifier, Featurizer


def logistic(z: np.ndarray) -> np.ndarray:
    """l(z) = log(1 + exp(-z)), numerically stable."""
    return np.logaddexp(0.0, -z)


def logistic_d1(z: np.ndarray) -> np.ndarray:
    """l'(z) = -1/(1 + exp(z)), clamped to [-1, 0]."""
    with np.errstate(over="ignore"):
        out = -1.0 / (1.0 + np.exp(z))
    return np.clip(out, -1.0, 0.0)


def logistic_d2(z: np.ndarray) -> np.ndarray:
    """l''(z) = exp(z)/(1 + exp(z))^2 = sigmoid(z)*sigmoid(-z)."""
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 - s)


@dataclass(frozen=True)
class PenaltyVector:
    """Per-environment penalty scalars C^e = mean(l'(y*yhat) * y*yhat)."""

    c: np.ndarray
    norm2: float

    @staticmethod
    def from_entries(c: np.ndarray) -> "PenaltyVector":
        return PenaltyVector(c=c, norm2=float(np.linalg.norm(c)))


@dataclass(frozen=True)
class LossReport:
    """Loss breakdown for one evaluation of the objective."""

    erm_per_env: np.ndarray
    erm_total: float
    irm_penalty_per_env: np.ndarray
    irm_total: float
    lam: float
    c: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "erm_total": self.erm_total,
                "irm_total": self.irm_total,
                "c": self.c.tolist(),
                "lambda": self.lam,
            }
        )


def _forward_scores(p: CnnParams, ds: TwoBitDataset):
    """Per-sample logits plus the branch score matrices (None if linear)."""
    if p.is_linear:
        yhat = ds.x_sum @ p.linear_head
        return yhat, None
    act = p.activation
    s1p = ds.x1 @ p.w_pos.T
    s2p = ds.x2 @ p.w_pos.T
    s1n = ds.x1 @ p.w_neg.T
    s2n = ds.x2 @ p.w_neg.T
    yhat = (
        act.psi(s1p).sum(axis=1)
        + act.psi(s2p).sum(axis=1)
        - act.psi(s1n).sum(axis=1)
        - act.psi(s2n).sum(axis=1)
    ) / p.m
    return yhat, (s1p, s2p, s1n, s2n)


def _contract_grads(
    p: CnnParams, ds: TwoBitDataset, coeff: np.ndarray, scores
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient matrices from per-sample chain-rule coefficients.

    coeff[i] multiplies d(yhat_i)/dw; for linear activation the result
    is identical across filters of a branch, so one contraction serves
    all rows.
    """
    if p.is_linear:
        g = (ds.x_sum.T @ coeff) / p.m
        g_pos = np.tile(g, (p.m, 1))
        return g_pos, -g_pos
    act = p.activation
    s1p, s2p, s1n, s2n = scores
    cw = coeff[:, None]
    g_pos = ((act.dpsi(s1p) * cw).T @ ds.x1 + (act.dpsi(s2p) * cw).T @ ds.x2) / p.m
    g_neg = -(((act.dpsi(s1n) * cw).T @ ds.x1 + (act.dpsi(s2n) * cw).T @ ds.x2) / p.m)
    return g_pos, g_neg


def _report(ds: TwoBitDataset, yhat: np.ndarray, lam: float) -> tuple[LossReport, np.ndarray]:
    """LossReport plus the margin vector z = y*yhat."""
    z = ds.y * yhat
    erm = np.empty(ds.n_envs)
    c = np.empty(ds.n_envs)
    for e in range(ds.n_envs):
        sl = ds.env_slice(e)
        erm[e] = float(np.mean(logistic(z[sl])))
        c[e] = float(np.mean(logistic_d1(z[sl]) * z[sl]))
    erm_total = float(erm.sum())
    report = LossReport(
        erm_per_env=erm,
        erm_total=erm_total,
        irm_penalty_per_env=c**2,
        irm_total=erm_total + lam * float(np.sum(c**2)),
        lam=lam,
        c=c,
    )
    return report, z


def erm_loss_grad(
    p: CnnParams, ds: TwoBitDataset
) -> tuple[LossReport, tuple[np.ndarray, np.ndarray]]:
    """Sum over environments of the mean logistic loss, with gradients."""
    yhat, scores = _forward_scores(p, ds)
    report, z = _report(ds, yhat, lam=0.0)
    coeff = logistic_d1(z) * ds.y
    for e in range(ds.n_envs):
        coeff[ds.env_slice(e)] /= ds.envs[e].n
    return report, _contract_grads(p, ds, coeff, scores)


def irmv1_penalty(p: CnnParams, ds: TwoBitDataset) -> PenaltyVector:
    """Exact per-environment penalty scalars at the current parameters."""
    yhat, _ = _forward_scores(p, ds)
    z = ds.y * yhat
    c = np.array(
        [float(np.mean(logistic_d1(z[ds.env_slice(e)]) * z[ds.env_slice(e)]))
         for e in range(ds.n_envs)]
    )
    return PenaltyVector.from_entries(c)


def irmv1_loss_grad(
    p: CnnParams, ds: TwoBitDataset, lam: float
) -> tuple[LossReport, tuple[np.ndarray, np.ndarray]]:
    """ERM plus lam * sum_e (C^e)^2, with the explicit analytic gradient.

    Per sample, the chain-rule coefficient is the ERM one reweighted by
    (1 + 2*lam*C^e) plus the curvature term 2*lam*C^e * l''(z) * yhat;
    reduces exactly to erm_loss_grad when lam = 0.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    yhat, scores = _forward_scores(p, ds)
    report, z = _report(ds, yhat, lam)
    coeff = np.empty(ds.n)
    for e in range(ds.n_envs):
        sl = ds.env_slice(e)
        ce = report.c[e]
        coeff[sl] = (
            (1.0 + 2.0 * lam * ce) * logistic_d1(z[sl]) * ds.y[sl]
            + 2.0 * lam * ce * logistic_d2(z[sl]) * yhat[sl]
        ) / ds.envs[e].n
    return report, _contract_grads(p, ds, coeff, scores)


@dataclass(frozen=True)
class FeatObjectiveValue:
    """Breakdown of one DRO+retention evaluation."""

    loss: float
    dro_loss: float
    retain_loss: float
    aug_losses: np.ndarray
    ret_losses: np.ndarray
    argmax_aug: int


def feat_objective(
    featurizer: Featurizer,
    active_classifier: Classifier,
    historical_classifiers: list[Classifier],
    aug_sets: list[np.ndarray],
    ret_sets: list[np.ndarray],
    lambda_retain: float,
    x: np.ndarray,
    y: np.ndarray,
):
    """Worst-group loss over augmentation sets plus retention penalty.

    loss = max_i ERM(active . phi on aug_i)
         + lambda_retain * sum_i ERM(frozen historical_i . phi on ret_i)

    The max is exact with a subgradient through the lowest-index argmax
    on ties. Gradients flow to the featurizer and active classifier
    only; historical classifiers receive identically zero gradient.
    Returns (FeatObjectiveValue, featurizer grads, classifier grad).
    """
    if not aug_sets:
        raise ValueError("aug_sets must be nonempty")
    if len(historical_classifiers) != len(ret_sets):
        raise ValueError("each retention set needs its paired frozen classifier")

    aug_losses = np.empty(len(aug_sets))
    aug_caches = []
    for idx in aug_sets:
        feats, cache = featurizer.forward(x[idx])
        z = y[idx] * active_classifier.logits(feats)
        aug_losses_i = logistic(z)
        aug_losses[len(aug_caches)] = float(np.mean(aug_losses_i))
        aug_caches.append((idx, feats, cache, z))

    argmax = int(np.argmax(aug_losses))  # lowest index on exact ties
    idx, feats, cache, z = aug_caches[argmax]
    n_a = len(idx)
    dz = logistic_d1(z) * y[idx] / n_a
    gw_cls = feats.T @ dz
    gb_cls = float(dz.sum())
    d_feats = np.outer(dz, active_classifier.w)
    gw_feat, gb_feat = featurizer.backward(cache, d_feats)

    ret_losses = np.empty(len(ret_sets))
    for i, (idx_r, frozen) in enumerate(zip(ret_sets, historical_classifiers)):
        feats_r, cache_r = featurizer.forward(x[idx_r])
        z_r = y[idx_r] * frozen.logits(feats_r)
        ret_losses[i] = float(np.mean(logistic(z_r)))
        if lambda_retain != 0.0:
            dz_r = lambda_retain * logistic_d1(z_r) * y[idx_r] / len(idx_r)
            d_feats_r = np.outer(dz_r, frozen.w)
            gw_r, gb_r = featurizer.backward(cache_r, d_feats_r)
            for li in range(len(gw_feat)):
                gw_feat[li] += gw_r[li]
                gb_feat[li] += gb_r[li]

    dro = float(aug_losses[argmax])
    retain = float(ret_losses.sum())
    value = FeatObjectiveValue(
        loss=dro + lambda_retain * retain,
        dro_loss=dro,
        retain_loss=retain,
        aug_losses=aug_losses,
        ret_losses=ret_losses,
        argmax_aug=argmax,
    )
    historical_grads = [np.zeros_like(h.w) for h in historical_classifiers]
    return value, (gw_feat, gb_feat), (gw_cls, gb_cls), historical_grads
