"""Finite-difference gradient oracles for every trainable objective.

Central differences with step h on small randomized instances; used by
both the CLI gradient suite and the test suite. Errors are reported as
norm-relative: ||analytic - numeric|| / max(||analytic||, ||numeric||).
"""
from __future__ import annotations

import numpy as np

from .cnn import Activation, CnnParams, init_cnn
from .data import EnvironmentSpec, TwoBitDataset, sample_dataset
from .mlp import Classifier, Featurizer, init_classifier, init_featurizer, dataset_inputs
from .objectives import erm_loss_grad, feat_objective, irmv1_loss_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


def fd_grad_cnn(loss_fn, p: CnnParams, h: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of a scalar loss over both filter banks."""
    grads = []
    for w in (p.w_pos, p.w_neg):
        g = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + h
                up = loss_fn(p)
                w[i, j] = orig - h
                dn = loss_fn(p)
                w[i, j] = orig
                g[i, j] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads[0], grads[1]


def _small_instance(seed: int, activation: Activation, m=4, d=8, n=32):
    specs = [EnvironmentSpec(0.25, 0.1, n // 2), EnvironmentSpec(0.25, 0.2, n // 2)]
    ds = sample_dataset(specs, d=d, sigma_p=0.1, seed=seed)
    p = init_cnn(m, d, sigma_0=0.5, activation=activation, seed=seed + 1)
    return ds, p


def gradcheck_erm(seed: int = 0, activation: Activation = Activation("linear"),
                  h: float = 1e-5) -> float:
    ds, p = _small_instance(seed, activation)
    _, (g_pos, g_neg) = erm_loss_grad(p, ds)
    f_pos, f_neg = fd_grad_cnn(lambda q: erm_loss_grad(q, ds)[0].erm_total, p, h)
    return max(_rel_err(g_pos, f_pos), _rel_err(g_neg, f_neg))


def gradcheck_irmv1(seed: int = 0, lam: float = 10.0,
                    activation: Activation = Activation("linear"),
                    h: float = 1e-5) -> float:
    ds, p = _small_instance(seed, activation)
    _, (g_pos, g_neg) = irmv1_loss_grad(p, ds, lam)
    f_pos, f_neg = fd_grad_cnn(
        lambda q: irmv1_loss_grad(q, ds, lam)[0].irm_total, p, h
    )
    return max(_rel_err(g_pos, f_pos), _rel_err(g_neg, f_neg))


def _feat_instance(seed: int, d=8, n=32, hidden=8):
    specs = [EnvironmentSpec(0.25, 0.1, n // 2), EnvironmentSpec(0.25, 0.2, n // 2)]
    ds = sample_dataset(specs, d=d, sigma_p=0.1, seed=seed)
    x, y = dataset_inputs(ds), ds.y
    rng = np.random.Generator(np.random.Philox(seed + 5))
    featurizer = init_featurizer(2 * d, hidden, "relu", seed=seed + 2)
    active = init_classifier(hidden, seed=seed + 3)
    active.w = active.w * 10.0  # move away from tiny-logit degeneracy
    historical = [Classifier(rng.normal(0.0, 1.0, size=hidden), 0.1)]
    perm = rng.permutation(n)
    aug_sets = [perm[: n // 2], perm[n // 2 :]]
    ret_sets = [perm[: n // 3]]
    return ds, x, y, featurizer, active, historical, aug_sets, ret_sets


def gradcheck_feat(seed: int = 0, lambda_retain: float = 0.7, h: float = 1e-5) -> float:
    """Finite differences through the DRO max and retention terms."""
    ds, x, y, featurizer, active, historical, aug_sets, ret_sets = _feat_instance(seed)

    def loss_value() -> float:
        value, _, _, _ = feat_objective(
            featurizer, active, historical, aug_sets, ret_sets, lambda_retain, x, y
        )
        return value.loss

    _, (gw_f, gb_f), (gw_c, gb_c), _ = feat_objective(
        featurizer, active, historical, aug_sets, ret_sets, lambda_retain, x, y
    )

    worst = 0.0
    for li, w in enumerate(featurizer.weights):
        num = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + h
                up = loss_value()
                w[i, j] = orig - h
                dn = loss_value()
                w[i, j] = orig
                num[i, j] = (up - dn) / (2.0 * h)
        worst = max(worst, _rel_err(gw_f[li], num))
        numb = np.zeros_like(featurizer.biases[li])
        for i in range(numb.size):
            orig = featurizer.biases[li][i]
            featurizer.biases[li][i] = orig + h
            up = loss_value()
            featurizer.biases[li][i] = orig - h
            dn = loss_value()
            featurizer.biases[li][i] = orig
            numb[i] = (up - dn) / (2.0 * h)
        worst = max(worst, _rel_err(gb_f[li], numb))

    num_c = np.zeros_like(active.w)
    for i in range(active.w.size):
        orig = active.w[i]
        active.w[i] = orig + h
        up = loss_value()
        active.w[i] = orig - h
        dn = loss_value()
        active.w[i] = orig
        num_c[i] = (up - dn) / (2.0 * h)
    worst = max(worst, _rel_err(gw_c, num_c))

    orig = active.b
    active.b = orig + h
    up = loss_value()
    active.b = orig - h
    dn = loss_value()
    active.b = orig
    worst = max(worst, _rel_err(np.array([gb_c]), np.array([(up - dn) / (2.0 * h)])))
    return worst


def gradcheck_suite(seeds: tuple[int, ...] = (0, 1, 2)) -> dict:
    """The full gradient suite; passes when every error is < 1e-5."""
    results = {"erm": [], "irmv1_0": [], "irmv1_10": [], "irmv1_1e8": [], "feat": []}
    for s in seeds:
        for act in (Activation("linear"), Activation("smoothed_relu"), Activation("tanh")):
            results["erm"].append(gradcheck_erm(s, act))
            results["irmv1_0"].append(gradcheck_irmv1(s, 0.0, act))
            results["irmv1_10"].append(gradcheck_irmv1(s, 10.0, act))
            results["irmv1_1e8"].append(gradcheck_irmv1(s, 1e8, act))
        results["feat"].append(gradcheck_feat(s))
    max_err = max(max(v) for v in results.values())
    return {
        "max_rel_err": max_err,
        "per_objective": {k: max(v) for k, v in results.items()},
        "passed": bool(max_err < 1e-5),
    }
