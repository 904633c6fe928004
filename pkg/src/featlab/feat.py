"""Feature-augmented training: iterative rounds of worst-group learning
on misclassified samples with retention of already-learned features.

Each round partitions the training set by correctness of the current
round model, trains a fresh classifier head (and the shared featurizer)
on the augmentation groups via a DRO max-loss plus retention terms over
frozen historical heads, and finally averages all round classifiers.
The incremental variant keeps only the latest partition and head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TwoBitDataset
from .mlp import Classifier, Featurizer, MlpParams, dataset_inputs, init_classifier, init_featurizer
from .objectives import feat_objective, logistic


class NumericAbortError(RuntimeError):
    """Raised when the round objective becomes non-finite."""


@dataclass(frozen=True)
class FeatConfig:
    """Hyperparameters of a feature-augmented training run."""

    max_rounds: int = 2
    inner_epochs: int = 200
    termination_threshold: float = 0.55  # train-accuracy floor per round
    termination_sum: float = 1.30  # train + retention floor (incremental)
    lambda_retain: float = 1.0
    lr: float = 0.5
    hidden: int = 32
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not 0.0 < self.termination_threshold <= 1.0:
            raise ValueError("termination_threshold must be in (0, 1]")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class FeatGroups:
    """Augmentation/retention index sets and their frozen classifiers.

    aug_sets[0] is always the full training set; for every later round
    the paired (aug, ret) sets partition the training indices.
    """

    aug_sets: list[np.ndarray]
    ret_sets: list[np.ndarray] = field(default_factory=list)
    historical_classifiers: list[Classifier] = field(default_factory=list)


@dataclass
class RoundMetrics:
    round_index: int
    train_acc: float
    retention_acc: float
    ood_acc: float | None
    aug_size: int
    ret_size: int
    kept: bool
    epoch_log: list[dict] = field(default_factory=list)


@dataclass
class FeatResult:
    final_featurizer: Featurizer
    averaged_classifier: Classifier
    round_classifiers: list[Classifier]
    rounds: list[RoundMetrics]
    rounds_completed: int
    termination_reason: str

    @property
    def model(self) -> MlpParams:
        return MlpParams(self.final_featurizer, self.averaged_classifier)


def evaluate(model: MlpParams, ds: TwoBitDataset) -> dict:
    """0/1 accuracy under sign(logit); zero logit counts as wrong."""
    z = ds.y * model.logits(dataset_inputs(ds))
    per_env = {}
    for e in range(ds.n_envs):
        sl = ds.env_slice(e)
        per_env[e] = float(np.mean(z[sl] > 0))
    return {"accuracy": float(np.mean(z > 0)), "per_env": per_env}


def partition_by_correctness(
    model: MlpParams, ds: TwoBitDataset
) -> tuple[np.ndarray, np.ndarray]:
    """(augmentation, retention) = (misclassified, correct) indices."""
    z = ds.y * model.logits(dataset_inputs(ds))
    correct = z > 0
    return np.flatnonzero(~correct), np.flatnonzero(correct)


def retention_accuracy(
    featurizer: Featurizer,
    historical_classifiers: list[Classifier],
    ret_sets: list[np.ndarray],
    ds: TwoBitDataset,
) -> float:
    """Mean accuracy of each frozen head on its paired retention set."""
    if len(historical_classifiers) != len(ret_sets):
        raise ValueError("each retention set needs its paired frozen classifier")
    if not ret_sets:
        return float("nan")
    x = dataset_inputs(ds)
    accs = []
    for idx, head in zip(ret_sets, historical_classifiers):
        feats, _ = featurizer.forward(x[idx])
        z = ds.y[idx] * head.logits(feats)
        accs.append(float(np.mean(z > 0)))
    return float(np.mean(accs))


def _train_round(
    featurizer: Featurizer,
    head: Classifier,
    groups: FeatGroups,
    cfg: FeatConfig,
    x: np.ndarray,
    y: np.ndarray,
    epoch_log: list[dict],
) -> None:
    """Inner full-batch GD epochs on the round objective (in place)."""
    for epoch in range(cfg.inner_epochs):
        value, (gw_f, gb_f), (gw_c, gb_c), _ = feat_objective(
            featurizer, head, groups.historical_classifiers,
            groups.aug_sets, groups.ret_sets, cfg.lambda_retain, x, y,
        )
        if not np.isfinite(value.loss):
            raise NumericAbortError(f"round objective non-finite at epoch {epoch}")
        for li in range(len(featurizer.weights)):
            featurizer.weights[li] -= cfg.lr * gw_f[li]
            featurizer.biases[li] -= cfg.lr * gb_f[li]
        head.w -= cfg.lr * gw_c
        head.b -= cfg.lr * gb_c
        epoch_log.append(
            {"epoch": epoch, "dro_loss": value.dro_loss, "retain_loss": value.retain_loss}
        )


def _mean_classifier(heads: list[Classifier]) -> Classifier:
    w = np.mean([h.w for h in heads], axis=0)
    b = float(np.mean([h.b for h in heads]))
    return Classifier(w, b)


def _run(
    cfg: FeatConfig,
    ds_train: TwoBitDataset,
    ds_ood: TwoBitDataset | None,
    incremental: bool,
) -> FeatResult:
    x = dataset_inputs(ds_train)
    y = ds_train.y
    featurizer = init_featurizer(x.shape[1], cfg.hidden, cfg.activation, seed=cfg.seed)
    all_idx = np.arange(ds_train.n)

    groups = FeatGroups(aug_sets=[all_idx])
    kept_heads: list[Classifier] = []
    running_mean: Classifier | None = None
    rounds: list[RoundMetrics] = []
    reason = "max_rounds"
    aug, ret = all_idx, np.array([], dtype=np.int64)

    for k in range(1, cfg.max_rounds + 1):
        if len(aug) == 0:
            reason = "empty_augmentation"
            break

        snapshot = (featurizer.copy(), [h.copy() for h in kept_heads])
        head = init_classifier(cfg.hidden, seed=cfg.seed + 1000 * k)
        epoch_log: list[dict] = []
        _train_round(featurizer, head, groups, cfg, x, y, epoch_log)

        model_k = MlpParams(featurizer, head)
        train_acc = evaluate(model_k, ds_train)["accuracy"]
        ret_acc = retention_accuracy(
            featurizer, groups.historical_classifiers, groups.ret_sets, ds_train
        )
        ood_acc = evaluate(model_k, ds_ood)["accuracy"] if ds_ood is not None else None

        kept = True
        if train_acc < cfg.termination_threshold:
            kept = False
            reason = "train_acc_below_p"
        elif incremental and groups.ret_sets and not np.isnan(ret_acc):
            if train_acc + ret_acc < cfg.termination_sum:
                kept = False
                reason = "retention_check"

        rounds.append(
            RoundMetrics(
                round_index=k,
                train_acc=train_acc,
                retention_acc=ret_acc,
                ood_acc=ood_acc,
                aug_size=len(aug),
                ret_size=len(ret),
                kept=kept,
                epoch_log=epoch_log,
            )
        )
        if not kept:
            # discard the failed round entirely
            featurizer, kept_heads = snapshot
            break

        kept_heads.append(head.copy())
        if running_mean is None:
            running_mean = head.copy()
        else:
            running_mean.w = running_mean.w * (len(kept_heads) - 1) / len(kept_heads) \
                + head.w / len(kept_heads)
            running_mean.b = running_mean.b * (len(kept_heads) - 1) / len(kept_heads) \
                + head.b / len(kept_heads)

        aug, ret = partition_by_correctness(model_k, ds_train)
        if incremental:
            groups = FeatGroups(
                aug_sets=[aug], ret_sets=[ret], historical_classifiers=[head.copy()]
            )
        else:
            groups.aug_sets.append(aug)
            groups.ret_sets.append(ret)
            groups.historical_classifiers.append(head.copy())

    if not kept_heads:
        raise RuntimeError("no round survived; lower termination_threshold")

    final = _mean_classifier(kept_heads)
    return FeatResult(
        final_featurizer=featurizer,
        averaged_classifier=final,
        round_classifiers=kept_heads,
        rounds=rounds,
        rounds_completed=len(kept_heads),
        termination_reason=reason,
    )


def run_feat(
    cfg: FeatConfig, ds_train: TwoBitDataset, ds_ood: TwoBitDataset | None = None
) -> FeatResult:
    """Full variant: groups accumulate across rounds."""
    return _run(cfg, ds_train, ds_ood, incremental=False)


def run_ifeat(
    cfg: FeatConfig, ds_train: TwoBitDataset, ds_ood: TwoBitDataset | None = None
) -> FeatResult:
    """Incremental variant: only the latest partition and head are kept;
    termination additionally requires train + retention accuracy to stay
    at or above termination_sum."""
    return _run(cfg, ds_train, ds_ood, incremental=True)


def erm_baseline(
    cfg: FeatConfig, ds_train: TwoBitDataset, total_epochs: int
) -> MlpParams:
    """Plain single-head training for the same total number of epochs."""
    x = dataset_inputs(ds_train)
    featurizer = init_featurizer(x.shape[1], cfg.hidden, cfg.activation, seed=cfg.seed)
    head = init_classifier(cfg.hidden, seed=cfg.seed + 1000)
    groups = FeatGroups(aug_sets=[np.arange(ds_train.n)])
    erm_cfg = FeatConfig(
        max_rounds=1,
        inner_epochs=total_epochs,
        termination_threshold=cfg.termination_threshold,
        lambda_retain=0.0,
        lr=cfg.lr,
        hidden=cfg.hidden,
        activation=cfg.activation,
        seed=cfg.seed,
    )
    _train_round(featurizer, head, groups, erm_cfg, x, ds_train.y, [])
    return MlpParams(featurizer, head)


def v1_alignment(featurizer: Featurizer, d: int) -> float:
    """Largest normalized projection of any first-layer row onto the
    invariant direction (coordinate 0 of the feature patch)."""
    w = featurizer.weights[0]
    norms = np.linalg.norm(w, axis=1)
    norms[norms == 0] = 1.0
    return float(np.max(np.abs(w[:, 0]) / norms))
