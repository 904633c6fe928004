"""Feature-augmented training: rounds, retention, termination, averaging."""
import numpy as np
import pytest

from featlab.data import EnvironmentSpec, sample_dataset, sample_test_set
from featlab.feat import (
    FeatConfig,
    MlpParams,
    erm_baseline,
    evaluate,
    partition_by_correctness,
    retention_accuracy,
    run_feat,
    run_ifeat,
    v1_alignment,
)
from featlab.mlp import Classifier, dataset_inputs, init_classifier, init_featurizer

TRAIN_SPECS = [EnvironmentSpec(0.25, 0.1, 500), EnvironmentSpec(0.25, 0.2, 500)]


def _data(seed=0, d=20):
    ds = sample_dataset(TRAIN_SPECS, d=d, sigma_p=0.01, seed=seed)
    ood = sample_test_set(400, [0.1, 0.2], d=d, sigma_p=0.01, seed=seed + 500)
    return ds, ood


def _fresh_model(ds, hidden=16, seed=0):
    x = dataset_inputs(ds)
    f = init_featurizer(x.shape[1], hidden, "relu", seed=seed)
    c = init_classifier(hidden, seed=seed + 1)
    return MlpParams(f, c)


def test_config_validation():
    with pytest.raises(ValueError):
        FeatConfig(max_rounds=0)
    with pytest.raises(ValueError):
        FeatConfig(termination_threshold=0.0)
    with pytest.raises(ValueError):
        FeatConfig(termination_threshold=1.5)
    with pytest.raises(ValueError):
        FeatConfig(inner_epochs=0)
    with pytest.raises(ValueError):
        FeatConfig(lr=0.0)


def test_evaluate_oracle_and_zero_model():
    ds, _ = _data()
    model = _fresh_model(ds)
    model.classifier.w[:] = 0.0
    model.classifier.b = 0.0
    # zero logits count as wrong
    assert evaluate(model, ds)["accuracy"] == 0.0
    rep = evaluate(_fresh_model(ds, seed=3), ds)
    assert set(rep["per_env"]) == {0, 1}
    assert np.isclose(
        rep["accuracy"],
        np.mean([rep["per_env"][0], rep["per_env"][1]]),
    )


def test_partition_is_exact_complement():
    ds, _ = _data(seed=1)
    model = _fresh_model(ds, seed=2)
    aug, ret = partition_by_correctness(model, ds)
    assert len(aug) + len(ret) == ds.n
    assert len(np.intersect1d(aug, ret)) == 0
    merged = np.sort(np.concatenate([aug, ret]))
    assert np.array_equal(merged, np.arange(ds.n))
    acc = evaluate(model, ds)["accuracy"]
    assert np.isclose(len(ret) / ds.n, acc)


def test_partition_spurious_scorer():
    # a pure spurious-coordinate scorer is right with prob 1 - beta_e,
    # so the retention set holds about 85% of the training samples
    ds, _ = _data(seed=4)
    x = dataset_inputs(ds)
    f = init_featurizer(x.shape[1], 4, "identity", seed=0)
    f.weights[0][:] = 0.0
    f.biases[0][:] = 0.0
    f.weights[0][0, 1] = 1.0  # pass through x1[1]
    c = init_classifier(4, seed=1)
    c.w[:] = 0.0
    c.w[0] = 1.0
    c.b = 0.0
    model = MlpParams(f, c)
    aug, ret = partition_by_correctness(model, ds)
    assert abs(len(ret) / ds.n - 0.85) < 0.05


def test_retention_accuracy_pairing_and_values():
    ds, _ = _data(seed=5)
    model = _fresh_model(ds, seed=6)
    aug, ret = partition_by_correctness(model, ds)
    # the head that produced the partition scores 1.0 on its own
    # retention set by construction
    acc = retention_accuracy(model.featurizer, [model.classifier], [ret], ds)
    assert acc == 1.0
    # an unrelated random index set lands near the head's plain accuracy
    rng = np.random.default_rng(0)
    rand_idx = rng.choice(ds.n, size=ds.n // 2, replace=False)
    acc_rand = retention_accuracy(model.featurizer, [model.classifier], [rand_idx], ds)
    overall = evaluate(model, ds)["accuracy"]
    assert abs(acc_rand - overall) < 0.1
    with pytest.raises(ValueError):
        retention_accuracy(model.featurizer, [model.classifier], [ret, ret], ds)
    assert np.isnan(retention_accuracy(model.featurizer, [], [], ds))


def test_single_round_variants_identical():
    # with one round there is no history, so full and incremental
    # trajectories are bitwise identical
    ds, ood = _data(seed=0)
    cfg = FeatConfig(max_rounds=1, inner_epochs=50, hidden=16, lr=0.5, seed=0)
    a = run_feat(cfg, ds, ood)
    b = run_ifeat(cfg, ds, ood)
    assert np.array_equal(a.averaged_classifier.w, b.averaged_classifier.w)
    assert a.averaged_classifier.b == b.averaged_classifier.b
    for wa, wb in zip(a.final_featurizer.weights, b.final_featurizer.weights):
        assert np.array_equal(wa, wb)
    assert a.rounds[0].train_acc == b.rounds[0].train_acc
    assert a.termination_reason == b.termination_reason == "max_rounds"


def test_round_two_fixes_distribution_shift():
    ds, ood = _data(seed=0)
    cfg = FeatConfig(max_rounds=2, inner_epochs=200, hidden=32, lr=0.5, seed=0)
    res = run_feat(cfg, ds, ood)
    assert res.rounds_completed == 2
    assert all(r.kept for r in res.rounds)
    r1, r2 = res.rounds
    # round 1 learns the more predictive spurious coordinate and fails
    # under the flipped test correlation; round 2 trains on the
    # misclassified remainder and recovers
    assert r1.ood_acc < 0.5
    assert r2.ood_acc > 0.9
    assert r1.train_acc > 0.55 and r2.train_acc > 0.55
    assert 0 < r2.aug_size < ds.n
    assert r2.aug_size + r2.ret_size == ds.n


def test_round_metrics_and_epoch_log_shape():
    ds, ood = _data(seed=1)
    cfg = FeatConfig(max_rounds=2, inner_epochs=40, hidden=16, lr=0.5, seed=1)
    res = run_feat(cfg, ds, ood)
    for r in res.rounds:
        assert len(r.epoch_log) == cfg.inner_epochs
        assert set(r.epoch_log[0]) == {"epoch", "dro_loss", "retain_loss"}
        assert r.epoch_log[0]["retain_loss"] == 0.0 or r.round_index > 1
    # first-round retention accuracy is undefined (no history yet)
    assert np.isnan(res.rounds[0].retention_acc)


def test_final_classifier_is_exact_mean():
    ds, ood = _data(seed=2)
    cfg = FeatConfig(max_rounds=2, inner_epochs=100, hidden=16, lr=0.5, seed=2)
    res = run_feat(cfg, ds, ood)
    heads = res.round_classifiers
    assert len(heads) == res.rounds_completed
    mean_w = np.mean([h.w for h in heads], axis=0)
    mean_b = np.mean([h.b for h in heads])
    assert np.max(np.abs(res.averaged_classifier.w - mean_w)) < 1e-12
    assert abs(res.averaged_classifier.b - mean_b) < 1e-12


def test_historical_heads_frozen_across_rounds():
    # the head stored after round 1 must be the round-1 head verbatim
    ds, ood = _data(seed=3)
    cfg = FeatConfig(max_rounds=2, inner_epochs=60, hidden=16, lr=0.5, seed=3)
    one = run_feat(FeatConfig(**{**cfg.__dict__, "max_rounds": 1}), ds, ood)
    two = run_feat(cfg, ds, ood)
    assert np.array_equal(one.round_classifiers[0].w, two.round_classifiers[0].w)
    assert one.round_classifiers[0].b == two.round_classifiers[0].b


def test_ifeat_retention_check_termination():
    # with a permissive accuracy floor the combined train + retention
    # criterion stops the incremental run, and it fires while retention
    # accuracy is still intact (>= 0.5)
    specs = [EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)]
    ds = sample_dataset(specs, d=50, sigma_p=0.01, seed=0)
    cfg = FeatConfig(
        max_rounds=3, inner_epochs=200, hidden=32, lr=0.5, seed=0,
        termination_threshold=0.1,
    )
    res = run_ifeat(cfg, ds)
    assert res.termination_reason == "retention_check"
    last = res.rounds[-1]
    assert not last.kept
    assert last.train_acc + last.retention_acc < cfg.termination_sum
    assert last.retention_acc >= 0.5  # guard fires before retention decays
    assert res.rounds_completed == len(res.rounds) - 1


def test_failed_round_reverts_featurizer():
    specs = [EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)]
    ds = sample_dataset(specs, d=50, sigma_p=0.01, seed=0)
    base = FeatConfig(max_rounds=2, inner_epochs=200, hidden=32, lr=0.5, seed=0)
    two = run_feat(base, ds)
    three = run_feat(FeatConfig(**{**base.__dict__, "max_rounds": 3}), ds)
    assert three.termination_reason == "train_acc_below_p"
    assert three.rounds_completed == 2 and not three.rounds[-1].kept
    # dropped round leaves the kept model exactly as after round 2
    for wa, wb in zip(two.final_featurizer.weights, three.final_featurizer.weights):
        assert np.array_equal(wa, wb)
    assert np.array_equal(two.averaged_classifier.w, three.averaged_classifier.w)


def test_empty_augmentation_termination():
    # noiseless, flip-free data is perfectly separable, so round 2 has
    # no misclassified samples left
    specs = [EnvironmentSpec(0.0, 0.0, 200), EnvironmentSpec(0.0, 0.0, 200)]
    ds = sample_dataset(specs, d=10, sigma_p=0.0, seed=0)
    cfg = FeatConfig(max_rounds=3, inner_epochs=200, hidden=16, lr=0.5, seed=0)
    res = run_feat(cfg, ds)
    assert res.termination_reason == "empty_augmentation"
    assert res.rounds_completed == 1
    assert evaluate(res.model, ds)["accuracy"] == 1.0


def test_beats_matched_epoch_baseline():
    ds, ood = _data(seed=0)
    cfg = FeatConfig(max_rounds=2, inner_epochs=200, hidden=32, lr=0.5, seed=0)
    res = run_feat(cfg, ds, ood)
    total = sum(len(r.epoch_log) for r in res.rounds)
    base = erm_baseline(cfg, ds, total)
    feat_ood = res.rounds[-1].ood_acc
    base_ood = evaluate(base, ood)["accuracy"]
    assert feat_ood > base_ood + 0.2
    assert v1_alignment(res.final_featurizer, ds.d) > v1_alignment(base.featurizer, ds.d)
