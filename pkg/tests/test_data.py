"""Two-bit dataset generation: invariants, concentration, serialization."""
import numpy as np
import pytest

from featlab.data import (
    EnvironmentSpec,
    dataset_from_csv,
    dataset_to_csv,
    expected_group_counts,
    group_count_tolerance,
    group_counts,
    sample_dataset,
    sample_test_set,
)

STD_SPECS = [EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)]


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvironmentSpec(-0.1, 0.1, 10)
    with pytest.raises(ValueError):
        EnvironmentSpec(0.1, 1.5, 10)
    with pytest.raises(ValueError):
        EnvironmentSpec(0.1, 0.1, 0)


def test_sample_dataset_rejects_bad_args():
    with pytest.raises(ValueError):
        sample_dataset([], d=10)
    with pytest.raises(ValueError):
        sample_dataset(STD_SPECS, d=2)
    with pytest.raises(ValueError):
        sample_dataset(STD_SPECS, d=10, sigma_p=-1.0)


def test_determinism_bit_identical():
    a = sample_dataset(STD_SPECS, d=10, sigma_p=0.01, seed=42)
    b = sample_dataset(STD_SPECS, d=10, sigma_p=0.01, seed=42)
    assert np.array_equal(a.x1, b.x1)
    assert np.array_equal(a.x2, b.x2)
    assert np.array_equal(a.y, b.y)
    c = sample_dataset(STD_SPECS, d=10, sigma_p=0.01, seed=43)
    assert not np.array_equal(a.x2, c.x2)


def test_zero_flip_rates_give_exact_patches():
    ds = sample_dataset([EnvironmentSpec(0.0, 0.0, 4)], d=6, sigma_p=0.01, seed=0)
    for i in range(4):
        expected = np.zeros(6)
        expected[0] = ds.y[i]
        expected[1] = ds.y[i]
        assert np.array_equal(ds.x1[i], expected)
        assert ds.rad_alpha[i] == 1 and ds.rad_beta[i] == 1


def test_feature_patch_identity():
    ds = sample_dataset(STD_SPECS, d=8, seed=3)
    assert np.array_equal(ds.x1[:, 0], ds.y * ds.rad_alpha)
    assert np.array_equal(ds.x1[:, 1], ds.y * ds.rad_beta)
    assert np.all(ds.x1[:, 2:] == 0)


def test_noise_orthogonal_to_features():
    ds = sample_dataset(STD_SPECS, d=12, seed=5)
    assert np.all(ds.x2[:, 0] == 0.0)
    assert np.all(ds.x2[:, 1] == 0.0)
    assert np.any(ds.x2[:, 2:] != 0.0)


def test_env_counts_and_label_balance():
    ds = sample_dataset(STD_SPECS, d=10, seed=7)
    assert ds.n == 5000
    for e, spec in enumerate(STD_SPECS):
        sl = ds.env_slice(e)
        y = ds.y[sl]
        assert len(y) == spec.n
        assert set(np.unique(y)) <= {-1, 1}
        assert abs(np.mean(y)) < 4.0 / np.sqrt(spec.n)


def test_noise_norm_interval():
    # fixed-seed corpus at d large enough for the chi-square tails to
    # be negligible across every sample
    d, sigma_p = 200, 0.01
    ds = sample_dataset(
        [EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)],
        d=d, sigma_p=sigma_p, seed=11,
    )
    sq = np.sum(ds.x2**2, axis=1)
    assert np.all(sq >= sigma_p**2 * d / 2.0)
    assert np.all(sq <= 3.0 * sigma_p**2 * d / 2.0)


def test_group_counts_trivial_and_partition():
    ds = sample_dataset([EnvironmentSpec(0.0, 0.0, 50)], d=5, seed=0)
    gc = group_counts(ds)
    assert gc.c_pp == 1.0 and gc.c_pm == 0.0 and gc.c_mp == 0.0 and gc.c_mm == 0.0
    ds2 = sample_dataset(STD_SPECS, d=5, seed=1)
    assert np.isclose(sum(group_counts(ds2).as_array()), len(STD_SPECS))


def test_group_count_expectations():
    # population values for alpha=0.25, betas (0.1, 0.2)
    exp = expected_group_counts(STD_SPECS)
    assert np.allclose(exp.as_array(), [1.275, 0.225, 0.425, 0.075])


def test_group_counts_large_sample():
    big = [EnvironmentSpec(0.25, 0.1, 100_000), EnvironmentSpec(0.25, 0.2, 100_000)]
    gc = group_counts(sample_dataset(big, d=5, sigma_p=0.0, seed=2))
    assert abs(gc.c_pp - 1.275) < 0.01
    assert np.allclose(gc.as_array(), [1.275, 0.225, 0.425, 0.075], atol=0.01)


def test_group_count_concentration_over_seeds():
    tol = group_count_tolerance(STD_SPECS, rho=0.05)
    expected = expected_group_counts(STD_SPECS).as_array()
    for seed in range(100):
        gc = group_counts(sample_dataset(STD_SPECS, d=3, sigma_p=0.0, seed=seed))
        assert np.all(np.abs(gc.as_array() - expected) <= tol)


def test_test_set_construction():
    ds = sample_test_set(1000, [0.1, 0.2], d=8, sigma_p=0.01, seed=0)
    # invariant bit perfectly correlated, spurious mostly reversed
    assert np.array_equal(ds.x1[:, 0], ds.y.astype(float))
    assert np.array_equal(ds.x1[:, 1], (ds.y * ds.rad_beta).astype(float))
    frac_flipped = np.mean(ds.rad_beta == -1)
    assert 0.75 < frac_flipped < 0.95  # approx 1 - (b1+b2)/2 = 0.85


def test_test_set_beta_zero_flips_everything():
    ds = sample_test_set(100, [0.0, 0.0], d=5, seed=1)
    assert np.all(ds.rad_beta == -1)
    assert np.array_equal(ds.x1[:, 1], (-ds.y).astype(float))


def test_test_set_errors():
    with pytest.raises(ValueError):
        sample_test_set(100, [], d=5)
    with pytest.raises(ValueError):
        sample_test_set(101, [0.1, 0.2], d=5)


def test_spurious_only_scorer_accuracy():
    # positive weight on the spurious coordinate scores about
    # (b1+b2)/2 = 0.15 on the reversed-correlation test set
    ds = sample_test_set(100_000, [0.1, 0.2], d=5, sigma_p=0.0, seed=4)
    pred = np.sign(ds.x1[:, 1])
    acc = np.mean(pred == ds.y)
    assert abs(acc - 0.15) < 0.01


def test_csv_roundtrip(tmp_path):
    ds = sample_dataset(STD_SPECS[:1], d=5, sigma_p=0.02, seed=9)
    path = tmp_path / "ds.csv"
    dataset_to_csv(ds, path, header_comment="manifest=abc")
    back = dataset_from_csv(path)
    assert np.array_equal(ds.x1, back.x1)
    assert np.array_equal(ds.x2, back.x2)
    assert np.array_equal(ds.y, back.y)
    assert np.array_equal(ds.rad_alpha, back.rad_alpha)
    assert back.envs == ds.envs
    first = path.read_text().splitlines()[0]
    assert first.startswith("#") and "manifest=abc" in first
