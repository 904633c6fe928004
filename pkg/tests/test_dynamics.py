"""Trainer behavior and the verification pipelines."""
import numpy as np
import pytest

from featlab.cnn import init_cnn, probe_features
from featlab.data import EnvironmentSpec, sample_dataset
from featlab.dynamics import (
    NumericAbortError,
    PreconditionError,
    TrainConfig,
    run_gd,
    verify_corollary_degradation,
    verify_erm_race,
    verify_irmv1_transfer,
    verify_oracle,
    verify_suppression,
)

SMALL = TrainConfig(
    envs=(EnvironmentSpec(0.25, 0.1, 200), EnvironmentSpec(0.25, 0.2, 200)),
    eta=0.05, steps=50, record_every=10, m=4, d=10, seed=0,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, pretrain_steps=20)
    with pytest.raises(ValueError):
        TrainConfig(record_every=0)


def test_unknown_schedule_rejected():
    with pytest.raises(ValueError):
        run_gd(SMALL, "sgd")


def test_zero_eta_constant_trajectory():
    from dataclasses import replace

    traj = run_gd(replace(SMALL, eta=0.0, record_every=1), "erm")
    assert np.all(traj.agg_inv == traj.agg_inv[0])
    assert np.all(traj.erm_loss == traj.erm_loss[0])


def test_zero_steps_single_record():
    from dataclasses import replace

    traj = run_gd(replace(SMALL, steps=0), "erm")
    assert traj.n_recorded == 1 and traj.steps[0] == 0
    init = init_cnn(SMALL.m, SMALL.d, SMALL.sigma_0, SMALL.activation, seed=SMALL.seed + 1)
    assert np.array_equal(traj.final_params.w_pos, init.w_pos)


def test_deterministic_and_records_final_step():
    a = run_gd(SMALL, "erm")
    b = run_gd(SMALL, "erm")
    assert np.array_equal(a.agg_inv, b.agg_inv)
    assert np.array_equal(a.final_params.w_pos, b.final_params.w_pos)
    assert a.steps[-1] == SMALL.steps
    assert a.n_recorded == SMALL.steps // SMALL.record_every + 1


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_numeric_abort_on_huge_eta():
    from dataclasses import replace

    with pytest.raises(NumericAbortError):
        run_gd(replace(SMALL, eta=1e306, steps=20, sigma_0=0.5), "erm")


def test_erm_loss_decreases():
    from dataclasses import replace

    traj = run_gd(replace(SMALL, record_every=1), "erm")
    assert traj.erm_loss[-1] < traj.erm_loss[0]
    assert np.all(np.diff(traj.erm_loss) <= 1e-12)


def test_race_preconditions():
    from dataclasses import replace

    # alpha below the mean beta: setup rejected, not silently run
    bad = replace(
        SMALL, envs=(EnvironmentSpec(0.1, 0.25, 200), EnvironmentSpec(0.1, 0.3, 200))
    )
    with pytest.raises(PreconditionError):
        verify_erm_race(bad)
    mixed_alpha = replace(
        SMALL, envs=(EnvironmentSpec(0.25, 0.1, 200), EnvironmentSpec(0.3, 0.1, 200))
    )
    with pytest.raises(PreconditionError):
        verify_erm_race(mixed_alpha)
    one_env = replace(SMALL, envs=(EnvironmentSpec(0.25, 0.1, 200),))
    with pytest.raises(PreconditionError):
        verify_oracle(one_env)


def test_race_report_passes():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)),
        eta=0.003, steps=200, m=10, d=50, seed=0,
    )
    report = verify_erm_race(cfg)
    assert report["race_positive_dominant"]
    assert report["composites_monotone"]
    assert report["approaches_fixed_point"]
    assert report["converges_to_empirical_fp"]
    assert report["passed"]
    lo, hi = report["eta_window"]
    assert lo < report["eta"] < hi


def test_alternate_flip_rates_accepted():
    # alpha = 0.4 with betas 0.1/0.1 still satisfies the race conditions
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.4, 0.1, 2500), EnvironmentSpec(0.4, 0.1, 2500)),
        eta=0.003, steps=100, m=10, d=50, seed=1,
    )
    report = verify_erm_race(cfg)
    assert report["race_positive_dominant"] and report["composites_monotone"]


def test_suppression_short_run():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 1000), EnvironmentSpec(0.25, 0.2, 1000)),
        eta=5e-8, steps=300, lam=1e8, m=10, d=50, seed=0,
    )
    report = verify_suppression(cfg)
    assert report["agg_bounded_005"]
    assert report["c_norm_descent_after_transient"]
    assert report["c_norm_final"] < report["c_norm_initial"]


def test_corollary_degradation():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 1000), EnvironmentSpec(0.25, 0.2, 1000)),
        eta=5e-8, lam=1e8, m=10, d=50, seed=0,
    )
    report = verify_corollary_degradation(cfg)
    assert report["inv_decreases"]
    assert report["agg_inv_after"] < report["agg_inv_before"] < 0.02


def test_transfer_pipeline():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 2500), EnvironmentSpec(0.25, 0.2, 2500)),
        eta=0.5, eta_irm=5e-9, steps=5500, pretrain_steps=5000, lam=1e8,
        record_every=1, m=10, d=50, seed=0,
    )
    report = verify_irmv1_transfer(cfg)
    assert report["c_sum_ok"]
    assert report["post_inv_strictly_up"] and report["post_spu_strictly_down"]
    assert report["passed"]


def test_oracle_small():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 50_000), EnvironmentSpec(0.25, 0.2, 50_000)),
        eta=0.05, m=10, d=20, sigma_0=0.01, sigma_p=1e-4, seed=0,
    )
    report = verify_oracle(cfg, horizon=50, rel_tol=0.02)
    assert report["passed"]


def test_stationarity_early_stop():
    cfg = TrainConfig(
        envs=(EnvironmentSpec(0.25, 0.1, 500), EnvironmentSpec(0.25, 0.2, 500)),
        eta=0.5, steps=100_000, record_every=1000, m=4, d=10, sigma_p=1e-3, seed=2,
    )
    traj = run_gd(cfg, "erm", stationary_tol=1e-7)
    assert traj.steps[-1] < cfg.steps  # stopped early
    # final aggregates are stationary: one more step barely moves them
    from dataclasses import replace

    cont = run_gd(
        replace(cfg, steps=1, record_every=1), "erm", params=traj.final_params
    )
    assert abs(cont.agg_inv[-1] - traj.agg_inv[-1]) < 1e-6


def test_irm_step_effects_swap_under_feature_swap():
    # swapping the two feature coordinates and the two flip arrays maps
    # one valid dataset to another with the roles exchanged; a single
    # penalized step must produce exactly swapped aggregate movements
    from dataclasses import replace as dreplace

    from featlab.data import TwoBitDataset
    from featlab.objectives import irmv1_loss_grad

    specs = [EnvironmentSpec(0.25, 0.1, 500), EnvironmentSpec(0.25, 0.2, 500)]
    ds = sample_dataset(specs, d=10, sigma_p=0.0, seed=3)
    x1s = ds.x1.copy()
    x1s[:, [0, 1]] = x1s[:, [1, 0]]
    swapped = TwoBitDataset(
        envs=ds.envs, d=ds.d, sigma_p=ds.sigma_p, seed=ds.seed,
        x1=x1s, x2=ds.x2.copy(), y=ds.y.copy(),
        rad_alpha=ds.rad_beta.copy(), rad_beta=ds.rad_alpha.copy(),
        env_index=ds.env_index.copy(),
    )
    p = init_cnn(4, 10, sigma_0=0.0, seed=0)
    eta = 0.1
    for lam in (0.0, 10.0):
        a = p.copy()
        _, (gp, gn) = irmv1_loss_grad(a, ds, lam)
        a.w_pos -= eta * gp
        a.w_neg -= eta * gn
        b = p.copy()
        _, (gp2, gn2) = irmv1_loss_grad(b, swapped, lam)
        b.w_pos -= eta * gp2
        b.w_neg -= eta * gn2
        pa, pb = probe_features(a), probe_features(b)
        assert np.isclose(pa.agg_inv, pb.agg_spu, atol=1e-12)
        assert np.isclose(pa.agg_spu, pb.agg_inv, atol=1e-12)
