import numpy as np
import pytest

from auction_ltv.experiment import (
    ExperimentConfig,
    load_config,
    mean_ci,
    report,
    run_ab,
    run_seed,
    sweep_alpha,
    train_online,
    write_sweep,
)
from auction_ltv.policy import ALPHA_GRID


def small(kind="myopic_trap", **over):
    raw = {"env": {"kind": kind, "n_users": 400}, "n_seeds": 2, "n_periods": 14, "warmup_periods": 7}
    raw.update(over)
    return ExperimentConfig.from_dict(raw)


def test_alpha_zero_gives_exactly_zero_lift():
    res = run_ab(small(policy={"kind": "modified", "alpha": 0.0}))
    for metric in ("conversions", "rate", "impressions"):
        assert np.all(res.lifts(metric) == 0.0)
    for r in res.daily:
        if r.arm == "test":
            assert r.lift_conversions in (0.0, None)


def test_base_kind_matches_alpha_zero():
    a = run_seed(small(policy={"kind": "base"}), 0)
    b = run_seed(small(policy={"kind": "modified", "alpha": 0.0}), 0)
    assert a.daily == b.daily


def test_no_long_term_structure_no_lift():
    cfg = ExperimentConfig.from_dict({"env": {"kind": "flat", "n_users": 1000}, "n_seeds": 30})
    res = run_ab(cfg)
    lifts = res.lifts("conversions")
    se = lifts.std(ddof=1) / np.sqrt(len(lifts))
    assert abs(lifts.mean()) <= 2 * se


def test_impression_neutral_arms_have_equal_impressions():
    res = run_ab(small())
    assert np.all(res.lifts("impressions") == 0.0)
    # with equal impressions, rate lift and count lift coincide
    np.testing.assert_allclose(res.lifts("rate"), res.lifts("conversions"), rtol=1e-12, atol=1e-15)


def test_reruns_are_byte_identical(tmp_path):
    cfg = small()
    report(run_ab(cfg), tmp_path / "a")
    report(run_ab(cfg), tmp_path / "b")
    for name in ("daily.csv", "weekly.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_empty_and_single_row(tmp_path):
    res = run_ab(small(n_seeds=1, n_periods=1))
    res.seeds[0].daily = []
    with pytest.raises(ValueError):
        report(res, tmp_path / "empty")
    assert not (tmp_path / "empty").exists()

    res = run_ab(small(n_seeds=1, n_periods=1))
    res.seeds[0].daily = [r for r in res.seeds[0].daily if r.arm == "test"]
    daily, _ = report(res, tmp_path / "one")
    assert len(daily.read_text().splitlines()) == 2


def test_weekly_rows_aggregate_daily():
    res = run_ab(small(n_seeds=1))
    for arm in ("control", "test"):
        d = sum(r.conversions for r in res.daily if r.arm == arm)
        w = sum(r.conversions for r in res.weekly if r.arm == arm)
        assert d == w
    assert {r.period for r in res.weekly} == {0, 1}


def test_rates_consistent():
    res = run_ab(small(n_seeds=1, group_by_bidder=True))
    assert {r.bidder for r in res.daily} > {"all"}
    for r in res.daily:
        assert 0.0 <= r.conversion_rate <= 1.0
        if r.impressions:
            assert r.conversion_rate == r.conversions / r.impressions


def test_sweep(tmp_path):
    rows = sweep_alpha(small(), [0.0])
    assert len(rows) == 1 and rows[0].mean_lift_conversions == 0.0
    rows = sweep_alpha(small(n_seeds=4, env={"kind": "myopic_trap", "n_users": 1000}), [0.0, 1.0])
    assert rows[1].mean_lift_conversions >= rows[0].mean_lift_conversions
    write_sweep(rows, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 3
    with pytest.raises(ValueError):
        sweep_alpha(small(), [1.5])


def test_capped_alpha_is_from_grid():
    res = run_ab(small(alpha_cap=0.08, n_seeds=1))
    assert res.seeds[0].alpha in ALPHA_GRID


def test_served_training_regime_runs():
    res = run_ab(small(train_on="served", n_seeds=1))
    assert np.isfinite(res.lifts("conversions")).all()


def test_vector_environment_runs():
    res = run_ab(small("vector", env={"kind": "vector", "n_users": 150}, n_seeds=1, n_periods=7))
    assert np.all(res.lifts("impressions") == 0.0)


def test_train_online_curve_decreases():
    cfg = small(env={"kind": "random", "n_users": 2000, "interaction_prob": 1.0}, h=1)
    _, curve = train_online(cfg, 0, periods=60, eval_every=500)
    errs = [e for _, _, e in curve]
    assert errs[-1] < errs[0]


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"split": 1.0})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"train_on": "both"})
    path = tmp_path / "c.yaml"
    path.write_text("n_seeds: 3\nenv:\n  kind: flat\npolicy:\n  alpha: 0.5\n")
    cfg = load_config(path)
    assert cfg.n_seeds == 3 and cfg.env.kind == "flat" and cfg.policy.alpha == 0.5
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_mean_ci_against_textbook():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    ci = mean_ci(x)
    # t_{0.975, 3} = 3.182446305284263
    half = 3.182446305284263 * x.std(ddof=1) / 2
    assert ci["mean"] == 2.5
    assert ci["ci_low"] == pytest.approx(2.5 - half, rel=1e-12)
    assert ci["ci_high"] == pytest.approx(2.5 + half, rel=1e-12)
