import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsenergy import nn
from bsenergy.encoder import EncodingPlan, bsid_columns, fit
from bsenergy.ingest import split_by_manifest
from bsenergy.model import ModelConfig
from bsenergy.synthgen import SynthConfig, generate
from bsenergy.training import (
    EncodedSet,
    TrainConfig,
    TrainingDiverged,
    _masked_inputs,
    apply_mask,
    draw_mask,
    mape,
    mape_gradient,
    train,
    validation_split,
    write_history,
)


def test_mape_hand_values():
    assert mape([2.0, 2.0], [1.0, 3.0]) == 0.5
    assert abs(mape([10.0], [9.0]) - 0.1) < 1e-15
    assert mape([3.0, 4.0], [3.0, 4.0]) == 0.0


def test_mape_is_ratio_of_sums_not_mean_of_ratios():
    # per-sample mean would be (0.5 + 0.01) / 2
    assert mape([2.0, 100.0], [1.0, 101.0]) == pytest.approx(2.0 / 102.0, abs=1e-15)


@pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
def test_mape_scale_invariance(c):
    rng = np.random.default_rng(0)
    y, y_hat = rng.uniform(1, 50, 100), rng.uniform(1, 50, 100)
    assert abs(mape(c * y, c * y_hat) - mape(y, y_hat)) <= 1e-15


@given(st.lists(st.floats(0.1, 1e4), min_size=1, max_size=40), st.floats(1e-3, 1e3))
def test_mape_scale_invariance_property(ys, c):
    y = np.array(ys)
    y_hat = y[::-1] * 1.1
    assert mape(c * y, c * y_hat) == pytest.approx(mape(y, y_hat), rel=1e-12, abs=1e-15)


def test_mape_errors():
    with pytest.raises(ZeroDivisionError):
        mape([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        mape([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mape([], [])


def test_mape_gradient_sign_convention():
    g = mape_gradient([1.0, 2.0, 3.0], [2.0, 2.0, 1.0])
    np.testing.assert_array_equal(g, [1 / 6, 0.0, -1 / 6])
    assert not mape_gradient([5.0, 6.0], [5.0, 6.0]).any()


def test_mape_gradient_finite_differences():
    rng = np.random.default_rng(4)
    y = rng.uniform(1, 10, 12)
    y_hat = y + rng.choice([-1, 1], 12) * rng.uniform(1e-2, 1.0, 12)
    report = nn.grad_check(lambda: (mape(y, y_hat), {"y_hat": mape_gradient(y, y_hat)}),
                           {"y_hat": y_hat}, tolerance=1e-6)
    assert report.passed, str(report)


# -- masking ---------------------------------------------------------------------

def test_mask_degenerate_probabilities():
    idx = np.arange(1, 101)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(apply_mask(idx, 0.0, rng), idx)
    assert not apply_mask(idx, 1.0, rng).any()


def test_mask_fraction_in_binomial_band_50_seeds():
    for seed in range(50):
        frac = draw_mask(10_000, 0.3, nn.rng_stream(seed, "masking")).mean()
        assert 0.285 <= frac <= 0.315, (seed, frac)


def test_masks_differ_between_epochs():
    rng = nn.rng_stream(0, "masking")
    assert not np.array_equal(draw_mask(100, 0.3, rng), draw_mask(100, 0.3, rng))


def test_quota_mask_exact_count():
    assert draw_mask(1000, 0.3, np.random.default_rng(0), "quota").sum() == 300
    with pytest.raises(ValueError):
        draw_mask(10, 0.3, np.random.default_rng(0), "sometimes")
    with pytest.raises(ValueError):
        draw_mask(10, 1.5, np.random.default_rng(0))


# -- small fleet fixtures ---------------------------------------------------------

@pytest.fixture(scope="module")
def small_fleet():
    ds, manifest, gt = generate(SynthConfig(n_bs=10, days=3, n_rutypes=2, seed=3))
    train_ds, test_ds = split_by_manifest(ds, manifest)
    return train_ds, test_ds, manifest


def _setup(train_ds, mode="embedding", **kw):
    plan = fit(EncodingPlan(bsid_mode=mode), train_ds)
    cfg = ModelConfig.for_plan(plan, hidden_dims=(16, 8))
    return plan, cfg, TrainConfig(**{"epochs": 5, "batch_size": 64, **kw})


def test_onehot_masking_zeroes_station_block(small_fleet):
    train_ds = small_fleet[0]
    plan = fit(EncodingPlan(bsid_mode="onehot"), train_ds)
    data = EncodedSet.build(train_ds, plan)
    rows = np.arange(20)
    mask = np.zeros(len(data), dtype=bool)
    mask[:10] = True
    X, idx = _masked_inputs(data, rows, mask, plan)
    cols = bsid_columns(plan)
    assert idx is None
    assert not X[:10, cols].any()
    assert np.all(X[10:20, cols].sum(axis=1) == 1.0)
    np.testing.assert_array_equal(np.delete(X, np.s_[cols], axis=1), np.delete(data.X[rows], np.s_[cols], axis=1))


def test_validation_split_keeps_every_station(small_fleet):
    train_ds = small_fleet[0]
    fit_ds, val_ds = validation_split(train_ds, 0.1, 0)
    assert fit_ds.bs_ids() == val_ds.bs_ids() == train_ds.bs_ids()
    assert len(fit_ds) + len(val_ds) == len(train_ds)
    assert 0.08 < len(val_ds) / len(train_ds) < 0.12


def test_single_epoch_returns_epoch_one(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], epochs=1)
    res = train(small_fleet[0], plan, cfg, tc)
    assert res.best_epoch == 1 and len(res.history) == 1


def test_selection_picks_history_minimum(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], epochs=8)
    res = train(small_fleet[0], plan, cfg, tc)
    sels = [h.selection_mape for h in res.history]
    assert len(res.history) == 8
    assert res.best_selection_mape == min(sels)
    assert res.best_epoch == sels.index(min(sels)) + 1


def test_returned_model_reproduces_selection_score(small_fleet):
    train_ds, test_ds, _ = small_fleet
    plan, cfg, tc = _setup(train_ds, selection="test_set_paper_protocol")
    res = train(train_ds, plan, cfg, tc, selection_ds=test_ds)
    data = EncodedSet.build(test_ds, plan)
    assert mape(data.y, res.model.predict(data.X, data.idx)) == res.best_selection_mape


def test_test_set_selection_requires_selection_set(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], selection="test_set_paper_protocol")
    with pytest.raises(ValueError):
        train(small_fleet[0], plan, cfg, tc)


def test_masked_count_recorded(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0])
    res = train(small_fleet[0], plan, cfg, tc)
    n = len(validation_split(small_fleet[0], 0.1, 0)[0])
    sd = np.sqrt(n * 0.3 * 0.7)
    assert all(abs(h.masked_count - 0.3 * n) < 3.3 * sd for h in res.history)
    plan, cfg, tc = _setup(small_fleet[0], "none")
    assert all(h.masked_count == 0 for h in train(small_fleet[0], plan, cfg, tc).history)


def test_deterministic_history_and_model(small_fleet, tmp_path):
    digests, preds = [], []
    for k in range(2):
        plan, cfg, tc = _setup(small_fleet[0], seed=11)
        res = train(small_fleet[0], plan, cfg, tc)
        write_history(res.history, tmp_path / f"h{k}.csv", include_time=False)
        digests.append(hashlib.sha256((tmp_path / f"h{k}.csv").read_bytes()).hexdigest())
        data = EncodedSet.build(small_fleet[1], plan)
        preds.append(res.model.predict(data.X, data.idx))
    assert digests[0] == digests[1]
    np.testing.assert_array_equal(preds[0], preds[1])


def test_data_parallel_matches_serial_closely(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], epochs=2)
    serial = train(small_fleet[0], plan, cfg, tc)
    par = train(small_fleet[0], plan, cfg, TrainConfig(**{**tc.__dict__, "workers": 2}))
    for a, b in zip(serial.history, par.history):
        assert a.train_mape == pytest.approx(b.train_mape, rel=1e-9)


def test_training_makes_progress(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], epochs=30)
    h = [s.train_mape for s in train(small_fleet[0], plan, cfg, tc).history]
    assert np.median(h[-10:]) < np.median(h[:10])


def test_divergence_reports_epoch_and_batch(small_fleet):
    plan, cfg, tc = _setup(small_fleet[0], lr=1e308, epochs=3)
    with pytest.raises(TrainingDiverged) as err:
        with np.errstate(all="ignore"):
            train(small_fleet[0], plan, cfg, tc)
    assert err.value.epoch >= 1 and err.value.batch >= -1


def test_history_csv_columns(small_fleet, tmp_path):
    plan, cfg, tc = _setup(small_fleet[0], epochs=2)
    res = train(small_fleet[0], plan, cfg, tc)
    write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mape,selection_mape,masked_count,seconds"
    assert len(lines) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mask_prob=1.2)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(selection="best_guess")
