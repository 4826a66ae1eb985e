from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from listereo import evaluation as ev
from listereo.autodiff import ContractError
from listereo.evaluation import (PAPER_LABEL, EmptyGroundTruthError, MetricSet, SweepReport, SweepRow,
                                 colorize, colormap, compute_metrics, evaluate_model, flatness,
                                 sweep_inference_time)
from listereo.geometry import DepthMap
from listereo.network import Model, ModelConfig
from listereo.scene import InMemoryDataset, SceneSpec, dataset_specs


def _gt(depth):
    depth = np.asarray(depth, float)
    return DepthMap(depth, depth > 0)


def test_exact_prediction_gives_zero():
    gt = _gt([[5.0, 0.0], [12.0, 20.0]])
    m = compute_metrics(DepthMap(gt.depth.copy(), gt.valid), gt)
    assert (m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km) == (0, 0, 0, 0)
    assert m.valid_pixel_count == 3


def test_constant_offset_and_inverse_units():
    gt = _gt(np.full((3, 4), 20.0))
    m = compute_metrics(gt.depth + 0.01, gt)
    assert m.rmse_mm == pytest.approx(10.0, rel=1e-9) and m.mae_mm == pytest.approx(10.0, rel=1e-9)
    # 20 m is 50 per km; 20.01 m is 1000/20.01 per km
    assert m.imae_per_km == pytest.approx(50 - 1000 / 20.01, rel=1e-9)


def test_metrics_match_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        gt = rng.uniform(2, 80, (1, 5)) * (rng.random((1, 5)) < 0.8)
        gt[0, 0] = 7.0
        pred = np.abs(gt + rng.normal(0, 2, gt.shape)) + 0.5
        m = compute_metrics(pred, _gt(gt))
        want = oracles.metrics(pred, gt)
        got = (m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km)
        for g, w in zip(got, want):
            assert g == pytest.approx(w, rel=1e-9)


def test_empty_ground_truth_and_shape_errors():
    with pytest.raises(EmptyGroundTruthError):
        compute_metrics(np.ones((2, 2)), _gt(np.zeros((2, 2))))
    with pytest.raises(ContractError):
        compute_metrics(np.ones((2, 3)), _gt(np.ones((2, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 50, (4, 6)) * (rng.random((4, 6)) < 0.7)
    gt[0, 0] = 3.0
    pred = rng.uniform(1, 50, gt.shape)
    m = compute_metrics(pred, _gt(gt))
    assert min(m.rmse_mm, m.mae_mm, m.irmse_per_km, m.imae_per_km) >= 0
    assert m.rmse_mm >= m.mae_mm and m.irmse_per_km >= m.imae_per_km
    # invalid-pixel predictions do not matter
    other = np.where(gt > 0, pred, rng.uniform(1, 50, gt.shape))
    assert compute_metrics(other, _gt(gt)) == m
    # permuting pixels consistently does not matter
    perm = rng.permutation(gt.size)
    mp = compute_metrics(pred.ravel()[perm].reshape(gt.shape), _gt(gt.ravel()[perm].reshape(gt.shape)))
    assert mp.rmse_mm == pytest.approx(m.rmse_mm, rel=1e-12) and mp.imae_per_km == pytest.approx(m.imae_per_km,
                                                                                                 rel=1e-12)
    # non-constant error fields have RMSE strictly above MAE
    if np.ptp(np.abs(pred - gt)[gt > 0]) > 1e-6:
        assert m.rmse_mm > m.mae_mm


def _metric(rmse):
    return MetricSet(rmse, rmse / 2, 1.0, 0.5, 10)


def test_report_csv_table_and_paper_rows():
    rep = SweepReport([SweepRow(0.01, _metric(3000.0), "listereo", "self_supervised", "train_time"),
                       SweepRow(1.0, _metric(1500.0), "listereo", "self_supervised", "train_time")])
    rep.add_paper_rows("self_supervised")
    csv = rep.to_csv().splitlines()
    assert csv[0] == "los,rmse_mm,mae_mm,irmse,imae,variant,mode"
    assert csv[1] == "0.01,3000.00,1500.00,1.0000,0.5000,listereo,train_time/self_supervised"
    assert "0.01,3177.83,,,,paper-kitti-scale,train_time/self_supervised" in csv
    assert "1,1277.36,,,,paper-kitti-scale,train_time/self_supervised" in csv
    table = rep.to_table()
    assert PAPER_LABEL in table and "3000.00" in table
    assert len(rep.measured()) == 2
    assert flatness(rep, "listereo", "self_supervised", "train_time") == 2.0
    sup = SweepReport()
    sup.add_paper_rows("supervised")
    assert {r.los: r.paper_rmse_mm for r in sup.rows}[0.01] == 1371.28
    assert {r.los: r.paper_rmse_mm for r in sup.rows}[1.0] == 898.77


def test_csv_and_table_agree_to_printed_precision():
    rep = SweepReport([SweepRow(0.1, MetricSet(1234.5678, 987.654, 3.21987, 1.23456, 5), "limono", "supervised",
                                "inference_time")])
    row = rep.to_csv().splitlines()[1].split(",")
    assert row[1:5] == rep.to_table().splitlines()[1].split()[1:5]


def test_paper_ablation_reference_values():
    assert ev.PAPER_LOSS_WEIGHT_RMSE[(0.0, 0.01)] == 1970.63
    assert ev.PAPER_LOSS_WEIGHT_RMSE[(0.5, 0.01)] == 1277.36
    assert ev.PAPER_LOSS_WEIGHT_RMSE[(2.0, 0.01)] == 1434.89


def test_plot_is_ppm():
    rep = SweepReport([SweepRow(v, _metric(r), "listereo", "self_supervised", "inference_time")
                       for v, r in ((0.01, 3000.0), (0.1, 2000.0), (1.0, 1500.0))])
    data = rep.plot_ppm()
    assert data.startswith(b"P6\n320 240\n255\n") and len(data) == len(b"P6\n320 240\n255\n") + 320 * 240 * 3


@pytest.fixture(scope="module")
def tiny_eval():
    ds = InMemoryDataset.generate(dataset_specs(SceneSpec(), 3, 500))
    return Model.create(ModelConfig(), seed=0), ds


def test_inference_sweep_rows_and_degenerate_level(tiny_eval):
    model, ds = tiny_eval
    rep = sweep_inference_time([0.1, 0.5, 1.0], model, ds, eval_seed=4)
    assert [r.los for r in rep.rows] == [0.1, 0.5, 1.0]
    assert all(r.kind == "inference_time" and r.variant == "listereo" for r in rep.rows)
    assert rep.rows[-1].metrics == evaluate_model(model, ds, 1.0, 4)
    again = sweep_inference_time([0.1, 0.5, 1.0], model, ds, eval_seed=4)
    assert again.to_csv() == rep.to_csv()
    with pytest.raises(ContractError):
        sweep_inference_time([0.5, 0.1], model, ds)


def test_evaluate_pools_all_ground_truth_pixels(tiny_eval):
    model, ds = tiny_eval
    m = evaluate_model(model, ds, 1.0, 0)
    assert m.valid_pixel_count == sum(ds.gt(i).count for i in range(len(ds)))


def test_ablation_rows_sorted_with_paper_reference(monkeypatch, tiny_eval):
    model, ds = tiny_eval
    trained = []

    def fake_train(train_set, model_config, train_config, weights):
        trained.append(weights.beta)
        return SimpleNamespace(model=model)

    monkeypatch.setattr(ev, "train", fake_train)
    rows = ev.ablate_loss_weights([0.5, 0.0], ds, ds, ModelConfig(), ev.TrainConfig(), eval_seed=1)
    assert sorted(trained) == [0.0, 0.5]
    desk = [r for r in rows if r.label == "desk"]
    assert [r.beta for r in desk] == [0.0, 0.5]
    paper = [r for r in rows if r.label == PAPER_LABEL]
    assert {(r.beta, r.paper_rmse_mm) for r in paper} >= {(0.0, 1970.63), (0.5, 1277.36)}
    assert ev.ablation_csv(rows).splitlines()[0] == "beta,gamma,rmse_mm,mae_mm,irmse,imae,variant,mode"


def test_colormap_monotone_warm_to_cool():
    rgb = colormap(np.linspace(0, 1, 50)).astype(int)
    warmth = rgb[:, 0] - rgb[:, 2]
    assert np.all(np.diff(warmth) < 0)


def test_colorize_two_pixels_and_invalid_black():
    depth = DepthMap(np.array([[3.0, 30.0, 0.0]]), np.array([[True, True, False]]))
    img = colorize(depth).astype(int)
    near, far, invalid = img[0]
    assert near[0] - near[2] > far[0] - far[2]
    assert list(invalid) == [0, 0, 0]
    assert list(near) == list(colormap(np.array(0.0)))
