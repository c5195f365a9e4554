import numpy as np
import pytest

from conftest import make_schema
from f2p.adapt import IDENTITY, stylizer
from f2p.ensemble import PredictionMatrix, fit_ensemble
from f2p.evaluation import (
    DEFAULT_EMBEDDER,
    AblationGrid,
    EvaluationError,
    ablation_rows,
    baseline_predictor,
    compare_constant_weights,
    embedding_distance,
    inaccuracy_vs_baseline,
    mean_l1,
    oracle_predictor,
    reconstruction_report,
    run_ablation,
)
from f2p.trainer import PredictionBlock, TrainConfig, TrainingData, predict, train


def test_baseline_cases(schema, tiny_dataset, uniform_2000):
    t = tiny_dataset.targets()
    assert np.array_equal(baseline_predictor(t[:1]), t[0])
    c = np.linspace(-1, 1, schema.size)
    assert np.allclose(baseline_predictor(np.tile(c, (5, 1))), c)
    assert np.array_equal(baseline_predictor(tiny_dataset), t.mean(axis=0))
    cont = schema.continuous_indices()
    assert np.all(np.abs(baseline_predictor(uniform_2000)[cont]) <= 0.05)
    with pytest.raises(EvaluationError):
        baseline_predictor(np.zeros((0, 3)))


def test_delta_cases(rng):
    t = rng.uniform(-1, 1, (10, 4))
    base = np.array([0.5, 0.0, -0.2, 0.1])
    assert inaccuracy_vs_baseline(np.tile(base, (10, 1)), t, base) == 0.0
    assert inaccuracy_vs_baseline(t, t, base) == pytest.approx(-mean_l1(base[None], t))
    assert inaccuracy_vs_baseline(t, t, base) < 0


def test_delta_hand_case():
    t = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    p = np.array([[0.1, 0.8], [0.7, 0.0], [0.5, 1.0]])
    base = t.mean(axis=0)  # (0.5, 0.5)
    model = (0.1 + 0.3 + 0.0 + 0.2 + 0.0 + 0.5) / 6
    baseline = (0.5 + 0.5 + 0.0 + 0.5 + 0.5 + 0.0) / 6
    assert inaccuracy_vs_baseline(p, t, base) == pytest.approx(model - baseline, abs=1e-15)
    assert inaccuracy_vs_baseline(p, t, base, coords=[0]) == pytest.approx(0.4 / 3 - 1.0 / 3, abs=1e-15)
    with pytest.raises(EvaluationError):
        inaccuracy_vs_baseline(p, t, base[:1])


def test_ablation_rows_shape():
    rows = ablation_rows(["eyes", "nose"])
    assert len(rows) == 6
    assert ("eyes", "complete", "crop") not in rows


def test_one_cell_grid_equals_direct_training(tiny_dataset, tiny_eval, tiny_features):
    over = dict(max_epochs=2, batch_size=16)
    grid = AblationGrid(rows=(("nose", "local", "crop"),), modes=("feature_extraction",), train=over)
    report = run_ablation(tiny_dataset, grid, seed=3, eval_data=tiny_eval, features=tiny_features)
    cell = report.cell("nose", "local", "crop", "feature_extraction")
    assert cell.status == "ok" and len(report.cells) == 1

    data = TrainingData.from_manifest(tiny_dataset, "crop:nose")
    ev = TrainingData.from_manifest(tiny_eval, "crop:nose")
    cfg = TrainConfig(input_spec="crop:nose", target_spec="local:nose", seed=3, **over)
    model = train(data, cfg, init=tiny_features, eval_data=ev)
    assert cell.model_digest == model.digest()
    full = np.zeros_like(ev.targets)
    full[:, model.columns] = predict(model, ev.inputs)
    cols = model.columns
    expected = inaccuracy_vs_baseline(full, ev.targets, baseline_predictor(ev.targets), cols)
    assert cell.inaccuracy == pytest.approx(expected, abs=1e-12)


def test_failed_cell_is_recorded(tiny_dataset, tiny_eval):
    grid = AblationGrid(rows=(("nose", "local", "crop"),), train=dict(max_epochs=1, lr=-1.0))
    report = run_ablation(tiny_dataset, grid, eval_data=tiny_eval)
    assert {c.status for c in report.cells} == {"failed"}
    assert "failed" in report.to_text()


def test_ablation_report_deterministic(tiny_dataset, tiny_features):
    grid = AblationGrid(rows=(("eyes", "complete", "full_frame"),), train=dict(max_epochs=1))
    a = run_ablation(tiny_dataset, grid, seed=1, features=tiny_features)
    b = run_ablation(tiny_dataset, grid, seed=1, features=tiny_features)
    assert a.digest() == b.digest()
    assert a.to_csv().startswith("region,loss,input,mode,inaccuracy")


def _comparison_matrix(rng, n=40):
    schema = make_schema([], params_per_region=2, regions=("a", "b"))
    t = rng.uniform(-1, 1, (n, schema.size))
    ids = [str(i) for i in range(n)]
    names = schema.coordinate_names()
    agg = t + rng.normal(scale=0.4, size=t.shape)
    loc = t[:, :2] + rng.normal(scale=0.3, size=(n, 2))
    blocks = {
        "agg": PredictionBlock("agg", "aggregate", list(range(4)), names, ids, agg),
        "loc": PredictionBlock("loc", "local", [0, 1], names[:2], ids, loc),
    }
    return PredictionMatrix(schema, blocks, t, ids)


def test_weight_comparison(rng):
    fit_m, ev_m = _comparison_matrix(rng), _comparison_matrix(rng)
    cmp = compare_constant_weights(fit_ensemble(fit_m), fit_m, ev_m)
    for c in ("0.0", "0.5", "1.0"):
        assert np.all(cmp.errors[("fitting", "fitted")] <= cmp.errors[("fitting", c)] * (1 + 1e-9))
    agg_only = ((fit_m.blocks["agg"].values - fit_m.targets) ** 2).mean(axis=0)
    assert np.array_equal(cmp.errors[("fitting", "0.0")], agg_only)
    assert "fitted" in cmp.to_text() and cmp.to_csv().count("\n") == 9


def test_embedding_distance_properties(rng):
    img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    assert embedding_distance(DEFAULT_EMBEDDER, img, img) <= 1e-6
    neg = 255 - img
    assert embedding_distance(DEFAULT_EMBEDDER, img, neg) == pytest.approx(2.0, abs=1e-6)
    for _ in range(50):
        a = rng.integers(0, 256, (64, 64)).astype(np.uint8)
        b = rng.integers(0, 256, (64, 64)).astype(np.uint8)
        assert embedding_distance(DEFAULT_EMBEDDER, a, b) == embedding_distance(DEFAULT_EMBEDDER, b, a)
    flat = np.full((64, 64), 90, np.uint8)
    assert embedding_distance(DEFAULT_EMBEDDER, flat, flat) == 0.0


def test_oracle_report_is_perfect(tiny_eval):
    rep = reconstruction_report(oracle_predictor(tiny_eval), tiny_eval, {"off": IDENTITY, "on": stylizer(4)})
    for setting in ("off", "on"):
        row = rep.row(setting)
        assert row.failed == 0 and row.n == len(tiny_eval)
        assert row.target_l1 == pytest.approx(0.0, abs=1e-12)
        assert row.embedding_distance == pytest.approx(0.0, abs=1e-6)


def test_report_records_failures_and_is_deterministic(tiny_eval):
    def flaky(image, landmarks, adapter):
        if landmarks[0][0] < 21.5:
            raise RuntimeError("no face")
        return oracle_predictor(tiny_eval)(image, landmarks, adapter)

    a = reconstruction_report(flaky, tiny_eval, {"off": IDENTITY})
    b = reconstruction_report(flaky, tiny_eval, {"off": IDENTITY})
    assert a.to_csv() == b.to_csv()
    n_fail = sum(1 for s in tiny_eval.samples if s.landmarks[0][0] < 21.5)
    assert a.row("off").failed == n_fail
    assert a.to_csv().count("failed: no face") == n_fail
