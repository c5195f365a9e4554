"""The seeded end-to-end toy study: corpus, ablation grid, ensemble and the style-gap check.

Training images are posterized (the synthetic "style"); the gap scenario
feeds clean renders of the same recipes to the trained ensemble with the
inverse adapter off and on.  The control scenario feeds images that are
already in the training style.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapt import IDENTITY, stylizer
from .ensemble import EnsembleModel, PredictionMatrix, fit_ensemble, prediction_matrix
from .evaluation import (
    AblationGrid,
    AblationReport,
    ReconstructionReport,
    WeightComparison,
    compare_constant_weights,
    reconstruction_report,
    run_ablation,
)
from .synthfaces import FEATURE_REGIONS, CropConfig, generate_dataset, toy_schema
from .trainer import FeatureStage, TrainConfig, TrainingData, pretrain_features, train


@dataclass(frozen=True)
class StudyConfig:
    n_train: int = 2000
    n_eval: int = 500
    train_seed: int = 1
    eval_seed: int = 2
    style_levels: int = 4
    control_seeds: tuple[int, ...] = (10, 11, 12, 13, 14)
    n_control: int = 100
    seed: int = 0
    feature_seed: int = 0
    regions: tuple[str, ...] = FEATURE_REGIONS
    train: dict = field(default_factory=dict)
    jobs: int = 1


@dataclass
class StudyResult:
    config: StudyConfig
    ablation: AblationReport
    ensemble: EnsembleModel
    fitting: PredictionMatrix
    evaluation: PredictionMatrix
    comparison: WeightComparison
    gap: ReconstructionReport
    control: list[ReconstructionReport]
    feature_extraction_models: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def _gen(schema, n, seed, levels, jobs):
    return generate_dataset(schema, n, seed, normalize=True, style_levels=levels, jobs=jobs)


def _classifier(data, eval_data, input_spec, target_spec, features, cfg: StudyConfig, fe_models: list):
    base = dict(input_spec=input_spec, target_spec=target_spec, head="classification", seed=cfg.seed, **cfg.train)
    fe = train(data, TrainConfig(mode="feature_extraction", **base), init=features, eval_data=eval_data)
    fe_models.append(fe)
    return train(data, TrainConfig(mode="fine_tuning", **base), init=fe, eval_data=eval_data)


def run_study(cfg: StudyConfig = StudyConfig(), features: FeatureStage | None = None, log=lambda msg: None) -> StudyResult:
    t0 = time.perf_counter()
    timings = {}

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = now - t0
        t0 = now
        log(f"{name}: {timings[name]:.1f}s")

    schema = toy_schema()
    crops = CropConfig()
    train_set = _gen(schema, cfg.n_train, cfg.train_seed, cfg.style_levels, cfg.jobs)
    eval_styled = _gen(schema, cfg.n_eval, cfg.eval_seed, cfg.style_levels, cfg.jobs)
    eval_clean = _gen(schema, cfg.n_eval, cfg.eval_seed, None, cfg.jobs)
    lap("data")
    if features is None:
        features = pretrain_features(seed=cfg.feature_seed)
        lap("pretrain")

    grid = AblationGrid(regions=tuple(cfg.regions), train=dict(cfg.train))
    ablation = run_ablation(train_set, grid, seed=cfg.seed, eval_data=eval_styled, features=features,
                            crops=crops, jobs=cfg.jobs, keep_models=True)
    lap("ablation")

    models = {"aggregate-regression": ablation.models[("full_frame", "complete", "fine_tuning")]}
    for r in cfg.regions:
        models[f"{r}-regression"] = ablation.models[(f"crop:{r}", f"local:{r}", "fine_tuning")]
    fe_models = [m for k, m in ablation.models.items() if k[2] == "feature_extraction"]
    data_cache = {}

    def data_for(spec):
        if spec not in data_cache:
            data_cache[spec] = (TrainingData.from_manifest(train_set, spec, crops),
                                TrainingData.from_manifest(eval_styled, spec, crops))
        return data_cache[spec]

    models["aggregate-classification"] = _classifier(*data_for("full_frame"), "full_frame", "complete", features, cfg, fe_models)
    for r in cfg.regions:
        spec = f"crop:{r}"
        models[f"{r}-classification"] = _classifier(*data_for(spec), spec, f"local:{r}", features, cfg, fe_models)
    lap("classifiers")

    fitting = prediction_matrix(models, train_set, crops)
    weights = fit_ensemble(fitting)
    adapter = stylizer(cfg.style_levels)
    ensemble = EnsembleModel(schema, models, weights, adapter, crops,
                             {"fit_digest": train_set.digest(), "split": "train"})
    evaluation = prediction_matrix(models, eval_styled, crops)
    comparison = compare_constant_weights(weights, fitting, evaluation)
    lap("ensemble")

    gap = reconstruction_report(ensemble, eval_clean, {"off": IDENTITY, "on": adapter})
    control = []
    for s in cfg.control_seeds:
        ds = _gen(schema, cfg.n_control, s, cfg.style_levels, cfg.jobs)
        control.append(reconstruction_report(ensemble, ds, {"off": IDENTITY, "on": adapter}))
    lap("reports")
    return StudyResult(cfg, ablation, ensemble, fitting, evaluation, comparison, gap, control, fe_models, timings)


def control_summary(result: StudyResult) -> dict:
    """Adapter-on minus adapter-off target L1 per control seed, with the seed spread of the off runs."""
    off = np.array([r.row("off").target_l1 for r in result.control])
    on = np.array([r.row("on").target_l1 for r in result.control])
    return {"delta": on - off, "mean_delta": float((on - off).mean()), "seed_std": float(off.std(ddof=1))}


