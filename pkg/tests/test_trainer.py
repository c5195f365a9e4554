import numpy as np
import pytest

from f2p.trainer import (
    FeatureStage,
    PredictionBlock,
    TrainConfig,
    TrainedModel,
    TrainingData,
    TrainingError,
    predict,
    predict_matrix,
    target_columns,
    train,
)

FAST = dict(max_epochs=4, batch_size=16)


@pytest.fixture(scope="module")
def frames(tiny_dataset):
    return TrainingData.from_manifest(tiny_dataset, "full_frame")


@pytest.fixture(scope="module")
def eval_frames(tiny_eval):
    return TrainingData.from_manifest(tiny_eval, "full_frame")


@pytest.fixture(scope="module")
def fe_model(frames, eval_frames, tiny_features):
    return train(frames, TrainConfig(**FAST), init=tiny_features, eval_data=eval_frames)


@pytest.fixture(scope="module")
def classifier(frames, eval_frames, tiny_features):
    return train(frames, TrainConfig(head="classification", **FAST), init=tiny_features, eval_data=eval_frames)


def test_constant_targets_are_fit(frames, schema, tiny_features):
    c = np.random.default_rng(0).uniform(-1, 1, schema.size)
    const = TrainingData(frames.inputs, np.tile(c, (len(frames), 1)), schema)
    model = train(const, TrainConfig(max_epochs=100, batch_size=16), init=tiny_features, eval_data=const)
    pred = predict(model, const.inputs)
    assert np.abs(pred - c[model.columns]).max() <= 1e-2


def test_feature_extraction_keeps_features(fe_model, tiny_features):
    assert fe_model.feature_digest() == tiny_features.digest()


def test_fine_tuning_changes_features(frames, eval_frames, fe_model):
    ft = train(frames, TrainConfig(mode="fine_tuning", **FAST), init=fe_model, eval_data=eval_frames)
    assert ft.feature_digest() != fe_model.feature_digest()
    assert ft.provenance["init_digest"] == fe_model.digest()


def test_training_is_deterministic(frames, eval_frames, fe_model, tiny_features):
    again = train(frames, TrainConfig(**FAST), init=tiny_features, eval_data=eval_frames)
    assert again.digest() == fe_model.digest()
    assert again.curves == fe_model.curves


def test_best_eval_is_monotone(fe_model):
    best = fe_model.curves["best_eval"]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert best[-1] == min(fe_model.curves["eval"])


def test_predict_batch_equals_single(fe_model, frames):
    batch = predict(fe_model, frames.inputs[:6])
    for i in range(6):
        single = predict(fe_model, frames.inputs[i])
        assert np.array_equal(batch[i], single)
    assert np.array_equal(predict(fe_model, frames.inputs[:6]), batch)


def test_classification_slices_sum_to_one(classifier, eval_frames, schema):
    p = predict(classifier, eval_frames.inputs)
    assert classifier.columns == target_columns(schema, "complete", "classification")
    start = 0
    for lay in schema.layout:
        for _, a, b in lay.slots:
            k = b - a
            assert np.allclose(p[:, start : start + k].sum(axis=1), 1.0, atol=1e-6)
            start += k
    assert start == p.shape[1]


def test_input_size_mismatch(fe_model):
    with pytest.raises(ValueError):
        predict(fe_model, np.zeros((32, 32), np.uint8))


def test_fine_tuning_requires_init(frames):
    with pytest.raises(TrainingError):
        train(frames, TrainConfig(mode="fine_tuning", **FAST))


def test_fine_tuning_rejects_mismatched_head(frames, classifier):
    with pytest.raises(TrainingError):
        train(frames, TrainConfig(mode="fine_tuning", **FAST), init=classifier)


def test_local_target_has_region_columns(schema, tiny_dataset, tiny_features):
    crops = TrainingData.from_manifest(tiny_dataset, "crop:nose")
    model = train(crops, TrainConfig(input_spec="crop:nose", target_spec="local:nose", max_epochs=1), init=tiny_features)
    assert model.role == "local"
    assert all(n.startswith("nose/") for n in model.coordinate_names)
    assert model.input_shape == crops.inputs.shape[1:]


def test_bad_config():
    with pytest.raises(TrainingError):
        TrainConfig(mode="transfer")
    with pytest.raises(TrainingError):
        TrainConfig(input_spec="whole")
    with pytest.raises(TrainingError):
        TrainConfig(decay=1.5)


def test_model_save_load(fe_model, frames, tmp_path):
    fe_model.save(tmp_path / "m")
    back = TrainedModel.load(tmp_path / "m")
    assert back.digest() == fe_model.digest()
    assert np.array_equal(predict(back, frames.inputs[:4]), predict(fe_model, frames.inputs[:4]))
    blob = bytearray((tmp_path / "m" / "params.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "m" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(TrainingError):
        TrainedModel.load(tmp_path / "m")


def test_feature_stage_save_load(tiny_features, tmp_path):
    tiny_features.save(tmp_path / "fs")
    assert FeatureStage.load(tmp_path / "fs").digest() == tiny_features.digest()


def test_prediction_csv_round_trip(fe_model, frames, schema, tmp_path):
    block = predict_matrix(fe_model, frames, "agg")
    block.to_csv(tmp_path / "agg.csv")
    back = PredictionBlock.from_csv(tmp_path / "agg.csv", schema, role="aggregate")
    assert back.ids == block.ids and back.columns == block.columns
    assert np.abs(back.values - block.values).max() <= 1e-9
    assert np.array_equal(np.round(back.values, 9), np.round(block.values, 9))
