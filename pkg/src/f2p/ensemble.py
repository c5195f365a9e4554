"""Per-coordinate blending of local and aggregate predictions.

For each target coordinate the contributing models' predictions are
combined linearly with weights that sum to one (and may be negative).  The
weights minimize the squared error against the targets on a fitting set;
with one local and one aggregate model that is a scalar closed form.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._imaging import sha256_bytes
from .adapt import IDENTITY, DomainAdapter, get_adapter
from .codec import LayoutError, ParameterSchema, Recipe, decode
from .synthfaces import CropConfig, DatasetManifest, crop_registered, model_inputs
from .trainer import PredictionBlock, TrainedModel, predict


class EnsembleError(ValueError):
    pass


class PipelineStageError(RuntimeError):
    """A failure inside one inference stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _column(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise EnsembleError(f"{name} contains non-finite values")
    return a


def fit_weights_pair(local, aggregate, target) -> float:
    """Weight ``w`` on ``local`` (``1 - w`` on ``aggregate``) minimizing the squared error.

    Returns 0.5 when the two columns are numerically identical, since every
    ``w`` is then optimal.
    """
    l = _column(local, "local")
    g = _column(aggregate, "aggregate")
    t = _column(target, "target")
    if not (len(l) == len(g) == len(t)) or len(l) == 0:
        raise EnsembleError(f"column lengths differ or are empty: {len(l)}, {len(g)}, {len(t)}")
    d = l - g
    den = float(d @ d)
    if den < 1e-12 * float(l @ l + g @ g) + 1e-30:
        return 0.5
    return float((t - g) @ d) / den


def _sum_one_basis(k: int) -> np.ndarray:
    """Orthonormal basis (k x k-1) of the vectors whose entries sum to zero."""
    _, _, vt = np.linalg.svd(np.ones((1, k)))
    return vt[1:].T


def fit_weights_general(preds, target) -> np.ndarray:
    """Sum-to-one least-squares weights for ``n_k`` prediction columns.

    ``preds`` is a sequence of columns or an (N, n_k) array.  Writing
    ``w = 1/n_k + B z`` with ``B`` spanning the sum-zero subspace turns the
    constrained problem into an ordinary least-squares one in ``z``; the
    minimum-norm ``z`` picks, among optimal weights, the one closest to
    uniform when the system is rank deficient.
    """
    t = _column(target, "target")
    cols = np.asarray(preds, dtype=np.float64)
    if cols.ndim == 1:
        cols = cols[:, None]
    elif cols.shape[0] != len(t) and cols.shape[1] == len(t):
        cols = cols.T
    if cols.shape[0] != len(t) or cols.shape[1] < 1:
        raise EnsembleError(f"prediction shape {cols.shape} does not match target length {len(t)}")
    if not np.all(np.isfinite(cols)):
        raise EnsembleError("predictions contain non-finite values")
    k = cols.shape[1]
    if k == 1:
        return np.ones(1)
    uniform = np.full(k, 1.0 / k)
    basis = _sum_one_basis(k)
    a = cols @ basis
    rhs = t - cols @ uniform
    z, *_ = np.linalg.lstsq(a, rhs, rcond=1e-12)
    w = uniform + basis @ z
    # the basis columns sum to exactly zero only up to rounding
    return w + (1.0 - w.sum()) / k


def l2_error(blended, target) -> float:
    d = np.asarray(blended, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((d * d).sum())


@dataclass
class PredictionMatrix:
    """Per-model prediction blocks plus the targets, all in one sample order."""

    schema: ParameterSchema
    blocks: dict[str, PredictionBlock]
    targets: np.ndarray
    ids: list[str]

    def __post_init__(self):
        if self.targets.shape != (len(self.ids), self.schema.size):
            raise LayoutError(f"targets shape {self.targets.shape} != ({len(self.ids)}, {self.schema.size})")
        for mid, b in self.blocks.items():
            if list(b.ids) != list(self.ids):
                raise EnsembleError(f"model {mid!r} rows are not in the target sample order")
            if b.values.shape != (len(self.ids), len(b.columns)):
                raise EnsembleError(f"model {mid!r} values have shape {b.values.shape}")

    def contributors(self, coord: int) -> list[str]:
        """Model ids predicting ``coord``: local models first, then aggregates."""
        ids = [m for m, b in self.blocks.items() if coord in b.columns]
        return sorted(ids, key=lambda m: (self.blocks[m].role != "local", m))

    def column(self, model_id: str, coord: int) -> np.ndarray:
        b = self.blocks[model_id]
        return b.values[:, b.columns.index(coord)]

    def subset(self, rows) -> "PredictionMatrix":
        rows = np.asarray(rows, dtype=int)
        blocks = {
            m: PredictionBlock(b.model_id, b.role, b.columns, b.names, [b.ids[i] for i in rows], b.values[rows])
            for m, b in self.blocks.items()
        }
        return PredictionMatrix(self.schema, blocks, self.targets[rows], [self.ids[i] for i in rows])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for mid, b in self.blocks.items():
            b.to_csv(d / f"{mid}.csv")
        target_block = PredictionBlock("target", "target", list(range(self.schema.size)),
                                       self.schema.coordinate_names(), self.ids, self.targets)
        target_block.to_csv(d / "target.csv")
        roles = {mid: b.role for mid, b in self.blocks.items()}
        (d / "roles.json").write_text(json.dumps(roles, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path, schema: ParameterSchema) -> "PredictionMatrix":
        d = Path(directory)
        roles = json.loads((d / "roles.json").read_text(encoding="utf-8"))
        blocks = {mid: PredictionBlock.from_csv(d / f"{mid}.csv", schema, mid, role) for mid, role in sorted(roles.items())}
        target = PredictionBlock.from_csv(d / "target.csv", schema, "target", "target")
        return cls(schema, blocks, target.values, target.ids)


@dataclass
class EnsembleWeights:
    """Blending weights per target coordinate, keyed by coordinate name then model id."""

    weights: dict[str, dict[str, float]]

    def __post_init__(self):
        for coord, ws in self.weights.items():
            if not ws:
                raise EnsembleError(f"coordinate {coord!r} has no contributing model")
            if abs(sum(ws.values()) - 1.0) > 1e-9:
                raise EnsembleError(f"weights of {coord!r} sum to {sum(ws.values())!r}, not 1")

    def to_dict(self) -> dict:
        return {c: dict(sorted(ws.items())) for c, ws in self.weights.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleWeights":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        return sha256_bytes(self.to_json().encode())

    def blend(self, schema: ParameterSchema, predictions: Mapping[str, tuple[Sequence[int], np.ndarray]]) -> np.ndarray:
        """Weighted combination of per-model ``(columns, values)`` into full-layout rows."""
        names = schema.coordinate_names()
        n = next(iter(predictions.values()))[1].shape[0] if predictions else 0
        out = np.zeros((n, schema.size))
        where = {m: {c: i for i, c in enumerate(cols)} for m, (cols, _) in predictions.items()}
        for c, name in enumerate(names):
            ws = self.weights.get(name)
            if ws is None:
                raise EnsembleError(f"no weights for coordinate {name!r}")
            for m, w in ws.items():
                if m not in predictions or c not in where[m]:
                    raise EnsembleError(f"model {m!r} does not predict {name!r}")
                out[:, c] += w * predictions[m][1][:, where[m][c]]
        return out

    def blend_matrix(self, matrix: PredictionMatrix) -> np.ndarray:
        return self.blend(matrix.schema, {m: (b.columns, b.values) for m, b in matrix.blocks.items()})


def fit_ensemble(matrix: PredictionMatrix) -> EnsembleWeights:
    """Fit every coordinate independently from the models that predict it."""
    names = matrix.schema.coordinate_names()
    weights = {}
    for c, name in enumerate(names):
        models = matrix.contributors(c)
        if not models:
            raise EnsembleError(f"coordinate {name!r} has no contributing model")
        if len(models) == 1:
            weights[name] = {models[0]: 1.0}
            continue
        t = matrix.targets[:, c]
        if len(models) == 2:
            w = fit_weights_pair(matrix.column(models[0], c), matrix.column(models[1], c), t)
            weights[name] = {models[0]: w, models[1]: 1.0 - w}
        else:
            w = fit_weights_general(np.stack([matrix.column(m, c) for m in models], axis=1), t)
            weights[name] = {m: float(x) for m, x in zip(models, w)}
    return EnsembleWeights(weights)


def constant_weights(matrix: PredictionMatrix, local_weight: float) -> EnsembleWeights:
    """``local_weight`` split evenly over local models, the rest over aggregates.

    Coordinates with a single contributor keep weight 1 on it.
    """
    weights = {}
    for c, name in enumerate(matrix.schema.coordinate_names()):
        models = matrix.contributors(c)
        if not models:
            raise EnsembleError(f"coordinate {name!r} has no contributing model")
        locs = [m for m in models if matrix.blocks[m].role == "local"]
        aggs = [m for m in models if matrix.blocks[m].role != "local"]
        if not locs or not aggs:
            weights[name] = {m: 1.0 / len(models) for m in models}
            continue
        ws = {m: local_weight / len(locs) for m in locs}
        ws.update({m: (1.0 - local_weight) / len(aggs) for m in aggs})
        weights[name] = ws
    return EnsembleWeights(weights)


@dataclass
class EnsembleModel:
    """Aggregate and local models, their blending weights and the input pipeline around them."""

    schema: ParameterSchema
    models: dict[str, TrainedModel]
    weights: EnsembleWeights
    adapter: DomainAdapter = IDENTITY
    crops: CropConfig = field(default_factory=CropConfig)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        covered = set()
        for m in self.models.values():
            covered.update(m.columns)
        missing = [n for c, n in enumerate(self.schema.coordinate_names()) if c not in covered]
        if missing:
            raise EnsembleError(f"coordinates without a model: {missing}")

    def with_adapter(self, adapter: DomainAdapter) -> "EnsembleModel":
        return EnsembleModel(self.schema, self.models, self.weights, adapter, self.crops, self.provenance)

    def input_specs(self) -> list[str]:
        return sorted({m.config.input_spec for m in self.models.values()})

    def digest(self) -> str:
        parts = {mid: m.digest() for mid, m in sorted(self.models.items())}
        return sha256_bytes(json.dumps({"models": parts, "weights": self.weights.to_dict(),
                                        "crops": self.crops.to_dict()}, sort_keys=True).encode())

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for mid, m in self.models.items():
            m.save(d / "models" / mid)
        self.weights.save(d / "weights.json")
        meta = {
            "models": sorted(self.models),
            "adapter": self.adapter.name,
            "crops": self.crops.to_dict(),
            "schema": self.schema.to_dict(),
            "provenance": self.provenance,
            "digest": self.digest(),
        }
        (d / "ensemble.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path, adapter: DomainAdapter | None = None) -> "EnsembleModel":
        d = Path(directory)
        meta = json.loads((d / "ensemble.json").read_text(encoding="utf-8"))
        models = {mid: TrainedModel.load(d / "models" / mid) for mid in meta["models"]}
        ens = cls(
            ParameterSchema.from_dict(meta["schema"]),
            models,
            EnsembleWeights.load(d / "weights.json"),
            adapter if adapter is not None else get_adapter(meta["adapter"]),
            CropConfig.from_dict(meta["crops"]),
            meta.get("provenance", {}),
        )
        return ens


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except PipelineStageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise PipelineStageError(name, str(exc)) from exc


def _inputs_for(ensemble: EnsembleModel, images, landmarks, adapter: DomainAdapter) -> dict[str, np.ndarray]:
    adapted = np.stack([_stage(f"adapter:{adapter.name}", adapter, im) for im in images])
    if landmarks is None:
        full = adapted
    else:
        full = _stage("registration", model_inputs, adapted, np.asarray(landmarks, dtype=float), "full_frame", ensemble.crops)
    out = {"full_frame": full}
    for spec in ensemble.input_specs():
        if spec != "full_frame":
            region = spec.split(":", 1)[1]
            out[spec] = _stage(f"crop:{region}", lambda: np.stack([crop_registered(f, region, ensemble.crops) for f in full]))
    return out


def ensemble_vectors(ensemble: EnsembleModel, images, landmarks=None, adapter: DomainAdapter | None = None) -> np.ndarray:
    """Blended full-layout vectors for a batch of images (before decoding).

    Without ``landmarks`` the images are taken as already registered.
    """
    adapter = ensemble.adapter if adapter is None else adapter
    images = np.asarray(images)
    if images.ndim != 3:
        raise PipelineStageError("input", f"expected a batch of gray images, got shape {images.shape}")
    inputs = _inputs_for(ensemble, images, landmarks, adapter)
    preds = {}
    for mid, m in sorted(ensemble.models.items()):
        preds[mid] = (m.columns, _stage(f"predict:{mid}", predict, m, inputs[m.config.input_spec]))
    return _stage("blend", ensemble.weights.blend, ensemble.schema, preds)


def ensemble_predict(ensemble: EnsembleModel, image, landmarks=None, adapter: DomainAdapter | None = None) -> Recipe:
    """Recipe for one image: adapt, register, crop, predict, blend, decode."""
    image = np.asarray(image)
    lm = None if landmarks is None else np.asarray(landmarks, dtype=float)[None]
    vec = ensemble_vectors(ensemble, image[None], lm, adapter)[0]
    return _stage("decode", decode, vec, ensemble.schema)


def prediction_matrix(
    models: Mapping[str, TrainedModel],
    manifest: DatasetManifest,
    crops: CropConfig = CropConfig(),
    adapter: DomainAdapter | None = None,
) -> PredictionMatrix:
    """Run every model over ``manifest`` and collect the blocks with the targets."""
    images, landmarks = manifest.images(), manifest.landmarks()
    inputs = {}
    blocks = {}
    ids = [s.id for s in manifest.samples]
    for mid, m in sorted(models.items()):
        spec = m.config.input_spec
        if spec not in inputs:
            inputs[spec] = model_inputs(images, landmarks, spec, crops, adapter)
        values = predict(m, inputs[spec])
        blocks[mid] = PredictionBlock(mid, m.role, list(m.columns), m.coordinate_names, ids, values)
    return PredictionMatrix(manifest.schema, blocks, manifest.targets(), ids)
