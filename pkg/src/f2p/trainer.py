"""Image-to-parameter CNNs: training under feature extraction or fine-tuning.

The reference backbone is four 3x3 stride-2 convolution blocks (widths
16/32/64/128) with ReLU, global average pooling and a fixed per-feature
standardization, followed by a linear head.  Classification heads apply a
softmax per discrete slot so their outputs are probability slices.

Runs are deterministic given the seed: weights are initialized from a
seeded generator, batches are drawn from a seeded permutation, and torch
runs with deterministic algorithms on a fixed thread count.
"""
from __future__ import annotations

import csv
import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .codec import ParameterSchema
from .losses import LossWeights, loss_tensor
from .synthfaces import CropConfig, DatasetManifest, model_inputs

FEATURE_WIDTHS = (16, 32, 64, 128)
MODES = ("feature_extraction", "fine_tuning")
HEADS = ("regression", "classification")
DEFAULT_LR = {"feature_extraction": 0.01, "fine_tuning": 0.003}


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "feature_extraction"
    input_spec: str = "full_frame"  # or "crop:<region>"
    target_spec: str = "complete"  # or "local:<region>"
    head: str = "regression"
    lr: float | None = None  # None: per-mode default
    momentum: float = 0.9
    patience: int = 3
    decay: float = 0.3
    min_lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 40
    seed: int = 0
    regression_norm: str = "l2"
    clip_norm: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}")
        if self.head not in HEADS:
            raise TrainingError(f"head must be one of {HEADS}")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if not (0 < self.decay < 1):
            raise TrainingError("decay must be in (0, 1)")
        if not (self.input_spec == "full_frame" or self.input_spec.startswith("crop:")):
            raise TrainingError(f"bad input spec {self.input_spec!r}")
        if not (self.target_spec == "complete" or self.target_spec.startswith("local:")):
            raise TrainingError(f"bad target spec {self.target_spec!r}")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR[self.mode]

    @property
    def regions(self) -> list[str] | None:
        return None if self.target_spec == "complete" else [self.target_spec.split(":", 1)[1]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


def target_columns(schema: ParameterSchema, target_spec: str, head: str) -> list[int]:
    regions = schema.regions if target_spec == "complete" else [target_spec.split(":", 1)[1]]
    cols = []
    for r in regions:
        lay = schema.region_layout(r)
        if head == "regression":
            cols.extend(range(*lay.continuous))
        else:
            for _, a, b in lay.slots:
                cols.extend(range(a, b))
    return cols


def _slot_slices(schema: ParameterSchema, cols: Sequence[int]) -> list[tuple[int, int]]:
    """Positions of each discrete slot inside a classification head's output."""
    pos = {c: i for i, c in enumerate(cols)}
    out = []
    for lay in schema.layout:
        for _, a, b in lay.slots:
            if a in pos:
                out.append((pos[a], pos[a] + (b - a)))
    return out


class Backbone(nn.Module):
    def __init__(self, out_dim: int, slot_slices: Sequence[tuple[int, int]] = ()):
        super().__init__()
        layers = []
        c_in = 1
        for width in FEATURE_WIDTHS:
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), nn.ReLU()]
            c_in = width
        self.features = nn.Sequential(*layers)
        # standardization belongs to the head: feature extraction refits it
        self.register_buffer("head_mean", torch.zeros(c_in))
        self.register_buffer("head_std", torch.ones(c_in))
        self.head = nn.Linear(c_in, out_dim)
        self.slot_slices = list(slot_slices)

    @staticmethod
    def prepare(images: torch.Tensor) -> torch.Tensor:
        return (images.float()[:, None] / 255.0 - 0.5) / 0.25

    def raw_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(self.prepare(images)).mean(dim=(2, 3))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return (self.raw_features(images) - self.head_mean) / self.head_std

    def fit_standardization(self, raw: torch.Tensor) -> None:
        std = raw.std(dim=0)
        floor = max(1e-4, 0.05 * float(std.median()))
        self.head_mean.copy_(raw.mean(dim=0))
        self.head_std.copy_(std.clamp_min(floor))

    def from_features(self, feats: torch.Tensor) -> torch.Tensor:
        out = self.head(feats)
        if self.slot_slices:
            parts = [torch.softmax(out[:, a:b], dim=1) for a, b in self.slot_slices]
            out = torch.cat(parts, dim=1)
        return out

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.from_features(self.embed(images))


@contextmanager
def deterministic(threads: int = 1):
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def _tensor_bytes(state: dict) -> bytes:
    parts = []
    for k in sorted(state):
        parts.append(state[k].detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def state_digest(state: dict) -> str:
    return hashlib.sha256(_tensor_bytes(state)).hexdigest()


@dataclass
class TrainingData:
    """Model-ready inputs (uint8, N x h x w) with full-layout targets."""

    inputs: np.ndarray
    targets: np.ndarray
    schema: ParameterSchema
    ids: list[str] = field(default_factory=list)
    digest: str = ""

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, input_spec: str, crops: CropConfig = CropConfig(), adapter=None):
        inputs = model_inputs(manifest.images(), manifest.landmarks(), input_spec, crops, adapter)
        return cls(inputs, manifest.targets(), manifest.schema, [s.id for s in manifest.samples], manifest.digest())

    def subset(self, idx) -> "TrainingData":
        idx = np.asarray(idx, dtype=int)
        return TrainingData(self.inputs[idx], self.targets[idx], self.schema, [self.ids[i] for i in idx] if self.ids else [], self.digest)


@dataclass
class TrainedModel:
    module: Backbone
    config: TrainConfig
    schema: ParameterSchema
    columns: list[int]
    input_shape: tuple[int, int]
    curves: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def coordinate_names(self) -> list[str]:
        names = self.schema.coordinate_names()
        return [names[c] for c in self.columns]

    @property
    def role(self) -> str:
        return "aggregate" if self.config.target_spec == "complete" else "local"

    def feature_digest(self) -> str:
        return state_digest({k: v for k, v in self.module.state_dict().items() if k.startswith("features.")})

    def digest(self) -> str:
        return state_digest(self.module.state_dict())

    def sidecar(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "columns": self.columns,
            "coordinate_names": self.coordinate_names,
            "input_shape": list(self.input_shape),
            "schema": self.schema.to_dict(),
            "curves": self.curves,
            "provenance": self.provenance,
            "tensors": [
                [k, list(v.shape)] for k, v in sorted(self.module.state_dict().items())
            ],
            "parameter_digest": self.digest(),
        }

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "params.bin").write_bytes(_tensor_bytes(self.module.state_dict()))
        (d / "model.json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "TrainedModel":
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text(encoding="utf-8"))
        schema = ParameterSchema.from_dict(meta["schema"])
        config = TrainConfig.from_dict(meta["config"])
        cols = meta["columns"]
        slices = _slot_slices(schema, cols) if config.head == "classification" else []
        module = Backbone(len(cols), slices)
        blob = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f4")
        state, pos = {}, 0
        for name, shape in meta["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            state[name] = torch.from_numpy(blob[pos : pos + n].reshape(shape).copy())
            pos += n
        module.load_state_dict(state)
        model = cls(module, config, schema, cols, tuple(meta["input_shape"]), meta["curves"], meta["provenance"])
        if model.digest() != meta["parameter_digest"]:
            raise TrainingError(f"parameter digest mismatch in {d}")
        return model


def _forward_chunks(fn, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    return torch.cat([fn(x[i : i + chunk]) for i in range(0, len(x), chunk)]) if len(x) else fn(x)


def _new_module(out_dim, slices, seed) -> Backbone:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(out_dim, slices)


def _holdout(n: int, seed: int, fraction: float = 0.2):
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(n * fraction))) if n > 1 else 0
    return np.sort(perm[k:]), np.sort(perm[:k])


def train(
    data: TrainingData | DatasetManifest,
    config: TrainConfig,
    init: "TrainedModel | FeatureStage | None" = None,
    eval_data: TrainingData | DatasetManifest | None = None,
    crops: CropConfig = CropConfig(),
) -> TrainedModel:
    """Fit a model to ``data`` under ``config``.

    Without ``eval_data`` a seeded 20% holdout of ``data`` drives the plateau
    schedule.  Feature extraction trains only the head (on top of the
    feature stage of ``init``, or a seeded random one); fine-tuning needs an
    ``init`` model, normally the matching feature-extraction result, and
    trains everything.  The best-eval parameters are returned.
    """
    if isinstance(data, DatasetManifest):
        data = TrainingData.from_manifest(data, config.input_spec, crops)
    if isinstance(eval_data, DatasetManifest):
        eval_data = TrainingData.from_manifest(eval_data, config.input_spec, crops)
    if len(data) == 0:
        raise TrainingError("empty training set")
    if eval_data is None:
        tr, ev = _holdout(len(data), config.seed)
        data, eval_data = data.subset(tr), data.subset(ev if len(ev) else tr)
    schema = data.schema
    cols = target_columns(schema, config.target_spec, config.head)
    if not cols:
        raise TrainingError(f"target {config.target_spec!r} has no {config.head} coordinates")
    slices = _slot_slices(schema, cols) if config.head == "classification" else []
    weights = LossWeights.uniform(
        schema, config.regression_norm, regression=config.head == "regression", classification=config.head == "classification"
    )
    if config.regions is not None:
        weights = weights.restricted(config.regions)
    input_shape = tuple(data.inputs.shape[1:])

    if config.mode == "fine_tuning":
        if not isinstance(init, TrainedModel):
            raise TrainingError("fine_tuning requires an init model")
        if init.columns != cols or init.config.head != config.head:
            raise TrainingError("init model head does not match the configured target slice")
    if config.mode == "fine_tuning" and tuple(init.input_shape) != input_shape:
        raise TrainingError(f"init model input {init.input_shape} != data input {input_shape}")

    with deterministic(config.threads):
        x_tr = torch.from_numpy(data.inputs)
        x_ev = torch.from_numpy(eval_data.inputs)
        t_tr = torch.from_numpy(data.targets.astype(np.float32))
        t_ev = torch.from_numpy(eval_data.targets.astype(np.float32))

        if config.mode == "feature_extraction":
            module = _new_module(len(cols), slices, config.seed)
            # a fresh head starts at the zero predictor
            nn.init.zeros_(module.head.weight)
            nn.init.zeros_(module.head.bias)
            if init is not None:
                feat_state = {k: v for k, v in init.module.state_dict().items() if k.startswith("features.")}
                module.load_state_dict(feat_state, strict=False)
            with torch.no_grad():
                module.fit_standardization(_forward_chunks(module.raw_features, x_tr))
            for p in module.features.parameters():
                p.requires_grad_(False)
            with torch.no_grad():
                f_tr = _forward_chunks(module.embed, x_tr)
                f_ev = _forward_chunks(module.embed, x_ev)
            fwd_tr, fwd_ev = module.from_features, module.from_features
            in_tr, in_ev = f_tr, f_ev
            params = list(module.head.parameters())
        else:
            module = Backbone(len(cols), slices)
            module.load_state_dict(init.module.state_dict())
            fwd_tr, fwd_ev = module, module
            in_tr, in_ev = x_tr, x_ev
            params = list(module.parameters())

        opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
        gen = torch.Generator().manual_seed(config.seed)

        def full(pred, target):
            out = target.clone()
            out[:, cols] = pred
            return out

        def eval_loss():
            module.eval()
            with torch.no_grad():
                pred = _forward_chunks(fwd_ev, in_ev)
                return float(loss_tensor(full(pred, t_ev), t_ev, schema, weights))

        lr = config.learning_rate
        best = eval_loss()
        best_state = {k: v.clone() for k, v in module.state_dict().items()}
        curves = {"train": [], "eval": [best], "lr": [], "best_eval": [best]}
        bad = 0
        epoch = 0
        while epoch < config.max_epochs and lr >= config.min_lr:
            module.train()
            perm = torch.randperm(len(in_tr), generator=gen)
            total, count = 0.0, 0
            for i in range(0, len(perm), config.batch_size):
                idx = perm[i : i + config.batch_size]
                opt.zero_grad()
                pred = fwd_tr(in_tr[idx])
                loss = loss_tensor(full(pred, t_tr[idx]), t_tr[idx], schema, weights)
                loss.backward()
                if config.clip_norm:
                    nn.utils.clip_grad_norm_(params, config.clip_norm)
                opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            epoch += 1
            ev = eval_loss()
            curves["train"].append(total / count)
            curves["eval"].append(ev)
            curves["lr"].append(lr)
            if ev < best * (1 - 1e-4):
                best = ev
                best_state = {k: v.clone() for k, v in module.state_dict().items()}
                bad = 0
            else:
                bad += 1
                if bad >= config.patience:
                    lr *= config.decay
                    for g in opt.param_groups:
                        g["lr"] = lr
                    bad = 0
            curves["best_eval"].append(best)
        module.load_state_dict(best_state)
        for p in module.parameters():
            p.requires_grad_(True)
        module.eval()

    provenance = {
        "dataset_digest": data.digest,
        "eval_digest": eval_data.digest,
        "seed": config.seed,
        "init_digest": init.digest() if init is not None else None,
        "feature_digest": TrainedModel(module, config, schema, cols, input_shape).feature_digest(),
        "epochs": epoch,
    }
    return TrainedModel(module, config, schema, cols, input_shape, curves, provenance)


def predict(model: TrainedModel, images) -> np.ndarray:
    """Predict the model's target slice for one image (h, w) or a batch (N, h, w)."""
    x = np.asarray(images, dtype=np.uint8)
    single = x.ndim == 2
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"input size {x.shape[1:]} != model input {tuple(model.input_shape)}")
    with deterministic(model.config.threads), torch.no_grad():
        model.module.eval()
        # one image per forward pass, so batch and single predictions agree bit for bit
        out = torch.cat([model.module(torch.from_numpy(x[i : i + 1])) for i in range(len(x))])
    y = out.numpy().astype(np.float64)
    return y[0] if single else y


@dataclass
class PredictionBlock:
    """One model's predictions over a dataset, rows in manifest order."""

    model_id: str
    role: str
    columns: list[int]
    names: list[str]
    ids: list[str]
    values: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", *self.names])
            for sid, row in zip(self.ids, self.values):
                w.writerow([sid, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path, schema: ParameterSchema, model_id: str | None = None, role: str = "local") -> "PredictionBlock":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        names = rows[0][1:]
        all_names = schema.coordinate_names()
        cols = [all_names.index(n) for n in names]
        ids = [r[0] for r in rows[1:]]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(ids), len(names))
        return cls(model_id or Path(path).stem, role, cols, names, ids, values)


def predict_matrix(model: TrainedModel, data: TrainingData, model_id: str = "model") -> PredictionBlock:
    values = predict(model, data.inputs)
    ids = data.ids or [str(i) for i in range(len(values))]
    return PredictionBlock(model_id, model.role, list(model.columns), model.coordinate_names, ids, values)


# -- generic feature pretraining ------------------------------------------------


@dataclass
class FeatureStage:
    """A pretrained feature stage (conv weights only) usable as a feature-extraction init."""

    state: dict
    provenance: dict = field(default_factory=dict)

    @property
    def module(self) -> Backbone:
        m = Backbone(1)
        m.load_state_dict(self.state, strict=False)
        return m

    def digest(self) -> str:
        return state_digest(self.state)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "features.bin").write_bytes(_tensor_bytes(self.state))
        meta = {
            "tensors": [[k, list(v.shape)] for k, v in sorted(self.state.items())],
            "provenance": self.provenance,
            "digest": self.digest(),
        }
        (d / "features.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "FeatureStage":
        d = Path(directory)
        meta = json.loads((d / "features.json").read_text(encoding="utf-8"))
        blob = np.frombuffer((d / "features.bin").read_bytes(), dtype="<f4")
        state, pos = {}, 0
        for name, shape in meta["tensors"]:
            n = int(np.prod(shape))
            state[name] = torch.from_numpy(blob[pos : pos + n].reshape(shape).copy())
            pos += n
        stage = cls(state, meta["provenance"])
        if stage.digest() != meta["digest"]:
            raise TrainingError(f"feature digest mismatch in {d}")
        return stage


def shapes_corpus(n: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random-primitive images with coarse spatial summary targets.

    Each image holds 1-4 random ellipses, rectangles, triangles or strokes
    on a random background.  Targets are the 4x4 cell means of the image and
    of its gradient magnitude, so learned features keep coarse layout.  The
    corpus knows nothing about faces.
    """
    from .synthfaces import _coverage, capsule, ellipse, rect, triangle

    rng = np.random.default_rng(np.random.SeedSequence([seed, size]))
    images = np.empty((n, size, size), np.uint8)
    for i in range(n):
        img = np.full((size, size), rng.uniform(0, 1))
        for _ in range(rng.integers(1, 5)):
            cx, cy = rng.uniform(0.1, 0.9, 2)
            a, b = rng.uniform(0.03, 0.3, 2)
            ang = rng.uniform(-np.pi, np.pi)
            kind = rng.integers(4)
            if kind == 0:
                fn = ellipse(cx, cy, a, b, ang)
            elif kind == 1:
                fn = rect(cx, cy, a, b, ang)
            elif kind == 2:
                fn = triangle(rng.uniform(0.05, 0.95, (3, 2)))
            else:
                fn = capsule(cx - a, cy - b, cx + a, cy + b, rng.uniform(0.01, 0.05))
            cov, _ = _coverage(fn, (size, size))
            img = img * (1 - cov) + rng.uniform(0, 1) * cov
        img = img + rng.normal(0, rng.uniform(0, 0.02), img.shape)
        images[i] = np.round(np.clip(img, 0, 1) * 255)
    x = images.astype(np.float64) / 255.0
    gy, gx = np.gradient(x, axis=(1, 2))
    grad = np.hypot(gx, gy)
    k = size // 4
    cells = lambda a: a.reshape(n, 4, k, 4, k).mean(axis=(2, 4)).reshape(n, 16)
    targets = np.hstack([cells(x), cells(grad)])
    targets = (targets - targets.mean(0)) / targets.std(0).clip(1e-6)
    return images, targets


def pretrain_features(
    n: int = 3000, sizes: Sequence[int] = (64, 32), epochs: int = 12, seed: int = 0, lr: float = 0.02, threads: int = 1
) -> FeatureStage:
    """Pretrain the feature stage on the generic shapes corpus (stand-in for a model zoo)."""
    corpora = [shapes_corpus(n, s, seed) for s in sizes]
    with deterministic(threads):
        module = _new_module(corpora[0][1].shape[1], [], seed)
        opt = torch.optim.SGD(module.parameters(), lr=lr, momentum=0.9)
        gen = torch.Generator().manual_seed(seed)
        tensors = [(torch.from_numpy(x), torch.from_numpy(t.astype(np.float32))) for x, t in corpora]
        losses = []
        for epoch in range(epochs):
            if epoch == int(epochs * 0.75):
                for g in opt.param_groups:
                    g["lr"] = lr * 0.2
            batches = []
            for k, (x, _) in enumerate(tensors):
                perm = torch.randperm(len(x), generator=gen)
                batches += [(k, perm[i : i + 64]) for i in range(0, len(x), 64)]
            order = torch.randperm(len(batches), generator=gen).tolist()
            total = 0.0
            for j in order:
                k, idx = batches[j]
                x, t = tensors[k]
                opt.zero_grad()
                loss = ((module.head(module.raw_features(x[idx])) - t[idx]) ** 2).mean()
                loss.backward()
                opt.step()
                total += float(loss.detach())
            losses.append(total / len(order))
    state = {k: v.clone() for k, v in module.state_dict().items() if k.startswith("features.")}
    prov = {"task": "shapes-4x4-summary", "n": n, "sizes": list(sizes), "epochs": epochs, "seed": seed, "lr": lr, "loss": losses}
    return FeatureStage(state, prov)
