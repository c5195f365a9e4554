"""Multi-part heterogeneous loss with per-region regression and classification terms.

    total = sum_i v_i * R_i + sum_i w_i * C_i

R_i is the mean L1 or L2 error over region i's continuous coordinates and
C_i the mean cross-entropy over region i's discrete slots.  Predicted
discrete slices are probabilities (the model owns the softmax).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .codec import LayoutError, ParameterSchema, UnknownRegionError

EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    v: dict[str, float]
    w: dict[str, float]
    regression_norm: str = "l2"

    def __post_init__(self):
        if self.regression_norm not in ("l1", "l2"):
            raise LossError(f"regression_norm must be 'l1' or 'l2', not {self.regression_norm!r}")
        vals = list(self.v.values()) + list(self.w.values())
        if not all(np.isfinite(vals)):
            raise LossError("loss weights must be finite")
        if not any(x != 0 for x in vals):
            raise LossError("at least one loss weight must be nonzero")

    @classmethod
    def uniform(cls, schema: ParameterSchema, regression_norm: str = "l2", regression=True, classification=True):
        return cls(
            {r: 1.0 if regression else 0.0 for r in schema.regions},
            {r: 1.0 if classification else 0.0 for r in schema.regions},
            regression_norm,
        )

    def restricted(self, regions: Sequence[str]) -> "LossWeights":
        """Same weights with every region outside ``regions`` zeroed."""
        keep = set(regions)
        return LossWeights(
            {r: (x if r in keep else 0.0) for r, x in self.v.items()},
            {r: (x if r in keep else 0.0) for r, x in self.w.items()},
            self.regression_norm,
        )


@dataclass
class LossBreakdown:
    total: float
    regression: dict[str, float] = field(default_factory=dict)
    classification: dict[str, float] = field(default_factory=dict)


def _region_terms(pred: torch.Tensor, target: torch.Tensor, schema: ParameterSchema, norm: str):
    """Per-region (R_i, C_i) tensors, averaged over the batch dimension."""
    out = {}
    for lay in schema.layout:
        a, b = lay.continuous
        if b > a:
            d = pred[:, a:b] - target[:, a:b]
            r = d.abs().mean() if norm == "l1" else (d * d).mean()
        else:
            r = pred.new_zeros(())
        ces = []
        for _, s, e in lay.slots:
            true = target[:, s:e].argmax(dim=1, keepdim=True)
            p = pred[:, s:e].gather(1, true).clamp(EPS, 1.0)
            ces.append(-torch.log(p).mean())
        c = torch.stack(ces).mean() if ces else pred.new_zeros(())
        out[lay.region] = (r, c)
    return out


def loss_tensor(pred: torch.Tensor, target: torch.Tensor, schema: ParameterSchema, weights: LossWeights) -> torch.Tensor:
    """Differentiable total loss on full-layout batches (used by the trainer)."""
    terms = _region_terms(pred, target, schema, weights.regression_norm)
    total = pred.new_zeros(())
    for region, (r, c) in terms.items():
        v = weights.v.get(region, 0.0)
        w = weights.w.get(region, 0.0)
        if v:
            total = total + v * r
        if w:
            total = total + w * c
    return total


def _as_batch(x, schema: ParameterSchema) -> torch.Tensor:
    arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != schema.size:
        raise LayoutError(f"expected {schema.size} coordinates, got shape {arr.shape}")
    return torch.from_numpy(arr)


def _check_probabilities(pred: torch.Tensor, schema: ParameterSchema, tol: float = 1e-6):
    for lay in schema.layout:
        for name, s, e in lay.slots:
            p = pred[:, s:e]
            if (p < -tol).any() or (p > 1 + tol).any() or ((p.sum(dim=1) - 1).abs() > tol).any():
                raise LossError(f"slice {name!r} of the prediction is not a probability vector")


def multipart_loss(pred, target, schema: ParameterSchema, weights: LossWeights, regions: Sequence[str] | None = None) -> LossBreakdown:
    """Evaluate the loss on one vector or a batch of vectors.

    With ``regions`` given, terms of all other regions are reported as zero
    and excluded from the total.
    """
    p = _as_batch(pred, schema)
    t = _as_batch(target, schema)
    if p.shape != t.shape:
        raise LayoutError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    _check_probabilities(p, schema)
    if regions is not None:
        for r in regions:
            schema.region_layout(r)
    terms = _region_terms(p, t, schema, weights.regression_norm)
    keep = set(schema.regions if regions is None else regions)
    reg = {r: (float(terms[r][0]) if r in keep else 0.0) for r in schema.regions}
    cls = {r: (float(terms[r][1]) if r in keep else 0.0) for r in schema.regions}
    total = sum(weights.v.get(r, 0.0) * reg[r] for r in schema.regions) + sum(
        weights.w.get(r, 0.0) * cls[r] for r in schema.regions
    )
    return LossBreakdown(float(total), reg, cls)


def group_loss(pred, target, schema: ParameterSchema, weights: LossWeights, region: str) -> LossBreakdown:
    if region not in schema.regions:
        raise UnknownRegionError(f"unknown region {region!r}")
    return multipart_loss(pred, target, schema, weights, regions=[region])


def softadapt(histories, temperature: float = 1.0) -> np.ndarray:
    """Softmax over each term's latest relative change, scaled to sum to the term count.

    Terms whose loss falls slowest (or rises) get the largest weight.
    """
    h = [np.asarray(x, dtype=float) for x in histories]
    if any(len(x) < 2 for x in h):
        raise LossError("adaptive weighting needs at least 2 history points per term; use fixed weights")
    if temperature <= 0:
        raise LossError("temperature must be positive")
    rate = np.array([(x[-1] - x[-2]) / max(abs(x[-2]), EPS) for x in h])
    z = (rate - rate.max()) / temperature
    e = np.exp(z)
    return len(h) * e / e.sum()


def adaptive_weights(
    loss_history: Mapping[tuple[str, str], Sequence[float]],
    temperature: float = 1.0,
    regression_norm: str = "l2",
) -> LossWeights:
    """Loss weights from recent term histories keyed by ``("R"|"C", region)``.

    Terms absent from the history get weight 0.
    """
    keys = list(loss_history)
    for kind, _ in keys:
        if kind not in ("R", "C"):
            raise LossError(f"term kind must be 'R' or 'C', not {kind!r}")
    ws = softadapt([loss_history[k] for k in keys], temperature)
    v, w = {}, {}
    for (kind, region), x in zip(keys, ws):
        (v if kind == "R" else w)[region] = float(x)
    regions = {r for _, r in keys}
    for r in regions:
        v.setdefault(r, 0.0)
        w.setdefault(r, 0.0)
    return LossWeights(v, w, regression_norm)
