"""Parametric target space: schema, recipes, mhm text and flat target vectors.

A recipe mixes continuous modifiers (regression targets) with discrete,
mutually exclusive asset selections (classification targets).  The flat
target vector concatenates, region by region, the continuous coordinates
normalized to [-1, 1] followed by one one-hot slice per discrete slot.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CodecError",
    "ParseError",
    "UnknownAssetError",
    "RecipeValidationError",
    "LayoutError",
    "UnsupportedOperationError",
    "UnknownRegionError",
    "ContinuousParam",
    "DiscreteSlot",
    "ParameterSchema",
    "Recipe",
    "RegionLayout",
    "TargetVector",
    "parse_mhm",
    "serialize_mhm",
    "validate",
    "default_recipe",
    "encode",
    "decode",
    "normalize_scale",
    "combinatorial_complexity",
    "group_slices",
]


class CodecError(ValueError):
    pass


class ParseError(CodecError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UnknownAssetError(CodecError):
    def __init__(self, lineno: int, slot: str, guid: str):
        super().__init__(f"line {lineno}: unknown asset {guid!r} for slot {slot!r}")
        self.lineno = lineno
        self.slot = slot
        self.guid = guid


class RecipeValidationError(CodecError):
    def __init__(self, problems: Mapping[str, str]):
        self.problems = dict(problems)
        detail = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(f"invalid recipe ({detail})")

    @property
    def keys(self) -> list[str]:
        return list(self.problems)


class LayoutError(CodecError):
    pass


class UnsupportedOperationError(CodecError):
    pass


class UnknownRegionError(LookupError):
    pass


@dataclass(frozen=True)
class ContinuousParam:
    region: str
    name: str
    min: float = -1.0
    max: float = 1.0
    default: float = 0.0

    @property
    def full_name(self) -> str:
        return f"{self.region}/{self.name}"

    def to_unit(self, value: float) -> float:
        if self.min == -1.0 and self.max == 1.0:
            return float(value)
        return 2.0 * (value - self.min) / (self.max - self.min) - 1.0

    def from_unit(self, x: float) -> float:
        if self.min == -1.0 and self.max == 1.0:
            return float(x)
        return self.min + (x + 1.0) * (self.max - self.min) / 2.0


@dataclass(frozen=True)
class DiscreteSlot:
    region: str
    name: str
    options: tuple[tuple[str, str], ...]  # (asset_name, guid)
    default: int = 0

    @property
    def guids(self) -> tuple[str, ...]:
        return tuple(g for _, g in self.options)

    def index_of(self, guid: str) -> int:
        return self.guids.index(guid)

    def asset_of(self, guid: str) -> str:
        return self.options[self.index_of(guid)][0]


@dataclass(frozen=True)
class RegionLayout:
    """Index ranges of one region inside the flat target vector."""

    region: str
    continuous: tuple[int, int]
    slots: tuple[tuple[str, int, int], ...]  # (slot_name, start, end)

    @property
    def start(self) -> int:
        return self.continuous[0]

    @property
    def end(self) -> int:
        return self.slots[-1][2] if self.slots else self.continuous[1]


_NAME_RE = re.compile(r"^[^\s/]+$")


class ParameterSchema:
    """Regions, continuous parameters and discrete slots of a parametric model.

    Parameters are addressed by their full name ``region/param``.  When a
    scale parameter is declared, the coupled parameters are multiplied by
    ``value / scale_reference`` in the rendered geometry, which makes the
    parametrization overcomplete until the scale is fixed.
    """

    def __init__(
        self,
        regions: Sequence[str],
        params: Iterable[ContinuousParam] = (),
        slots: Iterable[DiscreteSlot] = (),
        scale_param_name: str | None = None,
        scale_reference: float = 1.0,
        scale_coupled: Sequence[str] = (),
    ):
        self.regions = tuple(regions)
        params = list(params)
        slots = list(slots)
        if len(set(self.regions)) != len(self.regions):
            raise CodecError("region names must be unique")
        for r in self.regions:
            if not _NAME_RE.match(r):
                raise CodecError(f"bad region name {r!r}")
        order = {r: i for i, r in enumerate(self.regions)}
        for p in params:
            if p.region not in order:
                raise CodecError(f"parameter {p.full_name!r} names unknown region")
            if not (p.min < p.max):
                raise CodecError(f"parameter {p.full_name!r}: min must be < max")
            if not (p.min <= p.default <= p.max):
                raise CodecError(f"parameter {p.full_name!r}: default outside range")
            if " " in p.name or not p.name:
                raise CodecError(f"bad parameter name {p.name!r}")
        names = [p.full_name for p in params]
        if len(set(names)) != len(names):
            raise CodecError("parameter names must be unique")
        slot_names = [s.name for s in slots]
        if len(set(slot_names)) != len(slot_names):
            raise CodecError("slot names must be unique")
        for s in slots:
            if s.region not in order:
                raise CodecError(f"slot {s.name!r} names unknown region")
            if s.name == "modifier" or not _NAME_RE.match(s.name):
                raise CodecError(f"bad slot name {s.name!r}")
            if not s.options:
                raise CodecError(f"slot {s.name!r} has no options")
            if len(set(s.guids)) != len(s.guids):
                raise CodecError(f"slot {s.name!r} has duplicate guids")
            if not (0 <= s.default < len(s.options)):
                raise CodecError(f"slot {s.name!r}: default index out of range")
        # stable sort keeps declaration order within a region
        self.params = tuple(sorted(params, key=lambda p: order[p.region]))
        self.slots = tuple(sorted(slots, key=lambda s: order[s.region]))
        self._param_by_name = {p.full_name: p for p in self.params}
        self._slot_by_name = {s.name: s for s in self.slots}

        self.scale_param_name = scale_param_name
        self.scale_reference = float(scale_reference)
        self.scale_coupled = tuple(scale_coupled)
        if scale_param_name is not None:
            if scale_param_name not in self._param_by_name:
                raise CodecError(f"scale parameter {scale_param_name!r} not declared")
            sp = self._param_by_name[scale_param_name]
            if not (sp.min <= self.scale_reference <= sp.max) or self.scale_reference == 0:
                raise CodecError("scale reference must be nonzero and inside the scale range")
            for name in self.scale_coupled:
                if name not in self._param_by_name or name == scale_param_name:
                    raise CodecError(f"bad scale-coupled parameter {name!r}")
        elif self.scale_coupled:
            raise CodecError("scale_coupled given without scale_param_name")

        self.layout = self._build_layout()
        self.size = self.layout[-1].end if self.layout else 0

    def _build_layout(self) -> tuple[RegionLayout, ...]:
        out = []
        pos = 0
        for r in self.regions:
            n = sum(1 for p in self.params if p.region == r)
            cont = (pos, pos + n)
            pos += n
            slots = []
            for s in self.slots:
                if s.region == r:
                    slots.append((s.name, pos, pos + len(s.options)))
                    pos += len(s.options)
            out.append(RegionLayout(r, cont, tuple(slots)))
        return tuple(out)

    def param(self, full_name: str) -> ContinuousParam:
        return self._param_by_name[full_name]

    def slot(self, name: str) -> DiscreteSlot:
        return self._slot_by_name[name]

    def has_param(self, full_name: str) -> bool:
        return full_name in self._param_by_name

    def has_slot(self, name: str) -> bool:
        return name in self._slot_by_name

    def region_layout(self, region: str) -> RegionLayout:
        for lay in self.layout:
            if lay.region == region:
                return lay
        raise UnknownRegionError(f"unknown region {region!r}")

    def params_of(self, region: str) -> tuple[ContinuousParam, ...]:
        self.region_layout(region)
        return tuple(p for p in self.params if p.region == region)

    def slots_of(self, region: str) -> tuple[DiscreteSlot, ...]:
        self.region_layout(region)
        return tuple(s for s in self.slots if s.region == region)

    def coordinate_names(self) -> list[str]:
        """Human-readable name for every target-vector index."""
        names = []
        for r in self.regions:
            names.extend(p.full_name for p in self.params if p.region == r)
            for s in self.slots:
                if s.region == r:
                    names.extend(f"{s.name}[{asset}]" for asset, _ in s.options)
        return names

    def continuous_indices(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(*lay.continuous) for lay in self.layout] or [np.zeros(0, int)]
        ).astype(int)

    def discrete_indices(self) -> np.ndarray:
        idx = [np.arange(a, b) for lay in self.layout for _, a, b in lay.slots]
        return np.concatenate(idx).astype(int) if idx else np.zeros(0, int)

    def scale_factor(self, recipe: "Recipe") -> float:
        return recipe.continuous[self.scale_param_name] / self.scale_reference

    def effective_value(self, recipe: "Recipe", full_name: str) -> float:
        """Value of a parameter as it acts on geometry (scale coupling applied)."""
        v = recipe.continuous[full_name]
        if self.scale_param_name is not None and full_name in self.scale_coupled:
            return v * self.scale_factor(recipe)
        return v

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        regions = []
        for r in self.regions:
            regions.append(
                {
                    "name": r,
                    "params": [
                        {"name": p.name, "min": p.min, "max": p.max, "default": p.default}
                        for p in self.params_of(r)
                    ],
                    "slots": [
                        {
                            "name": s.name,
                            "default": s.default,
                            "options": [{"asset": a, "guid": g} for a, g in s.options],
                        }
                        for s in self.slots_of(r)
                    ],
                }
            )
        return {
            "regions": regions,
            "scale_param_name": self.scale_param_name,
            "scale_reference": self.scale_reference,
            "scale_coupled": list(self.scale_coupled),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParameterSchema":
        regions, params, slots = [], [], []
        for reg in d["regions"]:
            r = reg["name"]
            regions.append(r)
            for p in reg.get("params", []):
                params.append(
                    ContinuousParam(
                        r,
                        p["name"],
                        float(p.get("min", -1.0)),
                        float(p.get("max", 1.0)),
                        float(p.get("default", 0.0)),
                    )
                )
            for s in reg.get("slots", []):
                opts = tuple((o["asset"], o["guid"]) for o in s["options"])
                slots.append(DiscreteSlot(r, s["name"], opts, int(s.get("default", 0))))
        return cls(
            regions,
            params,
            slots,
            scale_param_name=d.get("scale_param_name"),
            scale_reference=float(d.get("scale_reference", 1.0)),
            scale_coupled=d.get("scale_coupled", ()),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def __eq__(self, other):
        return isinstance(other, ParameterSchema) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return (
            f"ParameterSchema(regions={list(self.regions)}, "
            f"params={len(self.params)}, slots={len(self.slots)}, size={self.size})"
        )


@dataclass(frozen=True)
class Recipe:
    continuous: dict[str, float] = field(default_factory=dict)
    discrete: dict[str, str] = field(default_factory=dict)  # slot -> guid
    extras: tuple[str, ...] = ()

    def replace(self, **changes) -> "Recipe":
        cont = dict(self.continuous)
        cont.update(changes)
        return Recipe(cont, dict(self.discrete), self.extras)


@dataclass(frozen=True)
class TargetVector:
    values: np.ndarray
    schema: ParameterSchema

    @property
    def layout(self) -> tuple[RegionLayout, ...]:
        return self.schema.layout

    def __len__(self):
        return len(self.values)


def default_recipe(schema: ParameterSchema) -> Recipe:
    return Recipe(
        {p.full_name: p.default for p in schema.params},
        {s.name: s.guids[s.default] for s in schema.slots},
    )


def validate(recipe: Recipe, schema: ParameterSchema) -> None:
    problems = {}
    for k, v in recipe.continuous.items():
        if not schema.has_param(k):
            problems[k] = "unknown parameter"
            continue
        p = schema.param(k)
        if not math.isfinite(v) or not (p.min <= v <= p.max):
            problems[k] = f"value {v!r} outside [{p.min}, {p.max}]"
    for p in schema.params:
        if p.full_name not in recipe.continuous:
            problems[p.full_name] = "missing"
    for k, g in recipe.discrete.items():
        if not schema.has_slot(k):
            problems[k] = "unknown slot"
        elif g not in schema.slot(k).guids:
            problems[k] = f"unknown asset {g!r}"
    for s in schema.slots:
        if s.name not in recipe.discrete:
            problems[s.name] = "missing"
    if problems:
        raise RecipeValidationError(problems)


def parse_mhm(text: str, schema: ParameterSchema) -> Recipe:
    """Parse mhm-style text.

    ``modifier region/name value`` lines for declared parameters and
    ``slot asset guid`` lines for declared slots are interpreted; every
    other non-blank line is kept verbatim in ``extras``.  Omitted entries
    take the schema defaults.
    """
    base = default_recipe(schema)
    cont = dict(base.continuous)
    disc = dict(base.discrete)
    extras = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        tokens = line.split()
        if tokens[0] == "modifier":
            if len(tokens) != 3:
                raise ParseError(lineno, "modifier line needs a name and a value")
            try:
                value = float(tokens[2])
            except ValueError:
                raise ParseError(lineno, f"non-numeric modifier value {tokens[2]!r}") from None
            if not math.isfinite(value):
                raise ParseError(lineno, f"non-finite modifier value {tokens[2]!r}")
            if schema.has_param(tokens[1]):
                cont[tokens[1]] = value
            else:
                extras.append(line)
        elif schema.has_slot(tokens[0]) and len(tokens) == 3:
            slot = schema.slot(tokens[0])
            if tokens[2] not in slot.guids:
                raise UnknownAssetError(lineno, slot.name, tokens[2])
            disc[slot.name] = tokens[2]
        else:
            extras.append(line)
    return Recipe(cont, disc, tuple(extras))


def serialize_mhm(recipe: Recipe, schema: ParameterSchema) -> str:
    validate(recipe, schema)
    lines = [f"modifier {p.full_name} {recipe.continuous[p.full_name]:.6f}" for p in schema.params]
    for s in schema.slots:
        g = recipe.discrete[s.name]
        lines.append(f"{s.name} {s.asset_of(g)} {g}")
    lines.extend(recipe.extras)
    return "\n".join(lines) + "\n"


def encode(recipe: Recipe, schema: ParameterSchema) -> TargetVector:
    validate(recipe, schema)
    values = np.zeros(schema.size)
    for lay in schema.layout:
        start = lay.continuous[0]
        for i, p in enumerate(schema.params_of(lay.region)):
            values[start + i] = p.to_unit(recipe.continuous[p.full_name])
        for name, a, _ in lay.slots:
            values[a + schema.slot(name).index_of(recipe.discrete[name])] = 1.0
    return TargetVector(values, schema)


def decode(vector: TargetVector | np.ndarray, schema: ParameterSchema, extras: Sequence[str] = ()) -> Recipe:
    """Map a target-space vector back to a recipe.

    Continuous coordinates are clamped to [-1, 1]; discrete slices are
    decoded by argmax, ties going to the lowest index.
    """
    values = np.asarray(getattr(vector, "values", vector), dtype=float)
    if values.ndim != 1 or len(values) != schema.size:
        raise LayoutError(f"expected vector of length {schema.size}, got shape {values.shape}")
    cont, disc = {}, {}
    for lay in schema.layout:
        start = lay.continuous[0]
        for i, p in enumerate(schema.params_of(lay.region)):
            x = min(1.0, max(-1.0, float(values[start + i])))
            cont[p.full_name] = min(p.max, max(p.min, p.from_unit(x)))
        for name, a, b in lay.slots:
            disc[name] = schema.slot(name).guids[int(np.argmax(values[a:b]))]
    return Recipe(cont, disc, tuple(extras))


def normalize_scale(recipe: Recipe, schema: ParameterSchema) -> Recipe:
    """Fix the scale parameter at its reference value.

    Coupled parameters absorb the scale factor, so the geometry (and the
    toy render) is unchanged.
    """
    if schema.scale_param_name is None:
        raise UnsupportedOperationError("schema declares no scale parameter")
    name = schema.scale_param_name
    if recipe.continuous[name] == schema.scale_reference:
        return recipe
    cont = dict(recipe.continuous)
    bad = {}
    for c in schema.scale_coupled:
        v = schema.effective_value(recipe, c)
        p = schema.param(c)
        if not (p.min <= v <= p.max):
            bad[c] = f"rescaled value {v!r} outside [{p.min}, {p.max}]"
        cont[c] = v
    if bad:
        raise RecipeValidationError(bad)
    cont[name] = schema.scale_reference
    return Recipe(cont, dict(recipe.discrete), recipe.extras)


def combinatorial_complexity(schema: ParameterSchema) -> int:
    return math.prod(len(s.options) for s in schema.slots)


def group_slices(
    schema: ParameterSchema, region: str
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Target-vector index ranges of one region: (continuous, discrete)."""
    lay = schema.region_layout(region)
    cont = [lay.continuous] if lay.continuous[1] > lay.continuous[0] else []
    return cont, [(a, b) for _, a, b in lay.slots]
