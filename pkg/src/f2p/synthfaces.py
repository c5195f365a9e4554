"""Procedural toy face renderer and synthetic dataset generation.

The renderer draws a frontal cartoon face from a recipe of the toy schema:
a fixed head outline plus eyes, nose and mouth, each confined to its own
canonical box.  Augmentation (background, in-plane pose, brightness, noise)
is applied after the canonical drawing, and the true eye centers are
reported so registration can undo the pose exactly.
"""
from __future__ import annotations

import json
import math
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from ._imaging import png_bytes, read_png, sha256_bytes, sha256_file, to_uint8, warp_affine
from .adapt import CANONICAL_EYES, register, toy_stylizer
from .codec import (
    ContinuousParam,
    DiscreteSlot,
    ParameterSchema,
    Recipe,
    encode,
    normalize_scale,
    parse_mhm,
    serialize_mhm,
    validate,
)

GENERATOR_VERSION = f"f2p.synthfaces/{__version__}"

DEFAULT_CANVAS = (64, 64)
SUPERSAMPLE = 4

# canonical region boxes (x0, y0, x1, y1) in canvas fractions
REGION_BOXES = {
    "head": (0.0, 0.0, 1.0, 1.0),
    "eyes": (0.16, 0.20, 0.84, 0.50),
    "nose": (0.36, 0.40, 0.64, 0.67),
    "mouth": (0.26, 0.63, 0.74, 0.90),
}
FEATURE_REGIONS = ("eyes", "nose", "mouth")

SKIN = 0.72
FACE_ELLIPSE = (0.5, 0.52, 0.37, 0.45)


class GeometryError(ValueError):
    pass


class GenerationError(RuntimeError):
    def __init__(self, message: str, written: Sequence[str] = ()):
        super().__init__(f"{message} ({len(written)} samples written before failure)")
        self.written = list(written)


def _guid(name: str) -> str:
    return str(uuid.uuid5(uuid.NAMESPACE_URL, f"f2p-toy-asset/{name}"))


def _options(*names: str) -> tuple[tuple[str, str], ...]:
    return tuple((n, _guid(n)) for n in names)


def toy_schema() -> ParameterSchema:
    """The toy face schema: a head scale plus eyes, nose and mouth regions."""
    p = ContinuousParam
    params = [
        p("head", "head-scale", 0.5, 1.0, 1.0),
        p("eyes", "eye-scale-decr|incr"),
        p("eyes", "eye-height-decr|incr"),
        p("eyes", "eye-angle-down|up"),
        p("eyes", "eye-pupil-decr|incr"),
        p("eyes", "eyebrow-trans-down|up"),
        p("eyes", "eyebrow-angle-down|up"),
        p("nose", "nose-scale-horiz-decr|incr"),
        p("nose", "nose-scale-vert-decr|incr"),
        p("nose", "nose-trans-down|up"),
        p("nose", "nose-nostril-decr|incr"),
        p("mouth", "mouth-scale-horiz-decr|incr"),
        p("mouth", "mouth-lip-thickness-decr|incr"),
        p("mouth", "mouth-trans-down|up"),
        p("mouth", "mouth-angle-down|up"),
    ]
    slots = [
        DiscreteSlot("eyes", "eye-shape", _options("eye-round", "eye-almond", "eye-narrow", "eye-hooded")),
        DiscreteSlot("nose", "nose-shape", _options("nose-triangle", "nose-bulb", "nose-bar", "nose-button")),
        DiscreteSlot("mouth", "mouth-shape", _options("mouth-line", "mouth-oval", "mouth-smile", "mouth-rect")),
    ]
    return ParameterSchema(
        ["head", "eyes", "nose", "mouth"],
        params,
        slots,
        scale_param_name="head/head-scale",
        scale_reference=1.0,
        scale_coupled=["eyes/eye-scale-decr|incr", "nose/nose-scale-horiz-decr|incr", "mouth/mouth-scale-horiz-decr|incr"],
    )


# -- primitives, evaluated on unit-coordinate grids ----------------------------


def _local(x, y, cx, cy, angle):
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = x - cx, y - cy
    return c * dx + s * dy, -s * dx + c * dy


def ellipse(cx, cy, rx, ry, angle=0.0):
    def mask(x, y):
        u, v = _local(x, y, cx, cy, angle)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    return mask


def rect(cx, cy, hw, hh, angle=0.0):
    def mask(x, y):
        u, v = _local(x, y, cx, cy, angle)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)

    return mask


def capsule(x0, y0, x1, y1, r):
    def mask(x, y):
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        return (x - x0 - t * dx) ** 2 + (y - y0 - t * dy) ** 2 <= r * r

    return mask


def triangle(pts):
    (ax, ay), (bx, by), (cx, cy) = pts

    def mask(x, y):
        d1 = (x - bx) * (ay - by) - (ax - bx) * (y - by)
        d2 = (x - cx) * (by - cy) - (bx - cx) * (y - cy)
        d3 = (x - ax) * (cy - ay) - (cx - ax) * (y - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)

    return mask


def intersect(a, b):
    return lambda x, y: a(x, y) & b(x, y)


def subtract(a, b):
    return lambda x, y: a(x, y) & ~b(x, y)


def halfplane_below(cx, cy, angle, offset):
    # points whose local v (rotated frame) is >= offset
    def mask(x, y):
        _, v = _local(x, y, cx, cy, angle)
        return v >= offset

    return mask


# -- the face ----------------------------------------------------------------


def _feature_shapes(recipe: Recipe, schema: ParameterSchema) -> dict[str, list]:
    """Primitives per region as (mask_fn, intensity) lists in paint order."""
    val = lambda n: float(schema.effective_value(recipe, n))
    asset = lambda slot: schema.slot(slot).asset_of(recipe.discrete[slot])
    shapes = {r: [] for r in FEATURE_REGIONS}

    # eyes: centers fixed on the canonical anchors so registration keeps shape
    half_w = 0.066 + 0.024 * val("eyes/eye-scale-decr|incr")
    half_h = half_w * (0.55 + 0.2 * val("eyes/eye-height-decr|incr"))
    tilt = 0.21 * val("eyes/eye-angle-down|up")
    pupil = 0.017 + 0.008 * val("eyes/eye-pupil-decr|incr")
    brow_dy = 0.095 + 0.02 * val("eyes/eyebrow-trans-down|up")
    brow_tilt = 0.25 * val("eyes/eyebrow-angle-down|up")
    kind = asset("eye-shape")
    for side, (ex, ey) in zip((-1, 1), CANONICAL_EYES):
        a = -side * tilt
        if kind == "eye-round":
            sclera = ellipse(ex, ey, half_w, half_h, a)
        elif kind == "eye-almond":
            r = (half_w**2 + half_h**2) / (2 * half_h)
            off = r - half_h
            c, s = math.cos(a), math.sin(a)
            sclera = intersect(
                ellipse(ex - s * off, ey + c * off, r, r), ellipse(ex + s * off, ey - c * off, r, r)
            )
            sclera = intersect(sclera, rect(ex, ey, half_w, half_h, a))
        elif kind == "eye-narrow":
            sclera = rect(ex, ey, half_w, half_h * 0.6, a)
        else:  # hooded: lower part of an ellipse
            sclera = intersect(ellipse(ex, ey, half_w, half_h, a), halfplane_below(ex, ey, a, -0.35 * half_h))
        shapes["eyes"].append((sclera, 0.96))
        shapes["eyes"].append((ellipse(ex, ey, pupil, pupil), 0.08))
        bx, by = ex, ey - brow_dy
        bt = -side * brow_tilt
        dx, dy = 0.07 * math.cos(bt), 0.07 * math.sin(bt)
        shapes["eyes"].append((capsule(bx - dx, by - dy, bx + dx, by + dy, 0.011), 0.22))

    # nose
    nw = 0.055 + 0.025 * val("nose/nose-scale-horiz-decr|incr")
    nl = 0.11 + 0.035 * val("nose/nose-scale-vert-decr|incr")
    top = 0.445 - 0.025 * val("nose/nose-trans-down|up")
    bottom = top + nl
    nostril = 0.011 + 0.006 * val("nose/nose-nostril-decr|incr")
    kind = asset("nose-shape")
    if kind == "nose-triangle":
        body = triangle(((0.5, top), (0.5 - nw, bottom), (0.5 + nw, bottom)))
    elif kind == "nose-bulb":
        body = lambda x, y, _r=rect(0.5, top + nl * 0.4, nw * 0.3, nl * 0.4), _e=ellipse(
            0.5, bottom - nw * 0.45, nw * 0.9, nw * 0.45
        ): _r(x, y) | _e(x, y)
    elif kind == "nose-bar":
        body = rect(0.5, top + nl / 2, nw * 0.45, nl / 2)
    else:  # button: short rounded tip only
        body = ellipse(0.5, bottom - nl * 0.25, nw * 0.7, nl * 0.25)
    shapes["nose"].append((body, 0.52))
    for side in (-1, 1):
        shapes["nose"].append((ellipse(0.5 + side * nw * 0.55, bottom - nostril, nostril, nostril * 0.7), 0.14))

    # mouth
    mw = 0.12 + 0.045 * val("mouth/mouth-scale-horiz-decr|incr")
    mt = 0.022 + 0.011 * val("mouth/mouth-lip-thickness-decr|incr")
    my = 0.765 - 0.03 * val("mouth/mouth-trans-down|up")
    ma = 0.17 * val("mouth/mouth-angle-down|up")
    kind = asset("mouth-shape")
    if kind == "mouth-line":
        c, s = math.cos(ma), math.sin(ma)
        lips = capsule(0.5 - mw * c, my - mw * s, 0.5 + mw * c, my + mw * s, mt)
    elif kind == "mouth-oval":
        lips = ellipse(0.5, my, mw, mt * 1.6, ma)
    elif kind == "mouth-smile":
        c, s = math.cos(ma), math.sin(ma)
        lips = subtract(
            ellipse(0.5, my, mw, mt * 2.2, ma),
            ellipse(0.5 + s * mt * 1.4, my - c * mt * 1.4, mw * 1.05, mt * 2.2, ma),
        )
    else:
        lips = rect(0.5, my, mw, mt, ma)
    shapes["mouth"].append((lips, 0.3))
    return shapes


def _box_pixels(box, canvas) -> tuple[int, int, int, int]:
    h, w = canvas
    x0, y0, x1, y1 = box
    return int(math.floor(x0 * w)), int(math.floor(y0 * h)), int(math.ceil(x1 * w)), int(math.ceil(y1 * h))


def _coverage(mask_fn, canvas, box=None) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Supersampled coverage of one primitive, restricted to ``box`` pixels."""
    h, w = canvas
    px0, py0, px1, py1 = _box_pixels(box or (0, 0, 1, 1), canvas)
    ss = SUPERSAMPLE
    sub = (np.arange((px1 - px0) * ss) + 0.5) / ss + px0
    suby = (np.arange((py1 - py0) * ss) + 0.5) / ss + py0
    X, Y = np.meshgrid(sub / w, suby / h)
    m = mask_fn(X, Y).astype(np.float64)
    cov = m.reshape(py1 - py0, ss, px1 - px0, ss).mean(axis=(1, 3))
    return cov, (px0, py0, px1, py1)


def _check_canvas(canvas):
    h, w = canvas
    if h < 32 or w < 32:
        raise GeometryError(f"canvas {canvas} too small for the canonical layout (min 32x32)")


def render_canonical(recipe: Recipe, schema: ParameterSchema, canvas=DEFAULT_CANVAS, background: float = 0.0) -> np.ndarray:
    """Pre-augmentation float image in [0, 1]; each feature painted only inside its box."""
    _check_canvas(canvas)
    validate(recipe, schema)
    img = np.full(canvas, float(background))
    face, _ = _coverage(ellipse(*FACE_ELLIPSE), canvas)
    img = img * (1.0 - face) + SKIN * face
    for region, prims in _feature_shapes(recipe, schema).items():
        box = REGION_BOXES[region]
        for mask_fn, level in prims:
            cov, (x0, y0, x1, y1) = _coverage(mask_fn, canvas, box)
            patch = img[y0:y1, x0:x1]
            img[y0:y1, x0:x1] = patch * (1.0 - cov) + level * cov
    return img


def feature_coverage(recipe: Recipe, schema: ParameterSchema, region: str, canvas=DEFAULT_CANVAS) -> np.ndarray:
    """Unclipped union coverage of a region's primitives over the whole canvas."""
    total = np.zeros(canvas)
    for mask_fn, _ in _feature_shapes(recipe, schema)[region]:
        cov, _ = _coverage(mask_fn, canvas)
        total = np.maximum(total, cov)
    return total


@dataclass(frozen=True)
class AugmentationSpec:
    background_level: float = 0.2
    rotation: float = 0.0  # degrees, about the canvas center
    translation: tuple[float, float] = (0.0, 0.0)  # pixels
    brightness: float = 1.0
    noise_sigma: float = 0.0  # in 8-bit levels
    rng_seed: int = 0

    BOUNDS = {
        "background_level": (0.0, 1.0),
        "rotation": (-30.0, 30.0),
        "brightness": (0.5, 1.5),
        "noise_sigma": (0.0, 20.0),
    }
    MAX_TRANSLATION = 8.0

    def __post_init__(self):
        for name, (lo, hi) in self.BOUNDS.items():
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise ValueError(f"augmentation {name}={v} outside [{lo}, {hi}]")
        if any(abs(t) > self.MAX_TRANSLATION for t in self.translation):
            raise ValueError(f"augmentation translation {self.translation} exceeds {self.MAX_TRANSLATION}px")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation"] = list(self.translation)
        return d

    @classmethod
    def from_dict(cls, d) -> "AugmentationSpec":
        d = dict(d)
        d["translation"] = tuple(d.get("translation", (0.0, 0.0)))
        return cls(**d)


NEUTRAL = AugmentationSpec()


@dataclass(frozen=True)
class AugmentationRanges:
    background_level: tuple[float, float] = (0.05, 0.45)
    rotation: tuple[float, float] = (-10.0, 10.0)
    translation: tuple[float, float] = (-3.0, 3.0)
    brightness: tuple[float, float] = (0.85, 1.15)
    noise_sigma: tuple[float, float] = (0.0, 3.0)

    def sample(self, rng: np.random.Generator) -> AugmentationSpec:
        u = lambda r: float(rng.uniform(*r)) if r[1] > r[0] else float(r[0])
        return AugmentationSpec(
            background_level=u(self.background_level),
            rotation=u(self.rotation),
            translation=(u(self.translation), u(self.translation)),
            brightness=u(self.brightness),
            noise_sigma=u(self.noise_sigma),
            rng_seed=int(rng.integers(0, 2**31 - 1)),
        )

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "AugmentationRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})


def pose_matrix(aug: AugmentationSpec, canvas) -> np.ndarray:
    """2x3 forward map canonical -> augmented pixel coordinates."""
    h, w = canvas
    cx, cy = w / 2.0, h / 2.0
    t = math.radians(aug.rotation)
    c, s = math.cos(t), math.sin(t)
    tx, ty = aug.translation
    return np.array([[c, -s, cx - c * cx + s * cy + tx], [s, c, cy - s * cx - c * cy + ty]])


def _invert_affine(m: np.ndarray) -> np.ndarray:
    a = np.linalg.inv(m[:, :2])
    return np.hstack([a, (-a @ m[:, 2])[:, None]])


def render(recipe: Recipe, schema: ParameterSchema, aug: AugmentationSpec = NEUTRAL, canvas=DEFAULT_CANVAS) -> tuple[np.ndarray, np.ndarray]:
    """Render an augmented 8-bit grayscale face and its eye centers (2x2, x/y pixels)."""
    base = render_canonical(recipe, schema, canvas, aug.background_level)
    fwd = pose_matrix(aug, canvas)
    img = warp_affine(base, _invert_affine(fwd), canvas, fill=aug.background_level)
    img = img * aug.brightness
    if aug.noise_sigma > 0:
        img = img + np.random.default_rng(aug.rng_seed).normal(0.0, aug.noise_sigma / 255.0, img.shape)
    eyes = np.array([[x * canvas[1], y * canvas[0]] for x, y in CANONICAL_EYES])
    landmarks = eyes @ fwd[:, :2].T + fwd[:, 2]
    return to_uint8(img * 255.0), landmarks


# -- crops -------------------------------------------------------------------


@dataclass(frozen=True)
class CropConfig:
    boxes: dict = field(default_factory=lambda: {r: REGION_BOXES[r] for r in FEATURE_REGIONS})
    size: tuple[int, int] = (32, 32)
    canvas: tuple[int, int] = DEFAULT_CANVAS
    background: float = 0.0
    eyes: tuple = CANONICAL_EYES

    def to_dict(self) -> dict:
        return {
            "boxes": {k: list(v) for k, v in self.boxes.items()},
            "size": list(self.size),
            "canvas": list(self.canvas),
            "background": self.background,
            "eyes": [list(e) for e in self.eyes],
        }

    @classmethod
    def from_dict(cls, d) -> "CropConfig":
        return cls(
            boxes={k: tuple(v) for k, v in d["boxes"].items()},
            size=tuple(d.get("size", (32, 32))),
            canvas=tuple(d.get("canvas", DEFAULT_CANVAS)),
            background=float(d.get("background", 0.0)),
            eyes=tuple(tuple(e) for e in d.get("eyes", CANONICAL_EYES)),
        )

    def rect_pixels(self, region: str) -> tuple[float, float, float, float]:
        if region not in self.boxes:
            raise KeyError(f"no crop rectangle for region {region!r}")
        h, w = self.canvas
        x0, y0, x1, y1 = self.boxes[region]
        return x0 * w, y0 * h, x1 * w, y1 * h


def crop_registered(registered: np.ndarray, region: str, config: CropConfig = CropConfig()) -> np.ndarray:
    x0, y0, x1, y1 = config.rect_pixels(region)
    oh, ow = config.size
    inv = np.array([[(x1 - x0) / ow, 0.0, x0], [0.0, (y1 - y0) / oh, y0]])
    return to_uint8(warp_affine(registered, inv, config.size, fill=255.0 * config.background))


def crop_region(image: np.ndarray, landmarks, region: str, config: CropConfig = CropConfig()) -> np.ndarray:
    """Register ``image`` on its eye centers, then cut the region's canonical rectangle."""
    if region not in config.boxes:
        raise KeyError(f"no crop rectangle for region {region!r}")
    lm = np.asarray(landmarks, dtype=float)
    reg, _ = register(image, lm[0], lm[1], canvas=config.canvas, eyes=config.eyes, background=config.background)
    return crop_registered(reg, region, config)


def crop_within_canvas(region: str, ranges: AugmentationRanges, config: CropConfig = CropConfig()) -> tuple[float, float, float, float]:
    """Bounds (x_min, y_min, x_max, y_max) of the crop rectangle's preimage in the raw image.

    Interval arithmetic over the rotation and translation ranges: each
    rectangle corner rotates about the canvas center, and the extreme
    coordinates over an angle interval are reached at an endpoint or at a
    stationary angle inside it.
    """
    h, w = config.canvas
    cx, cy = w / 2.0, h / 2.0
    x0, y0, x1, y1 = config.rect_pixels(region)
    lo, hi = (math.radians(a) for a in ranges.rotation)
    xs, ys = [], []
    for px, py in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
        dx, dy = px - cx, py - cy
        r = math.hypot(dx, dy)
        phi = math.atan2(dy, dx)
        angles = [lo, hi]
        for k in range(-4, 5):
            for crit in (-phi + k * math.pi, -phi + math.pi / 2 + k * math.pi):
                if lo <= crit <= hi:
                    angles.append(crit)
        xs.extend(cx + r * math.cos(phi + a) for a in angles)
        ys.extend(cy + r * math.sin(phi + a) for a in angles)
    t_lo, t_hi = ranges.translation
    return min(xs) + t_lo, min(ys) + t_lo, max(xs) + t_hi, max(ys) + t_hi


# -- datasets ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    recipe: Recipe
    augmentation: AugmentationSpec
    landmarks: np.ndarray
    image: np.ndarray | None = None
    image_path: str | None = None
    image_sha256: str | None = None

    def record(self, schema: ParameterSchema) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "image_sha256": self.image_sha256,
            "recipe": serialize_mhm(self.recipe, schema),
            "augmentation": self.augmentation.to_dict(),
            "landmarks": [[float(v) for v in p] for p in self.landmarks],
        }


def sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed; depends only on (master_seed, index)."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))


def random_recipe(schema: ParameterSchema, rng: np.random.Generator) -> Recipe:
    """Continuous parameters uniform in their normalized [-1, 1] range, options uniform."""
    cont = {p.full_name: p.from_unit(float(rng.uniform(-1.0, 1.0))) for p in schema.params}
    disc = {s.name: s.guids[int(rng.integers(len(s.options)))] for s in schema.slots}
    return Recipe(cont, disc)


@dataclass(frozen=True)
class GenerationSpec:
    n: int
    master_seed: int
    ranges: AugmentationRanges = AugmentationRanges()
    canvas: tuple[int, int] = DEFAULT_CANVAS
    normalize: bool = False
    style_levels: int | None = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "master_seed": self.master_seed,
            "ranges": self.ranges.to_dict(),
            "canvas": list(self.canvas),
            "normalize": self.normalize,
            "style_levels": self.style_levels,
        }


def make_sample(schema: ParameterSchema, spec: GenerationSpec, index: int) -> Sample:
    rng = np.random.default_rng(sample_seed(spec.master_seed, index))
    recipe = random_recipe(schema, rng)
    if spec.normalize:
        recipe = normalize_scale(recipe, schema)
    aug = spec.ranges.sample(rng)
    image, landmarks = render(recipe, schema, aug, spec.canvas)
    if spec.style_levels is not None:
        image = toy_stylizer(image, spec.style_levels)
    return Sample(f"s{spec.master_seed}-{index:06d}", recipe, aug, landmarks, image)


def _make_and_encode(args):
    schema_dict, spec, index = args
    s = make_sample(ParameterSchema.from_dict(schema_dict), spec, index)
    return s, png_bytes(s.image)


class DatasetManifest:
    """Samples of a generated corpus; images live next to the manifest file.

    On disk: ``manifest.jsonl`` (one sample per line) and ``manifest.meta.json``
    (schema, generation parameters, generator version).
    """

    def __init__(self, schema: ParameterSchema, samples: list[Sample], meta: dict, root: Path | None = None):
        self.schema = schema
        self.samples = samples
        self.meta = meta
        self.root = root
        self._images = None

    def __len__(self):
        return len(self.samples)

    @property
    def master_seed(self):
        return self.meta.get("master_seed")

    @property
    def generator_version(self):
        return self.meta.get("generator_version")

    def images(self) -> np.ndarray:
        if self._images is None:
            ims = []
            for s in self.samples:
                if s.image is not None:
                    ims.append(s.image)
                else:
                    ims.append(read_png(self.root / s.image_path))
            self._images = np.stack(ims) if ims else np.zeros((0, 0, 0), np.uint8)
        return self._images

    def landmarks(self) -> np.ndarray:
        return np.stack([s.landmarks for s in self.samples])

    def targets(self) -> np.ndarray:
        return np.stack([encode(s.recipe, self.schema).values for s in self.samples])

    def subset(self, indices) -> "DatasetManifest":
        idx = [int(i) for i in indices]
        sub = DatasetManifest(self.schema, [self.samples[i] for i in idx], dict(self.meta), self.root)
        if self._images is not None:
            sub._images = self._images[idx]
        return sub

    def digest(self) -> str:
        lines = [json.dumps(s.record(self.schema), sort_keys=True) for s in self.samples]
        return sha256_bytes(("\n".join(lines) + json.dumps(self.meta, sort_keys=True)).encode())

    def write(self, out_dir: str | Path, manifest_name: str = "manifest.jsonl") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(s.record(self.schema), sort_keys=True) for s in self.samples]
        (out / manifest_name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        (out / manifest_name.replace(".jsonl", ".meta.json")).write_text(
            json.dumps(self.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return out / manifest_name

    @classmethod
    def load(cls, path: str | Path, verify: bool = False) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        meta = json.loads(path.with_name(path.name.replace(".jsonl", ".meta.json")).read_text(encoding="utf-8"))
        schema = ParameterSchema.from_dict(meta["schema"])
        samples = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if verify and sha256_file(path.parent / d["image_path"]) != d["image_sha256"]:
                raise ValueError(f"image digest mismatch for sample {d['id']}")
            samples.append(
                Sample(
                    d["id"],
                    parse_mhm(d["recipe"], schema),
                    AugmentationSpec.from_dict(d["augmentation"]),
                    np.asarray(d["landmarks"], dtype=float),
                    image_path=d["image_path"],
                    image_sha256=d["image_sha256"],
                )
            )
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")
        return cls(schema, samples, meta, path.parent)


def generate_dataset(
    schema: ParameterSchema,
    n: int,
    master_seed: int,
    ranges: AugmentationRanges = AugmentationRanges(),
    out_dir: str | Path | None = None,
    canvas=DEFAULT_CANVAS,
    normalize: bool = False,
    style_levels: int | None = None,
    jobs: int = 1,
) -> DatasetManifest:
    """Generate ``n`` random samples; write PNGs and the manifest when ``out_dir`` is given.

    Sample ``i`` depends only on ``(master_seed, i)``, so the result does not
    depend on ``jobs``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = GenerationSpec(n, master_seed, ranges, tuple(canvas), normalize, style_levels)
    meta = {
        "schema": schema.to_dict(),
        "generator_version": GENERATOR_VERSION,
        **spec.to_dict(),
    }
    args = [(schema.to_dict(), spec, i) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_make_and_encode, args, chunksize=16))
    else:
        results = [_make_and_encode(a) for a in args]

    samples = []
    out = Path(out_dir) if out_dir is not None else None
    written = []
    if out is not None:
        try:
            (out / "images").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise GenerationError(f"cannot create {out}: {exc}") from exc
    for s, data in results:
        path = digest = None
        if out is not None:
            rel = f"images/{s.id}.png"
            try:
                (out / rel).write_bytes(data)
            except OSError as exc:
                raise GenerationError(f"writing {rel} failed: {exc}", written) from exc
            written.append(s.id)
            path = rel
        digest = sha256_bytes(data)
        samples.append(Sample(s.id, s.recipe, s.augmentation, s.landmarks, s.image, path, digest))
    manifest = DatasetManifest(schema, samples, meta, out)
    if out is not None:
        try:
            manifest.write(out)
        except OSError as exc:
            raise GenerationError(f"writing manifest failed: {exc}", written) from exc
    return manifest


def model_inputs(images: np.ndarray, landmarks: np.ndarray, input_spec: str, crops: CropConfig = CropConfig(),
                 adapter: Callable | None = None) -> np.ndarray:
    """Registered full frames or region crops for a batch of images.

    ``input_spec`` is ``"full_frame"`` or ``"crop:<region>"``.  The optional
    adapter runs on each raw input before registration, the same place the
    training corpus gets its style.
    """
    out = []
    for im, lm in zip(images, landmarks):
        if adapter is not None:
            im = adapter(im)
        reg, _ = register(im, lm[0], lm[1], canvas=crops.canvas, eyes=crops.eyes, background=crops.background)
        if input_spec == "full_frame":
            out.append(reg)
        elif input_spec.startswith("crop:"):
            out.append(crop_registered(reg, input_spec.split(":", 1)[1], crops))
        else:
            raise ValueError(f"unknown input spec {input_spec!r}")
    return np.stack(out)
