"""Eye-center registration and pluggable domain adapters.

Registration moves the two eye centers onto fixed canonical positions with
a similarity transform.  Domain adapters are image-to-image stages placed
between registration and the models; they never change image shape.
"""
from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._imaging import read_png, to_uint8, warp_affine, write_png

# canonical eye centers as fractions of canvas width / height
CANONICAL_EYES = ((0.34, 0.38), (0.66, 0.38))


class RegistrationError(ValueError):
    pass


class AdapterError(RuntimeError):
    def __init__(self, adapter: str, message: str):
        super().__init__(f"adapter {adapter!r}: {message}")
        self.adapter = adapter


def canonical_eye_pixels(canvas: tuple[int, int], eyes=CANONICAL_EYES) -> np.ndarray:
    h, w = canvas
    return np.array([[eyes[0][0] * w, eyes[0][1] * h], [eyes[1][0] * w, eyes[1][1] * h]])


@dataclass(frozen=True)
class RegistrationTransform:
    """Similarity map ``q = scale * R(rotation) p + translation`` (input -> canonical)."""

    scale: float
    rotation: float
    translation: tuple[float, float]
    canonical_eyes: tuple[tuple[float, float], tuple[float, float]]

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation) * self.scale, np.sin(self.rotation) * self.scale
        return np.array([[c, -s, self.translation[0]], [s, c, self.translation[1]]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        c, s = np.cos(-self.rotation) / self.scale, np.sin(-self.rotation) / self.scale
        a = np.array([[c, -s], [s, c]])
        t = -a @ np.asarray(self.translation)
        return np.hstack([a, t[:, None]])

    def apply(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return p @ self.matrix[:, :2].T + self.matrix[:, 2]

    def invert(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        m = self.inverse_matrix
        return p @ m[:, :2].T + m[:, 2]


def similarity_from_eyes(left_eye, right_eye, canonical) -> RegistrationTransform:
    p1, p2 = complex(*left_eye), complex(*right_eye)
    q1, q2 = complex(*canonical[0]), complex(*canonical[1])
    if abs(p2 - p1) < 1e-9:
        raise RegistrationError("registration: eye points coincide")
    a = (q2 - q1) / (p2 - p1)
    b = q1 - a * p1
    return RegistrationTransform(
        scale=abs(a),
        rotation=float(np.angle(a)),
        translation=(b.real, b.imag),
        canonical_eyes=(tuple(canonical[0]), tuple(canonical[1])),
    )


def register(
    image: np.ndarray,
    left_eye,
    right_eye,
    canvas: tuple[int, int] | None = None,
    eyes=CANONICAL_EYES,
    background: float = 0.0,
) -> tuple[np.ndarray, RegistrationTransform]:
    """Resample ``image`` so the eye centers land on the canonical positions.

    ``background`` is the fill level in [0, 1] for pixels with no source.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    for name, pt in (("left", left_eye), ("right", right_eye)):
        x, y = pt
        if not (0 <= x <= w and 0 <= y <= h):
            raise RegistrationError(f"registration: {name} eye {tuple(pt)} outside the image")
    canvas = canvas or (h, w)
    canonical = canonical_eye_pixels(canvas, eyes)
    tf = similarity_from_eyes(left_eye, right_eye, canonical)
    out = warp_affine(image, tf.inverse_matrix, canvas, fill=255.0 * background)
    return to_uint8(out), tf


@dataclass(frozen=True)
class DomainAdapter:
    """Image-to-image stage; the output always has the input's shape."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    provenance: dict = field(default_factory=dict, compare=False)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(image))
        if out.shape != np.shape(image):
            raise AdapterError(self.name, f"output shape {out.shape} != input shape {np.shape(image)}")
        return out


def identity_adapter(image: np.ndarray) -> np.ndarray:
    return image


IDENTITY = DomainAdapter("identity", identity_adapter, {"kind": "builtin"})

STYLIZER_GAMMA = 0.6


def _stylize_lut(levels: int) -> np.ndarray:
    x = np.arange(256)
    if levels >= 256:
        return x.astype(np.uint8)
    band = np.minimum((levels * (x / 255.0) ** STYLIZER_GAMMA).astype(int), levels - 1)
    lut = np.empty(256, dtype=np.uint8)
    for q in np.unique(band):
        members = x[band == q]
        # a member of its own band, so applying the map again is a no-op
        lut[band == q] = members[len(members) // 2]
    return lut


def toy_stylizer(image: np.ndarray, levels: int = 4) -> np.ndarray:
    """Gamma-shifted posterization of an 8-bit image.

    Intensities are binned into ``levels`` bands after a fixed gamma and each
    band is replaced by one of its own members, which makes the map
    idempotent.  ``levels >= 256`` keeps every 8-bit value as is.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    return _stylize_lut(int(levels))[np.asarray(image, dtype=np.uint8)]


def stylizer(levels: int) -> DomainAdapter:
    return DomainAdapter(
        f"posterize:{levels}",
        lambda im: toy_stylizer(im, levels),
        {"kind": "builtin", "levels": levels, "gamma": STYLIZER_GAMMA},
    )


def inverse_adapter_for(stylizer_id: str) -> DomainAdapter:
    """Adapter mapping inference inputs into the (stylized) training domain.

    For the built-in posterization gap the stylizer itself is the inverse
    adapter: it moves clean inputs into the posterized training style.
    """
    if stylizer_id in ("identity", "none", ""):
        return IDENTITY
    if stylizer_id.startswith("posterize:"):
        try:
            levels = int(stylizer_id.split(":", 1)[1])
        except ValueError:
            raise KeyError(f"unknown stylizer {stylizer_id!r}") from None
        return stylizer(levels)
    raise KeyError(f"unknown stylizer {stylizer_id!r}")


def _timeout_from_env() -> float:
    return float(os.environ.get("F2P_ADAPTER_TIMEOUT", "60"))


def external_adapter(command: str | Sequence[str], timeout: float | None = None, name: str | None = None) -> DomainAdapter:
    """Wrap an external program ``<cmd> <in.png> <out.png>`` as an adapter.

    The program must exit 0 and write a PNG with the input's dimensions.
    The timeout defaults to ``$F2P_ADAPTER_TIMEOUT`` seconds (60).
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    adapter_name = name or f"external:{' '.join(argv)}"

    def run(image: np.ndarray) -> np.ndarray:
        limit = _timeout_from_env() if timeout is None else timeout
        with tempfile.TemporaryDirectory(prefix="f2p-adapter-") as tmp:
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / "out.png"
            write_png(src, image)
            try:
                proc = subprocess.run(
                    [*argv, str(src), str(dst)], capture_output=True, timeout=limit, check=False
                )
            except subprocess.TimeoutExpired:
                raise AdapterError(adapter_name, f"timed out after {limit}s") from None
            except OSError as exc:
                raise AdapterError(adapter_name, f"could not start: {exc}") from None
            if proc.returncode != 0:
                err = proc.stderr.decode(errors="replace").strip().splitlines()
                tail = err[-1] if err else ""
                raise AdapterError(adapter_name, f"exit code {proc.returncode} {tail}".strip())
            if not dst.exists():
                raise AdapterError(adapter_name, "no output image written")
            out = read_png(dst)
        if out.shape != np.shape(image):
            raise AdapterError(adapter_name, f"size mismatch {out.shape} vs {np.shape(image)}")
        return out

    return DomainAdapter(adapter_name, run, {"kind": "external", "argv": argv})


def get_adapter(spec: str | None) -> DomainAdapter:
    """Resolve an adapter id: ``identity``, ``posterize:<levels>`` or ``external:<cmd>``."""
    if spec is None:
        return IDENTITY
    if spec.startswith("external:"):
        return external_adapter(spec.split(":", 1)[1])
    return inverse_adapter_for(spec)
