"""Image folding and mixing.

Folding cuts an image into patches (two for faces, four quadrants for
fingerprints), optionally flips each patch, resizes every patch back to the
full image size and averages them.  Mixing is a convex combination of two
images.  Every function here is pure: the random parts live in the spec
objects, which are drawn separately with an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidSpecError

MODALITIES = ("face", "fingerprint")
LABELS = ("bona_fide", "attack", "unlabeled")

CUT_RANGE = (0.25, 0.75)
N_FLIPS = {"face": 2, "fingerprint": 4}


@dataclass(frozen=True)
class ImageSample:
    """One image, channels-first, with pixel values in [0, 1]."""

    pixels: np.ndarray
    modality: str
    label: str = "unlabeled"
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype.kind in "ui":
            # integer rasters are 8-bit
            px = px.astype(np.float64) / 255.0
        px = np.array(px, dtype=px.dtype if px.dtype.kind == "f" else np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise InvalidInputError(f"pixels must be (C, H, W), got shape {px.shape}")
        if px.shape[1] < 8 or px.shape[2] < 8:
            raise InvalidInputError(f"image must be at least 8x8, got {px.shape[1:]}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError("pixel values must be finite and lie in [0, 1]")
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {self.modality!r}")
        if self.label not in LABELS:
            raise InvalidInputError(f"unknown label {self.label!r}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.modality, self.label, dict(self.meta))


@dataclass(frozen=True)
class FoldSpec:
    """Cut positions (fractions of width/height) and per-patch flip flags."""

    modality: str
    cut_v: float
    cut_h: Optional[float] = None
    flips: Tuple[bool, ...] = ()

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidSpecError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "flips", tuple(bool(f) for f in self.flips))
        if len(self.flips) != N_FLIPS[self.modality]:
            raise InvalidSpecError(
                f"{self.modality} fold needs {N_FLIPS[self.modality]} flip flags, got {len(self.flips)}"
            )
        if self.modality == "face" and self.cut_h is not None:
            raise InvalidSpecError("face folds have no horizontal cut")
        if self.modality == "fingerprint" and self.cut_h is None:
            raise InvalidSpecError("fingerprint folds need a horizontal cut")
        for cut in (self.cut_v, self.cut_h):
            if cut is not None and not 0.0 < cut < 1.0:
                raise InvalidSpecError(f"cut fraction {cut} outside (0, 1)")


@dataclass(frozen=True)
class MixSpec:
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidSpecError(f"epsilon {self.epsilon} outside [0, 1]")


def sample_fold_spec(rng: np.random.Generator, modality: str) -> FoldSpec:
    """Draw cut fractions uniformly from [0.25, 0.75] and fair-coin flip flags."""
    if modality not in MODALITIES:
        raise InvalidSpecError(f"unknown modality {modality!r}")
    lo, hi = CUT_RANGE
    cut_v = float(rng.uniform(lo, hi))
    cut_h = float(rng.uniform(lo, hi)) if modality == "fingerprint" else None
    flips = tuple(bool(b) for b in rng.random(N_FLIPS[modality]) < 0.5)
    return FoldSpec(modality, cut_v, cut_h, flips)


def sample_mix_spec(rng: np.random.Generator) -> MixSpec:
    return MixSpec(float(rng.uniform(0.0, 1.0)))


def resize_bilinear(patch: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a (C, h, w) array to (C, *size).

    Output pixel (i, j) samples the source at (i * (h-1)/(H-1), j * (w-1)/(W-1)),
    so the four corners map onto each other exactly.
    """
    _, h, w = patch.shape
    H, W = size

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = patch[:, r0][:, :, c0] * (1 - fc) + patch[:, r0][:, :, c1] * fc
    bot = patch[:, r1][:, :, c0] * (1 - fc) + patch[:, r1][:, :, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _cut_index(frac: float, n: int) -> int:
    idx = int(np.floor(frac * n + 0.5))
    if idx <= 0 or idx >= n:
        raise InvalidSpecError(f"cut at {frac} leaves a zero-width patch on an axis of size {n}")
    return idx


def fold_face_array(pixels: np.ndarray, spec: FoldSpec) -> np.ndarray:
    if spec.modality != "face":
        raise InvalidInputError("fold_face needs a face FoldSpec")
    _, H, W = pixels.shape
    c = _cut_index(spec.cut_v, W)
    patches = [pixels[:, :, :c], pixels[:, :, c:]]
    out = np.zeros(pixels.shape, dtype=np.float64)
    for patch, flip in zip(patches, spec.flips):
        if flip:
            patch = patch[:, :, ::-1]
        out += resize_bilinear(patch, (H, W))
    return np.clip(out / 2.0, 0.0, 1.0).astype(pixels.dtype, copy=False)


# (flip rows, flip cols) that bring each quadrant into the top-left frame;
# order: top-left, top-right, bottom-left, bottom-right
QUADRANT_FLIPS = ((False, False), (False, True), (True, False), (True, True))


def fold_fingerprint_array(pixels: np.ndarray, spec: FoldSpec) -> np.ndarray:
    if spec.modality != "fingerprint":
        raise InvalidInputError("fold_fingerprint needs a fingerprint FoldSpec")
    _, H, W = pixels.shape
    cv = _cut_index(spec.cut_v, W)
    ch = _cut_index(spec.cut_h, H)
    quads = [
        pixels[:, :ch, :cv],
        pixels[:, :ch, cv:],
        pixels[:, ch:, :cv],
        pixels[:, ch:, cv:],
    ]
    out = np.zeros(pixels.shape, dtype=np.float64)
    for quad, flag, (flip_r, flip_c) in zip(quads, spec.flips, QUADRANT_FLIPS):
        if flag:
            if flip_r:
                quad = quad[:, ::-1, :]
            if flip_c:
                quad = quad[:, :, ::-1]
        out += resize_bilinear(quad, (H, W))
    return np.clip(out / 4.0, 0.0, 1.0).astype(pixels.dtype, copy=False)


def fold_array(pixels: np.ndarray, spec: FoldSpec) -> np.ndarray:
    if spec.modality == "face":
        return fold_face_array(pixels, spec)
    return fold_fingerprint_array(pixels, spec)


def fold_face(image: ImageSample, spec: FoldSpec) -> ImageSample:
    if image.modality != "face":
        raise InvalidInputError(f"fold_face got a {image.modality} image")
    return image.with_pixels(fold_face_array(image.pixels, spec))


def fold_fingerprint(image: ImageSample, spec: FoldSpec) -> ImageSample:
    if image.modality != "fingerprint":
        raise InvalidInputError(f"fold_fingerprint got a {image.modality} image")
    return image.with_pixels(fold_fingerprint_array(image.pixels, spec))


def fold(image: ImageSample, spec: FoldSpec) -> ImageSample:
    """Dispatch to the modality-specific fold."""
    if image.modality == "face":
        return fold_face(image, spec)
    return fold_fingerprint(image, spec)


def mix_arrays(x_i: np.ndarray, x_j: np.ndarray, epsilon) -> np.ndarray:
    """``epsilon * x_i + (1 - epsilon) * x_j``; epsilon may be per-sample (leading axis)."""
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.ndim == 1:
        eps = eps.reshape((-1,) + (1,) * (np.ndim(x_i) - 1))
    return eps * x_i + (1.0 - eps) * x_j


def mix(x_i: ImageSample, x_j: ImageSample, spec: MixSpec) -> ImageSample:
    if x_i.shape != x_j.shape:
        raise InvalidInputError(f"cannot mix shapes {x_i.shape} and {x_j.shape}")
    if x_i.modality != x_j.modality:
        raise InvalidInputError("cannot mix images of different modalities")
    pixels = mix_arrays(x_i.pixels, x_j.pixels, spec.epsilon)
    lo = np.minimum(x_i.pixels, x_j.pixels)
    hi = np.maximum(x_i.pixels, x_j.pixels)
    # rounding can push a convex combination one ulp past its endpoints
    pixels = np.clip(pixels, lo, hi)
    meta = {f"i.{k}": v for k, v in x_i.meta.items()}
    meta.update({f"j.{k}": v for k, v in x_j.meta.items()})
    return ImageSample(pixels, x_i.modality, "unlabeled", meta)
