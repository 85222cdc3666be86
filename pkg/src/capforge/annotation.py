"""Per-image annotation matrices built from detected object boxes.

Each object contributes one row ``[obj ; loc]``: ``obj`` describes the box
contents (the cropped region), ``loc`` describes where the box sits (the whole
frame with everything outside the box replaced by the dataset mean pixel).
A final row holds the whole-image feature repeated twice.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

ANNOT_MAGIC = "ANNOT"
ANNOT_VERSION = "v1"


class FeatureFileError(ValueError):
    """Base class for problems reading an ANNOT feature file."""


class MalformedFeatureFile(FeatureFileError):
    pass


class InconsistentDimension(FeatureFileError):
    pass


class NonFiniteFeature(FeatureFileError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    score: float = 0.0

    def clip(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Integer pixel bounds ``(y0, y1, x0, x1)`` clipped to the image."""
        x0 = min(max(int(math.floor(self.x)), 0), width)
        y0 = min(max(int(math.floor(self.y)), 0), height)
        x1 = min(max(int(math.ceil(self.x + self.w)), x0), width)
        y1 = min(max(int(math.ceil(self.y + self.h)), y0), height)
        return y0, y1, x0, x1


class FeatureExtractor(Protocol):
    out_dim: int

    def extract(self, image: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AnnotationSet:
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError(f"annotation rows must be a non-empty matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("annotation rows contain non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def L(self) -> int:
        return self.rows.shape[0]

    @property
    def D(self) -> int:
        return self.rows.shape[1]

    @property
    def n_objects(self) -> int:
        return self.L - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be H x W x C, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    return img


def select_top_boxes(boxes: Sequence[BoundingBox], n: int) -> list[BoundingBox]:
    if n < 1:
        raise ValueError("n must be >= 1")
    # stable sort keeps input order among equal scores
    return sorted(boxes, key=lambda b: -b.score)[:n]


def mask_to_mean(image, box: BoundingBox, mean_pixel) -> np.ndarray:
    img = as_image(image)
    mean = np.asarray(mean_pixel, dtype=np.float64).reshape(-1)
    if mean.shape[0] != img.shape[2]:
        raise ValueError(f"mean_pixel has {mean.shape[0]} channels, image has {img.shape[2]}")
    y0, y1, x0, x1 = box.clip(img.shape[0], img.shape[1])
    out = np.empty_like(img)
    out[...] = mean
    out[y0:y1, x0:x1] = img[y0:y1, x0:x1]
    return out


def crop(image, box: BoundingBox) -> np.ndarray:
    img = as_image(image)
    y0, y1, x0, x1 = box.clip(img.shape[0], img.shape[1])
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"box {box} has no pixels inside the image")
    return img[y0:y1, x0:x1]


def build_annotation_set(image, boxes: Sequence[BoundingBox], n: int,
                         obj_extractor: FeatureExtractor,
                         loc_extractor: FeatureExtractor,
                         mean_pixel) -> AnnotationSet:
    """Stack ``[obj ; loc]`` rows for the top-``n`` boxes plus the doubled whole-image row."""
    if obj_extractor.out_dim != loc_extractor.out_dim:
        raise ValueError(
            f"object and location feature widths differ ({obj_extractor.out_dim} != "
            f"{loc_extractor.out_dim}); the doubled whole-image row needs them equal")
    if not boxes:
        raise ValueError("no boxes given; at least one object row is required")
    img = as_image(image)
    rows = []
    for box in select_top_boxes(boxes, n):
        obj = obj_extractor.extract(crop(img, box))
        loc = loc_extractor.extract(mask_to_mean(img, box, mean_pixel))
        rows.append(np.concatenate([obj, loc]))
    whole = obj_extractor.extract(img)
    rows.append(np.concatenate([whole, whole]))
    return AnnotationSet(np.vstack(rows))


class SyntheticExtractor:
    """Stand-in CNN: a seed-keyed hash of the pixels expanded to ``[-1, 1]^out_dim``."""

    def __init__(self, seed: int, out_dim: int):
        if out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        self.seed = int(seed)
        self.out_dim = int(out_dim)

    def extract(self, image) -> np.ndarray:
        img = np.ascontiguousarray(as_image(image))
        h = hashlib.blake2b(digest_size=32, key=self.seed.to_bytes(8, "little", signed=True))
        h.update(np.asarray(img.shape, dtype=np.int64).tobytes())
        h.update(img.tobytes())
        rng = np.random.default_rng(int.from_bytes(h.digest(), "little"))
        return rng.uniform(-1.0, 1.0, self.out_dim)

    def __repr__(self):
        return f"SyntheticExtractor(seed={self.seed}, out_dim={self.out_dim})"


def synthetic_extractor(seed: int, out_dim: int) -> SyntheticExtractor:
    return SyntheticExtractor(seed, out_dim)


# -- ANNOT v1 text format ---------------------------------------------------

def dump_features(features: dict[str, AnnotationSet]) -> str:
    dims = {a.D for a in features.values()}
    if len(dims) > 1:
        raise InconsistentDimension(f"annotation sets have differing widths {sorted(dims)}")
    D = dims.pop() if dims else 0
    buf = io.StringIO()
    buf.write(f"{ANNOT_MAGIC} {ANNOT_VERSION} D={D}\n")
    for image_id, ann in features.items():
        if any(c.isspace() for c in image_id):
            raise ValueError(f"image id {image_id!r} contains whitespace")
        buf.write(f"{image_id} {ann.L}\n")
        for row in ann.rows:
            buf.write(" ".join(repr(float(v)) for v in row))
            buf.write("\n")
    return buf.getvalue()


def parse_features(text: str) -> dict[str, AnnotationSet]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise MalformedFeatureFile("missing ANNOT header")
    header = lines[0].split()
    if (len(header) != 3 or header[0] != ANNOT_MAGIC or header[1] != ANNOT_VERSION
            or not header[2].startswith("D=")):
        raise MalformedFeatureFile(f"bad header {lines[0]!r}; expected 'ANNOT v1 D=<int>'")
    try:
        D = int(header[2][2:])
    except ValueError:
        raise MalformedFeatureFile(f"bad width in header {lines[0]!r}") from None

    out: dict[str, AnnotationSet] = {}
    pos = 1
    while pos < len(lines):
        parts = lines[pos].split()
        if len(parts) != 2:
            raise MalformedFeatureFile(f"expected 'image_id L' block header, got {lines[pos]!r}")
        image_id = parts[0]
        try:
            L = int(parts[1])
        except ValueError:
            raise MalformedFeatureFile(f"image {image_id}: bad row count {parts[1]!r}") from None
        if L < 1:
            raise MalformedFeatureFile(f"image {image_id}: row count must be >= 1")
        if image_id in out:
            raise MalformedFeatureFile(f"image {image_id} appears twice")
        body = lines[pos + 1:pos + 1 + L]
        if len(body) < L:
            raise MalformedFeatureFile(f"image {image_id}: expected {L} rows, found {len(body)}")
        rows = []
        for line in body:
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise MalformedFeatureFile(f"image {image_id}: non-numeric value in row") from None
            if len(vals) != D:
                raise InconsistentDimension(
                    f"image {image_id}: row has {len(vals)} values, header says D={D}")
            rows.append(vals)
        mat = np.array(rows, dtype=np.float64)
        if not np.all(np.isfinite(mat)):
            raise NonFiniteFeature(f"image {image_id}: non-finite feature value")
        out[image_id] = AnnotationSet(mat)
        pos += 1 + L
    return out


def load_feature_file(path: str | os.PathLike) -> dict[str, AnnotationSet]:
    with open(path, encoding="utf-8") as fh:
        return parse_features(fh.read())
