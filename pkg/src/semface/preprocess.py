"""Face location normalisation from eye landmarks, then contrast normalisation.

Pipeline per image: align_face -> gcn_image -> apply_pixel_stats.
Coordinates are (x, y) = (column, row) with pixel centres on integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, DimensionError

# canonical eye centres as fractions of the output side
EYE_ROW = 0.35
RIGHT_EYE_COL = 0.3  # subject's right eye, on the viewer's left
LEFT_EYE_COL = 0.7
GCN_NORM = 100.0
STD_FLOOR = 1e-6


class AnnotationError(ValueError):
    """Eye landmarks that cannot define an alignment."""


class PreprocessError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


@dataclass(frozen=True)
class FaceAnnotation:
    left_eye: tuple  # subject's left eye (appears on the viewer's right)
    right_eye: tuple

    @property
    def eye_distance(self):
        return float(np.hypot(self.left_eye[0] - self.right_eye[0], self.left_eye[1] - self.right_eye[1]))


def canonical_eyes(out_size, eye_row=EYE_ROW, right_col=RIGHT_EYE_COL, left_col=LEFT_EYE_COL):
    """(left_eye, right_eye) target positions in output pixels."""
    return (left_col * out_size, eye_row * out_size), (right_col * out_size, eye_row * out_size)


def similarity_from_eyes(annot: FaceAnnotation, out_size, **canon):
    """Complex coefficients (a, b) of the map z_out = a * z_src + b."""
    if annot.eye_distance < 2.0:
        raise AnnotationError(f"eyes {annot.right_eye} and {annot.left_eye} are less than 2 px apart")
    (lx, ly), (rx, ry) = canonical_eyes(out_size, **canon)
    src_l = complex(*annot.left_eye)
    src_r = complex(*annot.right_eye)
    a = (complex(lx, ly) - complex(rx, ry)) / (src_l - src_r)
    return a, complex(rx, ry) - a * src_r


def transform_points(annot, out_size, points, **canon):
    """Map source-image (x, y) points into aligned-output coordinates."""
    a, b = similarity_from_eyes(annot, out_size, **canon)
    z = a * (np.asarray(points, dtype=np.float64) @ np.array([1.0, 1j])) + b
    return np.stack([z.real, z.imag], axis=-1)


def bilinear_sample(image, xs, ys, fill=0.0, clamp=False):
    """Sample ``image`` at real coordinates; outside points get ``fill`` (or the edge when clamping)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    eps = 1e-6
    if clamp:
        inside = np.ones(np.shape(xs), dtype=bool)
    else:
        inside = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, fill)


def align_face(image, annot: FaceAnnotation, out_size=48, **canon):
    """Rotate, scale and translate so the eyes land on their canonical positions."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"align_face expects a 2-D grayscale image, got {img.shape}")
    h, w = img.shape
    for name, (x, y) in (("left", annot.left_eye), ("right", annot.right_eye)):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise AnnotationError(f"{name} eye {(x, y)} lies outside the {w}x{h} image")
    a, b = similarity_from_eyes(annot, out_size, **canon)
    yy, xx = np.mgrid[0:out_size, 0:out_size]
    src = ((xx + 1j * yy) - b) / a
    return bilinear_sample(img, src.real, src.imag).astype(DTYPE)


def resize(image, size):
    """Bilinear resize of a 2-D image to size x size (half-pixel centres, edge clamping)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (size, size):
        return img.astype(DTYPE)
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, xx, yy, clamp=True).astype(DTYPE)


def gcn_image(image, norm=GCN_NORM):
    """Subtract the image's own mean, then scale its Euclidean norm to ``norm``."""
    x = np.asarray(image, dtype=np.float64)
    x = x - x.mean()
    n = np.sqrt(np.sum(x * x))
    if n < 1e-6:
        return np.zeros(x.shape, dtype=DTYPE)
    return (x * (norm / n)).astype(DTYPE)


@dataclass
class PixelStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = ""

    @property
    def shape(self):
        return self.mean.shape


def fit_pixel_stats(train_images, source="train"):
    """Per-location mean and population std over a training set (std floored at 1e-6)."""
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in train_images])
    if stack.ndim != 3:
        raise DimensionError(f"expected a sequence of 2-D images, got stacked shape {stack.shape}")
    if len(stack) < 1:
        raise DimensionError("cannot fit pixel statistics on an empty set")
    mean = stack.mean(axis=0)
    std = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    return PixelStats(mean.astype(DTYPE), np.maximum(std, STD_FLOOR).astype(DTYPE), source)


def apply_pixel_stats(image, stats: PixelStats):
    x = np.asarray(image, dtype=np.float64)
    if x.shape != stats.mean.shape:
        raise DimensionError(f"image {x.shape} does not match pixel statistics {stats.mean.shape}")
    return ((x - stats.mean) / stats.std.astype(np.float64)).astype(DTYPE)


def invert_pixel_stats(image, stats: PixelStats):
    return (np.asarray(image, dtype=np.float64) * stats.std + stats.mean).astype(DTYPE)


def preprocess_pipeline(image, annot=None, stats=None, out_size=48, align=True, **canon):
    """Network-ready (1, S, S) tensor.

    With ``align=False`` (pre-cropped data such as FER2013) the alignment stage
    is replaced by a plain resize to ``out_size``. Without ``stats`` the output
    stops after contrast normalisation, which is what stats fitting consumes.
    """
    try:
        if align:
            if annot is None:
                raise AnnotationError("alignment requested but the row has no eye landmarks")
            face = align_face(image, annot, out_size, **canon)
        else:
            face = resize(image, out_size)
    except (AnnotationError, DimensionError) as exc:
        raise PreprocessError("align", exc) from exc
    face = gcn_image(face)
    if stats is not None:
        try:
            face = apply_pixel_stats(face, stats)
        except DimensionError as exc:
            raise PreprocessError("standardize", exc) from exc
    return face[None]
