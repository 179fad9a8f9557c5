"""Appearance-only PCA face model.

Stands in for a full shape-and-texture AAM: a face is encoded as its deviation
from the mean face along the leading principal components, with coefficients
expressed in units of each component's standard deviation. Synthetic faces
are decoded from random coefficients and given a pose by ``pose_warp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import cosine_similarity  # noqa: F401  (re-exported)
from .preprocess import bilinear_sample
from .tensor import DTYPE, DataError, DimensionError, ParameterError

MAX_ANGLE = 30.0
POSE_SCALE = 30.0  # degrees per unit in regression targets
PIVOT_DEPTH = 0.25  # rotation axis sits this fraction of the width behind the face plane


@dataclass
class AppearanceModel:
    mean_face: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), orthonormal rows
    component_stds: np.ndarray  # (k,), non-increasing
    image_shape: tuple

    @property
    def k(self):
        return len(self.component_stds)

    def truncated(self, k):
        return AppearanceModel(self.mean_face, self.components[:k], self.component_stds[:k], self.image_shape)


@dataclass(frozen=True)
class AamTarget:
    coeffs: np.ndarray
    pose: tuple  # (yaw_deg, pitch_deg)


def _as_rows(images):
    X = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images])
    return X, np.asarray(images[0]).shape


def pca_eigen(X, method="auto"):
    """Eigenvalues (descending) and unit eigenvectors of the sample covariance of rows of X.

    ``method="gram"`` works in the N x N space (cheap when N < D); ``"covariance"``
    decomposes the D x D matrix directly.
    """
    n, d = X.shape
    Xc = X - X.mean(axis=0)
    if method == "auto":
        method = "gram" if n < d else "covariance"
    if method == "gram":
        lam, U = np.linalg.eigh(Xc @ Xc.T / (n - 1))
        order = np.argsort(lam)[::-1]
        lam, U = lam[order], U[:, order]
        keep = lam > max(lam[0], 0) * 1e-10
        lam, U = lam[keep], U[:, keep]
        V = (Xc.T @ U) / np.sqrt(lam * (n - 1))
        return lam, V.T
    if method == "covariance":
        lam, V = np.linalg.eigh(Xc.T @ Xc / (n - 1))
        order = np.argsort(lam)[::-1]
        lam, V = lam[order], V[:, order]
        keep = lam > max(lam[0], 0) * 1e-10
        return lam[keep], V[:, keep].T
    raise ParameterError(f"unknown method {method!r}")


def fit_pca(images, variance_target=0.95):
    if len(images) < 2:
        raise DataError(f"PCA needs at least 2 images, got {len(images)}")
    if not 0 < variance_target <= 1:
        raise ParameterError(f"variance_target must lie in (0, 1], got {variance_target}")
    X, shape = _as_rows(images)
    lam, V = pca_eigen(X)
    if lam.size == 0:
        raise DataError("all images are identical; nothing to model")
    if variance_target >= 1:
        k = lam.size
    else:
        frac = np.cumsum(lam) / lam.sum()
        k = int(np.searchsorted(frac, variance_target - 1e-12) + 1)
    return AppearanceModel(
        X.mean(axis=0).astype(DTYPE),
        V[:k].astype(DTYPE),
        np.sqrt(lam[:k]).astype(DTYPE),
        tuple(shape),
    )


def encode(model: AppearanceModel, image):
    """Coefficients in component-std units; accepts one image or a stack."""
    x = np.asarray(image, dtype=np.float64)
    d = model.mean_face.size
    single = x.size == d
    rows = x.reshape(1 if single else -1, d) if x.size % d == 0 else None
    if rows is None:
        raise DimensionError(f"image of size {x.size} does not fit a model of {d} pixels")
    c = (rows - model.mean_face) @ model.components.T.astype(np.float64) / model.component_stds
    return c[0] if single else c


def decode(model: AppearanceModel, coeffs):
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-1] != model.k:
        raise DimensionError(f"expected {model.k} coefficients, got {c.shape[-1]}")
    x = model.mean_face + (c * model.component_stds) @ model.components.astype(np.float64)
    return x.reshape(c.shape[:-1] + tuple(model.image_shape)).astype(DTYPE)


def pose_warp(image, yaw_deg, pitch_deg, depth=PIVOT_DEPTH):
    """Orthographic view of the face plane turned by (yaw, pitch).

    The plane sits ``depth * size`` in front of the rotation axis, so a turn both
    compresses the face by cos(angle) and shifts it by depth * sin(angle); the
    shift makes the sign of the angle visible.
    """
    for name, ang in (("yaw", yaw_deg), ("pitch", pitch_deg)):
        if not -MAX_ANGLE <= ang <= MAX_ANGLE:
            raise ParameterError(f"{name} {ang} outside +/-{MAX_ANGLE} degrees")
    img = np.asarray(image)
    if yaw_deg == 0 and pitch_deg == 0:
        return img.astype(DTYPE, copy=True)
    h, w = img.shape[-2:]
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = cx + (xx - cx - depth * w * np.sin(yaw)) / np.cos(yaw)
    src_y = cy + (yy - cy + depth * h * np.sin(pitch)) / np.cos(pitch)
    return bilinear_sample(img.reshape(h, w), src_x, src_y).astype(DTYPE).reshape(img.shape)


def mirror(image):
    return np.asarray(image)[..., ::-1].copy()


def _truncated_normal(gen, shape, limit=3.0):
    out = gen.standard_normal(shape)
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def sample_synthetic(model: AppearanceModel, rng, n, max_angle=MAX_ANGLE, warp=True):
    """n (image, AamTarget) pairs; image = pose_warp(decode(coeffs), pose)."""
    gen = rng.generator
    out = []
    for _ in range(n):
        c = _truncated_normal(gen, model.k)
        yaw, pitch = gen.uniform(-max_angle, max_angle, size=2)
        face = decode(model, c)
        img = pose_warp(face, float(yaw), float(pitch)) if warp else face
        out.append((img, AamTarget(c, (float(yaw), float(pitch)))))
    return out


def regression_target(target: AamTarget, pose_scale=POSE_SCALE):
    return np.concatenate([target.coeffs, np.asarray(target.pose) / pose_scale]).astype(DTYPE)


def split_regression(pred, k, pose_scale=POSE_SCALE):
    """(coeffs, pose_degrees) from raw regression outputs of length k + 2."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[-1] != k + 2:
        raise DimensionError(f"expected {k + 2} regression outputs, got {pred.shape[-1]}")
    return pred[..., :k], pred[..., k:] * pose_scale
