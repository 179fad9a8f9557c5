"""Procedural grayscale faces with known eye landmarks and attribute labels.

Used as a stand-in corpus when no licensed face data is available: every
attribute that the manifest can carry (emotion, age bin, gender, ethnicity,
glasses, beard, mustache) changes the rendered face in a visible way. Faces are
drawn in a canonical frame and then placed with a random rotation, scale and
shift, so alignment has real work to do.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .preprocess import FaceAnnotation
from .tensor import SeededRng

# canonical frame: u to the viewer's right, v down, face centred at the origin
EYE_U, EYE_V = 0.3, -0.15

SKIN = (205.0, 175.0, 145.0, 120.0, 95.0)  # by ethnicity index

# brow_slant, brow_raise, mouth_curve, mouth_open, eye_open, asymmetry
EMOTION_SHAPES = {
    0: (0.10, -0.04, -0.04, 0.00, 0.9, 0.0),  # angry
    1: (0.05, -0.02, -0.06, 0.02, 0.7, 0.06),  # disgust
    2: (-0.06, 0.06, -0.02, 0.06, 1.3, 0.0),  # fear
    3: (0.00, 0.01, 0.12, 0.04, 0.9, 0.0),  # happy
    4: (-0.08, 0.00, -0.10, 0.00, 0.8, 0.0),  # sad
    5: (0.00, 0.10, 0.00, 0.14, 1.4, 0.0),  # surprise
    6: (0.00, 0.00, 0.00, 0.00, 1.0, 0.0),  # neutral
}


@dataclass(frozen=True)
class FaceAttributes:
    emotion: int = 6
    age_bin: int = 6
    gender: int = 0  # 0 male, 1 female
    ethnicity: int = 0
    glasses: int = 0
    beard: int = 0
    mustache: int = 0

    def labels(self):
        return dict(self.__dict__)


def random_attributes(gen: np.random.Generator):
    gender = int(gen.integers(2))
    return FaceAttributes(
        emotion=int(gen.integers(7)),
        age_bin=int(gen.integers(17)),
        gender=gender,
        ethnicity=int(gen.integers(5)),
        glasses=int(gen.integers(2)),
        beard=0 if gender else int(gen.integers(3)),
        mustache=0 if gender else int(gen.integers(3)),
    )


def _blob(u, v, cu, cv, ru, rv, soft=0.03):
    r = np.sqrt(((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * min(ru, rv) / soft, -50, 50)))


def _band(d, half, soft=0.012):
    """1 inside |d| < half, smooth edge."""
    return 1.0 / (1.0 + np.exp(np.clip((np.abs(d) - half) / soft, -50, 50)))


def _canonical(u, v, a: FaceAttributes, background):
    brow_slant, brow_raise, mouth_curve, mouth_open, eye_open, asym = EMOTION_SHAPES[a.emotion]
    age = a.age_bin / 16.0
    half_w = 0.60 if a.gender else 0.67
    skin = SKIN[a.ethnicity]
    img = np.full(u.shape, background)

    if a.gender:  # long hair behind the face
        hair_back = _blob(u, v, 0.0, 0.05, 0.80, 0.95)
        img += (hair_back * (v > -0.2)) * (40 + 60 * age - background)

    face = _blob(u, v, 0.0, 0.0, half_w, 0.85)
    img = img * (1 - face) + skin * face

    hair_tone = 35 + 150 * age**1.5
    hair = _blob(u, v, 0.0, -0.55, half_w + 0.04, 0.38) * (v < -0.52 + 0.1 * age)
    img = img * (1 - hair) + hair_tone * hair

    # forehead lines
    for k in range(int(round(4 * age))):
        vv = -0.42 + 0.06 * k
        img -= 25 * age * _band(v - vv, 0.006) * (np.abs(u) < 0.3) * face

    for side in (-1, 1):
        cu = side * EYE_U
        white = _blob(u, v, cu, EYE_V, 0.11, 0.05 * eye_open)
        img = img * (1 - white) + 235 * white
        pupil = _blob(u, v, cu, EYE_V, 0.045, min(0.045, 0.05 * eye_open))
        img = img * (1 - pupil) + 25 * pupil
        # brows: inner end lowered by a positive slant
        rel = (u - cu) * side  # > 0 towards the outside
        brow_v = EYE_V - 0.13 - brow_raise + brow_slant * (0.5 - (rel + 0.12) / 0.24) * 0.8
        brow = _band(v - brow_v, 0.018) * (np.abs(u - cu) < 0.12)
        img = img * (1 - 0.8 * brow) + 40 * 0.8 * brow
        if a.glasses:
            r = np.sqrt(((u - cu) / 0.15) ** 2 + ((v - EYE_V) / 0.11) ** 2)
            ring = _band(r - 1.0, 0.1, 0.03)
            img = img * (1 - ring) + 15 * ring
    if a.glasses:
        bridge = _band(v - EYE_V, 0.012) * (np.abs(u) < EYE_U - 0.14)
        img = img * (1 - bridge) + 15 * bridge

    nose = _band(u, 0.012) * (v > -0.05) * (v < 0.2)
    img -= 35 * nose * face
    if a.emotion == 1:  # wrinkled nose
        img -= 30 * _band(v - 0.05, 0.01) * (np.abs(u) < 0.09) * face

    mouth_v = 0.42 + asym * u
    curve = mouth_v - mouth_curve * (1 - (u / 0.25) ** 2)
    in_mouth = np.abs(u) < 0.25
    lip = _band(v - curve, 0.018 + mouth_open) * in_mouth
    img = img * (1 - lip) + 50 * lip

    if a.mustache:
        m = _band(v - (curve - 0.07 - mouth_open), 0.018 * a.mustache) * (np.abs(u) < 0.26)
        img = img * (1 - m) + 30 * m
    if a.beard:
        lower = face * (v > 0.3) * (1 - _band(v - curve, 0.04 + mouth_open))
        strength = 0.35 * a.beard
        img = img * (1 - strength * lower) + 35 * strength * lower
    return img


def render_face(attrs: FaceAttributes, size=64, gen=None, jitter=True, noise=3.0):
    """(image float32 in 0..255, FaceAnnotation) for one face; ``noise`` is the pixel noise std."""
    gen = gen if gen is not None else np.random.default_rng(0)
    if jitter:
        theta = gen.uniform(-0.25, 0.25)
        scale = size * 0.36 * gen.uniform(0.9, 1.1)
        shift = gen.uniform(-0.06, 0.06, size=2) * size
        background = gen.uniform(30, 90)
        light = gen.uniform(-0.25, 0.25, size=2)
    else:
        theta, scale, shift, background, light, noise = 0.0, size * 0.36, np.zeros(2), 60.0, np.zeros(2), 0.0
    c = (size - 1) / 2.0
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c - shift[0], yy - c - shift[1]
    u = (cos * dx + sin * dy) / scale
    v = (-sin * dx + cos * dy) / scale
    img = _canonical(u, v, attrs, background)
    img *= 1.0 + light[0] * (xx / size - 0.5) + light[1] * (yy / size - 0.5)
    if noise:
        img += gen.normal(0, noise, size=img.shape)

    def to_px(cu, cv):
        return (c + shift[0] + scale * (cos * cu - sin * cv), c + shift[1] + scale * (sin * cu + cos * cv))

    # the subject's right eye is on the viewer's left
    annot = FaceAnnotation(left_eye=to_px(EYE_U, EYE_V), right_eye=to_px(-EYE_U, EYE_V))
    return np.clip(img, 0, 255).astype(np.float32), annot


def generate(n, seed=0, size=64, jitter=True, attributes=None, noise=3.0):
    """n (uint8 image, FaceAnnotation, FaceAttributes) triples, deterministic in seed."""
    root = SeededRng(seed)
    out = []
    for i in range(n):
        gen = root.spawn(i).generator
        attrs = attributes[i] if attributes is not None else random_attributes(gen)
        img, annot = render_face(attrs, size, gen, jitter, noise)
        out.append((np.rint(img).astype(np.uint8), annot, attrs))
    return out


def write_corpus(out_dir, n, seed=0, size=64, fractions=(0.8, 0.1, 0.1), noise=3.0):
    """Writes PGM faces plus a manifest with landmarks, labels and a split column."""
    from .dataio import ManifestRow, write_manifest, write_pgm

    os.makedirs(out_dir, exist_ok=True)
    faces = generate(n, seed, size, noise=noise)
    order = SeededRng(seed).spawn(1 << 20).generator.permutation(n)
    n_train, n_valid = int(round(fractions[0] * n)), int(round(fractions[1] * n))
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_valid]] = "valid"
    split[order[n_train + n_valid :]] = "test"
    rows = []
    for i, (img, annot, attrs) in enumerate(faces):
        name = f"face{i:05d}.pgm"
        write_pgm(os.path.join(out_dir, name), img)
        rows.append(ManifestRow(name, annot, attrs.labels(), split[i]))
    path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(rows, path)
    return path
