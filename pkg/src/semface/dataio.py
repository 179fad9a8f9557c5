"""File formats: the FER2013 CSV, the annotation manifest (TSV), binary PGM,
and the checksummed binary containers for models, pixel statistics and
appearance models.

All binary formats are little-endian with no padding. Containers end in a
CRC-32 of every preceding byte.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import layers as L
from .aam import AppearanceModel
from .network import NetworkState, build_network, infer_shapes
from .preprocess import FaceAnnotation, PixelStats

FER_SIDE = 48
FER_HEADER = "emotion,pixels,Usage"
FER_USAGES = ("Training", "PublicTest", "PrivateTest")

MODEL_MAGIC = b"FGR1"
STATS_MAGIC = b"FST1"
AAM_MAGIC = b"FAM1"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class ParseError(ValueError):
    def __init__(self, path, line, message, column=None):
        where = f"{path}:{line}" + (f" column {column!r}" if column else "")
        super().__init__(f"{where}: {message}")
        self.path, self.line, self.column = path, line, column


class FormatError(ValueError):
    """A binary file that does not follow its layout."""


class BadMagicError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


# --------------------------------------------------------------------------
# FER2013 CSV


@dataclass
class FerRow:
    image: np.ndarray  # (48, 48) float32, values 0..255
    emotion: int
    usage: str


def parse_fer_csv(path):
    rows = []
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header != FER_HEADER:
            raise ParseError(path, 1, f"expected header {FER_HEADER!r}, got {header!r}")
        for n, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(path, n, f"expected 3 fields, got {len(parts)}")
            emo, pix, usage = parts
            try:
                emotion = int(emo)
                values = [int(v) for v in pix.split(" ")]
            except ValueError as exc:
                raise ParseError(path, n, f"non-integer value ({exc})") from None
            if not 0 <= emotion <= 6:
                raise ParseError(path, n, f"emotion {emotion} outside 0..6", "emotion")
            if len(values) != FER_SIDE * FER_SIDE:
                raise ParseError(path, n, f"expected {FER_SIDE * FER_SIDE} pixels, got {len(values)}", "pixels")
            arr = np.asarray(values, dtype=np.int64)
            if arr.min() < 0 or arr.max() > 255:
                raise ParseError(path, n, "pixel value outside 0..255", "pixels")
            if usage not in FER_USAGES:
                raise ParseError(path, n, f"unknown usage {usage!r}", "Usage")
            rows.append(FerRow(arr.reshape(FER_SIDE, FER_SIDE).astype(np.float32), emotion, usage))
    return rows


def fer_line(row: FerRow):
    pix = np.asarray(row.image)
    if pix.shape != (FER_SIDE, FER_SIDE):
        raise FormatError(f"FER images are {FER_SIDE}x{FER_SIDE}, got {pix.shape}")
    ints = np.rint(pix).astype(np.int64)
    if not np.array_equal(ints, pix) or ints.min() < 0 or ints.max() > 255:
        raise FormatError("FER pixels must be integers in 0..255")
    return f"{int(row.emotion)},{' '.join(map(str, ints.ravel()))},{row.usage}"


def write_fer_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write(FER_HEADER + "\n")
        for row in rows:
            fh.write(fer_line(row) + "\n")


# --------------------------------------------------------------------------
# manifest

LABEL_RANGES = {
    "emotion": 7,
    "age_bin": 17,
    "gender": 2,
    "ethnicity": 5,
    "glasses": 2,
    "beard": 3,
    "mustache": 3,
}
LABELS = tuple(LABEL_RANGES)
EYE_COLUMNS = ("right_eye_x", "right_eye_y", "left_eye_x", "left_eye_y")
SPLITS = ("train", "valid", "test")
COLUMNS = ("path", *EYE_COLUMNS, *LABELS, "split", "yaw", "pitch", "aam")
ABSENT = "-"


@dataclass
class ManifestRow:
    path: str
    eyes: FaceAnnotation | None = None
    labels: dict = field(default_factory=dict)  # label name -> int, absent labels omitted
    split: str | None = None
    pose: tuple | None = None  # (yaw_deg, pitch_deg)
    aam: tuple | None = None  # k std-normalised coefficients

    def __post_init__(self):
        if not self.path:
            raise ValueError("manifest rows need an image path")
        for name, v in self.labels.items():
            if name not in LABEL_RANGES:
                raise ValueError(f"unknown label {name!r}")
            if not 0 <= v < LABEL_RANGES[name]:
                raise ValueError(f"{name} label {v} outside 0..{LABEL_RANGES[name] - 1}")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def regression_target(self):
        if self.aam is None or self.pose is None:
            return None
        return (*self.aam, *self.pose)


def _fmt_real(v):
    return repr(float(v))


def _row_cells(row: ManifestRow):
    cells = {c: ABSENT for c in COLUMNS}
    cells["path"] = row.path
    if row.eyes is not None:
        (lx, ly), (rx, ry) = row.eyes.left_eye, row.eyes.right_eye
        for c, v in zip(EYE_COLUMNS, (rx, ry, lx, ly)):
            cells[c] = _fmt_real(v)
    for name, v in row.labels.items():
        cells[name] = str(int(v))
    if row.split is not None:
        cells["split"] = row.split
    if row.pose is not None:
        cells["yaw"], cells["pitch"] = map(_fmt_real, row.pose)
    if row.aam is not None:
        cells["aam"] = ";".join(map(_fmt_real, row.aam))
    return [cells[c] for c in COLUMNS]


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for row in rows:
            cells = _row_cells(row)
            if any("\t" in c or "\n" in c for c in cells):
                raise FormatError(f"manifest cell contains a tab or newline in row for {row.path!r}")
            fh.write("\t".join(cells) + "\n")


def read_manifest(path):
    rows = []
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        unknown = [c for c in header if c not in COLUMNS]
        if unknown:
            raise ParseError(path, 1, f"unknown column {unknown[0]!r}", unknown[0])
        if "path" not in header:
            raise ParseError(path, 1, "manifest needs a 'path' column")
        if len(set(header)) != len(header):
            raise ParseError(path, 1, "duplicate column")
        eye_cols = [c for c in EYE_COLUMNS if c in header]
        if eye_cols and len(eye_cols) != 4:
            raise ParseError(path, 1, "eye landmarks need all four columns")
        for n, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != len(header):
                raise ParseError(path, n, f"expected {len(header)} cells, got {len(cells)}")
            rows.append(_parse_row(path, n, dict(zip(header, cells))))
    return rows


def _parse_row(path, n, cells):
    def real(col):
        try:
            v = float(cells[col])
        except ValueError:
            raise ParseError(path, n, f"not a number: {cells[col]!r}", col) from None
        if not math.isfinite(v):
            raise ParseError(path, n, "value must be finite", col)
        return v

    def present(col):
        return col in cells and cells[col] != ABSENT

    if not cells["path"] or cells["path"] == ABSENT:
        raise ParseError(path, n, "missing image path", "path")
    eyes = None
    eyes_given = [present(c) for c in EYE_COLUMNS]
    if any(eyes_given):
        if not all(eyes_given):
            raise ParseError(path, n, "eye landmarks are partially given", EYE_COLUMNS[eyes_given.index(False)])
        rx, ry, lx, ly = (real(c) for c in EYE_COLUMNS)
        eyes = FaceAnnotation(left_eye=(lx, ly), right_eye=(rx, ry))
    labels = {}
    for name, k in LABEL_RANGES.items():
        if present(name):
            try:
                v = int(cells[name])
            except ValueError:
                raise ParseError(path, n, f"label is not an integer: {cells[name]!r}", name) from None
            if not 0 <= v < k:
                raise ParseError(path, n, f"{name} {v} outside 0..{k - 1}", name)
            labels[name] = v
    split = cells["split"] if present("split") else None
    if split is not None and split not in SPLITS:
        raise ParseError(path, n, f"split must be one of {SPLITS}", "split")
    pose = None
    if present("yaw") or present("pitch"):
        if not (present("yaw") and present("pitch")):
            raise ParseError(path, n, "pose needs both yaw and pitch", "yaw")
        pose = (real("yaw"), real("pitch"))
    aam = None
    if present("aam"):
        try:
            aam = tuple(float(v) for v in cells["aam"].split(";"))
        except ValueError:
            raise ParseError(path, n, "AAM vector must be ';'-separated reals", "aam") from None
    return ManifestRow(cells["path"], eyes, labels, split, pose, aam)


def resolve(manifest_path, row_path):
    """Image paths in a manifest are relative to the manifest's directory."""
    if os.path.isabs(row_path):
        return row_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), row_path)


# --------------------------------------------------------------------------
# PGM


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"PGM output needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _pgm_tokens(data, count):
    """First ``count`` header tokens and the offset just past the single separator."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("PGM header is truncated")
        out.append(data[i:j])
        i = j
    return out, i + 1


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (_, w, h, maxval), start = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
    body = data[start:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)


def load_image(path):
    """float32 pixels from a .pgm (0..255) or a float .npy array."""
    if str(path).endswith(".npy"):
        return np.load(path, allow_pickle=False).astype(np.float32)
    return read_pgm(path).astype(np.float32)


# --------------------------------------------------------------------------
# binary containers


class _Writer:
    def __init__(self, magic, version=FORMAT_VERSION):
        self.buf = bytearray(magic)
        self.u16(version)

    def pack(self, fmt, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def u8(self, v):
        self.pack("B", v)

    def u16(self, v):
        self.pack("H", v)

    def u32(self, v):
        self.pack("I", v)

    def u64(self, v):
        self.pack("Q", v)

    def f64(self, v):
        self.pack("d", v)

    def text(self, s):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.buf += b

    def array(self, a):
        a = np.asarray(a, dtype="<f4")
        self.u8(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.buf += a.tobytes()

    def finish(self):
        return bytes(self.buf) + struct.pack("<I", zlib.crc32(self.buf) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data, pos):
        self.data, self.pos = data, pos

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise FormatError("unexpected end of data")
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return vals[0] if len(vals) == 1 else vals

    def u8(self):
        return self.unpack("B")

    def u16(self):
        return self.unpack("H")

    def u32(self):
        return self.unpack("I")

    def u64(self):
        return self.unpack("Q")

    def f64(self):
        return self.unpack("d")

    def text(self):
        n = self.u16()
        s = self.data[self.pos : self.pos + n]
        self.pos += n
        return s.decode("utf-8")

    def array(self):
        shape = tuple(self.u32() for _ in range(self.u8()))
        n = int(np.prod(shape)) * 4
        if self.pos + n > len(self.data):
            raise FormatError("array data runs past the end of the file")
        a = np.frombuffer(self.data, dtype="<f4", count=n // 4, offset=self.pos).reshape(shape)
        self.pos += n
        return a.astype(np.float32)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def _open_container(data, magic, what="file"):
    """Checks magic, then checksum, then version; returns a reader positioned after the version."""
    if data[:4] != magic:
        raise BadMagicError(f"{what}: expected magic {magic!r}, got {bytes(data[:4])!r}")
    if len(data) < 10:
        raise ChecksumError(f"{what}: too short to carry a checksum ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{what}: checksum mismatch (file is corrupt or truncated)")
    r = _Reader(body, 4)
    version = r.u16()
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"{what}: format version {version} is not supported (supported: {SUPPORTED_VERSIONS})")
    return r


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# layer tags, stable across versions
_TAGS = {
    L.Conv: 1,
    L.MaxPool: 2,
    L.LCN: 3,
    L.ReLU: 4,
    L.FullyConnected: 5,
    L.Dropout: 6,
    L.OutputSoftmax: 7,
    L.OutputBlockSoftmax: 8,
    L.OutputLinear: 9,
}
_SPECS = {v: k for k, v in _TAGS.items()}


def _spec_params(spec):
    if isinstance(spec, L.OutputBlockSoftmax):
        return [float(b) for b in spec.block_sizes]
    vals = [getattr(spec, f.name) for f in fields(spec)]
    return [math.nan if v is None else float(v) for v in vals]


def _spec_from(tag, params):
    cls = _SPECS.get(tag)
    if cls is None:
        raise FormatError(f"unknown layer tag {tag}")
    if cls is L.OutputBlockSoftmax:
        return cls(tuple(int(p) for p in params))
    args = []
    for f, p in zip(fields(cls), params):
        if math.isnan(p):
            args.append(None)
        elif f.type in ("int", int):
            args.append(int(p))
        else:
            args.append(p)
    return cls(*args)


def model_bytes(net: NetworkState):
    w = _Writer(MODEL_MAGIC)
    w.u16(len(net.specs))
    w.u8(len(net.input_shape))
    for d in net.input_shape:
        w.u32(d)
    w.u64(net.seed)
    for i, spec in enumerate(net.specs):
        w.u8(_TAGS[type(spec)])
        params = _spec_params(spec)
        w.u8(len(params))
        for p in params:
            w.f64(p)
        has = net.weights[i] is not None
        w.u8(1 if has else 0)
        if has:
            w.array(net.weights[i])
            w.array(net.biases[i])
    return w.finish()


def save_model(net: NetworkState, path):
    _write_bytes(path, model_bytes(net))


def model_from_bytes(data, what="model"):
    r = _open_container(data, MODEL_MAGIC, what)
    n_layers = r.u16()
    input_shape = tuple(r.u32() for _ in range(r.u8()))
    seed = r.u64()
    specs, weights, biases = [], [], []
    for _ in range(n_layers):
        tag = r.u8()
        params = [r.f64() for _ in range(r.u8())]
        specs.append(_spec_from(tag, params))
        if r.u8():
            weights.append(r.array())
            biases.append(r.array())
        else:
            weights.append(None)
            biases.append(None)
    r.done()
    try:
        infer_shapes(specs, input_shape)
    except Exception as exc:
        raise FormatError(f"{what}: stored architecture is invalid: {exc}") from exc
    net = build_network(specs, input_shape, seed)
    for i, (w, b) in enumerate(zip(weights, biases)):
        if (w is None) != (net.weights[i] is None):
            raise FormatError(f"{what}: layer {i} parameter presence disagrees with its spec")
        if w is not None:
            if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                raise FormatError(f"{what}: layer {i} stores {w.shape}/{b.shape}, spec needs {net.weights[i].shape}/{net.biases[i].shape}")
            net.weights[i], net.biases[i] = w, b
    net.mode = "eval"
    return net


def load_model(path):
    return model_from_bytes(_read_bytes(path), str(path))


def save_pixel_stats(stats: PixelStats, path):
    w = _Writer(STATS_MAGIC)
    w.text(stats.source)
    w.array(stats.mean)
    w.array(stats.std)
    _write_bytes(path, w.finish())


def load_pixel_stats(path):
    r = _open_container(_read_bytes(path), STATS_MAGIC, str(path))
    source = r.text()
    mean, std = r.array(), r.array()
    r.done()
    if mean.shape != std.shape:
        raise FormatError(f"{path}: mean {mean.shape} and std {std.shape} differ")
    return PixelStats(mean, std, source)


def save_appearance_model(model: AppearanceModel, path):
    w = _Writer(AAM_MAGIC)
    w.u8(len(model.image_shape))
    for d in model.image_shape:
        w.u32(d)
    w.array(model.mean_face)
    w.array(model.components)
    w.array(model.component_stds)
    _write_bytes(path, w.finish())


def load_appearance_model(path):
    r = _open_container(_read_bytes(path), AAM_MAGIC, str(path))
    shape = tuple(r.u32() for _ in range(r.u8()))
    mean, comps, stds = r.array(), r.array(), r.array()
    r.done()
    if comps.shape != (len(stds), mean.size) or int(np.prod(shape)) != mean.size:
        raise FormatError(f"{path}: inconsistent appearance model arrays")
    return AppearanceModel(mean, comps, stds, shape)
