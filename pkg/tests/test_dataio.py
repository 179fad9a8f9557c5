import os
import struct
import tempfile
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from semface.aam import fit_pca
from semface.dataio import (
    ABSENT,
    BadMagicError,
    ChecksumError,
    FerRow,
    FormatError,
    ManifestRow,
    ParseError,
    VersionError,
    fer_line,
    load_appearance_model,
    load_image,
    load_model,
    load_pixel_stats,
    model_bytes,
    model_from_bytes,
    parse_fer_csv,
    read_manifest,
    read_pgm,
    resolve,
    save_appearance_model,
    save_model,
    save_pixel_stats,
    write_fer_csv,
    write_manifest,
    write_pgm,
)
from semface.layers import LCN, Conv, Dropout, FullyConnected, MaxPool, OutputBlockSoftmax, OutputLinear, ReLU
from semface.network import build_network, network_forward, default_net
from semface.preprocess import FaceAnnotation, PixelStats

HEADER = "emotion,pixels,Usage\n"


def fer_file(tmp_path, lines, header=HEADER):
    p = tmp_path / "fer.csv"
    p.write_text(header + "".join(line + "\n" for line in lines))
    return p


# --- FER CSV -------------------------------------------------------------


def test_fer_zero_row(tmp_path):
    rows = parse_fer_csv(fer_file(tmp_path, ["0," + " ".join(["0"] * 2304) + ",Training"]))
    assert len(rows) == 1
    assert rows[0].emotion == 0 and rows[0].usage == "Training" and not rows[0].image.any()
    assert rows[0].image.shape == (48, 48)


@pytest.mark.parametrize(
    "line,match",
    [
        ("0," + " ".join(["0"] * 2303) + ",Training", "2304 pixels"),
        ("7," + " ".join(["0"] * 2304) + ",Training", "emotion"),
        ("0," + " ".join(["256"] * 2304) + ",Training", "0..255"),
        ("0," + " ".join(["0"] * 2304) + ",Other", "usage"),
        ("0," + " ".join(["x"] * 2304) + ",Training", "non-integer"),
        ("0,1", "3 fields"),
    ],
)
def test_fer_errors_name_line(tmp_path, line, match):
    good = "3," + " ".join(["1"] * 2304) + ",PublicTest"
    with pytest.raises(ParseError, match=match) as info:
        parse_fer_csv(fer_file(tmp_path, [good, line]))
    assert info.value.line == 3


def test_fer_bad_header(tmp_path):
    with pytest.raises(ParseError):
        parse_fer_csv(fer_file(tmp_path, [], header="emotion,pixels\n"))


def test_fer_roundtrip_bytes(tmp_path):
    g = np.random.default_rng(0)
    lines = [f"{g.integers(0, 7)}," + " ".join(map(str, g.integers(0, 256, 2304))) + f",{u}" for u in ("Training", "PublicTest", "PrivateTest")]
    path = fer_file(tmp_path, lines)
    rows = parse_fer_csv(path)
    assert [fer_line(r) for r in rows] == lines
    out = tmp_path / "again.csv"
    write_fer_csv(rows, out)
    assert out.read_bytes() == path.read_bytes()
    with pytest.raises(FormatError):
        fer_line(FerRow(np.full((48, 48), 0.5), 0, "Training"))


# --- manifest ------------------------------------------------------------


def fixture_rows():
    return [
        ManifestRow("a.pgm", FaceAnnotation((30.5, 20.0), (10.25, 21.0)), {"emotion": 3, "age_bin": 16, "gender": 1}, "train"),
        ManifestRow("dir/b c.pgm", None, {"glasses": 1, "beard": 2, "mustache": 0, "ethnicity": 4}, "test"),
        ManifestRow("s.npy", None, {}, "valid", (12.5, -3.0), (0.1, -2.0, 1e-7)),
    ]


def test_manifest_roundtrip(tmp_path):
    p = tmp_path / "m.tsv"
    write_manifest(fixture_rows(), p)
    assert read_manifest(p) == fixture_rows()
    text = p.read_text()
    write_manifest(read_manifest(p), p)
    assert p.read_text() == text
    assert ABSENT in text.splitlines()[2].split("\t")


def test_manifest_age_17_rejected(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("path\tage_bin\nx.pgm\t16\ny.pgm\t17\n")
    with pytest.raises(ParseError) as info:
        read_manifest(p)
    assert info.value.line == 3 and info.value.column == "age_bin"


@pytest.mark.parametrize(
    "text,col",
    [
        ("path\tcolour\nx\t1\n", "colour"),
        ("path\temotion\nx\t9\n", "emotion"),
        ("path\tright_eye_x\tright_eye_y\tleft_eye_x\tleft_eye_y\nx\t1\t2\t-\t4\n", None),
        ("path\tsplit\nx\tholdout\n", "split"),
        ("emotion\n1\n", None),
        ("path\temotion\nx\n", None),
    ],
)
def test_manifest_rejects(tmp_path, text, col):
    p = tmp_path / "m.tsv"
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        read_manifest(p)
    if col:
        assert info.value.column == col


def test_missing_eyes_is_not_a_parse_error(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("path\temotion\nx.pgm\t2\n")
    (row,) = read_manifest(p)
    assert row.eyes is None and row.labels == {"emotion": 2}


def test_resolve(tmp_path):
    assert resolve(tmp_path / "m.tsv", "img/a.pgm") == str(tmp_path / "img" / "a.pgm")
    assert resolve(tmp_path / "m.tsv", "/abs/a.pgm") == "/abs/a.pgm"


# --- PGM -----------------------------------------------------------------


def test_pgm_roundtrip(tmp_path):
    img = np.add.outer(np.arange(20), np.arange(30)).astype(np.uint8)
    p = tmp_path / "g.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_pgm(p), img)
    data = p.read_bytes()
    write_pgm(tmp_path / "h.pgm", read_pgm(p))
    assert (tmp_path / "h.pgm").read_bytes() == data
    assert load_image(p).dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20)))
def test_pgm_lossless(img):
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.pgm")
        write_pgm(p, img)
        assert np.array_equal(read_pgm(p), img)


def test_pgm_errors(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(FormatError):
        read_pgm(p)
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(FormatError):
        read_pgm(p)
    p.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes(3))
    with pytest.raises(FormatError):
        read_pgm(p)
    p.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    assert read_pgm(p).tolist() == [[1, 2], [3, 4]]


# --- binary containers ---------------------------------------------------


def all_layer_specs():
    return [
        Conv(3, 3, 3), ReLU(), LCN(window=5, floor=1e-3), MaxPool(2, 2),
        Conv(2, 2, 2, stride=1), ReLU(), Dropout(0.3), FullyConnected(5), ReLU(),
        OutputBlockSoftmax((2, 3)),
    ]


def test_model_roundtrip_all_layers(tmp_path):
    net = build_network(all_layer_specs(), (1, 12, 12), seed=77)
    net.momentum_w[0][:] = 1.0
    p = tmp_path / "m.fgr"
    save_model(net, p)
    back = load_model(p)
    assert back.specs == net.specs and back.seed == 77 and back.input_shape == net.input_shape
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        assert (a is None and b is None) or (a.tobytes() == b.tobytes())
    assert all(m is None or not m.any() for m in back.momentum_w)
    x = np.random.default_rng(0).normal(size=(3, 1, 12, 12)).astype(np.float32)
    assert np.array_equal(network_forward(net.eval(), x)[0], network_forward(back, x)[0])
    assert model_bytes(back) == p.read_bytes()


def test_model_linear_head(tmp_path):
    net = build_network([FullyConnected(4), ReLU(), OutputLinear(7)], (1, 3, 3), seed=1)
    assert model_from_bytes(model_bytes(net)).specs == net.specs


def test_default_net_roundtrip(tmp_path):
    net = default_net(seed=2).eval()
    p = tmp_path / "default.fgr"
    save_model(net, p)
    x = np.random.default_rng(1).normal(size=(2, 1, 48, 48)).astype(np.float32)
    assert np.array_equal(network_forward(net, x)[0], network_forward(load_model(p), x)[0])


def _with_version(data, version):
    body = bytearray(data[:-4])
    body[4:6] = struct.pack("<H", version)
    return bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_model_error_variants():
    data = model_bytes(build_network(all_layer_specs(), (1, 12, 12)))
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ChecksumError):
        model_from_bytes(data[:-10])
    with pytest.raises(ChecksumError):
        model_from_bytes(data[:7])
    flipped = bytearray(data)
    flipped[40] ^= 1
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(flipped))
    with pytest.raises(VersionError, match=r"supported: \(1,\)"):
        model_from_bytes(_with_version(data, 0))
    for exc in (BadMagicError, ChecksumError, VersionError):
        assert issubclass(exc, FormatError)


def test_stats_roundtrip(tmp_path):
    g = np.random.default_rng(0)
    stats = PixelStats(g.normal(size=(9, 9)).astype(np.float32), g.uniform(1e-6, 2, (9, 9)).astype(np.float32), "train.tsv")
    p = tmp_path / "s.fst"
    save_pixel_stats(stats, p)
    back = load_pixel_stats(p)
    assert back.mean.tobytes() == stats.mean.tobytes() and back.std.tobytes() == stats.std.tobytes()
    assert back.source == "train.tsv"
    with pytest.raises(BadMagicError):
        load_model(p)


def test_appearance_model_roundtrip(tmp_path):
    g = np.random.default_rng(0)
    m = fit_pca([g.normal(size=(6, 6)) for _ in range(10)], 0.9)
    p = tmp_path / "a.fam"
    save_appearance_model(m, p)
    back = load_appearance_model(p)
    assert back.image_shape == m.image_shape
    for name in ("mean_face", "components", "component_stds"):
        assert getattr(back, name).tobytes() == getattr(m, name).tobytes()


def test_serialization_little_endian():
    data = model_bytes(build_network([OutputLinear(1)], (1, 1, 1), seed=0))
    assert data[:4] == b"FGR1" and struct.unpack("<H", data[4:6])[0] == 1
