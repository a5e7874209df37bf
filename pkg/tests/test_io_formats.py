import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from conftest import tiny_config
from mtnet.io_formats import (
    FormatError,
    ValidationError,
    load_model,
    load_sequence,
    parse_config,
    read_pgm,
    read_ppm,
    save_model,
    write_pgm,
    write_ppm,
    write_sequence,
)
from mtnet.netblocks import init_params
from mtnet.pipeline import TrainConfig


# -- netpbm -------------------------------------------------------------------


def test_ppm_red_pixel(tmp_path):
    p = tmp_path / "r.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\x00\x00")
    img = read_ppm(p)
    assert img.shape == (1, 1, 3) and img.dtype == np.float32
    np.testing.assert_array_equal(img[0, 0], [1, 0, 0])
    write_ppm(img, tmp_path / "o.ppm")
    assert (tmp_path / "o.ppm").read_bytes() == p.read_bytes()


def test_ppm_header_with_comment(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6 # made by hand\n2 1 255\n" + bytes(range(6)))
    assert read_ppm(p).shape == (1, 2, 3)


def test_ppm_rejects_p5_magic(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError) as exc:
        read_ppm(p)
    assert exc.value.offset == 0 and "magic" in str(exc.value)


def test_ppm_truncated_payload(tmp_path):
    p = tmp_path / "t.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 7)
    with pytest.raises(FormatError) as exc:
        read_ppm(p)
    assert exc.value.offset == 11 + 7


def test_ppm_rejects_maxval(tmp_path):
    p = tmp_path / "m.ppm"
    p.write_bytes(b"P6\n1 1\n65535\n" + b"\x00" * 6)
    with pytest.raises(FormatError) as exc:
        read_ppm(p)
    assert exc.value.offset == 7


def test_ppm_bad_token(tmp_path):
    p = tmp_path / "b.ppm"
    p.write_bytes(b"P6\n1 x\n255\n\x00\x00\x00")
    with pytest.raises(FormatError) as exc:
        read_ppm(p)
    assert exc.value.offset == 5


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (8, 8, 3)))
def test_ppm_bit_exact_round_trip(tmp_path_factory, raw):
    d = tmp_path_factory.mktemp("ppm")
    a, b = d / "a.ppm", d / "b.ppm"
    a.write_bytes(b"P6\n8 8\n255\n" + raw.tobytes())
    img = read_ppm(a)
    np.testing.assert_array_equal(np.rint(img * 255).astype(np.uint8), raw)
    write_ppm(img, b)
    assert b.read_bytes() == a.read_bytes()


@pytest.mark.parametrize("labels", [[0], [0, 1, 2]])
def test_pgm_round_trip(tmp_path, labels):
    m = np.random.default_rng(0).choice(labels, (5, 7)).astype(np.uint8)
    write_pgm(m, tmp_path / "m.pgm")
    back = read_pgm(tmp_path / "m.pgm")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, m)


def test_pgm_rejects_p6(tmp_path):
    write_ppm(np.zeros((2, 2, 3)), tmp_path / "x.pgm")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "x.pgm")


# -- sequences ----------------------------------------------------------------


def make_seq(root, n=3, size=(16, 16), labels=(1,)):
    frames = [np.full(size + (3,), i / 10, np.float32) for i in range(n)]
    ref = np.zeros(size, np.uint8)
    for k, lab in enumerate(labels):
        ref[2 + 4 * k : 5 + 4 * k, 2:6] = lab
    write_sequence(root, frames, {0: ref})
    return root


def test_load_sequence_single_object(tmp_path):
    seq = load_sequence(make_seq(tmp_path / "s"))
    assert seq.n_objects == 1 and seq.frame_ids == [0, 1, 2] and seq.name == "s"
    assert np.unique(seq.reference_mask).tolist() == [0, 1]
    assert seq.gt_masks == {}


def test_load_sequence_object_count(tmp_path):
    assert load_sequence(make_seq(tmp_path / "s", labels=(1, 2))).n_objects == 2


def test_missing_reference_mask(tmp_path):
    root = make_seq(tmp_path / "s")
    (root / "masks" / "00000.pgm").unlink()
    with pytest.raises(ValidationError, match="reference"):
        load_sequence(root)


def test_missing_frames_dir(tmp_path):
    with pytest.raises(ValidationError):
        load_sequence(tmp_path)


def test_frames_sorted_numerically(tmp_path):
    root = make_seq(tmp_path / "s", n=1)
    # ids 2 and 10 sort the wrong way as strings once the width differs
    write_ppm(np.full((16, 16, 3), 0.5, np.float32), root / "frames" / "10.ppm")
    write_ppm(np.full((16, 16, 3), 0.2, np.float32), root / "frames" / "2.ppm")
    seq = load_sequence(root)
    assert seq.frame_ids == [0, 2, 10]
    assert abs(float(seq.frames[1][0, 0, 0]) - 51 / 255) < 1e-7


def test_gt_label_above_object_count(tmp_path):
    root = make_seq(tmp_path / "s")
    bad = np.zeros((16, 16), np.uint8)
    bad[0, 0] = 2
    write_pgm(bad, root / "masks" / "00001.pgm")
    with pytest.raises(ValidationError, match="label 2"):
        load_sequence(root)


def test_frame_size_mismatch(tmp_path):
    root = make_seq(tmp_path / "s")
    write_ppm(np.zeros((8, 16, 3)), root / "frames" / "00001.ppm")
    with pytest.raises(ValidationError):
        load_sequence(root)


def test_ground_truth_keyed_by_position(tmp_path):
    root = make_seq(tmp_path / "s")
    gt = np.zeros((16, 16), np.uint8)
    gt[3:6, 3:6] = 1
    write_pgm(gt, root / "masks" / "00002.pgm")
    seq = load_sequence(root)
    assert list(seq.gt_masks) == [2]
    np.testing.assert_array_equal(seq.gt_masks[2], gt)


# -- model files --------------------------------------------------------------


@pytest.fixture
def model_file(tmp_path):
    params = init_params(tiny_config(), seed=3)
    path = tmp_path / "m.mtn"
    save_model(params, path)
    return params, path


def test_model_round_trip(model_file):
    params, path = model_file
    back = load_model(path)
    assert back.config == params.config
    assert list(back.tensors) == list(params.tensors)
    for k, v in params.tensors.items():
        assert back.tensors[k].dtype == np.float32
        np.testing.assert_array_equal(back.tensors[k], v)


def test_model_bytes_deterministic(model_file, tmp_path):
    params, path = model_file
    save_model(load_model(path), tmp_path / "again.mtn")
    assert (tmp_path / "again.mtn").read_bytes() == path.read_bytes()


def test_model_layout(model_file):
    params, path = model_file
    data = path.read_bytes()
    assert data[:4] == b"MTN1"
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    assert header["format_version"] == 1
    assert len(data) == 8 + hlen + 4 * params.parameter_count()


def test_model_bad_magic(model_file):
    _, path = model_file
    data = bytearray(path.read_bytes())
    data[:4] = b"MTN2"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as exc:
        load_model(path)
    assert exc.value.offset == 0


def _rewrite_header(path, edit):
    data = path.read_bytes()
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    edit(header)
    hb = json.dumps(header).encode()
    path.write_bytes(data[:4] + struct.pack("<I", len(hb)) + hb + data[8 + hlen :])


def test_model_version_mismatch(model_file):
    _, path = model_file
    _rewrite_header(path, lambda h: h.update(format_version=2))
    with pytest.raises(FormatError, match="version"):
        load_model(path)


def test_model_count_mismatch(model_file):
    _, path = model_file
    _rewrite_header(path, lambda h: h.update(param_count=h["param_count"] + 1))
    with pytest.raises(FormatError):
        load_model(path)


def test_model_truncated_payload(model_file):
    _, path = model_file
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="payload"):
        load_model(path)


# -- configs ------------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    train, model = parse_config(p)
    assert train == TrainConfig()
    assert model.stride == 16 and model.embed_dim == 32


def test_config_values_parsed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "lr": 1e-5,\n  "iterations": 20,\n  "stride": 32,\n  "embed_dim": 8\n}\n')
    train, model = parse_config(p)
    assert train.lr == 1e-5 and train.iterations == 20
    assert model.stride == 32 and model.embed_dim == 8


def test_unknown_key_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "lr": 1e-5,\n  "foo": 1\n}\n')
    with pytest.raises(FormatError) as exc:
        parse_config(p)
    assert exc.value.offset == 3 and "foo" in str(exc.value)


def test_wrong_type_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "iterations": "many"\n}\n')
    with pytest.raises(FormatError) as exc:
        parse_config(p)
    assert exc.value.offset == 2


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "lr": 1e-5,\n  oops\n}\n')
    with pytest.raises(FormatError) as exc:
        parse_config(p)
    assert exc.value.offset == 3


def test_invalid_value_is_validation_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"lr": -1.0}')
    with pytest.raises(ValidationError):
        parse_config(p)
