from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipfree import data
from clipfree.errors import FormatError, StructuralError

import oracles


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.float32)
    data.save_image(img, tmp_path / "a.ppm")
    np.testing.assert_array_equal(data.load_image(tmp_path / "a.ppm"), img)


def test_pgm_roundtrip_replicates_channels(tmp_path):
    g = np.random.default_rng(1).integers(0, 256, (4, 3, 1)).astype(np.float32)
    img = np.repeat(g, 3, axis=2)
    data.save_image(img, tmp_path / "g.pgm")
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 4\n255\n") and len(raw) == 11 + 12
    np.testing.assert_array_equal(data.load_image(tmp_path / "g.pgm"), img)
    with pytest.raises(StructuralError, match="colour"):
        data.save_image(np.random.default_rng(2).uniform(0, 255, (2, 2, 3)), tmp_path / "c.pgm")


def test_header_comments_and_rounding():
    body = bytes([0, 128, 255, 7])
    img = data.decode_pnm(b"P5 # comment\n2 # w\n2\n255\n" + body)
    np.testing.assert_array_equal(img[..., 0], [[0, 128], [255, 7]])
    enc = data.encode_pnm(np.array([[[-3.0, 254.6, 127.5]]]))
    assert enc.endswith(bytes([0, 255, 128]))


def test_pnm_errors_name_byte_offsets():
    with pytest.raises(FormatError, match="byte offset 0"):
        data.decode_pnm(b"P3\n1 1\n255\n\x00")
    with pytest.raises(FormatError, match=r"truncated payload: expected 12 bytes from byte offset 11, found 5"):
        data.decode_pnm(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(FormatError, match="maxval 65535"):
        data.decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError, match="malformed header field b'x'"):
        data.decode_pnm(b"P5\nx 1\n255\n\x00")
    with pytest.raises(FormatError, match="truncated header"):
        data.decode_pnm(b"P5\n1")


@pytest.mark.parametrize("n,factor", [(12, Fraction(1, 3)), (9, Fraction(1, 3)), (4, 3), (7, 2), (10, Fraction(1, 2)), (5, 1)])
def test_bicubic_matches_per_sample_oracle(n, factor):
    v = np.random.default_rng(n).uniform(0, 255, n)
    cols = np.repeat(v[:, None, None], 6, axis=1)  # constant along the width
    got = data.bicubic_resize(cols, factor)[:, 0, 0]
    np.testing.assert_allclose(got, oracles.resize_1d(v, float(factor)), atol=1e-9)


def test_bicubic_is_separable_2d():
    x = np.random.default_rng(3).uniform(0, 255, (9, 12, 2))
    out = data.bicubic_resize(x, Fraction(1, 3))
    assert out.shape == (3, 4, 2)
    for c in range(2):
        rows = np.stack([oracles.resize_1d(x[:, j, c], 1 / 3) for j in range(12)], axis=1)
        ref = np.stack([oracles.resize_1d(rows[i], 1 / 3) for i in range(3)], axis=0)
        np.testing.assert_allclose(out[..., c], ref, atol=1e-9)


@given(h=st.integers(3, 10), w=st.integers(3, 10), value=st.floats(0, 255))
@settings(max_examples=30, deadline=None)
def test_bicubic_preserves_constants(h, w, value):
    x = np.full((h, w, 3), value)
    for f in (3, Fraction(1, 3)):
        if min(h, w) * f >= 1:
            np.testing.assert_allclose(data.bicubic_resize(x, f), value, atol=1e-9)


def test_bicubic_commutes_with_flips():
    x = np.random.default_rng(4).uniform(0, 255, (12, 9, 3))
    for f in (3, Fraction(1, 3)):
        np.testing.assert_allclose(data.bicubic_resize(x[::-1], f), data.bicubic_resize(x, f)[::-1], atol=1e-9)
        np.testing.assert_allclose(data.bicubic_resize(x[:, ::-1], f), data.bicubic_resize(x, f)[:, ::-1],
                                   atol=1e-9)


def test_bicubic_float_factor_and_errors():
    x = np.ones((6, 6, 1))
    assert data.bicubic_resize(x, 0.5).shape == (3, 3, 1)
    with pytest.raises(StructuralError):
        data.bicubic_resize(x, 0)
    with pytest.raises(StructuralError, match="less than one pixel"):
        data.bicubic_resize(np.ones((2, 2, 1)), Fraction(1, 3))


def test_synth_corpus_deterministic_and_full_range():
    a = data.synth_corpus(3, 8, 32)
    b = data.synth_corpus(3, 8, 32)
    c = data.synth_corpus(4, 8, 32)
    assert a.ids() == b.ids()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.tensors(), b.tensors()))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.tensors(), c.tensors()))
    kinds = {i.split("_")[-1] for i in a.ids()}
    assert kinds == set(data.PATTERNS)
    for t in a.tensors():
        assert t.shape == (32, 32, 3) and t.min() >= 0 and t.max() <= 255
        assert np.array_equal(t, np.round(t))
    with pytest.raises(StructuralError):
        data.synth_corpus(0, 0, 8)


def test_corpus_manifest_roundtrip(tmp_path):
    c = data.synth_corpus(5, 3, 24)
    data.write_corpus_manifest(c, tmp_path / "synth.json")
    back = data.load_corpus(tmp_path / "synth.json")
    assert back.ids() == c.ids()
    data.write_corpus_manifest(c, tmp_path / "files.json", image_dir=tmp_path / "imgs")
    files = data.load_corpus(tmp_path / "files.json")
    assert files.ids() == c.ids()
    for x, y in zip(files.tensors(), c.tensors()):
        np.testing.assert_array_equal(x, y)
    from_dir = data.load_corpus(tmp_path / "imgs")
    assert sorted(from_dir.ids()) == sorted(c.ids())


def test_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_corpus(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError, match="no .pgm"):
        data.load_corpus(tmp_path / "empty")
    (tmp_path / "bad.json").write_text('{"provenance": "synthetic", "seed": 1}')
    with pytest.raises(FormatError, match="missing"):
        data.load_corpus(tmp_path / "bad.json")
    with pytest.raises(StructuralError, match="duplicate"):
        data.Corpus("x", [("a", np.zeros((1, 1, 3))), ("a", np.zeros((1, 1, 3)))])


def test_modcrop_and_to_uint8():
    assert data.modcrop(np.zeros((10, 11, 3)), 3).shape == (9, 9, 3)
    np.testing.assert_array_equal(data.to_uint8(np.array([-1.0, 0.5, 1.5, 300.0])), [0, 0, 2, 255])
