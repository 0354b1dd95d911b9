import numpy as np
import pytest

from interpfool.pnm import PnmError, decode_pnm, encode_pnm, read_pnm, write_pnm


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pnm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pnm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_ppm_roundtrip():
    img = np.random.default_rng(0).integers(0, 256, (5, 2, 3), dtype=np.uint8)
    assert np.array_equal(decode_pnm(encode_pnm(img)), img)


def test_header_comments_and_maxval():
    buf = b"P5\n# a comment\n2 1\n# another\n15\n" + bytes([15, 0])
    assert decode_pnm(buf).tolist() == [[255, 0]]


@pytest.mark.parametrize("buf", [b"P3\n1 1\n255\n1", b"P5\n2 2\n255\n\x00", b"P5\n2", b"P5\n1 1\n300\n\x00"])
def test_decode_errors(buf):
    with pytest.raises(PnmError):
        decode_pnm(buf)


def test_encode_errors():
    with pytest.raises(PnmError):
        encode_pnm(np.zeros((2, 2), np.float32))
    with pytest.raises(PnmError):
        encode_pnm(np.zeros((2, 2, 4), np.uint8))
