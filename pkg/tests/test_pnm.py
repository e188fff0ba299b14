"""PGM/PPM round-trip, header grammar, and dump-naming tests."""

import numpy as np
import pytest

from triggerscope import pnm
from triggerscope.errors import InputError
from triggerscope.inversion import MentalImage

STEP = 0.5 / 65535  # half a quantization step


def test_gray_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(1, 9, 7)).astype(np.float32)
    path = tmp_path / "img.pgm"
    pnm.write_pnm(path, image)
    back = pnm.read_pnm(path)
    assert back.shape == (1, 9, 7) and back.dtype == np.float32
    assert np.max(np.abs(back - image)) <= STEP


def test_color_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(3, 5, 4)).astype(np.float32)
    path = tmp_path / "img.ppm"
    pnm.write_pnm(path, image)
    back = pnm.read_pnm(path)
    assert back.shape == (3, 5, 4)
    assert np.max(np.abs(back - image)) <= STEP


def test_quantized_values_round_trip_exactly(tmp_path):
    image = (np.arange(12, dtype=np.float32).reshape(1, 3, 4) * 4000) / 65535
    path = tmp_path / "exact.pgm"
    pnm.write_pnm(path, image)
    assert np.array_equal(pnm.read_pnm(path), image)


def test_header_layout_and_size(tmp_path):
    path = tmp_path / "img.pgm"
    pnm.write_pnm(path, np.zeros((1, 9, 7), dtype=np.float32))
    data = path.read_bytes()
    assert data.startswith(b"P5\n7 9\n65535\n")  # width before height
    assert len(data) == len(b"P5\n7 9\n65535\n") + 2 * 9 * 7


def test_reader_accepts_comments_and_8bit(tmp_path):
    path = tmp_path / "hand.pgm"
    path.write_bytes(b"P5 # comment\n# another\n 3\t2 \n255\n" + bytes([0, 51, 102, 153, 204, 255]))
    back = pnm.read_pnm(path)
    assert back.shape == (1, 2, 3)
    assert np.allclose(back.reshape(-1), np.array([0, 51, 102, 153, 204, 255]) / 255.0)


def test_reader_rejects_bad_files(tmp_path):
    bad_magic = tmp_path / "a.pgm"
    bad_magic.write_bytes(b"P4\n3 2\n255\n" + bytes(6))
    with pytest.raises(InputError):
        pnm.read_pnm(bad_magic)
    truncated = tmp_path / "b.pgm"
    truncated.write_bytes(b"P5\n3 2\n65535\n" + bytes(5))
    with pytest.raises(InputError):
        pnm.read_pnm(truncated)
    nonnumeric = tmp_path / "c.pgm"
    nonnumeric.write_bytes(b"P5\nthree 2\n255\n" + bytes(6))
    with pytest.raises(InputError):
        pnm.read_pnm(nonnumeric)
    huge_maxval = tmp_path / "d.pgm"
    huge_maxval.write_bytes(b"P5\n3 2\n70000\n" + bytes(12))
    with pytest.raises(InputError):
        pnm.read_pnm(huge_maxval)


def test_writer_rejects_bad_images(tmp_path):
    path = tmp_path / "x.pgm"
    with pytest.raises(InputError):
        pnm.write_pnm(path, np.zeros((2, 4, 4)))  # unsupported channel count
    with pytest.raises(InputError):
        pnm.write_pnm(path, np.full((1, 4, 4), 1.5))
    with pytest.raises(InputError):
        pnm.write_pnm(path, np.full((1, 4, 4), np.nan))


def test_dump_mental_images_naming(tmp_path):
    rng = np.random.default_rng(2)
    images = [MentalImage(rng.uniform(size=(1, 4, 4)).astype(np.float32), lab, tri, 0.0, lab)
              for lab, tri in [(0, 0), (0, 1), (7, 3)]]
    paths = pnm.dump_mental_images(images, tmp_path)
    assert [p.name for p in paths] == ["0_0.pgm", "0_1.pgm", "7_3.pgm"]
    assert all(p.exists() for p in paths)
    assert pnm.read_pnm(paths[2]).shape == (1, 4, 4)
