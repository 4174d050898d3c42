import csv

import numpy as np
import pytest
from PIL import Image

from src.services.figures import (
    emit_attention,
    emit_mel_pair,
    normalize_image,
    write_curve_csv,
    write_matrix_csv,
    write_pgm,
)


def test_normalize_image_spans_full_range():
    out = normalize_image(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert out.dtype == np.uint8
    assert out.min() == 0 and out.max() == 255
    assert not normalize_image(np.full((2, 2), 7.0)).any()


def test_pgm_orientation(tmp_path):
    mel = np.zeros((4, 3))  # 4 frames, 3 bins
    mel[0, 0] = 1.0
    path = str(tmp_path / "m.pgm")
    write_pgm(path, mel)
    with Image.open(path) as img:
        assert img.format == "PPM"
        assert img.mode == "L"
        assert img.size == (4, 3)
        pixels = np.array(img)
    # frame 0 at the left, bin 0 at the bottom
    assert pixels[-1, 0] == 255
    assert pixels.sum() == 255


def test_pgm_rejects_non_matrices(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(str(tmp_path / "x.pgm"), np.zeros(3))
    with pytest.raises(ValueError):
        write_pgm(str(tmp_path / "x.pgm"), np.zeros((0, 3)))


def test_mel_pair_and_attention_paths(tmp_path, rng):
    gt, syn = emit_mel_pair(str(tmp_path / "fig"), "utt00001", rng.normal(size=(5, 4)), rng.normal(size=(6, 4)))
    att = emit_attention(str(tmp_path / "fig"), "utt00001", rng.uniform(size=(3, 7)))
    assert gt.endswith("utt00001.gt.pgm")
    assert syn.endswith("utt00001.syn.pgm")
    with Image.open(att) as img:
        assert img.size == (3, 7)


def test_csv_writers(tmp_path):
    matrix_path = tmp_path / "m.csv"
    write_matrix_csv(str(matrix_path), np.array([[0.5, 1.0], [2.0, -1.0]]))
    with open(matrix_path, encoding="utf-8") as f:
        assert [[float(v) for v in row] for row in csv.reader(f)] == [[0.5, 1.0], [2.0, -1.0]]

    curve_path = tmp_path / "c.csv"
    write_curve_csv(str(curve_path), {"train": [1.0, 0.5, 0.25], "val": [0.9]})
    with open(curve_path, encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["index", "train", "val"]
    assert rows[1] == ["0", "1.0", "0.9"]
    assert rows[3] == ["2", "0.25", ""]
