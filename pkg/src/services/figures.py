"""Run figures: mel and attention images (PGM via Pillow) and CSV dumps."""
import csv
import logging
import os
from typing import Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


def normalize_image(matrix: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (a constant matrix becomes all zeros)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    low, high = float(matrix.min()), float(matrix.max())
    if high - low <= 0:
        return np.zeros(matrix.shape, dtype=np.uint8)
    return np.round((matrix - low) / (high - low) * 255.0).astype(np.uint8)


def write_pgm(path: str, matrix: np.ndarray) -> None:
    """A T x F matrix becomes a T-wide, F-high grayscale image with bin 0 at the bottom."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or 0 in matrix.shape:
        raise ValueError(f"Image matrix must be non-empty 2-D, got {matrix.shape}")
    pixels = np.flipud(normalize_image(matrix).T)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")


def write_matrix_csv(path: str, matrix: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        for row in np.asarray(matrix):
            writer.writerow([repr(float(v)) for v in row])


def write_curve_csv(path: str, columns: dict[str, Sequence[float]]) -> None:
    """Loss curves: one column per series, rows by epoch/step index."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    names = list(columns)
    length = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", *names])
        for i in range(length):
            writer.writerow([i, *(repr(float(columns[n][i])) if i < len(columns[n]) else "" for n in names)])


def emit_mel_pair(out_dir: str, utt_id: str, truth: np.ndarray, synthetic: np.ndarray) -> tuple[str, str]:
    """Ground-truth and synthetic mel images sharing the utterance id stem."""
    gt_path = os.path.join(out_dir, f"{utt_id}.gt.pgm")
    syn_path = os.path.join(out_dir, f"{utt_id}.syn.pgm")
    write_pgm(gt_path, truth)
    write_pgm(syn_path, synthetic)
    return gt_path, syn_path


def emit_attention(out_dir: str, utt_id: str, attention: np.ndarray) -> str:
    """Decoder steps along the width, encoder positions along the height."""
    path = os.path.join(out_dir, f"{utt_id}.att.pgm")
    write_pgm(path, attention)
    return path
