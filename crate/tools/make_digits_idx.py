#!/usr/bin/env python3
"""Regenerate fixtures/digits from the UCI Optical Recognition of Handwritten
Digits dataset bundled with scikit-learn.

Produces MNIST-layout IDX files (big-endian headers, u8 payload):
  train-images-idx3-ubyte / train-labels-idx1-ubyte   (1437 samples)
  test-images-idx3-ubyte  / test-labels-idx1-ubyte    (360 samples)

Pixels are rescaled from the source range 0..16 to 0..255 and upscaled
2x with nearest-neighbor to 16x16 (exact u8 values preserved). The split is
deterministic: every fifth sample (index % 5 == 0) goes to the test set.
"""

import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

OUT = Path(__file__).resolve().parent.parent / "fixtures" / "digits"


def write_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    digits = load_digits()
    images = digits.images  # (1797, 8, 8), values 0..16
    labels = digits.target  # (1797,)

    scaled = np.round(images * (255.0 / 16.0)).clip(0, 255).astype(np.uint8)
    scaled = scaled.repeat(2, axis=1).repeat(2, axis=2)  # 8x8 -> 16x16

    idx = np.arange(len(labels))
    test_mask = idx % 5 == 0

    OUT.mkdir(parents=True, exist_ok=True)
    write_images(OUT / "train-images-idx3-ubyte", scaled[~test_mask])
    write_labels(OUT / "train-labels-idx1-ubyte", labels[~test_mask])
    write_images(OUT / "test-images-idx3-ubyte", scaled[test_mask])
    write_labels(OUT / "test-labels-idx1-ubyte", labels[test_mask])

    print(f"train: {int((~test_mask).sum())} samples, test: {int(test_mask.sum())} samples")
    for c in range(10):
        print(f"  class {c}: train={int((labels[~test_mask] == c).sum())} test={int((labels[test_mask] == c).sum())}")


if __name__ == "__main__":
    main()
