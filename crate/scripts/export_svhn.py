#!/usr/bin/env python3
"""Convert SVHN cropped-digit .mat files into a lobit dataset directory.

Usage:
    python3 scripts/export_svhn.py train_32x32.mat test_32x32.mat OUT_DIR [--limit N]

Writes train_images.lbd, train_labels.lbd, test_images.lbd and
test_labels.lbd. Images are stored as u8 [N, 3, 32, 32] (lobit scales them
to [0, 1] on load); labels as u8 [N] with the digit 0 mapped from SVHN's 10.
Needs numpy and scipy.
"""

import argparse
import struct
from pathlib import Path

import numpy as np
from scipy.io import loadmat

MAGIC = b"LOBITDS1"
DTYPE_U8 = 0


def write_array(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", DTYPE_U8, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(array.tobytes())


def convert(mat_path: Path, limit: int | None) -> tuple[np.ndarray, np.ndarray]:
    mat = loadmat(mat_path)
    images = np.transpose(mat["X"], (3, 2, 0, 1))  # [H, W, C, N] -> [N, C, H, W]
    labels = mat["y"].reshape(-1) % 10
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("train_mat", type=Path)
    parser.add_argument("test_mat", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--limit", type=int, default=None, help="keep the first N samples of each split")
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, mat in (("train", args.train_mat), ("test", args.test_mat)):
        images, labels = convert(mat, args.limit)
        write_array(args.out_dir / f"{split}_images.lbd", images)
        write_array(args.out_dir / f"{split}_labels.lbd", labels)
        print(f"{split}: {images.shape[0]} samples")


if __name__ == "__main__":
    main()
