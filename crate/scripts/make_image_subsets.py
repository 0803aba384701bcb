#!/usr/bin/env python3
"""Build gzipped IDX subsets of MNIST and FashionMNIST from the npm `mnist`
and `fashion-mnist` packages (obtain them with `npm pack mnist fashion-mnist`).

Usage: make_image_subsets.py MNIST_PKG_DIR FASHION_PKG_DIR OUT_DIR
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, images, labels):
    with gzip.GzipFile(str(path) + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(str(path) + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    mnist_dir, fashion_dir, out = map(Path, sys.argv[1:4])
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20211)

    digits = []
    for k in range(10):
        flat = json.loads((mnist_dir / "src" / "digits" / f"{k}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            digits.append((px, k))
    rng.shuffle(digits)
    train, test = digits[:5000], digits[5000:6000]
    write_idx(out / "mnist-train", [p for p, _ in train], [l for _, l in train])
    write_idx(out / "mnist-test", [p for p, _ in test], [l for _, l in test])

    clothes = []
    for k in range(10):
        imgs = json.loads((fashion_dir / "src" / "clothes" / f"{k}.json").read_text())["data"]
        rng.shuffle(imgs)
        clothes.extend((img, k) for img in imgs[:100])
    rng.shuffle(clothes)
    write_idx(out / "fashion-test", [p for p, _ in clothes], [l for _, l in clothes])


if __name__ == "__main__":
    main()
