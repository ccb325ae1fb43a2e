#!/usr/bin/env python3
"""Build data/mnist10k-{images-idx3,labels-idx1}-ubyte.gz from the `mnist` npm package.

The npm package (cazala/mnist, MIT) ships 10,000 MNIST digits as JSON float arrays
grouped by label. This script restores byte pixels, shuffles with a fixed seed so
that contiguous splits mix all digits, and writes standard big-endian IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/build_mnist_subset.py package/src/digits data/
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: Path, out: Path) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        arr = np.asarray(flat, dtype=np.float64).reshape(-1, 784)
        images.append(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8))
        labels.append(np.full(arr.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.RandomState(20160601).permutation(len(labels))
    images, labels = images[perm], labels[perm]

    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
