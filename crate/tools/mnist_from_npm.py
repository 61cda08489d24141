#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the `mnist` npm package (10 000 MNIST digits).

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist

Pixels in the package are rounded to three decimals; they are mapped back to
bytes with round(v * 255). The 10 000 digits are shuffled with a fixed seed and
split 9 000 / 1 000 into train / test IDX files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        for k in range(len(data) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784])
            samples.append((px, digit))
    random.Random(20240101).shuffle(samples)
    splits = {"train": samples[:9000], "t10k": samples[9000:]}
    for name, rows in splits.items():
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(rows), 28, 28],
                  b"".join(px for px, _ in rows))
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)],
                  bytes(lbl for _, lbl in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
