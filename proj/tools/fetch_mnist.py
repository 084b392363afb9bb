#!/usr/bin/env python3
"""Prepare MNIST in IDX format under data/mnist/.

Two sources are supported:

  --official DIR   a directory holding the four official MNIST files
                   (train-images-idx3-ubyte.gz, ...); they are copied as-is.
  --mlxtend        the 5,000-sample MNIST subset bundled in the mlxtend wheel
                   (fetched through pip). The subset ships sorted by class, so
                   it is shuffled once with a fixed seed and split 4,000 train /
                   1,000 test before being written as gzipped IDX files.

A SHA256SUMS file is written next to the data; the C++ loader verifies it.
"""
import argparse
import gzip
import hashlib
import io
import pathlib
import shutil
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def write_idx_images(path, images):
    n, h, w = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def from_mlxtend(out, seed, n_train):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "mlxtend==0.24.0", "-d", tmp],
            stdout=subprocess.DEVNULL,
        )
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.int64)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    write_idx_images(out / FILES[0], images[:n_train])
    write_idx_labels(out / FILES[1], labels[:n_train])
    write_idx_images(out / FILES[2], images[n_train:])
    write_idx_labels(out / FILES[3], labels[n_train:])


def write_checksums(out):
    lines = [f"{hashlib.sha256((out / name).read_bytes()).hexdigest()}  {name}\n" for name in sorted(FILES)]
    (out / "SHA256SUMS").write_text("".join(lines))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--official", type=pathlib.Path)
    src.add_argument("--mlxtend", action="store_true")
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=4000)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    if args.official:
        for name in FILES:
            shutil.copyfile(args.official / name, args.out / name)
    else:
        from_mlxtend(args.out, args.seed, args.n_train)
    write_checksums(args.out)
    print(f"wrote {', '.join(FILES)} to {args.out}")


if __name__ == "__main__":
    main()
