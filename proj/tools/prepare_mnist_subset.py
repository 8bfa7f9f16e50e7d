#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the default configs.

Source is the 5000-image MNIST sample bundled with the mlxtend wheel
(500 images per class). The script writes a stratified train/test split in
the standard IDX layout (gzip-compressed) plus a manifest.json recording
split sizes and SHA-256 checksums, which the C++ loader verifies.

Usage:
    python3 tools/prepare_mnist_subset.py --out data/mnist5k [--wheel PATH]

Without --wheel the mlxtend wheel is fetched with `pip download`.
"""
import argparse
import gzip
import hashlib
import io
import json
import pathlib
import struct
import subprocess
import tempfile
import zipfile

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(tmp: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        ["pip", "download", "--no-deps", "-q", "mlxtend", "-d", str(tmp)],
        check=True,
    )
    wheels = sorted(tmp.glob("mlxtend-*.whl"))
    if not wheels:
        raise SystemExit("pip download did not produce an mlxtend wheel")
    return wheels[-1]


def write_idx_images(path: pathlib.Path, images: np.ndarray) -> None:
    n, h, w = images.shape
    header = struct.pack(">IIII", 0x00000803, n, h, w)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + images.astype(np.uint8).tobytes())


def write_idx_labels(path: pathlib.Path, labels: np.ndarray) -> None:
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + labels.astype(np.uint8).tobytes())


def sha256(path: pathlib.Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--wheel")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = pathlib.Path(args.wheel) if args.wheel else fetch_wheel(pathlib.Path(tmp))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    pixels = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.int64)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        test_idx.extend(idx[: args.test_per_class])
        train_idx.extend(idx[args.test_per_class:])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    files = {
        "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz", train_idx),
        "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz", test_idx),
    }
    manifest = {
        "name": "mnist",
        "num_classes": 10,
        "image_shape": [1, 28, 28],
        "source": "mlxtend mnist_5k sample of MNIST",
        "splits": {},
    }
    for split, (img_name, lbl_name, idx) in files.items():
        write_idx_images(out / img_name, pixels[idx])
        write_idx_labels(out / lbl_name, labels[idx])
        manifest["splits"][split] = {
            "images": img_name,
            "labels": lbl_name,
            "count": int(len(idx)),
            "sha256": {img_name: sha256(out / img_name), lbl_name: sha256(out / lbl_name)},
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main()
