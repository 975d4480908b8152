#!/usr/bin/env python3
"""Build IDX-format MNIST files from the 10k-digit subset bundled in the npm
`mnist` package (for sandboxes where the canonical MNIST mirrors are
unreachable).

Writes train-{images-idx3,labels-idx1}-ubyte.gz (8000 examples) and
t10k-{images-idx3,labels-idx1}-ubyte.gz (2000 examples) into the output
directory. The split is a fixed-seed shuffle, so reruns are byte-identical.
"""
import argparse
import gzip
import io
import json
import random
import struct
import tarfile
import os
import urllib.request

URL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"


def load_digits(tgz_bytes):
    samples = []
    with tarfile.open(fileobj=io.BytesIO(tgz_bytes), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            data = json.load(member)["data"]
            for i in range(len(data) // 784):
                pixels = bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784])
                samples.append((pixels, digit))
    return samples


def write(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=20160714)
    ap.add_argument("--tarball", help="local copy of the npm tarball (skips the download)")
    args = ap.parse_args()

    if args.tarball:
        with open(args.tarball, "rb") as f:
            tgz = f.read()
    else:
        tgz = urllib.request.urlopen(URL, timeout=120).read()
    samples = load_digits(tgz)
    random.Random(args.seed).shuffle(samples)
    splits = {"train": samples[: args.train], "t10k": samples[args.train:]}
    os.makedirs(args.out, exist_ok=True)
    for name, rows in splits.items():
        images = b"".join(p for p, _ in rows)
        labels = bytes(d for _, d in rows)
        write(f"{args.out}/{name}-images-idx3-ubyte.gz", 0x803, [len(rows), 28, 28], images)
        write(f"{args.out}/{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)], labels)
        print(f"{name}: {len(rows)} examples")


if __name__ == "__main__":
    main()
