#!/usr/bin/env python3
"""Write MNIST as gzipped IDX files into data/mnist/.

The official mirrors are not always reachable; the `mnist-data` npm package
carries the four original IDX files byte for byte. They are gzipped with
mtime 0 so regenerated archives are identical.

    python3 scripts/fetch_mnist.py [mnist-data-1.2.6.tgz] [out_dir]
"""
import gzip
import io
import os
import sys
import tarfile
import urllib.request

URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
FILES = [
    ("train-images-idx3-ubyte", 47040016),
    ("train-labels-idx1-ubyte", 60008),
    ("t10k-images-idx3-ubyte", 7840016),
    ("t10k-labels-idx1-ubyte", 10008),
]
# per-class counts of the official train / test splits
TRAIN_COUNTS = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
TEST_COUNTS = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]


def main():
    src = sys.argv[1] if len(sys.argv) > 1 else None
    out = sys.argv[2] if len(sys.argv) > 2 else "data/mnist"
    blob = open(src, "rb").read() if src else urllib.request.urlopen(URL).read()
    tar = tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz")
    os.makedirs(out, exist_ok=True)
    for name, size in FILES:
        data = tar.extractfile(f"package/data/{name}").read()
        assert len(data) == size, (name, len(data))
        if "labels" in name:
            counts = [data[8:].count(bytes([c])) for c in range(10)]
            assert counts == (TRAIN_COUNTS if name.startswith("train") else TEST_COUNTS), counts
        with open(f"{out}/{name}.gz", "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as gz:
                gz.write(data)
        print(name, len(data))


if __name__ == "__main__":
    main()
