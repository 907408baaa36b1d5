#!/usr/bin/env python3
"""Download MNIST, FashionMNIST and CIFAR-10 into the layout `fedte run` expects.

Usage: python scripts/fetch_data.py [--root data] [--datasets mnist fashion cifar10]

Requires network access; the library itself never downloads anything.
"""

import argparse
import gzip
import os
import shutil
import tarfile
import urllib.request

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)

SOURCES = {
    "mnist": [
        f"https://ossci-datasets.s3.amazonaws.com/mnist/{name}"
        for name in MNIST_FILES
    ],
    "fashion": [
        f"http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/{name}"
        for name in MNIST_FILES
    ],
    "cifar10": ["https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"],
}


def fetch(url, dest):
    if os.path.exists(dest):
        print(f"exists: {dest}")
        return
    print(f"downloading {url}")
    tmp = dest + ".part"
    with urllib.request.urlopen(url) as response, open(tmp, "wb") as out:
        shutil.copyfileobj(response, out)
    os.rename(tmp, dest)


def gunzip(path):
    target = path[:-3]
    if not os.path.exists(target):
        with gzip.open(path, "rb") as src, open(target, "wb") as dst:
            shutil.copyfileobj(src, dst)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", default="data")
    parser.add_argument("--datasets", nargs="+", default=list(SOURCES),
                        choices=list(SOURCES))
    args = parser.parse_args()

    for name in args.datasets:
        out_dir = os.path.join(args.root, name)
        os.makedirs(out_dir, exist_ok=True)
        for url in SOURCES[name]:
            dest = os.path.join(out_dir, url.rsplit("/", 1)[1])
            fetch(url, dest)
            if dest.endswith(".gz") and not dest.endswith(".tar.gz"):
                gunzip(dest)
            elif dest.endswith(".tar.gz"):
                with tarfile.open(dest) as tar:
                    tar.extractall(out_dir)
        print(f"ready: {out_dir}")


if __name__ == "__main__":
    main()
