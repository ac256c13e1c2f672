"""Download MNIST / CIFAR-10 / CIFAR-100 into the layout the loaders expect.

    data/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
    data/cifar10/data_batch_{1..5}.bin, data/cifar10/test_batch.bin
    data/cifar100/train.bin, data/cifar100/test.bin

Usage: python scripts/fetch_data.py [mnist] [cifar10] [cifar100] [--root DIR]
The library itself never touches the network; this script is the only place
that does.
"""

import argparse
import gzip
import shutil
import tarfile
import tempfile
import urllib.request
from pathlib import Path

MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
MNIST_FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR100_URL = "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz"


def _download(url, dest):
    print(f"fetching {url}")
    with urllib.request.urlopen(url) as r, open(dest, "wb") as f:
        shutil.copyfileobj(r, f)


def fetch_mnist(root):
    out = root / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    for name in MNIST_FILES:
        if (out / name).exists():
            continue
        gz = out / f"{name}.gz"
        _download(MNIST_URL + name + ".gz", gz)
        with gzip.open(gz) as src, open(out / name, "wb") as dst:
            shutil.copyfileobj(src, dst)
        gz.unlink()


def _fetch_tar(url, out, wanted):
    out.mkdir(parents=True, exist_ok=True)
    if all((out / w).exists() for w in wanted):
        return
    with tempfile.TemporaryDirectory() as tmp:
        archive = Path(tmp) / "a.tar.gz"
        _download(url, archive)
        with tarfile.open(archive) as tar:
            for member in tar.getmembers():
                name = Path(member.name).name
                if name in wanted:
                    with tar.extractfile(member) as src, open(out / name, "wb") as dst:
                        shutil.copyfileobj(src, dst)


def fetch_cifar10(root):
    wanted = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    _fetch_tar(CIFAR10_URL, root / "cifar10", wanted)


def fetch_cifar100(root):
    _fetch_tar(CIFAR100_URL, root / "cifar100", ["train.bin", "test.bin"])


FETCHERS = {"mnist": fetch_mnist, "cifar10": fetch_cifar10, "cifar100": fetch_cifar100}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("datasets", nargs="*", choices=sorted(FETCHERS), default=["mnist"])
    p.add_argument("--root", type=Path, default=Path("data"))
    args = p.parse_args()
    for name in args.datasets:
        FETCHERS[name](args.root)


if __name__ == "__main__":
    main()
