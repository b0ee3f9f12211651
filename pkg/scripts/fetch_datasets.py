#!/usr/bin/env python3
"""Download MNIST and CIFAR10 into the layout ``marksman.datasets`` reads.

GTSRB is not fetched: arrange it manually as ``<root>/gtsrb/{train,test}/<class_id>/*``.

Usage:
    python scripts/fetch_datasets.py [--root DATA_ROOT] [mnist] [cifar10]
"""

import argparse
import logging
import os
import sys
import tarfile
from pathlib import Path
from typing import Dict, List

import requests
from tqdm import tqdm

logger = logging.getLogger("fetch_datasets")

MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
MNIST_FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"


class DatasetFetcher:
    """Streams dataset archives into a data root, skipping files already present."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.session = requests.Session()
        self.session.headers.update({"User-Agent": "marksman/0.1.0 (dataset-fetch)"})

    def download_file(self, url: str, path: Path) -> Path:
        """Download ``url`` to ``path``; an existing file is reused.

        Raises:
            requests.RequestException: If download fails
        """
        if path.exists():
            logger.info(f"Using cached file: {path}")
            return path

        path.parent.mkdir(parents=True, exist_ok=True)
        partial = path.with_name(path.name + ".part")
        logger.info(f"Downloading {url} to {path}")
        try:
            response = self.session.get(url, stream=True, timeout=60)
            response.raise_for_status()
            total = int(response.headers.get("content-length", 0)) or None
            progress = tqdm(total=total, unit="B", unit_scale=True, desc=path.name)
            with open(partial, "wb") as f, progress as bar:
                for chunk in response.iter_content(chunk_size=1 << 16):
                    f.write(chunk)
                    bar.update(len(chunk))
            os.replace(partial, path)
        except requests.RequestException as e:
            logger.error(f"Failed to download {url}: {e}")
            if partial.exists():
                partial.unlink()
            raise
        return path

    def fetch_mnist(self) -> List[Path]:
        directory = self.root / "mnist"
        return [
            self.download_file(f"{MNIST_MIRROR}/{name}", directory / name)
            for name in MNIST_FILES
        ]

    def fetch_cifar10(self) -> List[Path]:
        target = self.root / "cifar-10-batches-py"
        if (target / "test_batch").exists():
            logger.info(f"CIFAR10 already extracted in {target}")
            return [target]
        archive = self.download_file(CIFAR10_URL, self.root / "cifar-10-python.tar.gz")
        logger.info(f"Extracting {archive}")
        with tarfile.open(archive, "r:gz") as tar:
            members = [
                m
                for m in tar.getmembers()
                if m.name.startswith("cifar-10-batches-py/")
            ]
            tar.extractall(self.root, members=members)
        return [target]


FETCHERS: Dict[str, str] = {"mnist": "fetch_mnist", "cifar10": "fetch_cifar10"}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--root",
        type=Path,
        default=Path(os.environ.get("MARKSMAN_DATA_ROOT", "data")),
        help="dataset root (default $MARKSMAN_DATA_ROOT or ./data)",
    )
    parser.add_argument(
        "datasets", nargs="*", choices=sorted(FETCHERS), default=sorted(FETCHERS)
    )
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    fetcher = DatasetFetcher(args.root)
    try:
        for name in args.datasets:
            getattr(fetcher, FETCHERS[name])()
    except (requests.RequestException, tarfile.TarError, OSError) as e:
        logger.error(f"Fetch failed: {e}")
        return 1
    logger.info(f"Datasets ready under {args.root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
