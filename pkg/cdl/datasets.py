"""Dataset ingestion: MNIST idx files (downloaded on demand) and synthetic clusters."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import httpx
import numpy as np

from cdl.config import TrainConfig, settings
from cdl.constants import MNIST_FILES
from cdl.utils import atomic_write_bytes, make_rng


logger = logging.getLogger(__name__)

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

_IMAGES_MAGIC = 2051
_LABELS_MAGIC = 2049


class DatasetError(Exception):
    """Raised when a dataset cannot be downloaded or parsed."""
    pass


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])


def download_file(url: str, destination: Path) -> None:
    """
    Fetch one file over HTTP(S) into the cache.

    Uses the configured proxy, SSL verification and timeout.

    Raises:
        DatasetError: On any transport or HTTP status error
    """
    timeout = httpx.Timeout(settings.download_timeout, connect=10.0)
    logger.info(f"Downloading {url}")
    logger.debug(f"Proxy: {'Configured' if settings.proxy_url else 'Not configured'}")
    try:
        with httpx.Client(
            follow_redirects=True,
            timeout=timeout,
            verify=settings.verify_ssl,
            proxy=settings.proxy_url,
        ) as client:
            response = client.get(url)
            response.raise_for_status()
    except httpx.HTTPError as e:
        logger.error(f"Download failed for {url}: {e}")
        raise DatasetError(f"Failed to download {url}: {e}") from e

    atomic_write_bytes(destination, response.content)
    logger.info(f"Saved {destination} ({len(response.content)} bytes)")


def _read_idx(path: Path, magic: int) -> np.ndarray:
    try:
        with gzip.open(path, "rb") as fh:
            data = fh.read()
    except (OSError, EOFError) as e:
        raise DatasetError(f"Failed to read {path}: {e}") from e

    if len(data) < 8 or struct.unpack(">I", data[:4])[0] != magic:
        raise DatasetError(f"{path} is not an idx file with magic {magic}")
    dims = magic & 0xFF
    shape = struct.unpack(f">{dims}I", data[4:4 + 4 * dims])
    payload = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * dims)
    if payload.size != int(np.prod(shape)):
        raise DatasetError(f"{path} holds {payload.size} values, header says {shape}")
    return payload.reshape(shape)


def load_mnist(data_dir: Optional[str | Path] = None, train_subset: Optional[int] = None,
               test_subset: Optional[int] = None, download: bool = True) -> Dataset:
    """
    Load MNIST from the cache directory, downloading missing files.

    Images are scaled to [0, 1], standardized and shaped (N, 1, 28, 28).

    Args:
        data_dir: Cache directory (defaults to settings.data_dir)
        train_subset: Keep only the first n training samples
        test_subset: Keep only the first n test samples
        download: Fetch missing files from settings.mnist_base_url

    Returns:
        Dataset: MNIST splits

    Raises:
        DatasetError: If files are missing and cannot be fetched, or malformed
    """
    cache = Path(data_dir or settings.data_dir) / "mnist"
    paths = {}
    for key, filename in MNIST_FILES.items():
        path = cache / filename
        if not path.exists():
            if not download:
                raise DatasetError(f"Missing dataset file {path}")
            download_file(settings.mnist_base_url.rstrip("/") + "/" + filename, path)
        paths[key] = path

    def images(key: str, limit: Optional[int]) -> np.ndarray:
        raw = _read_idx(paths[key], _IMAGES_MAGIC)[:limit]
        scaled = raw.astype(np.float64) / 255.0
        return ((scaled - MNIST_MEAN) / MNIST_STD)[:, None, :, :]

    def labels(key: str, limit: Optional[int]) -> np.ndarray:
        return _read_idx(paths[key], _LABELS_MAGIC)[:limit].astype(np.int64)

    dataset = Dataset(
        name="mnist",
        train_x=images("train_images", train_subset),
        train_y=labels("train_labels", train_subset),
        test_x=images("test_images", test_subset),
        test_y=labels("test_labels", test_subset),
        classes=10,
    )
    logger.info(f"MNIST loaded: {len(dataset.train_y)} train / {len(dataset.test_y)} test samples")
    return dataset


def synthetic_clusters(classes: int, train: int, test: int, image_size: int,
                       rng: np.random.Generator, noise: float = 0.6) -> Dataset:
    """
    Gaussian clusters around random class prototypes, shaped like images.

    Args:
        classes: Number of classes (one prototype each)
        train: Training samples
        test: Test samples
        image_size: Side of the (1, size, size) samples
        rng: Generator stream
        noise: Standard deviation around each prototype

    Returns:
        Dataset: Hermetic dataset for tests and CI
    """
    prototypes = rng.normal(0.0, 1.0, size=(classes, 1, image_size, image_size))

    def draw(count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(count) % classes
        rng.shuffle(labels)
        samples = prototypes[labels] + rng.normal(0.0, noise, size=(count, 1, image_size, image_size))
        return samples, labels.astype(np.int64)

    train_x, train_y = draw(train)
    test_x, test_y = draw(test)
    return Dataset(name="synthetic", train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y, classes=classes)


def load_dataset(config: TrainConfig, data_dir: Optional[str | Path] = None) -> Dataset:
    """Load the dataset a run config names."""
    if config.dataset == "synthetic":
        dataset = synthetic_clusters(config.synthetic_classes, config.synthetic_train, config.synthetic_test,
                                     config.synthetic_image_size, make_rng(config.seed, 4))
        if config.train_subset:
            dataset.train_x, dataset.train_y = dataset.train_x[:config.train_subset], dataset.train_y[:config.train_subset]
        if config.test_subset:
            dataset.test_x, dataset.test_y = dataset.test_x[:config.test_subset], dataset.test_y[:config.test_subset]
        return dataset
    return load_mnist(data_dir, config.train_subset, config.test_subset)


def iterate_minibatches(x: np.ndarray, y: np.ndarray, batch_size: int,
                        rng: Optional[np.random.Generator] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, labels) batches, shuffled when a generator is given; the last batch may be short."""
    order = rng.permutation(len(y)) if rng is not None else np.arange(len(y))
    for start in range(0, len(y), batch_size):
        rows = order[start:start + batch_size]
        yield x[rows], y[rows]
