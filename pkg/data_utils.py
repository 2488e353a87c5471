"""
Training data ingestion.

Reads the MNIST IDX files, plain or gzipped, and CSV bit matrices into binary
datasets. Every Dataset carries a SHA-256 digest of its source and of the
transformations applied to it.
"""
import enum
import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# file stems searched by load_mnist, with or without a .gz suffix
MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


class DataError(Exception):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class Binarization(enum.Enum):
    # pixel >= 128 -> 1
    THRESHOLD = 'threshold'
    # pixel / 255 used as a Bernoulli probability
    STOCHASTIC = 'stochastic'


@dataclass
class RawImages:
    images: np.ndarray
    labels: Optional[np.ndarray]
    shape: tuple
    source_digest: str

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    source_digest: str = ''

    def __post_init__(self):
        self.images = np.atleast_2d(np.asarray(self.images, dtype=np.uint8))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != self.images.shape[0]:
                raise CountMismatch(f"{self.images.shape[0]} images but {len(self.labels)} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_visible(self) -> int:
        return self.images.shape[1]


def _derive(*parts: str) -> str:
    return hashlib.sha256(':'.join(parts).encode()).hexdigest()


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == '.gz':
            with gzip.open(path, 'rb') as f:
                return f.read()
        return path.read_bytes()
    except FileNotFoundError:
        logger.error(f"File not found: {path}")
        raise
    except (OSError, EOFError) as e:
        logger.error(f"Could not read {path}: {e}")
        raise TruncatedFile(f"{path}: {e}") from e


def parse_idx(content: bytes, expected_magic: int, name: str = '<bytes>') -> tuple:
    '''
    Parses the bytes of an IDX file holding unsigned bytes.

    Args:
        content: bytes - The whole file.
        expected_magic: int - IMAGES_MAGIC or LABELS_MAGIC.
        name: str - Used in error messages.

    Returns:
        tuple - (dimensions, payload as a flat uint8 array)

    Raises:
        BadMagic: If the magic number differs from expected_magic.
        TruncatedFile: If the header or payload is shorter than the dimensions say.
    '''
    if len(content) < 4:
        raise TruncatedFile(f"{name}: {len(content)} bytes, too short for an IDX header")
    (magic,) = struct.unpack('>I', content[:4])
    if magic != expected_magic:
        raise BadMagic(f"{name}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(content) < header:
        raise TruncatedFile(f"{name}: header needs {header} bytes, file has {len(content)}")
    dims = struct.unpack(f'>{n_dims}I', content[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(content) - header
    if payload < expected:
        raise TruncatedFile(f"{name}: expected {expected} data bytes, found {payload}")
    if payload > expected:
        logger.warning(f"{name}: {payload - expected} trailing bytes ignored")
    return dims, np.frombuffer(content, dtype=np.uint8, count=expected, offset=header)


def load_idx(images_path, labels_path=None) -> RawImages:
    '''
    Loads an IDX image file and, optionally, its label file. Gzipped files are
    read transparently when their name ends in .gz.

    Args:
        images_path: str | Path - IDX file with magic 0x00000803.
        labels_path: str | Path - IDX file with magic 0x00000801, or None.

    Returns:
        RawImages - images as an (N, rows * cols) uint8 array of raw pixel bytes.

    Raises:
        ValueError: If images_path is not provided.
        FileNotFoundError: If a file does not exist.
        BadMagic, TruncatedFile: If a file is not a valid IDX file.
        CountMismatch: If the label count differs from the image count.
    '''
    if not images_path:
        raise ValueError("Images path is required")

    digest = hashlib.sha256()
    content = _read_bytes(images_path)
    digest.update(content)
    dims, pixels = parse_idx(content, IMAGES_MAGIC, str(images_path))
    n, rows, cols = dims
    images = pixels.reshape(n, rows * cols)

    labels = None
    if labels_path:
        content = _read_bytes(labels_path)
        digest.update(content)
        (n_labels,), labels = parse_idx(content, LABELS_MAGIC, str(labels_path))
        if n_labels != n:
            raise CountMismatch(f"{images_path} has {n} images but {labels_path} has {n_labels} labels")
        labels = labels.astype(np.int64)

    logger.info(f"Loaded {n} images of {rows}x{cols} from {images_path}")
    return RawImages(images=images, labels=labels, shape=(rows, cols), source_digest=digest.hexdigest())


def write_idx(path, data, shape: tuple = None) -> Path:
    '''
    Writes unsigned bytes as an IDX file: a 1-d array as labels, a 2-d array of
    flattened images (with shape=(rows, cols)) or a 3-d array as images.
    Gzipped output, with a zero timestamp, when the name ends in .gz.

    Returns:
        Path - The path written.
    '''
    data = np.asarray(data)
    if data.ndim == 1:
        magic, dims = LABELS_MAGIC, data.shape
    elif data.ndim == 2:
        if shape is None:
            raise ValueError("Shape (rows, cols) is required for flattened images")
        magic, dims = IMAGES_MAGIC, (data.shape[0],) + tuple(shape)
    elif data.ndim == 3:
        magic, dims = IMAGES_MAGIC, data.shape
    else:
        raise ValueError(f"Cannot write a {data.ndim}-d array as IDX")
    if int(np.prod(dims)) != data.size:
        raise ValueError(f"Dimensions {dims} do not match {data.size} values")

    content = struct.pack(f'>I{len(dims)}I', magic, *dims) + data.astype(np.uint8).tobytes()
    path = Path(path)
    if path.suffix == '.gz':
        with gzip.GzipFile(path, 'wb', mtime=0) as f:
            f.write(content)
    else:
        path.write_bytes(content)
    logger.debug(f"Wrote {dims} to {path}")
    return path


def binarize(raw: RawImages, mode: Binarization = Binarization.THRESHOLD, seed: int = None) -> Dataset:
    '''
    Turns raw pixel bytes into bit vectors.

    Args:
        raw: RawImages - The loaded images.
        mode: Binarization - THRESHOLD sets pixels >= 128 to 1; STOCHASTIC draws each bit with
            probability pixel / 255 from a stream seeded with seed.

    Returns:
        Dataset - The digest records the source files and the binarization.
    '''
    mode = Binarization(mode)
    if mode == Binarization.THRESHOLD:
        bits = (raw.images >= 128).astype(np.uint8)
        tag = 'threshold'
    else:
        rng = np.random.default_rng(seed)
        bits = (rng.random(raw.images.shape) < raw.images / 255.0).astype(np.uint8)
        tag = f'stochastic:{seed}'
    digest = _derive(raw.source_digest, tag)
    return Dataset(images=bits, labels=raw.labels, source_digest=digest)


def concat(*datasets: Dataset) -> Dataset:
    if not datasets:
        raise ValueError("At least one dataset is required")
    has_labels = all(d.labels is not None for d in datasets)
    digest = _derive(*(d.source_digest for d in datasets))
    return Dataset(
        images=np.concatenate([d.images for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]) if has_labels else None,
        source_digest=digest,
    )


def split(dataset: Dataset, n_train: int) -> tuple:
    '''
    Splits a dataset in order into its first n_train rows and the rest, e.g. to
    re-partition the pooled 70,000 MNIST images into 55,000 / 15,000.
    '''
    if not 0 < n_train < len(dataset):
        raise ValueError(f"n_train must be between 1 and {len(dataset) - 1}, got {n_train}")
    labels = dataset.labels
    return (
        Dataset(dataset.images[:n_train], None if labels is None else labels[:n_train],
                _derive(dataset.source_digest, f"[:{n_train}]")),
        Dataset(dataset.images[n_train:], None if labels is None else labels[n_train:],
                _derive(dataset.source_digest, f"[{n_train}:]")),
    )


def subset(dataset: Dataset, n: int, rng: np.random.Generator = None) -> Dataset:
    """First n rows, or n rows drawn without replacement when rng is given."""
    if n >= len(dataset):
        return dataset
    index = np.arange(n) if rng is None else np.sort(rng.choice(len(dataset), size=n, replace=False))
    return Dataset(
        dataset.images[index],
        None if dataset.labels is None else dataset.labels[index],
        _derive(dataset.source_digest, f"subset:{n}:{index[:8].tolist()}"),
    )


def pixel_means(data) -> np.ndarray:
    """Empirical p_i = fraction of examples with bit i set."""
    data = np.atleast_2d(np.asarray(data))
    if data.shape[0] == 0:
        raise ValueError("Data is required")
    return data.mean(axis=0)


def load_csv(filename, label_column: str = None) -> Dataset:
    '''
    Reads bit vectors from a CSV file with a header row, one example per row.

    Args:
        filename: str | Path - The CSV file.
        label_column: str - Optional column holding integer labels; every other column is a bit.

    Returns:
        Dataset

    Raises:
        ValueError: If filename is not provided.
        FileNotFoundError: If the file does not exist.
        DataError: If the file is empty or holds values other than 0 and 1.
    '''
    if not filename:
        raise ValueError("Filename is required")

    try:
        df = pd.read_csv(filename)
    except FileNotFoundError:
        logger.error(f"File not found: {filename}")
        raise
    except pd.errors.EmptyDataError as e:
        logger.error(f"File {filename} is empty")
        raise DataError(f"{filename} is empty") from e

    labels = None
    if label_column is not None:
        labels = df.pop(label_column).to_numpy()
    bits = df.to_numpy()
    if bits.size == 0 or not np.isin(bits, (0, 1)).all():
        raise DataError(f"{filename} must hold 0/1 values only")

    digest = hashlib.sha256(Path(filename).read_bytes()).hexdigest()
    logger.debug(f"Read {len(df)} rows of {bits.shape[1]} bits from {filename}")
    return Dataset(images=bits, labels=labels, source_digest=digest)


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + '.gz'):
        if (data_dir / name).is_file():
            return data_dir / name
    raise FileNotFoundError(f"Neither {stem} nor {stem}.gz found in {data_dir}")


def load_mnist(data_dir, mode: Binarization = Binarization.THRESHOLD, seed: int = None,
               n_train: int = None) -> tuple:
    '''
    Loads and binarizes the MNIST train and test files from data_dir.

    Args:
        data_dir: str | Path - Directory with the four IDX files.
        mode: Binarization - See binarize.
        seed: int - Seed for stochastic binarization; the test set uses seed + 1.
        n_train: int - If given, pool both sets and re-split at n_train.

    Returns:
        tuple - (train Dataset, test Dataset)
    '''
    if not data_dir:
        raise ValueError("Data directory is required")
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"Data directory {data_dir} does not exist")

    parts = []
    for offset, key in enumerate(('train', 'test')):
        images, labels = MNIST_FILES[key]
        raw = load_idx(_find(data_dir, images), _find(data_dir, labels))
        parts.append(binarize(raw, mode, None if seed is None else seed + offset))
    train, test = parts
    if n_train is not None:
        train, test = split(concat(train, test), n_train)
    logger.info(f"MNIST: {len(train)} training and {len(test)} test images, digest {train.source_digest[:12]}")
    return train, test
