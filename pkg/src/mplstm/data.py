"""Synthetic multi-perspective tasks and the MPS1 dataset file format.

MPS1 layout (all little-endian)::

    offset 0   4 bytes   magic b"MPS1"
    offset 4   u32       version (1)
    offset 8   u32       num_samples
    offset 12  u32       m  (perspectives)
    offset 16  u32       n  (instances per perspective)
    offset 20  u32       d  (feature dim)
    offset 24  u32       K  (classes)
    offset 28  u32[N]    labels
    ...        f32[N*m*n*d]  features, (sample, perspective, instance, feature) order

The header is 28 bytes, so a file holds exactly
``28 + 4*N + 4*N*m*n*d`` bytes.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .mathcore import DTYPE

MAGIC = b"MPS1"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
HEADER_SIZE = _HEADER.size
_U32_MAX = 0xFFFFFFFF


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class BadVersionError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class CountError(DatasetFormatError):
    """Header counts are zero, overflow, or disagree with the file length."""


@dataclass
class Dataset:
    features: np.ndarray  # (N, m, n, d) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise ValueError(f"features must be (N, m, n, d), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.labels.shape} labels for {self.features.shape[0]} samples")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def shape(self):
        """(m, n, d)"""
        return self.features.shape[1:]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def view(self, p):
        """Single-perspective dataset holding only perspective ``p``."""
        return Dataset(self.features[:, p:p + 1], self.labels, self.num_classes)


@dataclass
class ModSumSpec:
    num_classes: int = 4
    length: int = 8
    noise_std: float = 0.25
    num_samples: int = 1000

    def __post_init__(self):
        if self.num_classes < 2 or self.length < 1 or self.num_samples < 1:
            raise ValueError("modsum needs K >= 2, n >= 1 and at least one sample")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def num_perspectives(self):
        return 2

    @property
    def input_dim(self):
        return self.num_classes


def gen_modsum(spec, rng):
    """Label ``(a + b) mod K``; view 1 shows ``onehot(a)``, view 2 ``onehot(b)``.

    Each view is ``n`` noisy copies of its one-hot code. Either view alone is
    independent of the label.
    """
    K, n, N = spec.num_classes, spec.length, spec.num_samples
    ab = rng.integers(K, (N, 2))
    labels = (ab[:, 0] + ab[:, 1]) % K
    eye = np.eye(K)
    clean = np.repeat(eye[ab][:, :, None, :], n, axis=2)  # (N, 2, n, K)
    features = clean
    if spec.noise_std > 0:
        features = clean + spec.noise_std * rng.normal(clean.shape)
    return Dataset(features, labels, K)


def write_dataset(path, dataset):
    N, m, n, d = dataset.features.shape
    K = dataset.num_classes
    if min(N, m, n, d, K) < 1 or max(N, m, n, d, K) > _U32_MAX:
        raise CountError(f"counts N={N} m={m} n={n} d={d} K={K} do not fit the header")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, N, m, n, d, K))
        f.write(dataset.labels.astype("<u4").tobytes())
        f.write(dataset.features.astype("<f4").tobytes())


def read_dataset(path):
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(HEADER_SIZE)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: not an MPS1 file")
        if len(head) < HEADER_SIZE:
            raise TruncatedError(f"{path}: header truncated ({len(head)} of {HEADER_SIZE} bytes)")
        _, version, N, m, n, d, K = _HEADER.unpack(head)
        if version != VERSION:
            raise BadVersionError(f"{path}: unsupported MPS1 version {version}")
        if min(N, m, n, d, K) < 1:
            raise CountError(f"{path}: header counts must be >= 1 (N={N} m={m} n={n} d={d} K={K})")
        # Python ints do not overflow; reject sizes no real file could have
        expected = HEADER_SIZE + 4 * N + 4 * N * m * n * d
        if expected > 1 << 62:
            raise CountError(f"{path}: header counts overflow (payload of {expected} bytes)")
        if size < expected:
            raise TruncatedError(f"{path}: {size} bytes, header promises {expected}")
        if size > expected:
            raise CountError(f"{path}: {size - expected} trailing bytes after payload")
        labels = np.frombuffer(f.read(4 * N), dtype="<u4").astype(np.int64)
        feats = np.frombuffer(f.read(4 * N * m * n * d), dtype="<f4")
    if labels.max() >= K:
        raise CountError(f"{path}: label {labels.max()} >= K={K}")
    return Dataset(feats.astype(DTYPE).reshape(N, m, n, d), labels, K)


def split_batches(dataset, batch_size, rng):
    """Shuffle indices with ``rng`` and cut them into consecutive batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(len(dataset))
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
