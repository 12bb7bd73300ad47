"""Datasets: IDX readers/writers, two-moons generator, in/OOD pairs."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# analytic centroid of the two moons (uniform angles): x = 1/2, y = 1/4
MOONS_CENTROID = np.array([0.5, 0.25])


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    """Features in model space plus the normalisation that produced them.

    Model-space features are ``(raw - shift) / scale``.
    """

    features: np.ndarray
    labels: np.ndarray
    name: str = ""
    shift: np.ndarray | float = 0.0
    scale: np.ndarray | float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    def normalized(self, shift, scale) -> "Dataset":
        """Re-normalise (from raw) with the given record."""
        raw = self.features * self.scale + self.shift
        return replace(self, features=(raw - shift) / scale, shift=shift, scale=scale)

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx])


@dataclass
class OODPair:
    train: Dataset
    test: Dataset
    ood: Dataset


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IDXError(f"{what}: truncated header ({len(buf)} bytes)")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IDXError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    size = int(np.prod(dims))
    if len(buf) - head < size:
        raise IDXError(f"{what}: truncated payload ({len(buf) - head} of {size} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str = "") -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1]; images come back as ``(N, rows, cols, 1)``.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise IDXError(f"{len(images)} images but {len(labels)} labels")
    feats = images.astype(np.float64)[..., None] / 255.0
    return Dataset(feats, labels.astype(np.int64), name or Path(images_path).name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for ``[0, 1]`` images ``(N, rows, cols[, 1])``."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[..., 0]
    pix = np.rint(images * 255.0).astype(np.uint8)
    n, r, c = pix.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, r, c) + pix.tobytes())
    lab = np.asarray(labels).astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(lab)) + lab.tobytes())


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_idx_dir(directory, split: str, name: str = "") -> Dataset:
    directory = Path(directory)
    imgs, labs = IDX_FILES[split]
    return load_idx(_find(directory, imgs), _find(directory, labs), name=f"{name}-{split}" if name else split)


# ---------------------------------------------------------------------------
# synthetic


def make_two_moons(n: int, noise_std: float, seed: int, name: str = "two_moons") -> Dataset:
    """Two interleaved half circles with ``n // 2`` points per class.

    Class 0: upper unit semicircle at the origin, ``(cos t, sin t)``.
    Class 1: the interleaved lower semicircle ``(1 - cos t, 0.5 - sin t)``.
    Angles are uniform on ``[0, pi]``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = make_rng(seed, "two-moons")
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    x = x + rng.normal(0.0, noise_std, x.shape) if noise_std > 0 else x
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], name)


def make_ring(n: int, radius: float, noise_std: float, seed: int, center=MOONS_CENTROID,
              name: str = "ring") -> Dataset:
    """Points uniform in angle on a circle (plus isotropic noise); labels are 0."""
    rng = make_rng(seed, "ring")
    phi = rng.uniform(0.0, 2 * math.pi, n)
    x = np.asarray(center) + radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, x.shape)
    return Dataset(x, np.zeros(n, dtype=np.int64), name)


@dataclass
class DataConfig:
    n_train: int = 1000
    n_test: int = 1000
    n_ood: int = 1000
    noise: float = 0.1
    ring_radius: float = 4.0
    seed: int = 0
    mnist_dir: str = ""
    fashion_dir: str = ""


OOD_KINDS = ("two_moons_vs_ring", "mnist_vs_fashion", "fashion_vs_mnist")


def _standardize(train: Dataset, *others: Dataset, per_feature: bool):
    raw = train.features
    if per_feature:
        shift = raw.mean(axis=0)
        scale = raw.std(axis=0)
    else:
        shift = float(raw.mean())
        scale = float(raw.std())
    scale = np.where(np.asarray(scale) > 0, scale, 1.0)
    if np.ndim(scale) == 0:
        scale = float(scale)
    return [d.normalized(shift, scale) for d in (train, *others)]


def make_ood_pair(kind: str, cfg: DataConfig) -> OODPair:
    """Train/test from one source, OOD from another, all normalised with the
    train statistics."""
    if kind == "two_moons_vs_ring":
        train = make_two_moons(cfg.n_train, cfg.noise, cfg.seed, "two_moons-train")
        test = make_two_moons(cfg.n_test, cfg.noise, cfg.seed + 1_000_003, "two_moons-test")
        ood = make_ring(cfg.n_ood, cfg.ring_radius, cfg.noise, cfg.seed, name="ring")
        return OODPair(*_standardize(train, test, ood, per_feature=True))
    if kind in ("mnist_vs_fashion", "fashion_vs_mnist"):
        if not cfg.mnist_dir or not cfg.fashion_dir:
            raise FileNotFoundError(f"{kind} needs mnist_dir and fashion_dir")
        dirs = {"mnist": cfg.mnist_dir, "fashion": cfg.fashion_dir}
        src, other = ("mnist", "fashion") if kind == "mnist_vs_fashion" else ("fashion", "mnist")
        train = load_idx_dir(dirs[src], "train", src)
        test = load_idx_dir(dirs[src], "test", src)
        ood = load_idx_dir(dirs[other], "test", other)
        return OODPair(*_standardize(train, test, ood, per_feature=False))
    raise ValueError(f"unknown dataset pair {kind!r}; expected one of {OOD_KINDS}")
