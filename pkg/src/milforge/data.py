"""Bags, dataset generators, the ``.milbag`` container and fold assignment."""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MNIST_SIDE = 28

MILBAG_MAGIC = b"MILB"
MILBAG_VERSION = 1
_HEADER = struct.Struct("<4sIIIBQI")

DATA_DIR_ENV = "MILFORGE_DATA_DIR"

# Trigger digits per bag label, in the order the rules are tried.
MNIST_RULES: tuple[tuple[int, frozenset[int]], ...] = (
    (3, frozenset({3, 5})),
    (2, frozenset({1})),
    (1, frozenset({1, 7})),
)


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BagFormatError(ValueError):
    """Malformed ``.milbag`` container."""


class ConfigurationError(ValueError):
    """Inputs are inconsistent with the requested operation."""


def default_data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else Path.home() / ".milforge" / "data"


@dataclass
class Bag:
    """One multiple-instance sample."""

    features: np.ndarray
    label: int
    coords: np.ndarray | None = None
    instance_truth: np.ndarray | None = None
    id: int = 0

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    def validate(self, num_classes: int | None = None) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ConfigurationError(f"bag {self.id}: features must be K x D with K >= 1")
        k = self.features.shape[0]
        if self.coords is not None:
            if self.coords.shape != (k, 2):
                raise ConfigurationError(f"bag {self.id}: coords must be {k} x 2")
            if not np.isfinite(self.coords).all():
                raise ConfigurationError(f"bag {self.id}: non-finite coordinates")
        if num_classes is not None:
            if not 0 <= self.label < num_classes:
                raise ConfigurationError(f"bag {self.id}: label {self.label} outside [0, {num_classes})")
            if self.instance_truth is not None:
                t = self.instance_truth
                if t.shape != (k,) or t.min() < 0 or t.max() >= num_classes:
                    raise ConfigurationError(f"bag {self.id}: bad instance_truth")


@dataclass
class DatasetManifest:
    num_classes: int
    feature_dim: int
    spatial: bool
    bag_count: int
    seed: int = 0
    folds: list[int] | None = None
    scheme: str = ""
    digest: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, validation) bag indices when ``fold`` is held out."""
        if self.folds is None:
            raise ConfigurationError("manifest carries no fold assignment")
        f = np.asarray(self.folds)
        return np.flatnonzero(f != fold), np.flatnonzero(f == fold)

    @property
    def num_folds(self) -> int:
        return 0 if self.folds is None else int(max(self.folds)) + 1

    def splits(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(train, validation) index pairs: one per fold for k-fold, a single pair for holdout."""
        if self.folds is None:
            raise ConfigurationError("manifest carries no fold assignment")
        if self.scheme.startswith("holdout"):
            f = np.asarray(self.folds)
            return [(np.flatnonzero(f == 0), np.flatnonzero(f == 1))]
        return [self.fold_indices(i) for i in range(self.num_folds)]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path) -> np.ndarray:
    """Read an MNIST IDX images (N x 28 x 28 uint8) or labels (N uint8) file."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise IdxFormatError(f"truncated header: {len(raw)} bytes", len(raw))
    magic, count = struct.unpack_from(">II", raw, 0)
    if magic == IDX_LABEL_MAGIC:
        need = 8 + count
        if len(raw) < need:
            raise IdxFormatError(f"truncated label payload: need {need} bytes, have {len(raw)}", len(raw))
        return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()
    if magic == IDX_IMAGE_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError(f"truncated image header: {len(raw)} bytes", len(raw))
        rows, cols = struct.unpack_from(">II", raw, 8)
        if rows != MNIST_SIDE:
            raise IdxFormatError(f"expected {MNIST_SIDE} rows, found {rows}", 8)
        if cols != MNIST_SIDE:
            raise IdxFormatError(f"expected {MNIST_SIDE} cols, found {cols}", 12)
        need = 16 + count * rows * cols
        if len(raw) < need:
            raise IdxFormatError(f"truncated image payload: need {need} bytes, have {len(raw)}", len(raw))
        data = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
        return data.reshape(count, rows, cols).copy()
    raise IdxFormatError(f"unknown magic 0x{magic:08x}", 0)


def parse_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) >= 4 and struct.unpack_from(">I", raw)[0] != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"expected image magic 0x{IDX_IMAGE_MAGIC:08x}", 0)
    return parse_idx(path)


def parse_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) >= 4 and struct.unpack_from(">I", raw)[0] != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"expected label magic 0x{IDX_LABEL_MAGIC:08x}", 0)
    return parse_idx(path)


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = parse_idx_images(images_path)
    labels = parse_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"image count {len(images)} != label count {len(labels)}", 4)
    return images, labels


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images (N x 28 x 28) or labels (N) in IDX layout."""
    arr = np.asarray(array, dtype=np.uint8)
    if arr.ndim == 1:
        header = struct.pack(">II", IDX_LABEL_MAGIC, len(arr))
    elif arr.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape)
    else:
        raise ValueError("IDX writer handles label vectors and image stacks only")
    payload = header + arr.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)


MNIST_FILES = {
    "images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
}


def find_mnist_files(directory) -> tuple[Path, Path]:
    """Locate the training image/label IDX files (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    found = {}
    for kind, names in MNIST_FILES.items():
        for name in names:
            for candidate in (directory / name, directory / f"{name}.gz"):
                if candidate.exists():
                    found[kind] = candidate
                    break
            if kind in found:
                break
    missing = [kind for kind in MNIST_FILES if kind not in found]
    if missing:
        expected = ", ".join(str(directory / MNIST_FILES[k][0]) + "[.gz]" for k in missing)
        raise FileNotFoundError(f"MNIST IDX files not found; expected {expected}")
    return found["images"], found["labels"]


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def mnist_bag_label(digits) -> int:
    """Bag label for a multiset of digits, first matching rule wins."""
    present = set(int(d) for d in digits)
    if {3, 5} <= present:
        return 3
    if 1 in present and 7 not in present:
        return 2
    if {1, 7} <= present:
        return 1
    return 0


def mnist_instance_truth(digits, bag_label: int) -> np.ndarray:
    triggers = dict(MNIST_RULES).get(bag_label, frozenset())
    return np.array([bag_label if int(d) in triggers else 0 for d in digits], dtype=np.int64)


def synth_mnist_bags(
    images: np.ndarray,
    labels: np.ndarray,
    num_bags: int,
    bag_size_range: tuple[int, int] = (10, 20),
    seed: int = 0,
) -> list[Bag]:
    """Sample bags of MNIST digits labelled by the four-class trigger rules."""
    if len(images) == 0:
        raise ConfigurationError("empty image set")
    lo, hi = bag_size_range
    if not 2 <= lo <= hi <= 64:
        raise ConfigurationError(f"bag_size_range {bag_size_range} must lie within [2, 64]")
    rng = np.random.default_rng(seed)
    flat = images.reshape(len(images), -1)
    bags = []
    for i in range(num_bags):
        k = int(rng.integers(lo, hi + 1))
        pick = rng.integers(0, len(images), size=k)
        digits = labels[pick]
        y = mnist_bag_label(digits)
        bags.append(
            Bag(
                features=(flat[pick].astype(np.float32) / np.float32(255.0)),
                label=y,
                instance_truth=mnist_instance_truth(digits, y),
                id=i,
            )
        )
    return bags


NEAR = 0.2
FAR = 0.4
MARKER_VALUE = 3.0
SPATIAL_DIM = 8


def _chebyshev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def synth_spatial_bags(num_bags: int, k: int = 32, seed: int = 0) -> list[Bag]:
    """Binary bags whose label depends only on how close two marker instances lie."""
    if k < 4:
        raise ConfigurationError("spatial bags need K >= 4")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (num_bags // 2) + [0] * (num_bags - num_bags // 2))
    rng.shuffle(labels)
    bags = []
    for i, y in enumerate(labels):
        feats = rng.standard_normal((k, SPATIAL_DIM)).astype(np.float32)
        coords = rng.uniform(0.0, 1.0, size=(k, 2))
        markers = rng.choice(k, size=2, replace=False)
        first = coords[markers[0]]
        while True:
            if y == 1:
                second = first + rng.uniform(-NEAR, NEAR, size=2)
                if (second >= 0).all() and (second <= 1).all() and _chebyshev(first, second) < NEAR:
                    break
            else:
                second = rng.uniform(0.0, 1.0, size=2)
                if _chebyshev(first, second) > FAR:
                    break
        coords[markers[1]] = second
        feats[markers, 0] = MARKER_VALUE
        truth = np.zeros(k, dtype=np.int64)
        truth[markers] = 1
        bags.append(Bag(features=feats, label=int(y), coords=coords.astype(np.float32), instance_truth=truth, id=i))
    return bags


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------


def bags_to_bytes(bags: Sequence[Bag], manifest: DatasetManifest) -> bytes:
    c, d, spatial = manifest.num_classes, manifest.feature_dim, manifest.spatial
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MILBAG_MAGIC, MILBAG_VERSION, c, d, int(spatial), manifest.seed, len(bags)))
    for bag in bags:
        if bag.features.ndim != 2 or bag.features.shape[1] != d:
            raise ConfigurationError(f"bag {bag.id}: feature dim {bag.features.shape} != {d}")
        if spatial != (bag.coords is not None):
            raise ConfigurationError(f"bag {bag.id}: coords presence must match the spatial flag")
        bag.validate(c)
        k = bag.size
        has_truth = bag.instance_truth is not None
        buf.write(struct.pack("<IIB", bag.label, k, int(has_truth)))
        if has_truth:
            buf.write(np.asarray(bag.instance_truth, dtype="<u2").tobytes())
        buf.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        if spatial:
            buf.write(np.ascontiguousarray(bag.coords, dtype="<f4").tobytes())
    return buf.getvalue()


def bags_from_bytes(raw: bytes) -> tuple[list[Bag], DatasetManifest]:
    if len(raw) < _HEADER.size:
        raise BagFormatError(f"file shorter than the {_HEADER.size}-byte header")
    magic, version, c, d, spatial, seed, count = _HEADER.unpack_from(raw, 0)
    if magic != MILBAG_MAGIC:
        raise BagFormatError(f"bad magic {magic!r}")
    if version != MILBAG_VERSION:
        raise BagFormatError(f"unsupported version {version}")
    pos = _HEADER.size
    bags = []

    def take(nbytes: int, what: str, bag_id: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(raw):
            raise BagFormatError(f"bag {bag_id}: {what} truncated at offset {pos}, length mismatch")
        chunk = raw[pos : pos + nbytes]
        pos += nbytes
        return chunk

    for i in range(count):
        label, k, has_truth = struct.unpack("<IIB", take(9, "bag header", i))
        truth = None
        if has_truth:
            truth = np.frombuffer(take(2 * k, "instance truth", i), dtype="<u2").astype(np.int64)
        feats = np.frombuffer(take(4 * k * d, "features", i), dtype="<f4").reshape(k, d).astype(np.float32)
        coords = None
        if spatial:
            coords = np.frombuffer(take(8 * k, "coords", i), dtype="<f4").reshape(k, 2).astype(np.float32)
        bags.append(Bag(features=feats, label=int(label), coords=coords, instance_truth=truth, id=i))
    if pos != len(raw):
        raise BagFormatError(f"{len(raw) - pos} trailing bytes after {count} bags, length mismatch")
    manifest = DatasetManifest(
        num_classes=c,
        feature_dim=d,
        spatial=bool(spatial),
        bag_count=count,
        seed=seed,
        digest=hashlib.sha256(raw).hexdigest(),
    )
    return bags, manifest


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_bags(path, bags: Sequence[Bag], manifest: DatasetManifest) -> None:
    """Write bags to ``path`` plus a JSON manifest sidecar next to it."""
    raw = bags_to_bytes(bags, manifest)
    Path(path).write_bytes(raw)
    manifest.bag_count = len(bags)
    manifest.digest = hashlib.sha256(raw).hexdigest()
    manifest_path(path).write_text(manifest.to_json())


def read_bags(path) -> tuple[list[Bag], DatasetManifest]:
    bags, manifest = bags_from_bytes(Path(path).read_bytes())
    side = manifest_path(path)
    if side.exists():
        stored = DatasetManifest.from_json(side.read_text())
        if stored.digest and stored.digest != manifest.digest:
            logger.warning("manifest digest does not match %s; ignoring sidecar", path)
        else:
            manifest.folds = stored.folds
            manifest.scheme = stored.scheme
            manifest.extra = stored.extra
    return bags, manifest


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def _manifest_for(bags: Sequence[Bag], seed: int) -> DatasetManifest:
    first = bags[0]
    return DatasetManifest(
        num_classes=int(max(b.label for b in bags)) + 1,
        feature_dim=int(first.features.shape[1]),
        spatial=first.coords is not None,
        bag_count=len(bags),
        seed=seed,
    )


def kfold_split(bags: Sequence[Bag], k: int, seed: int = 0, manifest: DatasetManifest | None = None) -> DatasetManifest:
    """Stratified k-fold assignment, deterministic in ``seed``."""
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if len(bags) < k:
        raise ConfigurationError(f"{len(bags)} bags cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    labels = np.array([b.label for b in bags])
    folds = np.full(len(bags), -1, dtype=np.int64)
    # Deal each class round-robin, continuing where the previous class stopped,
    # so overall fold sizes stay within one of each other.
    offset = 0
    leftovers = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        if len(members) < k:
            logger.warning("class %s has %d bags (< %d folds); left unstratified", cls, len(members), k)
            leftovers.extend(members.tolist())
            continue
        folds[members] = (np.arange(len(members)) + offset) % k
        offset = (offset + len(members)) % k
    if leftovers:
        sizes = np.bincount(folds[folds >= 0], minlength=k)
        for idx in leftovers:
            f = int(np.argmin(sizes))
            folds[idx] = f
            sizes[f] += 1
    out = manifest if manifest is not None else _manifest_for(bags, seed)
    out.folds = folds.tolist()
    out.scheme = f"kfold:{k}"
    return out


def holdout_split(
    bags: Sequence[Bag], train_fraction: float = 0.8, seed: int = 0, manifest: DatasetManifest | None = None
) -> DatasetManifest:
    """Stratified train/evaluation split: fold 0 trains, fold 1 evaluates."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = np.array([b.label for b in bags])
    folds = np.zeros(len(bags), dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        n_eval = int(round(len(members) * (1 - train_fraction)))
        folds[members[:n_eval]] = 1
    out = manifest if manifest is not None else _manifest_for(bags, seed)
    out.folds = folds.tolist()
    out.scheme = f"holdout:{train_fraction:g}"
    return out


def class_histogram(bags: Sequence[Bag], num_classes: int) -> np.ndarray:
    return np.bincount([b.label for b in bags], minlength=num_classes)
