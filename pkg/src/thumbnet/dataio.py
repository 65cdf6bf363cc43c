"""Dataset loaders, bicubic resampling, checkpoints, and thumbnail export."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DataFormatError, GeometryError, UsageError, VersionError
from .tensor import Tensor, default_dtype, no_grad, tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
STATS_FILE = "thumbnet_stats.json"


@dataclass
class LabeledBatch:
    images: Tensor
    labels: np.ndarray
    num_classes: int
    raw: np.ndarray | None = None


class ImageDataset:
    """uint8 images (N x 3 x H x W) with labels and normalization statistics.

    ``mean``/``std`` are per-channel values on the [0, 1] pixel scale.
    """

    def __init__(self, images, labels, num_classes, mean=None, std=None, name="dataset"):
        images = np.asarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataFormatError(f"{name}: images must be N x 3 x H x W, got {images.shape}")
        if len(images) != len(labels):
            raise DataFormatError(f"{name}: {len(images)} images but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataFormatError(f"{name}: labels outside [0, {num_classes})")
        self.images = images
        self.labels = labels
        self.num_classes = int(num_classes)
        self.name = name
        if mean is None or std is None:
            mean, std = channel_stats(images)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def normalize(self, raw, dtype=None):
        dtype = dtype or default_dtype()
        x = raw.astype(np.float64) / 255.0
        x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return x.astype(dtype)

    def denormalize(self, x):
        """Normalized floats back to the [0, 255] pixel scale (unclamped)."""
        x = np.asarray(x, dtype=np.float64)
        return (x * self.std[None, :, None, None] + self.mean[None, :, None, None]) * 255.0

    def batches(self, batch_size=128, seed=0, shuffle=True, augment=False, drop_last=False, dtype=None):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            idx = order[start : start + batch_size]
            raw = self.images[idx]
            if augment:
                raw = augment_batch(raw, rng)
            yield LabeledBatch(Tensor(self.normalize(raw, dtype), dtype=dtype), self.labels[idx], self.num_classes, raw)

    __iter__ = batches

    def subset(self, indices, relabel=None, name=None):
        labels = self.labels[indices]
        k = self.num_classes
        if relabel is not None:
            labels = np.array([relabel[int(v)] for v in labels], dtype=np.int64)
            k = len(set(relabel.values()))
        return ImageDataset(self.images[indices], labels, k, self.mean, self.std, name or self.name)

    def class_subset(self, classes, name=None):
        """Samples of the given classes, relabelled 0..len(classes)-1."""
        classes = list(classes)
        mask = np.isin(self.labels, classes)
        return self.subset(np.flatnonzero(mask), {c: i for i, c in enumerate(classes)}, name)

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def channel_stats(images):
    x = np.asarray(images, dtype=np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def augment_batch(raw, rng, pad=4):
    """Random crop from a zero-padded copy plus random horizontal flip."""
    n, c, h, w = raw.shape
    padded = np.pad(raw, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(raw)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# -- CIFAR-10 binary ---------------------------------------------------------
def _read_cifar_file(path):
    buf = Path(path).read_bytes()
    if len(buf) % CIFAR_RECORD:
        offset = (len(buf) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}"
        )
    return records[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def _cifar_files(path, split):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset path not found: {path}")
    if path.is_file():
        return [path]
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    if split not in ("train", "test"):
        raise UsageError(f"unknown split {split!r}")
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise UsageError(f"dataset path not found: {missing[0]}")
    return files


def cifar_stats(path):
    """Per-channel train-split statistics, cached beside the dataset."""
    path = Path(path)
    cache = (path if path.is_dir() else path.parent) / STATS_FILE
    if cache.exists():
        d = json.loads(cache.read_text())
        return np.array(d["mean"]), np.array(d["std"])
    images = np.concatenate([_read_cifar_file(f)[0] for f in _cifar_files(path, "train")])
    mean, std = channel_stats(images)
    try:
        cache.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        log.warning("could not cache dataset statistics at %s", cache)
    return mean, std


def load_cifar10(path, split="train", stats=None):
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    files = _cifar_files(path, split)
    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if stats is None:
        stats = cifar_stats(path) if Path(path).is_dir() else channel_stats(images)
    return ImageDataset(images, labels, 10, stats[0], stats[1], name=f"cifar10-{split}")


# -- IDX (MNIST) ---------------------------------------------------------------
def _read_idx(path, magic, ndim):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset path not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: empty or truncated IDX header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise DataFormatError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    count = int(np.prod(dims))
    if len(buf) - end != count:
        raise DataFormatError(f"{path}: payload has {len(buf) - end} bytes, dimensions imply {count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=end).reshape(dims)


def load_idx(images_path, labels_path, stats=None, num_classes=None):
    """MNIST-style IDX pair; grayscale is replicated to three channels."""
    images = _read_idx(images_path, 0x00000803, 3)
    labels = _read_idx(labels_path, 0x00000801, 1).astype(np.int64)
    if len(images) != len(labels):
        raise DataFormatError(f"IDX count mismatch: {len(images)} images, {len(labels)} labels")
    rgb = np.repeat(images[:, None], 3, axis=1)
    k = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    mean, std = stats if stats is not None else channel_stats(rgb)
    return ImageDataset(rgb, labels, k, mean, std, name=Path(images_path).name)


def load_dataset(fmt, path, split="train", stats=None):
    if fmt == "cifar10":
        return load_cifar10(path, split, stats)
    if fmt == "idx":
        path = Path(path)
        prefix = "train" if split == "train" else "t10k"
        return load_idx(path / f"{prefix}-images-idx3-ubyte", path / f"{prefix}-labels-idx1-ubyte", stats)
    raise UsageError(f"unknown dataset format {fmt!r}")


# -- bicubic resampling ----------------------------------------------------------
def cubic_kernel(t, a=-0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(n_in, f, a=-0.5):
    """Row j holds the 4-tap weights sampling source coordinate (j + 0.5) * f - 0.5."""
    n_out = n_in // f
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        src = (j + 0.5) * f - 0.5
        base = int(np.floor(src))
        for tap in range(-1, 3):
            idx = min(max(base + tap, 0), n_in - 1)
            m[j, idx] += cubic_kernel(src - (base + tap), a)
    return m


def bicubic_downscale_batch(images, f):
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if h % f or w % f:
        raise GeometryError(f"bicubic: {h}x{w} not divisible by factor {f}")
    mh = bicubic_matrix(h, f)
    mw = bicubic_matrix(w, f)
    out = np.einsum("ij,...jk,lk->...il", mh, images.astype(np.float64), mw, optimize=True)
    return out.astype(images.dtype if images.dtype.kind == "f" else np.float64)


def bicubic_downscale(image, f):
    """Separable cubic convolution (a = -0.5, edge clamped) of a C x H x W image."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3:
        raise UsageError(f"bicubic_downscale expects C x H x W, got {data.shape}")
    return bicubic_downscale_batch(data, f)


# -- checkpoints -----------------------------------------------------------------
CKPT_MAGIC = b"TNCK"
CKPT_VERSION = 1
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict
    version: int = CKPT_VERSION


def save_checkpoint(path, tensors, meta=None):
    """Single-file container: magic, version, length-prefixed entries, SHA-256 trailer."""
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<BI", CKPT_VERSION, len(tensors) + 1)
    entries = [(META_KEY, json.dumps(meta or {}, sort_keys=True).encode())]
    entries += [(name, tensor_to_bytes(value)) for name, value in sorted(tensors.items())]
    for name, payload in entries:
        encoded = name.encode()
        body += struct.pack("<I", len(encoded)) + encoded
        body += struct.pack("<Q", len(payload)) + payload
    body += hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < 9 + 32 or buf[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<BI", buf[4:9])
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise CorruptionError(f"{path}: checksum mismatch")
    pos = 9
    tensors, meta = {}, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            (size,) = struct.unpack_from("<Q", buf, pos)
            payload = buf[pos + 8 : pos + 8 + size]
            pos += 8 + size
            if name == META_KEY:
                meta = json.loads(payload)
            else:
                tensors[name] = tensor_from_bytes(payload).data
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: malformed entry table ({exc})") from None
    if pos != len(buf) - 32:
        raise CorruptionError(f"{path}: trailing bytes in entry table")
    return Checkpoint(tensors, meta, version)


def graphs_to_tensors(graphs):
    out = {}
    for key, graph in graphs.items():
        for name, value in graph.state_dict().items():
            out[f"{key}/{name}"] = value
    return out


def tensors_for(ckpt: Checkpoint, key):
    prefix = f"{key}/"
    return {name[len(prefix) :]: v for name, v in ckpt.tensors.items() if name.startswith(prefix)}


# -- PPM -------------------------------------------------------------------------
def write_ppm(path, image_hwc):
    img = np.asarray(image_hwc)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"write_ppm expects H x W x 3 uint8, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    try:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_ppm(path):
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise DataFormatError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}")
    data = buf[pos + 1 :]
    if len(data) != w * h * 3:
        raise DataFormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def to_uint8(pixels):
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def export_thumbnails(downscaler, dataset: ImageDataset, out_dir, batch_size=64, limit=None, prefix="thumb"):
    """Write de-normalized downscaler outputs as P6 files; return paths and channel stats."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    total = len(dataset) if limit is None else min(limit, len(dataset))
    sums = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    with no_grad():
        for start in range(0, total, batch_size):
            raw = dataset.images[start : min(start + batch_size, total)]
            y = downscaler.forward(Tensor(dataset.normalize(raw)), mode="eval")
            pixels = to_uint8(dataset.denormalize(y.data))
            for i, img in enumerate(pixels):
                p = out_dir / f"{prefix}_{start + i:05d}.ppm"
                write_ppm(p, img.transpose(1, 2, 0))
                paths.append(p)
            flat = pixels.astype(np.float64).transpose(1, 0, 2, 3).reshape(3, -1)
            sums += flat.sum(axis=1)
            sq += (flat**2).sum(axis=1)
            count += flat.shape[1]
    mean = sums / max(count, 1)
    std = np.sqrt(np.maximum(sq / max(count, 1) - mean**2, 0))
    log.info("exported %d thumbnails to %s; channel mean %s std %s", len(paths), out_dir, mean.round(2), std.round(2))
    return paths, {"mean": mean.tolist(), "std": std.tolist()}
