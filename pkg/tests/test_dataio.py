import hashlib
import struct

import numpy as np
import pytest
from PIL import Image

from conftest import write_cifar
from oracles import cubic, stencil_downscale_1d
from thumbnet.dataio import (
    CIFAR_RECORD,
    STATS_FILE,
    ImageDataset,
    bicubic_downscale,
    bicubic_downscale_batch,
    bicubic_matrix,
    graphs_to_tensors,
    export_thumbnails,
    load_checkpoint,
    load_cifar10,
    load_dataset,
    load_idx,
    read_ppm,
    save_checkpoint,
    tensors_for,
    write_ppm,
)
from thumbnet.errors import CorruptionError, DataFormatError, GeometryError, UsageError, VersionError
from thumbnet.model import IdentityDownscaler, build_downscaler, resnet_mini


# -- CIFAR-10 ---------------------------------------------------------------------
def test_cifar_counts_labels_and_stats(tmp_path):
    train_labels, test_labels = write_cifar(tmp_path / "c", n_train=40, n_test=12)
    train = load_cifar10(tmp_path / "c", "train")
    test = load_cifar10(tmp_path / "c", "test")
    assert len(train) == 40 and len(test) == 12 and train.num_classes == 10
    assert np.array_equal(train.labels, train_labels) and np.array_equal(test.labels, test_labels)
    assert (tmp_path / "c" / STATS_FILE).exists()
    assert np.allclose(test.mean, train.mean)  # test split normalized by train statistics
    raw = np.fromfile(tmp_path / "c" / "data_batch_1.bin", dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    assert np.array_equal(train.images[0].reshape(-1), raw[0, 1:])


def test_cifar_bad_label_and_truncation(tmp_path):
    d = tmp_path / "c"
    write_cifar(d, n_train=10, n_test=3)
    buf = bytearray((d / "test_batch.bin").read_bytes())
    buf[CIFAR_RECORD] = 11
    (d / "test_batch.bin").write_bytes(bytes(buf))
    with pytest.raises(DataFormatError, match="label 11.*offset 3073"):
        load_cifar10(d, "test")
    (d / "test_batch.bin").write_bytes(bytes(buf[: 2 * CIFAR_RECORD + 100]))
    with pytest.raises(DataFormatError, match="offset 6146"):
        load_cifar10(d, "test")
    with pytest.raises(UsageError, match="not found"):
        load_cifar10(tmp_path / "nowhere")


def test_batches_deterministic_and_normalized(cifar_dir):
    ds = load_cifar10(cifar_dir, "train")
    a = [b.labels.tolist() for b in ds.batches(8, seed=3)]
    b = [b.labels.tolist() for b in ds.batches(8, seed=3)]
    c = [b.labels.tolist() for b in ds.batches(8, seed=4)]
    assert a == b and a != c
    aug1 = [b.raw for b in ds.batches(8, seed=3, augment=True)]
    aug2 = [b.raw for b in ds.batches(8, seed=3, augment=True)]
    assert all(np.array_equal(x, y) for x, y in zip(aug1, aug2))
    full = next(ds.batches(len(ds), shuffle=False)).images.data.astype(np.float64)
    assert np.allclose(full.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(full.std(axis=(0, 2, 3)), 1, atol=1e-4)
    assert np.allclose(ds.denormalize(full), ds.images, atol=1e-3)


def test_checksum_is_plain_sha256_of_little_endian_bytes(cifar_dir):
    ds = load_cifar10(cifar_dir, "test")
    h = hashlib.sha256(ds.images.tobytes() + ds.labels.astype("<i8").tobytes()).hexdigest()
    assert ds.checksum() == h


def test_class_subset_relabels(cifar_dir):
    ds = load_cifar10(cifar_dir, "train")
    sub = ds.class_subset([7, 2])
    assert sub.num_classes == 2
    assert np.array_equal(sub.labels, np.where(ds.labels[np.isin(ds.labels, [7, 2])] == 7, 0, 1))


# -- IDX ------------------------------------------------------------------------------
def _idx(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))


def test_idx_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 28, 28)).astype(np.uint8)
    labels = np.array([0, 3, 9, 1, 3], dtype=np.uint8)
    _idx(tmp_path / "train-images-idx3-ubyte", 0x803, (5, 28, 28), imgs.tobytes())
    _idx(tmp_path / "train-labels-idx1-ubyte", 0x801, (5,), labels.tobytes())
    ds = load_dataset("idx", tmp_path, "train")
    assert ds.images.shape == (5, 3, 28, 28) and ds.num_classes == 10
    assert np.array_equal(ds.images[:, 2], imgs) and np.array_equal(ds.labels, labels)

    _idx(tmp_path / "bad", 0x802, (5, 28, 28), imgs.tobytes())
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "bad", tmp_path / "train-labels-idx1-ubyte")
    _idx(tmp_path / "four", 0x801, (4,), labels[:4].tobytes())
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "four")
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "empty", tmp_path / "four")


# -- bicubic ---------------------------------------------------------------------------
def test_bicubic_constant_and_interior_ramp():
    img = np.full((3, 16, 12), 7.25)
    assert np.allclose(bicubic_downscale(img, 2), 7.25, atol=1e-12)
    ramp = np.tile(np.arange(16.0), (3, 16, 1))
    out = bicubic_downscale(ramp, 2)
    expected = (np.arange(8) + 0.5) * 2 - 0.5
    # with edge clamping the ramp is exact wherever no tap is clamped
    assert np.allclose(out[:, :, 1:-1], expected[1:-1], atol=1e-12)
    assert np.allclose(out[0, 0], out[0, 5])


def test_bicubic_impulse_matches_hand_stencil():
    img = np.zeros((1, 8, 8))
    img[0, 3, 4] = 255.0
    out = bicubic_downscale(img, 2)[0]
    # by hand: output (j, i) samples source (2j + 0.5, 2i + 0.5); impulse at (3, 4)
    want = np.zeros((4, 4))
    for j in range(4):
        for i in range(4):
            want[j, i] = 255.0 * cubic(2 * j + 0.5 - 3) * cubic(2 * i + 0.5 - 4)
    assert np.allclose(out, want, atol=1e-12)
    assert out[1, 2] == pytest.approx(255 * cubic(0.5) * cubic(0.5))
    assert cubic(0.5) == 0.5625 and cubic(1.5) == -0.0625


def test_bicubic_matches_scalar_stencil_with_clamp():
    rng = np.random.default_rng(1)
    for f in (2, 4):
        img = rng.uniform(0, 255, size=(2, 16, 16))
        out = bicubic_downscale(img, f)
        rows = np.array([[stencil_downscale_1d(r, f) for r in ch] for ch in img])
        both = np.array([[stencil_downscale_1d(col, f) for col in ch.T] for ch in rows]).transpose(0, 2, 1)
        assert np.allclose(out, both, atol=1e-9)


def test_bicubic_phase_weights_sum_to_one():
    for f in (2, 3, 4, 8):
        for n in (8, 24, 64):
            if n % f == 0:
                assert np.max(np.abs(bicubic_matrix(n, f).sum(axis=1) - 1)) < 1e-12


def test_bicubic_rejects_non_divisible():
    with pytest.raises(GeometryError):
        bicubic_downscale_batch(np.zeros((1, 3, 10, 10)), 4)


# -- checkpoints ---------------------------------------------------------------------
def test_checkpoint_round_trip_twice(tmp_path):
    g = resnet_mini()
    tensors = graphs_to_tensors({"student": g})
    tensors["misc/f64"] = np.random.default_rng(0).normal(size=(3, 2))
    meta = {"epoch": 3, "hyperparams": {"alpha": 1.0}}
    p1 = save_checkpoint(tmp_path / "a.ckpt", tensors, meta)
    c1 = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "b.ckpt", c1.tensors, c1.meta)
    c2 = load_checkpoint(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert c2.meta == meta
    for k, v in tensors.items():
        assert c2.tensors[k].dtype == v.dtype and c2.tensors[k].tobytes() == v.tobytes()
    h = resnet_mini(seed=9)
    h.load_state_dict(tensors_for(c2, "student"))
    assert h.checksum() == g.checksum()


def test_checkpoint_corruption_and_version(tmp_path):
    p = save_checkpoint(tmp_path / "a.ckpt", {"w": np.arange(6.0)}, {})
    buf = bytearray(p.read_bytes())
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0x01
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "flip.ckpt")
    future = bytearray(buf)
    future[4] = 2
    (tmp_path / "future.ckpt").write_bytes(bytes(future))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "future.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "junk.ckpt")


# -- PPM / export -----------------------------------------------------------------------
def test_ppm_validates_with_pillow(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    with Image.open(tmp_path / "x.ppm") as im:
        assert im.format == "PPM" and im.size == (7, 5) and im.mode == "RGB"
        assert np.array_equal(np.asarray(im), img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)


def test_export_random_downscaler(tmp_path, cifar_dir):
    ds = load_cifar10(cifar_dir, "test")
    paths, stats = export_thumbnails(build_downscaler(2, 16, 32), ds, tmp_path / "t", limit=5)
    assert len(paths) == 5 and len(stats["mean"]) == 3
    for p in paths:
        with Image.open(p) as im:
            assert im.size == (16, 16) and im.mode == "RGB"


def test_export_identity_reproduces_input(tmp_path):
    rng = np.random.default_rng(3)
    ds = ImageDataset(rng.integers(0, 256, (4, 3, 8, 8)), [0, 1, 0, 1], 2)
    paths, _ = export_thumbnails(IdentityDownscaler(), ds, tmp_path)
    for p, img in zip(paths, ds.images):
        assert np.array_equal(read_ppm(p), img.transpose(1, 2, 0))
