import numpy as np
import pytest

from thumbnet.tensor import precision


@pytest.fixture
def f64():
    with precision("f64"):
        yield


def write_cifar(directory, n_train=40, n_test=30, seed=0, per_file=None):
    """Synthetic files in the CIFAR-10 binary layout; returns (train labels, test labels)."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    per_file = per_file or max(1, n_train // 5)
    all_labels = []
    for i in range(1, 6):
        labels = rng.integers(0, 10, per_file).astype(np.uint8)
        pixels = rng.integers(0, 256, (per_file, 3072)).astype(np.uint8)
        np.concatenate([labels[:, None], pixels], 1).tofile(directory / f"data_batch_{i}.bin")
        all_labels.append(labels)
    labels = rng.integers(0, 10, n_test).astype(np.uint8)
    pixels = rng.integers(0, 256, (n_test, 3072)).astype(np.uint8)
    np.concatenate([labels[:, None], pixels], 1).tofile(directory / "test_batch.bin")
    return np.concatenate(all_labels), labels


@pytest.fixture
def cifar_dir(tmp_path):
    d = tmp_path / "cifar"
    write_cifar(d)
    return d


def toy_dataset(n=64, size=16, num_classes=4, seed=0, name="toy"):
    """Random images whose per-class colour offset makes the labels learnable."""
    from thumbnet.dataio import ImageDataset

    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    tint = rng.integers(40, 215, size=(num_classes, 3))
    noise = rng.normal(0, 30, size=(n, 3, size, size))
    images = np.clip(tint[labels][:, :, None, None] + noise, 0, 255).astype(np.uint8)
    return ImageDataset(images, labels, num_classes, name=name)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
