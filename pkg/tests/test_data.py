import os
import struct
from pathlib import Path

import numpy as np
import pytest

from fedtrip.data import (
    IDX_IMAGES_MAGIC,
    blob_centers,
    load_mnist_idx,
    make_synthetic_blobs,
    write_mnist_idx,
)
from fedtrip.errors import ConfigError, IdxFormatError
from fedtrip.nn import Dataset, MlpSpec, SgdmState, accuracy, init_params, loss_and_grad, sgdm_step


@pytest.fixture
def tiny_idx(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(7, 4, 3)).astype(np.uint8)
    px[0, 0, :] = 0
    px[0, 1, :] = 0
    labels = np.arange(7) % 10
    data = Dataset(px.reshape(7, -1) / 255.0, labels, 10)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_mnist_idx(data, img, lab, shape=(4, 3))
    return data, img, lab, px


def decode_images_struct(path):
    with open(path, "rb") as f:
        magic, n, r, c = struct.unpack(">IIII", f.read(16))
        assert magic == 2051
        return [list(f.read(r * c)) for _ in range(n)]


def test_idx_roundtrip(tiny_idx):
    data, img, lab, _ = tiny_idx
    back = load_mnist_idx(img, lab)
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.features.max() <= 1.0 and back.features.min() >= 0.0


def test_first_image_nonzero_count_matches_independent_decoder(tiny_idx):
    _, img, lab, px = tiny_idx
    ref = decode_images_struct(img)
    loaded = load_mnist_idx(img, lab)
    assert int(np.count_nonzero(loaded.features[0])) == sum(1 for b in ref[0] if b) == np.count_nonzero(px[0])


def test_bad_magic_reports_offset_zero(tiny_idx, tmp_path):
    _, img, lab, _ = tiny_idx
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    bad = tmp_path / "bad.idx"
    bad.write_bytes(bytes(raw))
    with pytest.raises(IdxFormatError) as e:
        load_mnist_idx(bad, lab)
    assert e.value.offset == 0


def test_truncated_payload(tiny_idx, tmp_path):
    _, img, lab, _ = tiny_idx
    raw = img.read_bytes()
    bad = tmp_path / "short.idx"
    bad.write_bytes(raw[:-5])
    with pytest.raises(IdxFormatError) as e:
        load_mnist_idx(bad, lab)
    assert e.value.offset == len(raw) - 5


def test_truncated_header(tmp_path, tiny_idx):
    _, _, lab, _ = tiny_idx
    bad = tmp_path / "hdr.idx"
    bad.write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC))
    with pytest.raises(IdxFormatError):
        load_mnist_idx(bad, lab)


def test_count_mismatch(tiny_idx, tmp_path):
    _, img, _, _ = tiny_idx
    lab = tmp_path / "lab6.idx"
    lab.write_bytes(struct.pack(">II", 0x801, 6) + bytes(range(6)))
    with pytest.raises(IdxFormatError):
        load_mnist_idx(img, lab)


def test_write_rejects_bad_shape(tiny_idx, tmp_path):
    data, *_ = tiny_idx
    with pytest.raises(ConfigError):
        write_mnist_idx(data, tmp_path / "a", tmp_path / "b", shape=(5, 5))


@pytest.mark.skipif(not os.environ.get("FEDTRIP_MNIST_DIR"), reason="FEDTRIP_MNIST_DIR not set")
def test_official_mnist_files():
    d = Path(os.environ["FEDTRIP_MNIST_DIR"])
    train = load_mnist_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    test = load_mnist_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    assert train.features.shape == (60000, 784) and test.features.shape == (10000, 784)
    assert np.bincount(train.labels).min() > 5000


def test_blob_centers_equidistant():
    c = blob_centers(10, 20, radius=3.0)
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    off = d[~np.eye(10, dtype=bool)]
    np.testing.assert_allclose(off, 3.0 * np.sqrt(2))
    assert blob_centers(30, 5).shape == (30, 5)


def test_blobs_zero_spread_are_centroids():
    data = make_synthetic_blobs(5, 8, 20, spread=0.0, seed=0)
    c = blob_centers(5, 8)
    pred = np.argmin(np.linalg.norm(data.features[:, None] - c[None], axis=-1), axis=1)
    assert np.all(pred == data.labels)


def test_blobs_deterministic():
    a = make_synthetic_blobs(4, 6, 10, 0.5, seed=9)
    b = make_synthetic_blobs(4, 6, 10, 0.5, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(np.bincount(a.labels), [10] * 4)


def test_blobs_are_learnable():
    data = make_synthetic_blobs(10, 20, 100, 0.5, seed=2)
    spec = MlpSpec(20, (32,), 10)
    w = init_params(spec, np.random.default_rng(0))
    state = SgdmState.fresh(w, 0.05, 0.9)
    rng = np.random.default_rng(1)
    for _ in range(50):
        order = rng.permutation(len(data))
        for s in range(0, len(order), 50):
            idx = order[s : s + 50]
            _, g = loss_and_grad(spec, w, data.features[idx], data.labels[idx])
            w, state = sgdm_step(w, g, state)
    assert accuracy(spec, w, data) > 0.9
