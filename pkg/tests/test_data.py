import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsense.data import (GoldenSet, LabeledDataset, Preprocessing, golden_set,
                         load_dataset, load_idx, make_blob_split, make_blobs,
                         make_noise, save_dataset, write_idx)
from qsense.errors import IdxFormatError, ValidationError
from qsense.network import LayerSpec, NetworkDef, TrainConfig, build_mlp, train
from qsense.tensor import Tensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _idx_pair_bytes(n=2, h=3, w=3, pixel=255):
    images = struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + bytes([pixel]) * (n * h * w)
    labels = struct.pack(">II", LABELS_MAGIC, n) + bytes(range(n))
    return images, labels


def _write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return str(ip), str(lp)


def test_load_idx_scales_to_unit(tmp_path):
    ip, lp = _write_pair(tmp_path, *_idx_pair_bytes(n=1, pixel=255))
    ds = load_idx(ip, lp)
    assert ds.images.shape == (1, 1, 3, 3)
    assert np.all(ds.images == 1.0)


def test_load_idx_bad_magic_names_it(tmp_path):
    images, labels = _idx_pair_bytes()
    images = struct.pack(">I", 0x00000802) + images[4:]
    ip, lp = _write_pair(tmp_path, images, labels)
    with pytest.raises(IdxFormatError, match="0x00000802"):
        load_idx(ip, lp)


def test_load_idx_truncated_payload(tmp_path):
    images, labels = _idx_pair_bytes()
    ip, lp = _write_pair(tmp_path, images[:-3], labels)
    with pytest.raises(IdxFormatError, match="expected"):
        load_idx(ip, lp)


def test_load_idx_count_mismatch(tmp_path):
    images, _ = _idx_pair_bytes(n=2)
    _, labels = _idx_pair_bytes(n=3)
    ip, lp = _write_pair(tmp_path, images, labels)
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(ip, lp)


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.binary(min_size=0, max_size=64))
def test_load_idx_fuzzed_headers_raise_cleanly(tmp_path_factory, blob):
    tmp = tmp_path_factory.mktemp("fuzz")
    good_images, good_labels = _idx_pair_bytes()
    ip = tmp / "i.idx"
    lp = tmp / "l.idx"
    ip.write_bytes(blob)
    lp.write_bytes(good_labels)
    if blob == good_images:
        return
    with pytest.raises((IdxFormatError, ValidationError)):
        load_idx(str(ip), str(lp))


def test_idx_write_read_round_trip_bytes(tmp_path):
    images, labels = _idx_pair_bytes(n=3)
    ip, lp = _write_pair(tmp_path, images, labels)
    ds = load_idx(ip, lp)
    ip2, lp2 = str(tmp_path / "i2.idx"), str(tmp_path / "l2.idx")
    write_idx(ip2, lp2, ds)
    assert open(ip2, "rb").read() == images
    assert open(lp2, "rb").read() == labels


def test_idx_round_trip_random_bytes(tmp_path):
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, size=(5, 1, 4, 4)).astype(np.uint8)
    images = struct.pack(">IIII", IMAGES_MAGIC, 5, 4, 4) + raw.tobytes()
    labels = struct.pack(">II", LABELS_MAGIC, 5) + bytes([0, 1, 2, 3, 4])
    ip, lp = _write_pair(tmp_path, images, labels)
    ds = load_idx(ip, lp)
    write_idx(str(tmp_path / "o.idx"), str(tmp_path / "ol.idx"), ds)
    assert (tmp_path / "o.idx").read_bytes() == images


# ---------------------------------------------------------------------------
# synthetic datasets


def test_blobs_deterministic():
    a = make_blobs(5, 3, 4)
    b = make_blobs(5, 3, 4)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.provenance == "synthetic-blobs"


def test_blobs_empty_accepted_and_flagged():
    ds = make_blobs(5, 0, 4)
    assert len(ds) == 0 and ds.is_empty


def test_blobs_range_and_labels():
    ds = make_blobs(5, 4, 10)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.array_equal(np.sort(np.unique(ds.labels)), np.arange(10))


def test_blob_split_shares_task_but_not_samples():
    a = make_blob_split(5, 1, 2, 4)
    b = make_blob_split(5, 2, 2, 4)
    c = make_blob_split(6, 1, 2, 4)
    assert not np.array_equal(a.images, b.images)
    # same task: per-class means agree closely between splits
    ma = a.images.reshape(8, -1)[a.labels == 0].mean(axis=0)
    mb = b.images.reshape(8, -1)[b.labels == 0].mean(axis=0)
    mc = c.images.reshape(8, -1)[c.labels == 0].mean(axis=0)
    assert np.abs(ma - mb).mean() < np.abs(ma - mc).mean()


def test_well_separated_blobs_linear_classifier_99():
    # means separated by >= 4 sigma: linear (no-hidden-layer) model nails it
    rng = np.random.default_rng(0)
    means = np.stack([np.full(16, 0.2), np.full(16, 0.8)])  # distance 2.4 = 40 sigma
    ds = make_blob_split(0, 1, 40, 2, input_shape=(1, 4, 4), sigma=0.06,
                         jitter=0.0, means=means.reshape(2, 1, 4, 4))
    net = build_mlp(num_classes=2, input_shape=(1, 4, 4), seed=1, hidden=())
    out = train(net, ds, TrainConfig(epochs=30, learning_rate=5e-3, batch_size=16, seed=3))
    assert out.training["train_top1"] >= 0.99


def test_noise_normalize_range():
    ds = make_noise(1, 8)
    assert ds.provenance == "noise"
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_noise_standardize_range():
    ds = make_noise(1, 8, preprocessing=Preprocessing("standardize", 127.5, 127.5))
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0


def test_noise_round_robin_labels_and_determinism():
    a = make_noise(9, 7, num_classes=3)
    b = make_noise(9, 7, num_classes=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, np.arange(7) % 3)


# ---------------------------------------------------------------------------
# golden set


def test_golden_set_is_identity():
    g = golden_set(3)
    assert np.array_equal(g.vectors.data, np.eye(3))
    assert np.all(g.vectors.data.sum(axis=1) == 1.0)


def test_golden_set_paper_scale():
    g = golden_set(1000)
    assert g.vectors.shape == (1000, 1000)
    assert np.array_equal(g.vectors.data, np.eye(1000))


def test_golden_set_rejects_single_class():
    with pytest.raises(ValidationError):
        golden_set(1)


# ---------------------------------------------------------------------------
# dataset manifests


def test_save_load_dataset_manifest(tmp_path):
    ds = make_blobs(5, 2, 4)
    save_dataset(str(tmp_path / "blobby"), ds, extra={"note": 1})
    back = load_dataset(str(tmp_path / "blobby.json"))
    assert back.provenance == "synthetic-blobs"
    assert back.num_classes == 4
    assert np.array_equal(back.labels, ds.labels)
    # images pass through u8 quantization: within half a pixel step
    assert np.abs(back.images - ds.images).max() <= (0.5 / 255) + 1e-12


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.zeros(3, dtype=int), "real", 2)
    with pytest.raises(ValidationError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), "real", 2)
