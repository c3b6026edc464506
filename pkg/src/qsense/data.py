"""Calibration datasets: IDX ingest, synthetic blobs, uniform noise, golden set.

``LabeledDataset.images`` is a raw float64 array of shape [n, c, h, w] in the
model's preprocessed input range; values become :class:`~qsense.tensor.Tensor`
leaves at the compute boundary.  Every constructor here is pure and
deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IdxFormatError, ValidationError
from .fileio import atomic_write_bytes, atomic_write_text
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

__all__ = [
    "Preprocessing",
    "LabeledDataset",
    "GoldenSet",
    "load_idx",
    "write_idx",
    "make_blobs",
    "make_noise",
    "golden_set",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class Preprocessing:
    """How raw byte pixels map into model input range.

    ``normalize``: x/255 -> [0, 1].  ``standardize``: (x - mean)/std with the
    configured constants (defaults give [-1, 1]).
    """

    kind: str = "normalize"
    mean: float = 127.5
    std: float = 127.5

    def __post_init__(self):
        if self.kind not in ("normalize", "standardize"):
            raise ValidationError(f"unknown preprocessing {self.kind!r}")
        if self.kind == "standardize" and self.std <= 0:
            raise ValidationError("standardize needs a positive std")

    def apply(self, raw: np.ndarray) -> np.ndarray:
        if self.kind == "normalize":
            return raw / 255.0
        return (raw - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        """Back to integer pixel bytes (clipped, rounded)."""
        raw = x * 255.0 if self.kind == "normalize" else x * self.std + self.mean
        return np.clip(np.round(raw), 0, 255).astype(np.uint8)

    def value_range(self) -> tuple[float, float]:
        if self.kind == "normalize":
            return 0.0, 1.0
        return (0.0 - self.mean) / self.std, (255.0 - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessing":
        return cls(d["kind"], float(d.get("mean", 127.5)), float(d.get("std", 127.5)))


@dataclass
class LabeledDataset:
    """Images in model input range plus integer class labels."""

    images: np.ndarray                    # [n, c, h, w] float64
    labels: np.ndarray                    # [n] int64
    provenance: str                       # real | noise | generated | synthetic-blobs
    num_classes: int
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [n, c, h, w], got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.provenance,
                              self.num_classes, self.preprocessing, self.seed)


@dataclass(frozen=True)
class GoldenSet:
    """One-hot target vector per class: the identity matrix, row c for class c."""

    vectors: Tensor

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


def golden_set(num_classes: int) -> GoldenSet:
    if num_classes < 2:
        raise ValidationError(f"golden set needs at least 2 classes, got {num_classes}")
    return GoldenSet(Tensor(np.eye(num_classes)))


# ---------------------------------------------------------------------------
# IDX format


def _read_header(blob: bytes, path: str, expected_magic: int, ndims: int) -> tuple:
    header = 4 + 4 * ndims
    if len(blob) < header:
        raise IdxFormatError(f"{path}: truncated header: expected {header} bytes, got {len(blob)}")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndims}I", blob[4:header])
    payload = int(np.prod(dims, dtype=np.int64))
    if len(blob) != header + payload:
        raise IdxFormatError(
            f"{path}: payload length mismatch: expected {header + payload} bytes, got {len(blob)}")
    return dims, blob[header:]


def load_idx(images_path: str, labels_path: str,
             preprocessing: Preprocessing | None = None,
             provenance: str = "real", num_classes: int | None = None) -> LabeledDataset:
    """Parse an IDX image/label pair bit-exactly; pixels scaled to [0, 1]."""
    pre = preprocessing or Preprocessing()
    with open(images_path, "rb") as fh:
        iblob = fh.read()
    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    (n, h, w), ipayload = _read_header(iblob, str(images_path), IDX_IMAGES_MAGIC, 3)
    (nl,), lpayload = _read_header(lblob, str(labels_path), IDX_LABELS_MAGIC, 1)
    if n != nl:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {n} images, {labels_path} has {nl} labels")
    raw = np.frombuffer(ipayload, dtype=np.uint8).astype(np.float64).reshape(n, 1, h, w)
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    nc = num_classes if num_classes is not None else (int(labels.max()) + 1 if n else 1)
    return LabeledDataset(pre.apply(raw), labels, provenance, nc, pre)


def write_idx(images_path: str, labels_path: str, dataset: LabeledDataset) -> None:
    """Serialize back to an IDX pair, inverting the dataset's preprocessing."""
    n = len(dataset)
    if dataset.images.shape[1] != 1:
        raise ValidationError("IDX files hold single-channel images")
    _, _, h, w = dataset.images.shape
    raw = dataset.preprocessing.invert(dataset.images[:, 0])
    iblob = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + raw.tobytes()
    lblob = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    atomic_write_bytes(images_path, iblob)
    atomic_write_bytes(labels_path, lblob)


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_field(rng, hw: tuple[int, int], cutoff: float) -> np.ndarray:
    """Zero-mean, unit-std low-frequency random field (FFT low-pass of white noise)."""
    h, w = hw
    f = rng.standard_normal((h, w))
    spectrum = np.fft.rfft2(f)
    ky = np.fft.fftfreq(h)[:, None] * h
    kx = np.fft.rfftfreq(w)[None, :] * w
    field = np.fft.irfft2(spectrum * ((ky**2 + kx**2) <= cutoff**2), s=(h, w))
    return (field - field.mean()) / (field.std() + 1e-12)


def blob_class_means(task_seed: int, num_classes: int, input_shape=(1, 28, 28),
                     base_amp: float = 0.22, detail_amp: float = 0.055) -> np.ndarray:
    """Class mean images for the built-in task.

    Classes come in look-alike pairs: each pair shares a dominant smooth
    pattern and its members differ by a weaker fine pattern, so class
    identity rides on activation magnitudes the way fine-grained natural
    categories do.  Values are mid-gray plus the patterns, kept in [0, 1].
    """
    _, h, w = input_shape
    rng = np.random.default_rng(np.random.SeedSequence((task_seed, 7)))
    means = []
    for _pair in range((num_classes + 1) // 2):
        base = _smooth_field(rng, (h, w), cutoff=3)
        for _member in range(2):
            if len(means) < num_classes:
                detail = _smooth_field(rng, (h, w), cutoff=6)
                means.append(0.5 + base_amp * base + detail_amp * detail)
    return np.clip(np.stack(means), 0.02, 0.98).reshape(num_classes, *input_shape)


def make_blobs(seed: int, n_per_class: int, num_classes: int,
               input_shape=(1, 28, 28), sigma: float = 0.06,
               jitter: float = 0.05) -> LabeledDataset:
    """Gaussian cluster per class around the built-in class means, in [0, 1].

    Task (class means) and samples both derive from ``seed``; use
    :func:`make_blob_split` to draw disjoint train/eval splits of one task.
    """
    return make_blob_split(seed, seed, n_per_class, num_classes, input_shape,
                           sigma=sigma, jitter=jitter)


def make_blob_split(task_seed: int, sample_seed: int, n_per_class: int, num_classes: int,
                    input_shape=(1, 28, 28), sigma: float = 0.06,
                    jitter: float = 0.05, means: np.ndarray | None = None) -> LabeledDataset:
    """Blobs whose class means come from ``task_seed`` and samples from ``sample_seed``.

    Per-sample Gaussian pixel noise plus a global brightness jitter, clipped
    to [0, 1]; ``means`` overrides the built-in class means when given.
    """
    if means is None:
        means = blob_class_means(task_seed, num_classes, input_shape)
    means = means.reshape(num_classes, -1)
    rng = np.random.default_rng(np.random.SeedSequence((sample_seed, 11)))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = means[labels] + sigma * rng.standard_normal((len(labels), means.shape[1]))
    if jitter:
        images = images + jitter * rng.standard_normal((len(labels), 1))
    images = np.clip(images, 0.0, 1.0)
    return LabeledDataset(images.reshape(len(labels), *input_shape), labels,
                          "synthetic-blobs", num_classes, Preprocessing(), seed=sample_seed)


def make_noise(seed: int, n: int, input_shape=(1, 28, 28),
               preprocessing: Preprocessing | None = None,
               num_classes: int = 10) -> LabeledDataset:
    """Uniform integer pixels in [0, 255] then preprocessing; round-robin labels.

    The labels carry no signal; the provenance tag flags that.
    """
    pre = preprocessing or Preprocessing()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))
    raw = rng.integers(0, 256, size=(n, *input_shape)).astype(np.float64)
    labels = np.arange(n, dtype=np.int64) % num_classes
    return LabeledDataset(pre.apply(raw), labels, "noise", num_classes, pre, seed=seed)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(base_path: str, dataset: LabeledDataset, extra: dict | None = None) -> dict:
    """Write ``<base>-images.idx``, ``<base>-labels.idx`` and ``<base>.json``."""
    base = str(base_path)
    images_path, labels_path = base + "-images.idx", base + "-labels.idx"
    write_idx(images_path, labels_path, dataset)
    manifest = {
        "schema_version": 1,
        "provenance": dataset.provenance,
        "seed": dataset.seed,
        "num_classes": dataset.num_classes,
        "count": len(dataset),
        "shape": list(dataset.images.shape[1:]),
        "preprocessing": dataset.preprocessing.to_dict(),
        "images": images_path.rsplit("/", 1)[-1],
        "labels": labels_path.rsplit("/", 1)[-1],
    }
    if extra:
        manifest["extra"] = extra
    atomic_write_text(base + ".json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_dataset(manifest_path: str) -> LabeledDataset:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    d = str(manifest_path).rsplit("/", 1)[0] if "/" in str(manifest_path) else "."
    pre = Preprocessing.from_dict(manifest["preprocessing"])
    ds = load_idx(f"{d}/{manifest['images']}", f"{d}/{manifest['labels']}",
                  preprocessing=pre, provenance=manifest["provenance"],
                  num_classes=manifest["num_classes"])
    ds.seed = manifest.get("seed")
    return ds
