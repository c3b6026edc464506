"""Small reference classifiers: definition, forward, training, persistence.

Quantization placement convention (one consistent choice, documented):

* Each parameterized layer (dense / conv2d / batchnorm) owns the chain of
  relu and residual-add layers immediately following it.  Its *activation
  point* is the end of that chain; the tensor there is fake-quantized with
  the layer's activation spec.  Pooling and flatten pass quantized values
  through unchanged.
* Residual-add inputs are quantized (with the owning layer's activation
  spec) before the add; the sum is then quantized at the activation point.
* Bias terms are never quantized.  Batch-norm runs in inference form with
  stored statistics; its scale vector counts as the layer's "weights".

The model file format is a JSON manifest plus a little-endian float64 blob;
round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, ModelFormatError, TrainingError, ValidationError
from .quantization import QuantConfig, quantize, quantize_traced
from .tensor import Tape, Tensor

FORMAT_VERSION = 1
PARAM_KINDS = ("dense", "conv2d", "batchnorm")
_CHAIN_KINDS = ("relu", "residual_add")

__all__ = [
    "LayerSpec",
    "NetworkDef",
    "ForwardTrace",
    "TrainConfig",
    "EvalResult",
    "forward",
    "train",
    "evaluate",
    "save_network",
    "load_network",
    "build_mlp",
    "build_tiny_cnn",
]


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a kind plus its hyperparameters."""

    kind: str
    args: tuple = ()

    def arg(self, name):
        return dict(self.args)[name]

    @property
    def argdict(self) -> dict:
        return dict(self.args)

    @staticmethod
    def dense(in_dim: int, out_dim: int) -> "LayerSpec":
        return LayerSpec("dense", (("in_dim", in_dim), ("out_dim", out_dim)))

    @staticmethod
    def conv2d(in_channels, out_channels, kernel, stride=1, pad=0) -> "LayerSpec":
        return LayerSpec("conv2d", (("in_channels", in_channels), ("out_channels", out_channels),
                                    ("kernel", kernel), ("stride", stride), ("pad", pad)))

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec("relu")

    @staticmethod
    def maxpool(window: int, stride: int | None = None) -> "LayerSpec":
        return LayerSpec("maxpool", (("window", window), ("stride", stride or window)))

    @staticmethod
    def avgpool(window: int, stride: int | None = None) -> "LayerSpec":
        return LayerSpec("avgpool", (("window", window), ("stride", stride or window)))

    @staticmethod
    def batchnorm(num_features: int, eps: float = 1e-5) -> "LayerSpec":
        return LayerSpec("batchnorm", (("num_features", num_features), ("eps", eps)))

    @staticmethod
    def flatten() -> "LayerSpec":
        return LayerSpec("flatten")

    @staticmethod
    def residual_add(source: int) -> "LayerSpec":
        return LayerSpec("residual_add", (("source", source),))

    @staticmethod
    def softmax_head() -> "LayerSpec":
        return LayerSpec("softmax_head")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.argdict}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        args = tuple((k, v) for k, v in d.items() if k != "kind")
        return cls(d["kind"], args)


def _infer_shapes(layers: list[LayerSpec], input_shape: tuple, num_classes: int) -> list[tuple]:
    """Per-layer output shapes (batch excluded); raises on inconsistency."""
    heads = [i for i, l in enumerate(layers) if l.kind == "softmax_head"]
    if len(heads) != 1 or heads[0] != len(layers) - 1:
        raise ValidationError("network must have exactly one softmax_head, as the last layer")
    shapes: list[tuple] = []
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            if len(cur) != 1:
                raise DimensionError(f"layer {i} (dense): expects flat input, got {cur}")
            if cur[0] != layer.arg("in_dim"):
                raise DimensionError(
                    f"layer {i} (dense): in_dim {layer.arg('in_dim')} != incoming {cur[0]}")
            cur = (layer.arg("out_dim"),)
        elif k == "conv2d":
            if len(cur) != 3:
                raise DimensionError(f"layer {i} (conv2d): expects [c,h,w] input, got {cur}")
            if cur[0] != layer.arg("in_channels"):
                raise DimensionError(
                    f"layer {i} (conv2d): in_channels {layer.arg('in_channels')} != incoming {cur[0]}")
            kk, s, p = layer.arg("kernel"), layer.arg("stride"), layer.arg("pad")
            oh, ow = T._conv_out_hw(cur[1], cur[2], kk, kk, s, p)
            cur = (layer.arg("out_channels"), oh, ow)
        elif k in ("maxpool", "avgpool"):
            if len(cur) != 3:
                raise DimensionError(f"layer {i} ({k}): expects [c,h,w] input, got {cur}")
            wdw, s = layer.arg("window"), layer.arg("stride")
            if wdw > cur[1] or wdw > cur[2]:
                raise DimensionError(f"layer {i} ({k}): window {wdw} exceeds input {cur[1:]} ")
            cur = (cur[0], (cur[1] - wdw) // s + 1, (cur[2] - wdw) // s + 1)
        elif k == "batchnorm":
            if len(cur) < 1 or cur[0] != layer.arg("num_features"):
                raise DimensionError(
                    f"layer {i} (batchnorm): num_features {layer.arg('num_features')} != incoming {cur}")
        elif k == "relu":
            pass
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        elif k == "residual_add":
            src = layer.arg("source")
            if not 0 <= src < i:
                raise ValidationError(f"layer {i} (residual_add): source {src} must precede it")
            if shapes[src] != cur:
                raise DimensionError(
                    f"layer {i} (residual_add): source shape {shapes[src]} != incoming {cur}")
        elif k == "softmax_head":
            if cur != (num_classes,):
                raise DimensionError(
                    f"layer {i} (softmax_head): expects ({num_classes},) logits, got {cur}")
        else:
            raise ValidationError(f"layer {i}: unknown kind {k!r}")
        shapes.append(cur)
    return shapes


_PARAM_FIELDS = {"dense": ("weights", "bias"), "conv2d": ("weights", "bias"),
                 "batchnorm": ("weights", "bias", "mean", "var")}


def _expected_param_shapes(layer: LayerSpec) -> dict[str, tuple]:
    if layer.kind == "dense":
        return {"weights": (layer.arg("in_dim"), layer.arg("out_dim")),
                "bias": (layer.arg("out_dim"),)}
    if layer.kind == "conv2d":
        k = layer.arg("kernel")
        return {"weights": (layer.arg("out_channels"), layer.arg("in_channels"), k, k),
                "bias": (layer.arg("out_channels"),)}
    if layer.kind == "batchnorm":
        c = (layer.arg("num_features"),)
        return {"weights": c, "bias": c, "mean": c, "var": c}
    return {}


@dataclass
class NetworkDef:
    """Ordered layer graph plus parameters; immutable once built."""

    layers: list[LayerSpec]
    params: dict[int, dict[str, Tensor]]
    num_classes: int
    input_shape: tuple
    name: str = "net"
    training: dict | None = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._shapes = _infer_shapes(self.layers, self.input_shape, self.num_classes)
        if not self.param_layers():
            raise ValidationError("network needs at least one parameterized layer")
        for i in self.param_layers():
            if i not in self.params:
                raise ValidationError(f"layer {i} ({self.layers[i].kind}) has no parameters")
            expect = _expected_param_shapes(self.layers[i])
            for fname, shape in expect.items():
                got = self.params[i][fname].shape
                if got != shape:
                    raise DimensionError(
                        f"layer {i}: parameter {fname} shape {got}, expected {shape}")

    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in PARAM_KINDS]

    def activation_points(self) -> dict[int, int]:
        """Map parameterized layer -> index whose output is its activation."""
        points = {}
        for p in self.param_layers():
            point = p
            j = p + 1
            while j < len(self.layers) and self.layers[j].kind in _CHAIN_KINDS:
                point = j
                j += 1
            points[p] = point
        return points

    def layer_shapes(self) -> list[tuple]:
        return list(self._shapes)

    def with_params(self, params: dict[int, dict[str, Tensor]]) -> "NetworkDef":
        return replace(self, params=params)


@dataclass
class ForwardTrace:
    """Per-layer outputs as emitted (quantized where configured) plus logits."""

    activations: list[Tensor]
    logits: Tensor
    weight_err: dict[int, Tensor] = field(default_factory=dict)
    act_err: dict[int, Tensor] = field(default_factory=dict)


def forward(net: NetworkDef, x: Tensor, quant: QuantConfig | None = None,
            tape: Tape | None = None) -> ForwardTrace:
    """Run the network, optionally fake-quantized and/or recorded on a tape.

    With both ``quant`` and ``tape``, every parameterized layer's weight and
    activation quantization errors are recorded as constant leaves so that
    gradients with respect to the quantized tensors are retrievable (FP32
    entries trace a zero error).
    """
    if x.data.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise DimensionError(
            f"forward: input shape {x.shape} does not match (n, *{net.input_shape})")
    if quant is not None:
        quant.validate_for(net)
    points = net.activation_points()
    point_owner = {v: k for k, v in points.items()}
    owner = {}
    last_param = None
    for i, layer in enumerate(net.layers):
        if layer.kind in PARAM_KINDS:
            last_param = i
        owner[i] = last_param

    def traced(value: Tensor, spec):
        if spec.is_fp32 and tape is None:
            return value, None
        if tape is None:
            return quantize(value, spec), None
        tq = quantize_traced(value, spec, tape)
        return tq.q, tq.err

    acts: list[Tensor] = []
    weight_err: dict[int, Tensor] = {}
    act_err: dict[int, Tensor] = {}
    cur = x
    logits = None
    for i, layer in enumerate(net.layers):
        k = layer.kind
        if k in PARAM_KINDS:
            p = net.params[i]
            w, b = p["weights"], p["bias"]
            if quant is not None:
                w, werr = traced(w, quant.spec(i).weight)
                if werr is not None:
                    weight_err[i] = werr
            if k == "dense":
                cur = T.matmul(tape, cur, w)
                cur = T.add(tape, cur, T.channel_broadcast(tape, b, cur.shape))
            elif k == "conv2d":
                cur = T.conv2d(tape, cur, w, layer.arg("stride"), layer.arg("pad"))
                cur = T.add(tape, cur, T.channel_broadcast(tape, b, cur.shape))
            else:  # batchnorm, inference form
                inv_std = Tensor(1.0 / np.sqrt(p["var"].data + layer.arg("eps")))
                scale = T.mul(tape, w, inv_std)
                shift = T.sub(tape, b, T.mul(tape, p["mean"], scale))
                cur = T.add(tape, T.mul(tape, cur, T.channel_broadcast(tape, scale, cur.shape)),
                            T.channel_broadcast(tape, shift, cur.shape))
        elif k == "relu":
            cur = T.relu(tape, cur)
        elif k == "maxpool":
            cur = T.pool2d(tape, cur, "max", layer.arg("window"), layer.arg("stride"))
        elif k == "avgpool":
            cur = T.pool2d(tape, cur, "avg", layer.arg("window"), layer.arg("stride"))
        elif k == "flatten":
            cur = T.reshape(tape, cur, (cur.shape[0], cur.size // cur.shape[0]))
        elif k == "residual_add":
            src = acts[layer.arg("source")]
            if quant is not None and owner[i] is not None:
                aspec = quant.spec(owner[i]).activation
                cur, _ = traced(cur, aspec)
                src, _ = traced(src, aspec)
            cur = T.add(tape, cur, src)
        elif k == "softmax_head":
            logits = cur
        if quant is not None and i in point_owner:
            p = point_owner[i]
            cur, aerr = traced(cur, quant.spec(p).activation)
            if aerr is not None:
                act_err[p] = aerr
            if logits is not None and points[p] == i:
                logits = cur
        acts.append(cur)
    # softmax_head marks the logits; when the head's producer is an
    # activation point the quantized value above already replaced them.
    if logits is None:
        logits = cur
    return ForwardTrace(activations=acts, logits=logits, weight_err=weight_err, act_err=act_err)


# ---------------------------------------------------------------------------
# training / evaluation


@dataclass
class TrainConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class EvalResult:
    top1: float
    top5: float | None
    task_loss: float

    def to_dict(self) -> dict:
        return {"top1": self.top1, "top5": self.top5, "task_loss": self.task_loss}


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes, dtype=np.float64)[labels]


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def _check_labels(dataset, num_classes):
    if dataset.images.shape[0] == 0:
        raise ValidationError("dataset is empty")
    if dataset.labels.min(initial=0) < 0 or dataset.labels.max(initial=0) >= num_classes:
        raise ValidationError(f"dataset labels must lie in [0, {num_classes})")


def train(net: NetworkDef, dataset, cfg: TrainConfig = TrainConfig()) -> NetworkDef:
    """Mini-batch cross-entropy training; deterministic under a fixed seed."""
    _check_labels(dataset, net.num_classes)
    if cfg.algorithm not in ("adam", "sgd"):
        raise ValidationError(f"unknown optimizer {cfg.algorithm!r}")
    params = {i: {k: Tensor(v.data.copy()) for k, v in per.items()}
              for i, per in net.params.items()}
    work = net.with_params(params)
    trainable = [(i, fname) for i in net.param_layers()
                 for fname in ("weights", "bias")]
    m = {key: 0.0 for key in trainable}
    v = {key: 0.0 for key in trainable}
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    step = 0
    last_loss = math.nan
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = Tape()
            batch = Tensor(images[idx])
            targets = Tensor(_onehot(labels[idx], net.num_classes))
            trace = forward(work, batch, None, tape)
            loss = T.softmax_crossentropy(tape, trace.logits, targets)
            last_loss = loss.item()
            if not math.isfinite(last_loss):
                raise TrainingError(
                    f"training diverged: loss={last_loss} at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            grads = tape.backward(loss)
            step += 1
            for i, fname in trainable:
                p = params[i][fname]
                g = grads[p].data
                if cfg.algorithm == "sgd":
                    m[(i, fname)] = cfg.momentum * m[(i, fname)] + g
                    new = p.data - cfg.learning_rate * m[(i, fname)]
                else:
                    m[(i, fname)] = cfg.beta1 * m[(i, fname)] + (1 - cfg.beta1) * g
                    v[(i, fname)] = cfg.beta2 * v[(i, fname)] + (1 - cfg.beta2) * g * g
                    mhat = m[(i, fname)] / (1 - cfg.beta1 ** step)
                    vhat = v[(i, fname)] / (1 - cfg.beta2 ** step)
                    new = p.data - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
                params[i][fname] = Tensor(new)
    trained = work.with_params(params)
    record = {
        "algorithm": cfg.algorithm, "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed,
        "final_loss": last_loss,
    }
    if cfg.epochs > 0:
        record["train_top1"] = evaluate(trained, dataset).top1
    return replace(trained, training=record)


def evaluate(net: NetworkDef, dataset, quant: QuantConfig | None = None,
             batch_size: int = 256) -> EvalResult:
    """Top-1/top-5 accuracy (ties broken by class index) and mean task loss."""
    _check_labels(dataset, net.num_classes)
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    correct1 = 0
    correct5 = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        chunk = images[start : start + batch_size]
        lab = labels[start : start + batch_size]
        logits = forward(net, Tensor(chunk), quant).logits.data
        order = np.argsort(-logits, axis=1, kind="stable")
        correct1 += int((order[:, 0] == lab).sum())
        if net.num_classes >= 5:
            correct5 += int((order[:, :5] == lab[:, None]).any(axis=1).sum())
        lsm = _log_softmax_np(logits)
        loss_sum += float(-lsm[np.arange(len(lab)), lab].sum())
    top5 = correct5 / n if net.num_classes >= 5 else None
    return EvalResult(top1=correct1 / n, top5=top5, task_loss=loss_sum / n)


# ---------------------------------------------------------------------------
# reference architectures


def _he_init(rng, shape, fan_in):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


def build_mlp(num_classes: int = 10, input_shape=(1, 28, 28), seed: int = 0,
              hidden=(128, 64)) -> NetworkDef:
    """Flatten -> dense 784-128 -> relu -> dense 128-64 -> relu -> dense -> head."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    d_in = int(np.prod(input_shape))
    layers = [LayerSpec.flatten()]
    params: dict[int, dict[str, Tensor]] = {}
    prev = d_in
    for width in list(hidden) + [num_classes]:
        idx = len(layers)
        layers.append(LayerSpec.dense(prev, width))
        params[idx] = {"weights": _he_init(rng, (prev, width), prev),
                       "bias": Tensor(np.zeros(width))}
        if width != num_classes:
            layers.append(LayerSpec.relu())
        prev = width
    layers.append(LayerSpec.softmax_head())
    return NetworkDef(layers, params, num_classes, tuple(input_shape), name="mlp")


def build_tiny_cnn(num_classes: int = 10, input_shape=(1, 28, 28), seed: int = 0) -> NetworkDef:
    """conv(8,3x3)-relu-maxpool-conv(16,3x3)-relu-residual-add-avgpool-dense.

    The residual add joins the second conv's pre- and post-relu outputs,
    the only earlier tensor with a compatible shape.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    c, h, w = input_shape
    layers = [
        LayerSpec.conv2d(c, 8, 3, stride=1, pad=1),        # 0
        LayerSpec.relu(),                                  # 1
        LayerSpec.maxpool(2),                              # 2
        LayerSpec.conv2d(8, 16, 3, stride=1, pad=1),       # 3
        LayerSpec.relu(),                                  # 4
        LayerSpec.residual_add(source=3),                  # 5
        LayerSpec.avgpool(2),                              # 6
        LayerSpec.flatten(),                               # 7
    ]
    h2, w2 = h // 2 // 2, w // 2 // 2
    flat = 16 * h2 * w2
    layers.append(LayerSpec.dense(flat, num_classes))      # 8
    layers.append(LayerSpec.softmax_head())                # 9
    params = {
        0: {"weights": _he_init(rng, (8, c, 3, 3), c * 9), "bias": Tensor(np.zeros(8))},
        3: {"weights": _he_init(rng, (16, 8, 3, 3), 8 * 9), "bias": Tensor(np.zeros(16))},
        8: {"weights": _he_init(rng, (flat, num_classes), flat),
            "bias": Tensor(np.zeros(num_classes))},
    }
    return NetworkDef(layers, params, num_classes, tuple(input_shape), name="tiny_cnn")


# ---------------------------------------------------------------------------
# persistence


def _as_pair(path: str) -> tuple[str, str]:
    base = path[: -len(".json")] if path.endswith(".json") else path
    return base + ".json", base + ".bin"


def save_network(net: NetworkDef, path: str) -> tuple[str, str]:
    """Write ``<name>.json`` + ``<name>.bin``; returns the two paths."""
    from .fileio import atomic_write_bytes, atomic_write_text

    json_path, bin_path = _as_pair(path)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "name": net.name,
        "num_classes": net.num_classes,
        "input_shape": list(net.input_shape),
        "layers": [l.to_dict() for l in net.layers],
        "params": {},
        "training": net.training,
    }
    chunks = []
    offset = 0
    for i in sorted(net.params):
        entry = {}
        for fname in _PARAM_FIELDS[net.layers[i].kind]:
            t = net.params[i][fname]
            count = t.size
            entry[fname] = {"shape": list(t.shape), "offset": offset, "count": count}
            chunks.append(t.data.astype("<f8").tobytes())
            offset += count
        manifest["params"][str(i)] = entry
    manifest["blob_count"] = offset
    atomic_write_text(json_path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    atomic_write_bytes(bin_path, b"".join(chunks))
    return json_path, bin_path


def load_network(path: str) -> NetworkDef:
    """Load a manifest/blob pair; round-trip with :func:`save_network` is bit-exact."""
    json_path, bin_path = _as_pair(path)
    try:
        with open(json_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{json_path}: invalid JSON at offset {e.pos}: {e.msg}") from e
    for fld in ("format_version", "num_classes", "input_shape", "layers", "params", "blob_count"):
        if fld not in manifest:
            raise ModelFormatError(f"{json_path}: manifest missing field {fld!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(
            f"{json_path}: unsupported format_version {manifest['format_version']}")
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    expected = manifest["blob_count"] * 8
    if len(blob) != expected:
        raise ModelFormatError(
            f"{bin_path}: blob length mismatch: expected {expected} bytes, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    params: dict[int, dict[str, Tensor]] = {}
    for key, entry in manifest["params"].items():
        i = int(key)
        per = {}
        for fname, meta in entry.items():
            shape = tuple(meta["shape"])
            count, offset = meta["count"], meta["offset"]
            if int(np.prod(shape, dtype=np.int64)) != count:
                raise ModelFormatError(
                    f"{json_path}: layer {i} parameter {fname}: shape {shape} disagrees with count {count}")
            if offset + count > values.size:
                raise ModelFormatError(
                    f"{bin_path}: layer {i} parameter {fname}: blob range {offset}:{offset + count} out of bounds")
            per[fname] = Tensor(values[offset : offset + count].reshape(shape))
        params[i] = per
    try:
        return NetworkDef(layers, params, manifest["num_classes"],
                          tuple(manifest["input_shape"]), name=manifest.get("name", "net"),
                          training=manifest.get("training"))
    except (ValidationError, DimensionError) as e:
        raise ModelFormatError(f"{json_path}: inconsistent manifest: {e}") from e
