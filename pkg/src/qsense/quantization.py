"""Symmetric uniform fake quantization and activation-range calibration.

The scheme is per-tensor and symmetric with zero always representable:
``step = clip / (2**(bits-1) - 1)``, values rounded half away from zero and
saturated at ``±clip``.  ``FP32`` is the sentinel bit-width for "leave this
tensor alone".  Gradients flow through quantization via the straight-through
trick in :func:`quantize_traced`: the quantization error is recorded as a
constant addend, so the gradient with respect to the quantized tensor is
retrievable and equals the gradient with respect to the error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import Tape, Tensor

FP32 = 32

__all__ = [
    "FP32",
    "QuantSpec",
    "LayerQuant",
    "QuantConfig",
    "CalibrationProfile",
    "TracedQuant",
    "quantize",
    "quantize_traced",
    "calibrate",
    "uniform_config",
]


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width plus absolute clipping range for one tensor."""

    bits: int = FP32
    clip: float = 0.0

    def __post_init__(self):
        if self.bits != FP32 and not 2 <= self.bits <= 16:
            raise ValidationError(f"bits must be in 2..16 or FP32, got {self.bits}")
        if self.bits != FP32 and not self.clip > 0:
            raise ValidationError(f"clip must be positive for {self.bits}-bit, got {self.clip}")

    @property
    def is_fp32(self) -> bool:
        return self.bits == FP32

    @property
    def step(self) -> float:
        if self.is_fp32:
            raise ValidationError("FP32 spec has no step size")
        return self.clip / (2 ** (self.bits - 1) - 1)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(bits=int(d["bits"]), clip=float(d.get("clip", 0.0)))


@dataclass(frozen=True)
class LayerQuant:
    weight: QuantSpec
    activation: QuantSpec


@dataclass
class QuantConfig:
    """Per-layer weight/activation quantization specs, keyed by layer index."""

    layers: dict[int, LayerQuant] = field(default_factory=dict)

    def spec(self, index: int) -> LayerQuant:
        if index not in self.layers:
            raise ValidationError(f"QuantConfig has no entry for layer {index}")
        return self.layers[index]

    def validate_for(self, net) -> None:
        param = set(net.param_layers())
        missing = sorted(param - set(self.layers))
        if missing:
            raise ValidationError(f"QuantConfig missing parameterized layers {missing}")
        unknown = sorted(set(self.layers) - param)
        if unknown:
            raise ValidationError(f"QuantConfig references unknown layers {unknown}")

    def replace(self, index: int, *, weight: QuantSpec | None = None,
                activation: QuantSpec | None = None) -> "QuantConfig":
        """New config with one layer's weight and/or activation spec swapped."""
        entry = self.spec(index)
        new = LayerQuant(weight=weight or entry.weight, activation=activation or entry.activation)
        layers = dict(self.layers)
        layers[index] = new
        return QuantConfig(layers)

    @classmethod
    def fp32(cls, net) -> "QuantConfig":
        spec = QuantSpec(FP32)
        return cls({i: LayerQuant(spec, spec) for i in net.param_layers()})

    def to_dict(self) -> dict:
        return {
            str(i): {"weight": lq.weight.to_dict(), "activation": lq.activation.to_dict()}
            for i, lq in sorted(self.layers.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls({
            int(i): LayerQuant(QuantSpec.from_dict(v["weight"]), QuantSpec.from_dict(v["activation"]))
            for i, v in d.items()
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuantConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class CalibrationProfile:
    """Per-layer max |activation| over a calibration dataset."""

    max_abs: dict[int, float]
    provenance: str = "unknown"

    def clip_for(self, index: int) -> float:
        if index not in self.max_abs:
            raise ValidationError(f"calibration profile has no entry for layer {index}")
        return self.max_abs[index]

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "max_abs": {str(i): v for i, v in sorted(self.max_abs.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        return cls({int(i): float(v) for i, v in d["max_abs"].items()}, d.get("provenance", "unknown"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        return cls.from_dict(json.loads(text))


def _quantize_array(a: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if spec.is_fp32:
        return a
    qmax = 2 ** (spec.bits - 1) - 1
    step = spec.clip / qmax
    levels = np.minimum(np.floor(np.abs(a) / step + 0.5), qmax)  # round half away from zero
    return np.copysign(levels, a) * step


def quantize(x: Tensor, spec: QuantSpec) -> Tensor:
    """Fake-quantize a tensor; FP32 spec is the identity."""
    if spec.is_fp32:
        return x
    return Tensor._wrap(_quantize_array(x.data, spec))


@dataclass
class TracedQuant:
    """Quantized tensor plus its recorded error leaf ``q = x + err``."""

    q: Tensor
    err: Tensor


def quantize_traced(x: Tensor, spec: QuantSpec, tape: Tape) -> TracedQuant:
    """Quantize on a tape with straight-through gradients.

    The error ``quantize(x) - x`` is a constant leaf, so ``dL/dq`` flows to
    ``x`` with factor 1 and is retrievable as the gradient of ``err``; the
    output data is exactly ``quantize(x)`` bit for bit.
    """
    if tape is None:
        raise ValidationError("quantize_traced requires an active tape")
    qdata = _quantize_array(x.data, spec)
    err = Tensor._wrap(qdata - x.data if qdata is not x.data else np.zeros(x.shape))

    def grad(t, up):
        return up, up

    q = tape.record("quant_ste", (x, err), qdata, grad)
    return TracedQuant(q=q, err=err)


def calibrate(net, dataset, batch_size: int = 256) -> CalibrationProfile:
    """Max |activation| per layer over an unquantized forward of a dataset."""
    from .network import forward  # local import to avoid a cycle

    n = dataset.images.shape[0]
    if n == 0:
        raise ValidationError("calibrate: dataset is empty")
    max_abs = {i: 0.0 for i in range(len(net.layers))}
    for start in range(0, n, batch_size):
        batch = Tensor(dataset.images[start : start + batch_size])
        trace = forward(net, batch)
        for i, act in enumerate(trace.activations):
            max_abs[i] = max(max_abs[i], float(np.max(np.abs(act.data))))
    return CalibrationProfile(max_abs=max_abs, provenance=dataset.provenance)


def _positive_clip(value: float) -> float:
    # An all-zero tensor quantizes to zero under any positive clip.
    return value if value > 0 else 1.0


def uniform_config(profile: CalibrationProfile, weight_bits: int, act_bits: int, net) -> QuantConfig:
    """Uniform bit-widths: weight clip = max|W|, activation clip from profile."""
    layers = {}
    points = net.activation_points()
    for i in net.param_layers():
        if weight_bits == FP32:
            wspec = QuantSpec(FP32)
        else:
            wmax = float(np.max(np.abs(net.params[i]["weights"].data)))
            wspec = QuantSpec(weight_bits, _positive_clip(wmax))
        if act_bits == FP32:
            aspec = QuantSpec(FP32)
        else:
            aspec = QuantSpec(act_bits, _positive_clip(profile.clip_for(points[i])))
        layers[i] = LayerQuant(weight=wspec, activation=aspec)
    return QuantConfig(layers)
