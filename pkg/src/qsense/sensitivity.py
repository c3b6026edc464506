"""Per-layer quantization-sensitivity metrics.

The proposed metric: quantize one layer's weights (or activation) to k bits,
leave everything else at FP32, and measure the mean norm of the gradient of
the output distance ``L = ||y(x) - y_hat(x)||`` with respect to every traced
quantization error.  Per the straight-through identification, the gradient
with respect to the error equals the gradient with respect to the quantized
tensor, so a single backward pass yields the whole omega vector.  The score
aggregates the per-layer omegas by their geometric mean, which captures how
one layer's quantization error perturbs the gradients everywhere else.

Baselines: L2 output distance, KL divergence of the softmax outputs, and a
Hessian-trace estimate (Hutchinson, Rademacher probes, Hessian-vector
products by double backward) times the squared quantization perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import MetricError, ValidationError
from .network import NetworkDef, forward
from .quantization import (FP32, CalibrationProfile, QuantConfig, QuantSpec,
                           _quantize_array)
from .tensor import Tape, Tensor

OMEGA_FLOOR = 1e-30

METRICS = ("proposed", "l2", "kld", "hessian")
TARGETS = ("weight", "activation")

__all__ = [
    "OmegaVector",
    "SensitivityScore",
    "METRICS",
    "TARGETS",
    "omega",
    "expectation",
    "single_layer_config",
    "sensitivity_proposed",
    "sensitivity_l2",
    "sensitivity_kld",
    "sensitivity_hessian",
    "hutchinson_trace",
    "rank_layers",
]


@dataclass
class OmegaVector:
    """Mean gradient norms of the traced quantization errors, per layer."""

    layer_indices: list[int]
    omega_w: np.ndarray
    omega_a: np.ndarray
    config: QuantConfig

    def __len__(self) -> int:
        return len(self.layer_indices)


@dataclass
class SensitivityScore:
    metric: str
    target: str
    layer: int
    bits: int
    value: float


def _grad_norm(g: np.ndarray, norm: str) -> float:
    flat = g.ravel()
    if norm == "l2":
        return float(np.linalg.norm(flat))
    if norm == "l1":
        return float(np.abs(flat).sum())
    if norm == "l2-mean":
        return float(np.linalg.norm(flat) / np.sqrt(flat.size))
    raise ValidationError(f"unknown gradient norm {norm!r}")


def omega(net: NetworkDef, dataset, config: QuantConfig, norm: str = "l2") -> OmegaVector:
    """Mean over samples of the gradient norms of all quantization errors.

    One sample at a time: per-sample weight gradients must not mix across
    the batch, since the metric averages norms, not gradients.
    """
    if len(dataset) == 0:
        raise ValidationError("omega: dataset is empty")
    config.validate_for(net)
    layers = net.param_layers()
    acc_w = np.zeros(len(layers))
    acc_a = np.zeros(len(layers))
    n = len(dataset)
    for s in range(n):
        x = Tensor(dataset.images[s : s + 1])
        ref = forward(net, x).logits
        tape = Tape()
        trace = forward(net, x, config, tape)
        loss = T.euclidean_loss(tape, Tensor(ref.data), trace.logits)
        grads = tape.backward(loss)
        for j, li in enumerate(layers):
            gw = grads[trace.weight_err[li]].data
            ga = grads[trace.act_err[li]].data
            if not (np.isfinite(gw).all() and np.isfinite(ga).all()):
                raise MetricError(f"omega: non-finite gradient at layer {li}, sample {s}")
            acc_w[j] += _grad_norm(gw, norm)
            acc_a[j] += _grad_norm(ga, norm)
    return OmegaVector(layers, acc_w / n, acc_a / n, config)


def expectation(om: OmegaVector, floor: float = OMEGA_FLOOR) -> float:
    """Geometric mean of all activation and weight omegas, L-th root.

    Factors are floored before the log-space product so a single dead layer
    cannot annihilate everyone else's information.
    """
    if len(om) < 1:
        raise ValidationError("expectation: empty omega vector")
    factors = np.concatenate([om.omega_a, om.omega_w])
    logs = np.log(np.maximum(factors, floor))
    return float(np.exp(logs.sum() / len(om)))


def single_layer_config(net: NetworkDef, j: int, target: str, bits: int,
                        profile: CalibrationProfile | None = None) -> QuantConfig:
    """Everything FP32 except layer ``j``'s weights or activation at ``bits``."""
    if j not in net.param_layers():
        raise ValidationError(f"layer {j} is not a parameterized layer")
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}, got {target!r}")
    if bits == FP32:
        raise ValidationError("single-layer sensitivity needs bits < FP32")
    cfg = QuantConfig.fp32(net)
    if target == "weight":
        wmax = float(np.max(np.abs(net.params[j]["weights"].data)))
        return cfg.replace(j, weight=QuantSpec(bits, wmax if wmax > 0 else 1.0))
    if profile is None:
        raise ValidationError("activation sensitivity needs a calibration profile")
    clip = profile.clip_for(net.activation_points()[j])
    return cfg.replace(j, activation=QuantSpec(bits, clip if clip > 0 else 1.0))


def sensitivity_proposed(net: NetworkDef, dataset, j: int, target: str, bits: int,
                         profile: CalibrationProfile | None = None,
                         norm: str = "l2") -> SensitivityScore:
    cfg = single_layer_config(net, j, target, bits, profile)
    value = expectation(omega(net, dataset, cfg, norm))
    return SensitivityScore("proposed", target, j, bits, value)


def _quantized_logits(net, dataset, cfg, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    ref_chunks = []
    q_chunks = []
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[start : start + batch_size])
        ref_chunks.append(forward(net, x).logits.data)
        q_chunks.append(forward(net, x, cfg).logits.data)
    return np.concatenate(ref_chunks), np.concatenate(q_chunks)


def sensitivity_l2(net: NetworkDef, dataset, j: int, target: str, bits: int,
                   profile: CalibrationProfile | None = None) -> SensitivityScore:
    """Mean Euclidean distance between original and single-layer-quantized outputs."""
    if len(dataset) == 0:
        raise ValidationError("sensitivity_l2: dataset is empty")
    cfg = single_layer_config(net, j, target, bits, profile)
    ref, quant = _quantized_logits(net, dataset, cfg)
    value = float(np.linalg.norm(ref - quant, axis=1).mean())
    return SensitivityScore("l2", target, j, bits, value)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sensitivity_kld(net: NetworkDef, dataset, j: int, target: str, bits: int,
                    profile: CalibrationProfile | None = None,
                    eps: float = 1e-12) -> SensitivityScore:
    """Mean KL(softmax(y) || softmax(y_hat)) with single-layer quantization."""
    if len(dataset) == 0:
        raise ValidationError("sensitivity_kld: dataset is empty")
    cfg = single_layer_config(net, j, target, bits, profile)
    ref, quant = _quantized_logits(net, dataset, cfg)
    p = _softmax_np(ref)
    q = _softmax_np(quant)
    kl = (p * (np.log(p + eps) - np.log(q + eps))).sum(axis=1)
    return SensitivityScore("kld", target, j, bits, float(kl.mean()))


def hutchinson_trace(tape: Tape, loss: Tensor, wrt: Tensor, probes: int,
                     seed: int = 0) -> float:
    """Hutchinson trace estimate of the Hessian of ``loss`` w.r.t. ``wrt``.

    Rademacher probes; each Hessian-vector product is a second backward pass
    through the recorded gradient graph.  Probe streams split per index, so
    the estimate is deterministic and independent of probe parallelism.
    """
    if probes < 1:
        raise ValidationError("hutchinson_trace: probes must be >= 1")
    g = tape.backward(loss, create_graph=True)[wrt]
    total = 0.0
    for p in range(probes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, p)))
        v = rng.integers(0, 2, size=wrt.shape).astype(np.float64) * 2.0 - 1.0
        vt = Tensor(v)
        s = T.sum_all(tape, T.mul(tape, g, vt))
        hv = tape.backward(s)[wrt].data
        total += float((v * hv).sum())
    return total / probes


def sensitivity_hessian(net: NetworkDef, dataset, j: int, target: str, bits: int,
                        profile: CalibrationProfile | None = None,
                        probes: int = 100, seed: int = 0) -> SensitivityScore:
    """Mean Hessian trace of the task loss times squared quantization error.

    The Hessian is taken on the unquantized network: w.r.t. layer ``j``'s
    weights, or its activation tensor over the dataset batch.  The trace is
    averaged per element; the perturbation is the squared error of quantizing
    the target at ``bits`` (per sample, for activations).
    """
    if len(dataset) == 0:
        raise ValidationError("sensitivity_hessian: dataset is empty")
    if j not in net.param_layers():
        raise ValidationError(f"layer {j} is not a parameterized layer")
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}, got {target!r}")
    from .network import _onehot  # shared one-hot helper

    tape = Tape()
    x = Tensor(dataset.images)
    trace = forward(net, x, None, tape)
    loss = T.softmax_crossentropy(tape, trace.logits, Tensor(_onehot(dataset.labels, net.num_classes)))
    if bits == FP32:
        return SensitivityScore("hessian", target, j, bits, 0.0)
    if target == "weight":
        wrt = net.params[j]["weights"]
        wmax = float(np.max(np.abs(wrt.data)))
        spec = QuantSpec(bits, wmax if wmax > 0 else 1.0)
        perturb = float(np.sum((_quantize_array(wrt.data, spec) - wrt.data) ** 2))
    else:
        if profile is None:
            raise ValidationError("activation sensitivity needs a calibration profile")
        wrt = trace.activations[net.activation_points()[j]]
        clip = profile.clip_for(net.activation_points()[j])
        spec = QuantSpec(bits, clip if clip > 0 else 1.0)
        err = _quantize_array(wrt.data, spec) - wrt.data
        perturb = float(np.sum(err**2) / len(dataset))  # mean per-sample squared error
    mean_trace = hutchinson_trace(tape, loss, wrt, probes, seed) / wrt.size
    return SensitivityScore("hessian", target, j, bits, mean_trace * perturb)


def rank_layers(net: NetworkDef, dataset, metric: str, target: str, bits: int,
                profile: CalibrationProfile | None = None, probes: int = 100,
                seed: int = 0, norm: str = "l2") -> list[SensitivityScore]:
    """All layers scored under one metric, descending; ties by layer index."""
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}, got {metric!r}")
    scores = []
    for j in net.param_layers():
        if metric == "proposed":
            s = sensitivity_proposed(net, dataset, j, target, bits, profile, norm)
        elif metric == "l2":
            s = sensitivity_l2(net, dataset, j, target, bits, profile)
        elif metric == "kld":
            s = sensitivity_kld(net, dataset, j, target, bits, profile)
        else:
            s = sensitivity_hessian(net, dataset, j, target, bits, profile, probes, seed)
        scores.append(s)
    return sorted(scores, key=lambda s: (-s.value, s.layer))
