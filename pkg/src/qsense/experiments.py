"""Switching-protocol experiments: curves, areas, oracle and random baselines.

A switching run starts from a network whose weights (protocol "weights",
tag A32W{32,4}) or activations (protocol "activations", tag A{32,4}W32) are
all quantized to ``bits``, then restores layers to FP32 one at a time in a
given ranking, recording the task loss after every switch.  Better rankings
drop the loss sooner, so the area under the curve is smaller; areas are
reported relative to the proposed metric's area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .network import NetworkDef, evaluate
from .quantization import FP32, CalibrationProfile, QuantConfig, QuantSpec, uniform_config

PROTOCOL_TAGS = {"weights": "A32W{32,4}", "activations": "A{32,4}W32"}
PROTOCOL_TARGET = {"weights": "weight", "activations": "activation"}

__all__ = [
    "PROTOCOL_TAGS",
    "PROTOCOL_TARGET",
    "SwitchingCurve",
    "AucTable",
    "base_switching_config",
    "run_switching",
    "auc",
    "relative_auc",
    "greedy_oracle",
    "random_ranking_auc",
    "spearman",
]


@dataclass
class SwitchingCurve:
    """Task loss after 0..L layers switched back to FP32, in ranking order."""

    metric: str
    protocol: str
    bits: int
    dataset_provenance: str
    switch_order: list[int]
    losses: list[float]

    @property
    def tag(self) -> str:
        return PROTOCOL_TAGS[self.protocol]

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(enumerate(self.losses))


@dataclass
class AucTable:
    """Per-metric trapezoidal areas, normalized so the proposed row is 1."""

    protocol: str
    areas: dict[str, float]
    relative: dict[str, float]


def base_switching_config(net: NetworkDef, profile: CalibrationProfile,
                          protocol: str, bits: int) -> QuantConfig:
    if protocol not in PROTOCOL_TAGS:
        raise ValidationError(f"protocol must be one of {tuple(PROTOCOL_TAGS)}, got {protocol!r}")
    if protocol == "weights":
        return uniform_config(profile, bits, FP32, net)
    return uniform_config(profile, FP32, bits, net)


def run_switching(net: NetworkDef, eval_dataset, ranking: list[int], protocol: str,
                  bits: int = 4, profile: CalibrationProfile | None = None,
                  metric: str = "", provenance: str = "") -> SwitchingCurve:
    """Restore layers to FP32 in ``ranking`` order, recording task loss each step."""
    if sorted(ranking) != net.param_layers():
        raise ValidationError(
            f"ranking {ranking} must cover the parameterized layers {net.param_layers()} exactly")
    if profile is None:
        raise ValidationError("run_switching needs a calibration profile")
    cfg = base_switching_config(net, profile, protocol, bits)
    losses = [evaluate(net, eval_dataset, cfg).task_loss]
    fp = QuantSpec(FP32)
    for j in ranking:
        if protocol == "weights":
            cfg = cfg.replace(j, weight=fp)
        else:
            cfg = cfg.replace(j, activation=fp)
        losses.append(evaluate(net, eval_dataset, cfg).task_loss)
    return SwitchingCurve(metric=metric, protocol=protocol, bits=bits,
                          dataset_provenance=provenance, switch_order=list(ranking),
                          losses=losses)


def auc(curve: SwitchingCurve | list[float]) -> float:
    """Trapezoidal area over the integer switch-count axis."""
    y = np.asarray(curve.losses if isinstance(curve, SwitchingCurve) else curve, dtype=np.float64)
    if y.size < 2:
        raise ValidationError("auc needs at least two curve points")
    return float(np.trapezoid(y))


def relative_auc(curves: dict[str, SwitchingCurve]) -> AucTable:
    if "proposed" not in curves:
        raise ValidationError("relative_auc needs the proposed metric's curve")
    protocols = {c.protocol for c in curves.values()}
    if len(protocols) != 1:
        raise ValidationError(f"relative_auc mixes protocols {protocols}")
    areas = {m: auc(c) for m, c in curves.items()}
    base = areas["proposed"]
    relative = {}
    for m, a in areas.items():
        relative[m] = 1.0 if m == "proposed" else (a / base if base else float("inf"))
    return AucTable(protocol=next(iter(protocols)), areas=areas, relative=relative)


def greedy_oracle(net: NetworkDef, eval_dataset, protocol: str, bits: int,
                  profile: CalibrationProfile) -> SwitchingCurve:
    """Exhaustive greedy ranking: each step switches the layer whose restore
    drops the task loss the most (ties to the lowest index).  Only feasible
    for small L; this is the brute-force reference the metrics chase.
    """
    cfg = base_switching_config(net, profile, protocol, bits)
    fp = QuantSpec(FP32)
    remaining = list(net.param_layers())
    losses = [evaluate(net, eval_dataset, cfg).task_loss]
    order: list[int] = []
    while remaining:
        trials = []
        for j in remaining:
            trial = (cfg.replace(j, weight=fp) if protocol == "weights"
                     else cfg.replace(j, activation=fp))
            trials.append((evaluate(net, eval_dataset, trial).task_loss, j, trial))
        loss, j, cfg = min(trials, key=lambda t: (t[0], t[1]))
        losses.append(loss)
        order.append(j)
        remaining.remove(j)
    return SwitchingCurve(metric="oracle", protocol=protocol, bits=bits,
                          dataset_provenance=eval_dataset.provenance,
                          switch_order=order, losses=losses)


def random_ranking_auc(net: NetworkDef, eval_dataset, protocol: str, bits: int,
                       profile: CalibrationProfile, seeds: int = 20,
                       seed_base: int = 0) -> float:
    """Mean AUC of uniformly random switch orders, over ``seeds`` draws."""
    layers = net.param_layers()
    total = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence((seed_base, s, 23)))
        order = [layers[i] for i in rng.permutation(len(layers))]
        total += auc(run_switching(net, eval_dataset, order, protocol, bits, profile,
                                   metric=f"random-{s}", provenance=eval_dataset.provenance))
    return total / seeds


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError("spearman needs two equal-length vectors of size >= 2")

    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty_like(x)
        r[order] = np.arange(1, x.size + 1, dtype=np.float64)
        # average ranks over ties
        for v in np.unique(x):
            mask = x == v
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    return float((ra * rb).sum() / denom) if denom else 0.0
