"""Labeled synthetic calibration data, optimized against the golden set.

Per class c, a trainable input starts as uniform pixel noise and follows Adam
steps on ``CE(softmax(y(x)), v_c) - lam * y(x)[c]``: cross-entropy against the
one-hot golden vector plus a term maximizing the target class logit.  The
printed formula in the source adds the logit term inside an argmin, which
would minimize the activation it is said to maximize; the default here fixes
the sign to match the stated intent and ``logit_term="paper"`` selects the
literal variant.  After every step the inputs are projected back into the
valid preprocessed range, which keeps their statistics comparable to real
data.  Network parameters are never touched.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import tensor as T
from .data import GoldenSet, LabeledDataset, Preprocessing
from .errors import GenerationError, ValidationError
from .network import NetworkDef, forward
from .tensor import Tape, Tensor

__all__ = ["GenConfig", "GeneratedBatch", "generate", "confidence_report", "confidence_report_csv"]


@dataclass
class GenConfig:
    learning_rate: float = 0.04
    lam: float = 1.0
    iterations: int = 1000
    seed: int = 0
    samples_per_class: int = 1
    preprocessing: Preprocessing = dc_field(default_factory=Preprocessing)
    logit_term: str = "maximize"   # "maximize" (intent) or "paper" (literal sign)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.lam < 0:
            raise ValidationError("lam must be non-negative")
        if self.logit_term not in ("maximize", "paper"):
            raise ValidationError(f"unknown logit_term {self.logit_term!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "lam": self.lam,
            "iterations": self.iterations, "seed": self.seed,
            "samples_per_class": self.samples_per_class,
            "preprocessing": self.preprocessing.to_dict(),
            "logit_term": self.logit_term,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
        }


@dataclass
class GeneratedBatch:
    """Synthetic dataset plus per-sample softmax confidences and the CE trace."""

    dataset: LabeledDataset
    confidences: np.ndarray          # [n, C]
    ce_trace: list[float]            # mean CE per iteration, [iterations + 1] incl. start
    config: GenConfig

    @property
    def match_rate(self) -> float:
        pred = np.argmax(self.confidences, axis=1)
        return float((pred == self.dataset.labels).mean())


def generate(net: NetworkDef, golden: GoldenSet, cfg: GenConfig = GenConfig()) -> GeneratedBatch:
    """Optimize one batch of inputs, ``samples_per_class`` per class.

    All classes run as one batch; the loss is a mean of per-sample terms, so
    the classes stay independent.  Deterministic under a fixed seed.
    """
    c = net.num_classes
    if golden.num_classes != c:
        raise ValidationError(
            f"golden set has {golden.num_classes} classes, network has {c}")
    n = c * cfg.samples_per_class
    labels = np.repeat(np.arange(c), cfg.samples_per_class)
    targets = Tensor(golden.vectors.data[labels])
    onehot = golden.vectors.data[labels]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 17)))
    raw = rng.integers(0, 256, size=(n, *net.input_shape)).astype(np.float64)
    x = cfg.preprocessing.apply(raw)
    lo, hi = cfg.preprocessing.value_range()
    sign = -cfg.lam if cfg.logit_term == "maximize" else cfg.lam
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    ce_trace: list[float] = []
    for it in range(cfg.iterations):
        tape = Tape()
        xt = Tensor(x)
        logits = forward(net, xt, None, tape).logits
        ce = T.softmax_crossentropy(tape, logits, targets)
        picked = T.mul_scalar(tape, T.sum_all(tape, T.mul(tape, logits, targets)), 1.0 / n)
        loss = T.add(tape, ce, T.mul_scalar(tape, picked, sign)) if cfg.lam else ce
        ce_val = ce.item()
        if not math.isfinite(ce_val) or not math.isfinite(loss.item()):
            bad = _first_nonfinite_class(logits.data, labels)
            raise GenerationError(
                f"generation diverged for class {bad} at iteration {it}")
        ce_trace.append(ce_val)
        g = tape.backward(loss)[xt].data
        step = it + 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**step)
        vhat = v / (1 - cfg.beta2**step)
        x = np.clip(x - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps), lo, hi)
    final_logits = forward(net, Tensor(x)).logits
    ce_trace.append(T.softmax_crossentropy(None, final_logits, targets).item())
    conf = T.softmax(None, final_logits).data
    dataset = LabeledDataset(x, labels, "generated", c, cfg.preprocessing, seed=cfg.seed)
    return GeneratedBatch(dataset=dataset, confidences=conf, ce_trace=ce_trace, config=cfg)


def _first_nonfinite_class(logits: np.ndarray, labels: np.ndarray) -> int:
    bad = ~np.isfinite(logits).all(axis=1)
    return int(labels[np.argmax(bad)]) if bad.any() else int(labels[0])


def per_class_crossentropy(net: NetworkDef, batch: LabeledDataset) -> np.ndarray:
    """CE of each sample against its own label, in batch order."""
    logits = forward(net, Tensor(batch.images)).logits.data
    zs = logits - logits.max(axis=1, keepdims=True)
    lsm = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    return -lsm[np.arange(len(batch)), batch.labels]


def confidence_report(batch: GeneratedBatch, net: NetworkDef) -> list[dict]:
    """Top-2 confidence rows per generated sample, freshly computed from ``net``."""
    if len(batch.dataset) == 0:
        raise ValidationError("confidence report needs a non-empty batch")
    conf = T.softmax(None, forward(net, Tensor(batch.dataset.images)).logits).data
    rows = []
    for i, label in enumerate(batch.dataset.labels):
        order = np.argsort(-conf[i], kind="stable")
        rows.append({
            "class": int(label),
            "top1_class": int(order[0]),
            "top1_conf": float(conf[i, order[0]]),
            "top2_class": int(order[1]),
            "top2_conf": float(conf[i, order[1]]),
            "match": bool(order[0] == label),
        })
    return rows


def confidence_report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["class", "top1_class", "top1_conf", "top2_class", "top2_conf", "match"],
        lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["top1_conf"] = repr(row["top1_conf"])
        out["top2_conf"] = repr(row["top2_conf"])
        writer.writerow(out)
    return buf.getvalue()
