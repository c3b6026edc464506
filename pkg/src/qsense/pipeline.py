"""End-to-end experiment steps behind the service and CLI.

Each command reads its declared inputs, writes its artifacts into an output
directory (atomically, fixed names), and returns a JSON-able summary.  Every
number downstream of a seed is deterministic, so reruns produce byte-identical
files.

The desk-scale experiment defaults live in :data:`DESK`; they are the
configuration under which the shipped acceptance suite reproduces the
qualitative results (calibration-data ordering, metric comparison, dataset
sensitivity).
"""

from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from .data import (LabeledDataset, Preprocessing, golden_set, load_dataset,
                   make_blob_split, make_noise, save_dataset)
from .errors import MissingArtifactError, ValidationError
from .experiments import (PROTOCOL_TAGS, PROTOCOL_TARGET, SwitchingCurve,
                          relative_auc, run_switching, spearman)
from .fileio import atomic_write_text
from .generation import GenConfig, confidence_report, confidence_report_csv, generate
from .network import (EvalResult, TrainConfig, build_mlp, build_tiny_cnn,
                      evaluate, load_network, save_network, train)
from .quantization import FP32, CalibrationProfile, calibrate, uniform_config
from .sensitivity import METRICS, TARGETS, rank_layers

# Desk-scale defaults: a 10-class, 28x28 task of paired look-alike patterns.
DESK = {
    "num_classes": 10,
    "input_shape": (1, 28, 28),
    "task_seed": 9,
    "train_seed": 51,
    "eval_seed": 52,
    "calib_seed": 53,
    "noise_seed": 77,
    "train_per_class": 40,
    "eval_per_class": 50,
    "calib_per_class": 1,
    "noise_count": 10,
    "gen_seed": 4,
    "gen_iterations": 10,
    "gen_lam": 0.0,
    "bits": 4,
    "probes": 100,
    "arch_train": {
        "mlp": {"epochs": 10, "learning_rate": 1.5e-3, "batch_size": 32, "seed": 1},
        "tiny_cnn": {"epochs": 12, "learning_rate": 2e-3, "batch_size": 32, "seed": 1},
    },
}

ARCHS = {"mlp": build_mlp, "tiny_cnn": build_tiny_cnn}


def _require_file(path: str, role: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(path, role)
    return path


def _float(x) -> str:
    return repr(float(x))


def _write_json(path: str, obj) -> str:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _write_csv(path: str, fieldnames: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())
    return path


def resolve_dataset(spec: dict) -> LabeledDataset:
    """Build a dataset from a descriptor dict (kind: blobs|noise|manifest|idx)."""
    kind = spec.get("kind")
    if kind == "blobs":
        return make_blob_split(
            task_seed=spec.get("task_seed", DESK["task_seed"]),
            sample_seed=spec.get("sample_seed", DESK["train_seed"]),
            n_per_class=spec.get("n_per_class", DESK["train_per_class"]),
            num_classes=spec.get("num_classes", DESK["num_classes"]),
            input_shape=tuple(spec.get("input_shape", DESK["input_shape"])),
        )
    if kind == "noise":
        pre = Preprocessing.from_dict(spec["preprocessing"]) if "preprocessing" in spec else Preprocessing()
        return make_noise(
            seed=spec.get("seed", DESK["noise_seed"]),
            n=spec.get("n", DESK["noise_count"]),
            input_shape=tuple(spec.get("input_shape", DESK["input_shape"])),
            preprocessing=pre,
            num_classes=spec.get("num_classes", DESK["num_classes"]),
        )
    if kind == "manifest":
        return load_dataset(_require_file(spec["manifest"], "dataset manifest"))
    if kind == "idx":
        from .data import load_idx
        return load_idx(_require_file(spec["images"], "IDX images"),
                        _require_file(spec["labels"], "IDX labels"),
                        num_classes=spec.get("num_classes"))
    raise ValidationError(f"dataset.kind must be blobs|noise|manifest|idx, got {kind!r}")


def _desk_eval_spec() -> dict:
    return {"kind": "blobs", "sample_seed": DESK["eval_seed"],
            "n_per_class": DESK["eval_per_class"]}


def _desk_calib_spec() -> dict:
    return {"kind": "blobs", "sample_seed": DESK["calib_seed"],
            "n_per_class": DESK["calib_per_class"]}


def _load_model(path: str):
    _require_file(path, "model manifest")
    base = path[: -len(".json")] if path.endswith(".json") else path
    _require_file(base + ".bin", "model blob")
    return load_network(path)


# ---------------------------------------------------------------------------
# commands


def train_command(out_dir: str, arch: str = "tiny_cnn", seed: int = 3,
                  dataset: dict | None = None, eval_dataset: dict | None = None,
                  epochs: int | None = None, learning_rate: float | None = None,
                  batch_size: int | None = None, train_seed: int | None = None) -> dict:
    if arch not in ARCHS:
        raise ValidationError(f"arch must be one of {tuple(ARCHS)}, got {arch!r}")
    defaults = DESK["arch_train"][arch]
    cfg = TrainConfig(
        epochs=epochs if epochs is not None else defaults["epochs"],
        learning_rate=learning_rate if learning_rate is not None else defaults["learning_rate"],
        batch_size=batch_size if batch_size is not None else defaults["batch_size"],
        seed=train_seed if train_seed is not None else defaults["seed"],
    )
    train_ds = resolve_dataset(dataset or {"kind": "blobs"})
    eval_ds = resolve_dataset(eval_dataset or _desk_eval_spec())
    net = ARCHS[arch](num_classes=train_ds.num_classes,
                      input_shape=train_ds.images.shape[1:], seed=seed)
    trained = train(net, train_ds, cfg)
    result = evaluate(trained, eval_ds)
    json_path, bin_path = save_network(trained, os.path.join(out_dir, f"{arch}.json"))
    summary = {
        "arch": arch, "model": json_path, "blob": bin_path,
        "init_seed": seed, "train": trained.training,
        "eval_top1": result.top1, "eval_top5": result.top5,
        "eval_task_loss": result.task_loss,
    }
    _write_json(os.path.join(out_dir, "train_metrics.json"), summary)
    return summary


def generate_command(out_dir: str, model: str, seed: int | None = None,
                     iterations: int | None = None, lam: float | None = None,
                     learning_rate: float = 0.04, samples_per_class: int = 1,
                     logit_term: str = "maximize") -> dict:
    net = _load_model(model)
    cfg = GenConfig(
        learning_rate=learning_rate,
        lam=lam if lam is not None else DESK["gen_lam"],
        iterations=iterations if iterations is not None else DESK["gen_iterations"],
        seed=seed if seed is not None else DESK["gen_seed"],
        samples_per_class=samples_per_class,
        logit_term=logit_term,
    )
    batch = generate(net, golden_set(net.num_classes), cfg)
    base = os.path.join(out_dir, "generated")
    manifest = save_dataset(base, batch.dataset, extra={"gen_config": cfg.to_dict()})
    rows = confidence_report(batch, net)
    atomic_write_text(os.path.join(out_dir, "confidence_report.csv"),
                      confidence_report_csv(rows))
    summary = {
        "manifest": base + ".json", "images": base + "-images.idx",
        "labels": base + "-labels.idx",
        "confidence_report": os.path.join(out_dir, "confidence_report.csv"),
        "match_rate": batch.match_rate,
        "ce_start": batch.ce_trace[0], "ce_end": batch.ce_trace[-1],
        "samples": len(batch.dataset),
    }
    return summary


def calibrate_command(out_dir: str, model: str, dataset: dict | None = None,
                      tag: str | None = None) -> dict:
    net = _load_model(model)
    ds = resolve_dataset(dataset or _desk_calib_spec())
    profile = calibrate(net, ds)
    if tag:  # role label (real/generated/noise) may differ from raw provenance
        profile.provenance = tag
    path = os.path.join(out_dir, f"calibration_{profile.provenance}.json")
    _write_json(path, profile.to_dict())
    return {"profile": path, "provenance": profile.provenance,
            "max_abs": {str(k): v for k, v in sorted(profile.max_abs.items())}}


def _load_profile(path: str) -> CalibrationProfile:
    with open(_require_file(path, "calibration profile"), "r", encoding="utf-8") as fh:
        return CalibrationProfile.from_dict(json.load(fh))


def quantize_eval_command(out_dir: str, model: str, profile: str | None = None,
                          weight_bits: int = 8, act_bits: int = 8,
                          eval_dataset: dict | None = None) -> dict:
    net = _load_model(model)
    eval_ds = resolve_dataset(eval_dataset or _desk_eval_spec())
    if weight_bits == FP32 and act_bits == FP32:
        prof = CalibrationProfile({i: 1.0 for i in range(len(net.layers))}, "none")
        tag = "fp32"
    else:
        if profile is None:
            raise ValidationError("quantize-eval needs a calibration profile unless both widths are FP32")
        prof = _load_profile(profile)
        tag = prof.provenance
    cfg = uniform_config(prof, weight_bits, act_bits, net)
    result = evaluate(net, eval_ds, cfg)
    summary = {
        "model": model, "calibration": tag, "weight_bits": weight_bits,
        "act_bits": act_bits, "top1": result.top1, "top5": result.top5,
        "task_loss": result.task_loss,
    }
    path = os.path.join(out_dir, f"quantize_eval_{tag}.json")
    _write_json(path, summary)
    summary["path"] = path
    return summary


def sensitivity_command(out_dir: str, model: str, profile: str,
                        dataset: dict | None = None,
                        metrics: list[str] | None = None,
                        targets: list[str] | None = None,
                        bits: list[int] | None = None,
                        probes: int | None = None, seed: int = 0,
                        tag: str | None = None) -> dict:
    net = _load_model(model)
    prof = _load_profile(profile)
    ds = resolve_dataset(dataset or _desk_calib_spec())
    metrics = metrics or ["proposed"]
    targets = targets or list(TARGETS)
    bits = bits or [DESK["bits"]]
    probes = probes if probes is not None else DESK["probes"]
    for m in metrics:
        if m not in METRICS:
            raise ValidationError(f"unknown metric {m!r}; choose from {METRICS}")
    rows = []
    for metric in metrics:
        for target in targets:
            for k in bits:
                scores = rank_layers(net, ds, metric, target, k, prof,
                                     probes=probes, seed=seed)
                for rank, s in enumerate(scores, start=1):
                    rows.append({"metric": metric, "target": target, "layer": s.layer,
                                 "bits": k, "score": _float(s.value), "rank": rank})
    name = f"sensitivity_{tag}.csv" if tag else "sensitivity.csv"
    path = _write_csv(os.path.join(out_dir, name),
                      ["metric", "target", "layer", "bits", "score", "rank"], rows)
    return {"csv": path, "rows": len(rows), "dataset": ds.provenance}


def switching_command(out_dir: str, model: str, profile: str,
                      sens_dataset: dict | None = None,
                      eval_dataset: dict | None = None,
                      metrics: list[str] | None = None,
                      protocols: list[str] | None = None,
                      bits: int | None = None, probes: int | None = None,
                      seed: int = 0) -> dict:
    net = _load_model(model)
    prof = _load_profile(profile)
    sens_ds = resolve_dataset(sens_dataset or _desk_calib_spec())
    eval_ds = resolve_dataset(eval_dataset or _desk_eval_spec())
    metrics = metrics or list(METRICS)
    protocols = protocols or list(PROTOCOL_TAGS)
    bits = bits if bits is not None else DESK["bits"]
    probes = probes if probes is not None else DESK["probes"]
    curve_paths = []
    auc_rows = []
    for protocol in protocols:
        if protocol not in PROTOCOL_TAGS:
            raise ValidationError(f"protocol must be weights|activations, got {protocol!r}")
        target = PROTOCOL_TARGET[protocol]
        curves: dict[str, SwitchingCurve] = {}
        for metric in metrics:
            ranking = [s.layer for s in rank_layers(net, sens_ds, metric, target,
                                                    bits, prof, probes=probes, seed=seed)]
            curve = run_switching(net, eval_ds, ranking, protocol, bits, prof,
                                  metric=metric, provenance=sens_ds.provenance)
            curves[metric] = curve
            rows = [{"num_switched": i,
                     "layer_switched": "" if i == 0 else curve.switch_order[i - 1],
                     "task_loss": _float(loss)}
                    for i, loss in enumerate(curve.losses)]
            path = _write_csv(os.path.join(out_dir, f"curve_{metric}_{protocol}.csv"),
                              ["num_switched", "layer_switched", "task_loss"], rows)
            curve_paths.append(path)
        table = relative_auc(curves)
        for metric in metrics:
            auc_rows.append({"metric": metric, "protocol": protocol,
                             "tag": PROTOCOL_TAGS[protocol],
                             "area": _float(table.areas[metric]),
                             "relative_area": _float(table.relative[metric])})
    auc_path = _write_csv(os.path.join(out_dir, "auc_table.csv"),
                          ["metric", "protocol", "tag", "area", "relative_area"], auc_rows)
    return {"curves": curve_paths, "auc_table": auc_path,
            "relative": {f"{r['metric']}/{r['protocol']}": r["relative_area"] for r in auc_rows}}


def _read_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report_command(out_dir: str) -> dict:
    """Aggregate artifacts in a run directory into the summary tables."""
    if not os.path.isdir(out_dir):
        raise MissingArtifactError(out_dir, "run directory")
    summary: dict = {"schema_version": 1}
    # calibration-data comparison (per-dataset PTQ results)
    entries = {}
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("quantize_eval_") and name.endswith(".json"):
            with open(os.path.join(out_dir, name), "r", encoding="utf-8") as fh:
                e = json.load(fh)
            entries[e["calibration"]] = {k: e[k] for k in
                                         ("weight_bits", "act_bits", "top1", "top5", "task_loss")}
    if entries:
        _write_json(os.path.join(out_dir, "quantize_eval.json"),
                    {"schema_version": 1, "entries": entries})
        summary["quantize_eval"] = entries
    # dataset-type sensitivity comparison (rank correlation against real)
    by_tag = {}
    for name in sorted(os.listdir(out_dir)):
        if name.startswith("sensitivity_") and name.endswith(".csv"):
            tag = name[len("sensitivity_") : -len(".csv")]
            by_tag[tag] = _read_csv(os.path.join(out_dir, name))
    if "real" in by_tag and len(by_tag) > 1:
        def vec(rows):
            keyed = {(r["metric"], r["target"], r["bits"], r["layer"]): float(r["score"])
                     for r in rows}
            return [keyed[k] for k in sorted(keyed)]
        ref = vec(by_tag["real"])
        corr_rows = []
        for tag in sorted(by_tag):
            other = vec(by_tag[tag])
            if len(other) == len(ref):
                corr_rows.append({"dataset": tag,
                                  "spearman_vs_real": _float(spearman(other, ref))})
        _write_csv(os.path.join(out_dir, "dataset_sensitivity.csv"),
                   ["dataset", "spearman_vs_real"], corr_rows)
        summary["dataset_sensitivity"] = {r["dataset"]: r["spearman_vs_real"] for r in corr_rows}
    # metric comparison table, if switching ran
    auc_path = os.path.join(out_dir, "auc_table.csv")
    if os.path.exists(auc_path):
        summary["auc_table"] = _read_csv(auc_path)
    conf_path = os.path.join(out_dir, "confidence_report.csv")
    if os.path.exists(conf_path):
        rows = _read_csv(conf_path)
        matches = sum(1 for r in rows if r["match"] == "True")
        summary["confidence"] = {"samples": len(rows),
                                 "match_rate": matches / len(rows) if rows else None}
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary
