"""Command-line client for the quantization service.

Each subcommand builds a request, posts it to the service, and prints the
JSON summary.  By default the service runs in-process (no server needed);
``--server URL`` targets a running instance instead.  Exit codes: 2 when a
required input file is missing (the artifact is named), 1 for invalid
configuration (the offending field is named).

Dataset descriptors are ``kind[:key=value,...]``, e.g.::

    blobs                       the built-in task, training split
    blobs:sample_seed=53,n_per_class=1
    noise:seed=77,n=10
    manifest:out/generated.json
    idx:images=train-images.idx,labels=train-labels.idx
"""

from __future__ import annotations

import json
import sys

import click
import httpx
import pydantic

from .service import schemas as S

_EXIT_INVALID = 1
_EXIT_MISSING = 2


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    # In-process transport: same endpoints, no server round trip.
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def parse_dataset(text: str | None) -> S.DatasetSpec | None:
    if text is None:
        return None
    kind, _, rest = text.partition(":")
    args: dict = {"kind": kind}
    if kind == "manifest" and rest and "=" not in rest:
        args["manifest"] = rest
    elif rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not _:
                raise click.UsageError(f"dataset option {item!r} is not key=value")
            args[key] = value
    try:
        return S.DatasetSpec.model_validate(args)
    except pydantic.ValidationError as e:
        _fail_validation(e, prefix="dataset")


def _fail_validation(e: pydantic.ValidationError, prefix: str = "") -> None:
    first = e.errors()[0]
    loc = ".".join(str(p) for p in first["loc"] if p != "body")
    field = f"{prefix}.{loc}" if prefix and loc else (prefix or loc)
    click.echo(f"invalid config: {field}: {first['msg']}", err=True)
    sys.exit(_EXIT_INVALID)


def _load_config(path: str | None) -> S.ExperimentConfig:
    if path is None:
        return S.ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        click.echo(f"missing artifact: config file {path}", err=True)
        sys.exit(_EXIT_MISSING)
    except json.JSONDecodeError as e:
        click.echo(f"invalid config: {path}: bad JSON at offset {e.pos}", err=True)
        sys.exit(_EXIT_INVALID)
    try:
        return S.ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as e:
        _fail_validation(e)


def _build(model_cls, section, overrides: dict):
    base = section.model_dump(exclude_none=True) if section is not None else {}
    base.update({k: v for k, v in overrides.items() if v is not None and v != ()})
    try:
        return model_cls.model_validate(base)
    except pydantic.ValidationError as e:
        _fail_validation(e, prefix=model_cls.__name__)


def _post(server: str | None, path: str, request) -> None:
    with _client(server) as client:
        resp = client.post(path, json=json.loads(request.model_dump_json()))
    if resp.status_code == 200:
        click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))
        return
    try:
        detail = resp.json().get("detail")
    except ValueError:
        click.echo(f"error: HTTP {resp.status_code}: {resp.text[:200]}", err=True)
        sys.exit(3)
    if isinstance(detail, dict) and detail.get("code") == "missing_artifact":
        click.echo(f"missing artifact: {detail.get('role', 'input')} {detail['path']}", err=True)
        sys.exit(_EXIT_MISSING)
    if isinstance(detail, list):  # request schema violation
        loc = ".".join(str(p) for p in detail[0].get("loc", []) if p != "body")
        click.echo(f"invalid config: {loc}: {detail[0].get('msg')}", err=True)
        sys.exit(_EXIT_INVALID)
    message = detail.get("message") if isinstance(detail, dict) else str(detail)
    click.echo(f"invalid config: {message}" if resp.status_code == 400
               else f"error: {message}", err=True)
    sys.exit(_EXIT_INVALID if resp.status_code == 400 else 3)


server_option = click.option("--server", default=None, help="Remote service URL (default: in-process)")
out_option = click.option("--out", default="out", show_default=True, help="Output directory")
config_option = click.option("--config", "config_path", default=None,
                             help="JSON config file (schema-versioned)")


@click.group()
def main():
    """Data-free post-training mixed-precision quantization toolkit."""


@main.command()
@server_option
@out_option
@config_option
@click.option("--arch", type=click.Choice(["mlp", "tiny_cnn"]), default=None)
@click.option("--seed", type=int, default=None, help="Weight initialization seed")
@click.option("--dataset", default=None, help="Training dataset descriptor")
@click.option("--eval-dataset", default=None, help="Held-out eval dataset descriptor")
@click.option("--epochs", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--train-seed", type=int, default=None, help="Shuffling seed")
def train(server, out, config_path, arch, seed, dataset, eval_dataset, epochs,
          learning_rate, batch_size, train_seed):
    """Train a reference network on the desk task."""
    cfg = _load_config(config_path)
    req = _build(S.TrainRequest, cfg.train, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "arch": arch, "seed": seed,
        "dataset": parse_dataset(dataset), "eval_dataset": parse_dataset(eval_dataset),
        "epochs": epochs, "learning_rate": learning_rate,
        "batch_size": batch_size, "train_seed": train_seed,
    })
    _post(server, "/train", req)


@main.command()
@server_option
@out_option
@config_option
@click.option("--model", default=None, help="Model manifest path (.json)")
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--lam", type=float, default=None, help="Logit-term weight")
@click.option("--learning-rate", type=float, default=None)
@click.option("--samples-per-class", type=int, default=None)
@click.option("--logit-term", type=click.Choice(["maximize", "paper"]), default=None)
def generate(server, out, config_path, model, seed, iterations, lam,
             learning_rate, samples_per_class, logit_term):
    """Generate labeled calibration data from a trained model."""
    cfg = _load_config(config_path)
    req = _build(S.GenerateRequest, cfg.generate, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "model": model, "seed": seed, "iterations": iterations, "lam": lam,
        "learning_rate": learning_rate, "samples_per_class": samples_per_class,
        "logit_term": logit_term,
    })
    _post(server, "/generate", req)


@main.command()
@server_option
@out_option
@config_option
@click.option("--model", default=None)
@click.option("--dataset", default=None, help="Calibration dataset descriptor")
@click.option("--tag", default=None, help="Profile filename tag (default: provenance)")
def calibrate(server, out, config_path, model, dataset, tag):
    """Record per-layer activation ranges over a dataset."""
    cfg = _load_config(config_path)
    req = _build(S.CalibrateRequest, cfg.calibrate, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "model": model, "dataset": parse_dataset(dataset), "tag": tag,
    })
    _post(server, "/calibrate", req)


@main.command("quantize-eval")
@server_option
@out_option
@config_option
@click.option("--model", default=None)
@click.option("--profile", default=None, help="Calibration profile JSON")
@click.option("--weight-bits", type=int, default=None)
@click.option("--act-bits", type=int, default=None)
@click.option("--dataset", default=None, help="Eval dataset descriptor")
def quantize_eval(server, out, config_path, model, profile, weight_bits, act_bits, dataset):
    """Evaluate the model under uniform fake quantization."""
    cfg = _load_config(config_path)
    req = _build(S.QuantizeEvalRequest, cfg.quantize_eval, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "model": model, "profile": profile, "weight_bits": weight_bits,
        "act_bits": act_bits, "eval_dataset": parse_dataset(dataset),
    })
    _post(server, "/quantize-eval", req)


@main.command()
@server_option
@out_option
@config_option
@click.option("--model", default=None)
@click.option("--profile", default=None)
@click.option("--dataset", default=None, help="Sensitivity measurement dataset")
@click.option("--metric", "metrics", multiple=True,
              type=click.Choice(["proposed", "l2", "kld", "hessian"]))
@click.option("--target", "targets", multiple=True, type=click.Choice(["weight", "activation"]))
@click.option("--bits", "bits", multiple=True, type=int)
@click.option("--probes", type=int, default=None, help="Hessian probe count")
@click.option("--seed", type=int, default=None)
@click.option("--tag", default=None, help="Suffix for sensitivity_<tag>.csv")
def sensitivity(server, out, config_path, model, profile, dataset, metrics,
                targets, bits, probes, seed, tag):
    """Score per-layer quantization sensitivity."""
    cfg = _load_config(config_path)
    req = _build(S.SensitivityRequest, cfg.sensitivity, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "model": model, "profile": profile, "dataset": parse_dataset(dataset),
        "metrics": list(metrics) or None, "targets": list(targets) or None,
        "bits": list(bits) or None, "probes": probes, "seed": seed, "tag": tag,
    })
    _post(server, "/sensitivity", req)


@main.command()
@server_option
@out_option
@config_option
@click.option("--model", default=None)
@click.option("--profile", default=None)
@click.option("--dataset", default=None, help="Sensitivity measurement dataset")
@click.option("--eval-dataset", default=None, help="Task-loss eval dataset")
@click.option("--metric", "metrics", multiple=True,
              type=click.Choice(["proposed", "l2", "kld", "hessian"]))
@click.option("--protocol", "protocols", multiple=True,
              type=click.Choice(["weights", "activations"]))
@click.option("--bits", type=int, default=None)
@click.option("--probes", type=int, default=None)
@click.option("--seed", type=int, default=None)
def switching(server, out, config_path, model, profile, dataset, eval_dataset,
              metrics, protocols, bits, probes, seed):
    """Run the layer-switching protocol and emit curves plus the AUC table."""
    cfg = _load_config(config_path)
    req = _build(S.SwitchingRequest, cfg.switching, {
        "out": out if out != "out" or cfg.out is None else cfg.out,
        "model": model, "profile": profile,
        "sens_dataset": parse_dataset(dataset), "eval_dataset": parse_dataset(eval_dataset),
        "metrics": list(metrics) or None, "protocols": list(protocols) or None,
        "bits": bits, "probes": probes, "seed": seed,
    })
    _post(server, "/switching", req)


@main.command()
@server_option
@out_option
@config_option
def report(server, out, config_path):
    """Aggregate a run directory into summary tables."""
    cfg = _load_config(config_path)
    req = _build(S.ReportRequest, None, {"out": out if out != "out" or cfg.out is None else cfg.out})
    _post(server, "/report", req)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the service under uvicorn."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
