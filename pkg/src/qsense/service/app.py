"""FastAPI service wrapping the quantization toolkit.

One endpoint per pipeline step; requests carry dataset descriptors and file
paths, the service runs the step and writes its artifacts server-side.
Domain errors map to structured HTTP errors: missing files to 404 with the
artifact named, invalid configuration to 400 with the offending detail.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..errors import (DimensionError, MissingArtifactError, QsenseError,
                      ValidationError)
from . import schemas as S


def _run(fn, **kwargs):
    try:
        return fn(**kwargs)
    except MissingArtifactError as e:
        raise HTTPException(status_code=404, detail={
            "code": "missing_artifact", "path": e.path, "role": e.role,
            "message": str(e)}) from e
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail={
            "code": "missing_artifact", "path": str(e.filename), "role": "input",
            "message": str(e)}) from e
    except (ValidationError, DimensionError) as e:
        raise HTTPException(status_code=400, detail={
            "code": "invalid_config", "message": str(e)}) from e
    except QsenseError as e:
        raise HTTPException(status_code=500, detail={
            "code": "runtime_error", "message": str(e)}) from e


def create_app() -> FastAPI:
    app = FastAPI(title="qsense", version=__version__,
                  description="Data-free post-training mixed-precision quantization service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/train", response_model=S.TrainResponse)
    def train(req: S.TrainRequest):
        return _run(pipeline.train_command, out_dir=req.out, arch=req.arch, seed=req.seed,
                    dataset=req.dataset.to_args() if req.dataset else None,
                    eval_dataset=req.eval_dataset.to_args() if req.eval_dataset else None,
                    epochs=req.epochs, learning_rate=req.learning_rate,
                    batch_size=req.batch_size, train_seed=req.train_seed)

    @app.post("/generate", response_model=S.GenerateResponse)
    def generate(req: S.GenerateRequest):
        return _run(pipeline.generate_command, out_dir=req.out, model=req.model,
                    seed=req.seed, iterations=req.iterations, lam=req.lam,
                    learning_rate=req.learning_rate,
                    samples_per_class=req.samples_per_class, logit_term=req.logit_term)

    @app.post("/calibrate", response_model=S.CalibrateResponse)
    def calibrate(req: S.CalibrateRequest):
        return _run(pipeline.calibrate_command, out_dir=req.out, model=req.model,
                    dataset=req.dataset.to_args() if req.dataset else None, tag=req.tag)

    @app.post("/quantize-eval", response_model=S.QuantizeEvalResponse)
    def quantize_eval(req: S.QuantizeEvalRequest):
        return _run(pipeline.quantize_eval_command, out_dir=req.out, model=req.model,
                    profile=req.profile, weight_bits=req.weight_bits,
                    act_bits=req.act_bits,
                    eval_dataset=req.eval_dataset.to_args() if req.eval_dataset else None)

    @app.post("/sensitivity", response_model=S.SensitivityResponse)
    def sensitivity(req: S.SensitivityRequest):
        return _run(pipeline.sensitivity_command, out_dir=req.out, model=req.model,
                    profile=req.profile,
                    dataset=req.dataset.to_args() if req.dataset else None,
                    metrics=req.metrics, targets=req.targets, bits=req.bits,
                    probes=req.probes, seed=req.seed, tag=req.tag)

    @app.post("/switching", response_model=S.SwitchingResponse)
    def switching(req: S.SwitchingRequest):
        return _run(pipeline.switching_command, out_dir=req.out, model=req.model,
                    profile=req.profile,
                    sens_dataset=req.sens_dataset.to_args() if req.sens_dataset else None,
                    eval_dataset=req.eval_dataset.to_args() if req.eval_dataset else None,
                    metrics=req.metrics, protocols=req.protocols, bits=req.bits,
                    probes=req.probes, seed=req.seed)

    @app.post("/report")
    def report(req: S.ReportRequest):
        return _run(pipeline.report_command, out_dir=req.out)

    return app


app = create_app()
