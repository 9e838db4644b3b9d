"""FastAPI service wrapping the dispatch pipeline.

Jobs run synchronously (desk scale); all paths are server-local. The CLI is
a thin HTTP client of these endpoints.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..checkpoint import CheckpointError, load_checkpoint
from ..config import ConfigError, RunConfig, load_config, parse_config
from ..geo import GeoPoint, geohash_decode, geohash_encode
from ..policy import EpisodeContext, decoder_params_from_arrays, predict_action
from . import schemas as s

GRAD_TOLERANCE = 1e-4


def _resolve_config(req: s.JobRequest) -> RunConfig:
    overrides = dict(req.overrides)
    if req.seed is not None:
        overrides["seed"] = req.seed
    try:
        if req.config_path:
            return load_config(req.config_path, **overrides)
        return parse_config("", **overrides)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, ValueError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except CheckpointError as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="hexfleet dispatch service", version=__version__)

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return s.HealthResponse(status="ok", version=__version__)

    @app.post("/geo/encode", response_model=s.GeoEncodeResponse)
    def geo_encode(req: s.GeoEncodeRequest):
        code = _run(lambda: geohash_encode(GeoPoint(req.lat, req.lon), req.precision))
        return s.GeoEncodeResponse(code=code.code, precision=code.precision)

    @app.post("/geo/decode", response_model=s.GeoDecodeResponse)
    def geo_decode(req: s.GeoDecodeRequest):
        center, lat_err, lon_err = _run(lambda: geohash_decode(req.code))
        return s.GeoDecodeResponse(lat=center.lat, lon=center.lon, lat_err=lat_err, lon_err=lon_err)

    @app.post("/dispatch/predict", response_model=s.PredictResponse)
    def dispatch_predict(req: s.PredictRequest):
        if not req.steps:
            raise HTTPException(status_code=400, detail="at least one (reward, state) step required")

        def go():
            arrays = load_checkpoint(req.checkpoint)
            pipeline.check_stage1(arrays)
            if "policy/proj_reward/w" not in arrays:
                raise CheckpointError("checkpoint lacks policy parameters")
            params = decoder_params_from_arrays(arrays)
            ctx = EpisodeContext(params)
            action = None
            for step in req.steps:
                state = np.asarray(step.state, dtype=np.float64)
                action = predict_action(ctx, step.reward, state, params, mode=req.context_mode)
            return action

        action = _run(go)
        return s.PredictResponse(
            dis_norm=action.dis_norm,
            deg=action.deg,
            dis_km=action.km(req.r_max_km),
            steps_consumed=len(req.steps),
        )

    @app.post("/jobs/gen-data", response_model=s.JobResponse)
    def gen_data(req: s.GenDataRequest):
        cfg = _resolve_config(req)
        summary = _run(pipeline.run_gen_data, cfg, req.out_dir)
        return s.JobResponse(command="gen-data", out_dir=req.out_dir, summary=summary)

    @app.post("/jobs/pretrain", response_model=s.JobResponse)
    def pretrain(req: s.PretrainRequest):
        cfg = _resolve_config(req)
        summary = _run(pipeline.run_pretrain, cfg, req.data_dir, req.out_dir)
        return s.JobResponse(command="pretrain", out_dir=req.out_dir, summary=summary)

    @app.post("/jobs/train", response_model=s.JobResponse)
    def train(req: s.TrainRequest):
        cfg = _resolve_config(req)
        summary = _run(
            pipeline.run_train, cfg, req.data_dir, req.out_dir,
            stage1_path=req.checkpoint, stage2_only=req.stage2_only,
        )
        return s.JobResponse(command="train", out_dir=req.out_dir, summary=summary)

    @app.post("/jobs/eval", response_model=s.JobResponse)
    def evaluate(req: s.EvalRequest):
        cfg = _resolve_config(req)
        summary = _run(pipeline.run_eval, cfg, req.checkpoint, req.out_dir)
        return s.JobResponse(command="eval", out_dir=req.out_dir, summary=summary)

    @app.post("/jobs/simulate", response_model=s.JobResponse)
    def simulate(req: s.SimulateRequest):
        cfg = _resolve_config(req)
        summary = _run(pipeline.run_simulate, cfg, req.out_dir)
        return s.JobResponse(command="simulate", out_dir=req.out_dir, summary=summary)

    @app.post("/jobs/sweep-ratio", response_model=s.SweepResponse)
    def sweep_ratio(req: s.SweepRatioRequest):
        cfg = _resolve_config(req)
        rows = _run(pipeline.run_sweep_ratio, cfg, req.out_dir, ratios=req.ratios, target_orders=req.target_orders)
        return s.SweepResponse(command="sweep-ratio", out_dir=req.out_dir, rows=rows)

    @app.post("/jobs/sweep-alpha", response_model=s.SweepResponse)
    def sweep_alpha(req: s.SweepAlphaRequest):
        cfg = _resolve_config(req)
        rows = _run(
            pipeline.run_sweep_alpha, cfg, req.data_dir, req.out_dir,
            alphas=req.alphas, stage1_path=req.checkpoint,
        )
        return s.SweepResponse(command="sweep-alpha", out_dir=req.out_dir, rows=rows)

    @app.post("/jobs/grad-check", response_model=s.GradCheckResponse)
    def grad_check(req: s.GradCheckRequest):
        results = _run(pipeline.gradient_suite, req.seed)
        worst = max(results.values())
        return s.GradCheckResponse(
            results=results, max_error=worst, tolerance=GRAD_TOLERANCE, passed=worst <= GRAD_TOLERANCE
        )

    return app


app = create_app()
