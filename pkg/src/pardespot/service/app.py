"""HTTP service wrapping the planner, the episode runner and the experiment harness."""
from __future__ import annotations

import logging

import numpy as np
from fastapi import FastAPI, HTTPException

from pardespot import __version__
from pardespot.harness.episode import EpisodeSettings, plan, run_episode
from pardespot.harness.experiment import ExperimentConfig, run_experiment, run_sweep
from pardespot.harness.results import emit_results, output_dir, write_json
from pardespot.model import ParticleBelief, domain_names, make_model
from pardespot.service.schemas import (
    EpisodeRequest,
    EpisodeResponse,
    ExperimentRequest,
    ExperimentResponse,
    PlanRequest,
    PlanResponse,
    SweepRequest,
    SweepResponse,
)

log = logging.getLogger(__name__)


def _model(req):
    try:
        return make_model(req.domain, **req.domain_params)
    except KeyError as exc:
        raise HTTPException(status_code=404, detail=str(exc.args[0])) from None
    except (TypeError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=f"bad domain parameters: {exc}") from None


def _experiment_config(req: ExperimentRequest) -> ExperimentConfig:
    return ExperimentConfig(
        domain=req.domain,
        domain_params=req.domain_params,
        search=req.search.to_config(),
        episodes=req.episodes,
        variants=list(req.variants),
        particles=req.particles,
        step_limit=req.step_limit,
        seed=req.seed,
        output=req.output,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="pardespot", version=__version__)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/domains")
    def domains():
        return {name: make_model(name).describe() for name in domain_names()}

    @app.post("/plan", response_model=PlanResponse)
    def plan_once(req: PlanRequest):
        model = _model(req)
        if req.belief is not None:
            belief = ParticleBelief.from_json(req.belief, model)
        else:
            belief = model.initial_belief(req.particles, np.random.default_rng(req.belief_seed))
        try:
            stats, tree = plan(belief, model, req.search.to_config())
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return PlanResponse(action=stats.root_action, stats=stats.summary(),
                            tree=tree.to_json() if req.include_tree else None)

    @app.post("/episode", response_model=EpisodeResponse)
    def episode(req: EpisodeRequest):
        model = _model(req)
        settings = EpisodeSettings(req.domain, req.domain_params, req.search.to_config(), req.variant,
                                   req.particles, req.step_limit)
        rec = run_episode(settings, req.seed, 0, model)
        return EpisodeResponse(record=rec.to_dict(), aborted=rec.aborted)

    @app.post("/experiment", response_model=ExperimentResponse)
    def experiment(req: ExperimentRequest):
        _model(req)
        report = run_experiment(_experiment_config(req))
        files = emit_results(report, req.output) if req.write else {}
        return ExperimentResponse(summary=report.summary, aborted=report.aborted, files=files)

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(req: SweepRequest):
        _model(req)
        try:
            result = run_sweep(_experiment_config(req), req.param, req.values, req.mode, req.runs)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        aborted = sum(v.get("aborted", 0) for p in result["points"] for v in p["variants"].values())
        files = {}
        if req.write:
            files["sweep"] = write_json(result, output_dir(req.output) / f"sweep_{req.param}.json")
        return SweepResponse(result=result, aborted=aborted, files=files)

    return app


app = create_app()
