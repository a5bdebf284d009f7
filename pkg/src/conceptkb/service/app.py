"""HTTP service exposing the pipeline verbs over the core package."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import (
    BackendUnavailable,
    ConceptKbError,
    EmptyIndex,
    EmptyInput,
    LengthMismatch,
    LlmUnavailable,
)
from ..kb import KbStats
from ..relevance import PropagationMode
from ..stages import (
    run_build,
    run_complete,
    run_eval_vcr,
    run_eval_vqa,
    run_ground,
    run_index,
    run_mine,
    run_query,
    run_stats,
)
from ..mining import MiningConfig
from . import models

BACKEND_ERRORS = (BackendUnavailable, LlmUnavailable)
DATA_STATUS = 422
BACKEND_STATUS = 502


def _stats_model(stats: KbStats) -> models.KbStatsModel:
    return models.KbStatsModel(**stats.to_dict())


def create_app() -> FastAPI:
    app = FastAPI(title="conceptkb", version="0.1.0")

    @app.exception_handler(ConceptKbError)
    async def _kb_error(request: Request, exc: ConceptKbError):
        if isinstance(exc, BACKEND_ERRORS):
            kind, status = "backend", BACKEND_STATUS
        else:
            kind, status = "data", DATA_STATUS
        return JSONResponse(status_code=status, content={"error": {"kind": kind, "message": str(exc)}})

    @app.exception_handler(FileNotFoundError)
    async def _missing_file(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=DATA_STATUS, content={"error": {"kind": "data", "message": str(exc)}})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=DATA_STATUS, content={"error": {"kind": "data", "message": str(exc)}})

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/pipeline/mine", response_model=models.MineResponse)
    def mine(req: models.MineRequest):
        cfg = MiningConfig(
            min_freq=req.config.min_freq,
            max_len=req.config.max_len,
            latin_nz_top_k=req.config.latin_nz_top_k,
            compound_thresholds=dict(req.config.compound_thresholds),
        )
        count = run_mine(req.corpus, req.lexicon_fine, req.lexicon_compound, req.out, cfg, jobs=req.jobs)
        return models.MineResponse(candidate_count=count, out=req.out)

    @app.post("/pipeline/ground", response_model=models.GroundResponse)
    def ground(req: models.GroundRequest):
        summary = run_ground(
            corpus_path=req.corpus,
            candidates_path=req.candidates,
            encyclopedia_path=req.encyclopedia,
            lexicon_fine=req.lexicon_fine,
            lexicon_compound=req.lexicon_compound,
            out_dir=req.out,
            backend_spec=req.backend.to_spec(),
            mode=PropagationMode(req.mode),
            gain=req.gain,
            tau_desc=req.tau_desc,
            jobs=req.jobs,
        )
        return models.GroundResponse(
            pairs_processed=summary["pairs_processed"], retained=summary["retained"], out=req.out
        )

    @app.post("/pipeline/complete", response_model=models.CompleteResponse)
    def complete(req: models.CompleteRequest):
        summary = run_complete(
            corpus_path=req.corpus,
            encyclopedia_path=req.encyclopedia,
            fragments_dir=req.fragments,
            generator_fixture=req.generator_fixture,
            judge_fixture=req.judge_fixture,
            out_path=req.out,
            backend_spec=req.backend.to_spec(),
            tau_h=req.tau_h,
            gain=req.gain,
        )
        return models.CompleteResponse(**summary)

    @app.post("/pipeline/build", response_model=models.KbStatsModel)
    def build(req: models.BuildRequest):
        return _stats_model(run_build(req.fragments, req.out, req.completions))

    @app.get("/kb/stats", response_model=models.KbStatsModel)
    def stats(kb: str):
        return _stats_model(run_stats(kb))

    @app.post("/index/build", response_model=models.IndexResponse)
    def index_build(req: models.IndexRequest):
        entries = run_index(req.kb, req.out, req.backend.to_spec(), req.max_images_per_concept, req.gain)
        return models.IndexResponse(entries=entries, out=req.out)

    @app.post("/index/query", response_model=models.QueryResponse)
    def index_query(req: models.QueryRequest):
        return models.QueryResponse(concept_label=run_query(req.index, req.image, req.backend.to_spec()))

    @app.post("/eval/vqa", response_model=models.EvalResponse)
    def eval_vqa(req: models.EvalVqaRequest):
        results = run_eval_vqa(req.samples, req.kb, req.llm_fixture, req.include_tag_concepts)
        return models.EvalResponse(results=[models.EvalResultModel(**r.to_dict()) for r in results])

    @app.post("/eval/vcr", response_model=models.EvalResponse)
    def eval_vcr(req: models.EvalVcrRequest):
        results = run_eval_vcr(req.samples, req.index, req.backend.to_spec(), req.judgments)
        return models.EvalResponse(results=[models.EvalResultModel(**r.to_dict()) for r in results])

    return app
