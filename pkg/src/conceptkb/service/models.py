"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..stages import BackendSpec


class BackendSpecModel(BaseModel):
    kind: str = "toy"
    seed: int = 0
    addr: str | None = None
    cmd: list[str] | None = None
    patch_grid: tuple[int, int] | None = None

    def to_spec(self) -> BackendSpec:
        return BackendSpec(
            kind=self.kind,
            seed=self.seed,
            addr=self.addr,
            cmd=tuple(self.cmd) if self.cmd else None,
            patch_grid=self.patch_grid,
        )


class MiningConfigModel(BaseModel):
    min_freq: int = 15
    max_len: int = 5
    latin_nz_top_k: int = 50
    compound_thresholds: dict[str, int] = Field(default_factory=lambda: {"ns": 3000, "nt": 400, "nw": 300})


class MineRequest(BaseModel):
    corpus: str
    lexicon_fine: str
    lexicon_compound: str
    out: str
    config: MiningConfigModel = Field(default_factory=MiningConfigModel)
    jobs: int = 1


class MineResponse(BaseModel):
    candidate_count: int
    out: str


class GroundRequest(BaseModel):
    corpus: str
    candidates: str
    encyclopedia: str
    lexicon_fine: str
    lexicon_compound: str
    out: str
    backend: BackendSpecModel = Field(default_factory=BackendSpecModel)
    mode: str = "HADAMARD"
    gain: float = 0.5
    tau_desc: float = 0.2
    jobs: int = 1


class GroundResponse(BaseModel):
    pairs_processed: int
    retained: int
    out: str


class CompleteRequest(BaseModel):
    corpus: str
    encyclopedia: str
    fragments: str
    generator_fixture: str
    judge_fixture: str
    out: str
    backend: BackendSpecModel = Field(default_factory=BackendSpecModel)
    tau_h: float = 0.2
    gain: float = 0.5


class CompleteResponse(BaseModel):
    concepts_considered: int
    records: int
    by_status: dict[str, int]


class BuildRequest(BaseModel):
    fragments: str
    out: str
    completions: str | None = None


class KbStatsModel(BaseModel):
    concept_count: int
    image_count: int
    avg_images_per_concept: float
    polysemous_count: int
    histogram: dict[str, int]
    overflow: int
    avg_description_scalars: float
    avg_description_chars: float


class IndexRequest(BaseModel):
    kb: str
    out: str
    backend: BackendSpecModel = Field(default_factory=BackendSpecModel)
    max_images_per_concept: int = 10
    gain: float = 0.5


class IndexResponse(BaseModel):
    entries: int
    out: str


class QueryRequest(BaseModel):
    index: str
    image: str
    backend: BackendSpecModel = Field(default_factory=BackendSpecModel)


class QueryResponse(BaseModel):
    concept_label: str


class EvalVqaRequest(BaseModel):
    samples: str
    kb: str
    llm_fixture: str
    include_tag_concepts: bool = False


class EvalVcrRequest(BaseModel):
    samples: str
    index: str
    backend: BackendSpecModel = Field(default_factory=BackendSpecModel)
    judgments: str | None = None


class EvalResultModel(BaseModel):
    metric: str
    value: float
    n: int


class EvalResponse(BaseModel):
    results: list[EvalResultModel]


class ErrorDetail(BaseModel):
    kind: str  # "usage" | "data" | "backend" | "internal"
    message: str


class ErrorResponse(BaseModel):
    error: ErrorDetail
