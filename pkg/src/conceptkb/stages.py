"""Path-level orchestration of the pipeline stages.

Each function here is one operational verb over the on-disk formats (corpus
and encyclopedia JSONL in, candidate TSV / fragment dir / KB dir / index
out). The HTTP service exposes these verbs; the CLI reaches them through the
service.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

from . import completion as completion_mod
from . import corpus as corpus_mod
from . import grounding as grounding_mod
from . import kb as kb_mod
from . import mining as mining_mod
from . import rag as rag_mod
from .errors import BackendUnavailable, ConceptKbError
from .relevance import PropagationMode
from .backends import SidecarBackend, StdioTransport, TcpTransport, ToyEncoder
from .backends.base import GroundingBackend


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "toy"  # "toy" | "sidecar"
    seed: int = 0
    addr: str | None = None  # host:port for TCP sidecars
    cmd: tuple[str, ...] | None = None  # argv for stdio sidecars
    patch_grid: tuple[int, int] | None = None


def make_backend(spec: BackendSpec) -> GroundingBackend:
    if spec.kind == "toy":
        return ToyEncoder(seed=spec.seed)
    if spec.kind == "sidecar":
        if spec.cmd:
            transport = StdioTransport(list(spec.cmd))
        elif spec.addr:
            host, _, port = spec.addr.rpartition(":")
            if not host or not port.isdigit():
                raise BackendUnavailable(f"sidecar address must be host:port, got {spec.addr!r}")
            transport = TcpTransport(host, int(port))
        else:
            raise BackendUnavailable("sidecar backend needs an addr or a command")
        return SidecarBackend(transport, patch_grid=spec.patch_grid)
    raise BackendUnavailable(f"unknown backend kind {spec.kind!r}")


def _tokenizers(lexicon_fine: str, lexicon_compound: str):
    fine = mining_mod.LexiconTokenizer.from_tsv(lexicon_fine)
    compound = mining_mod.LexiconTokenizer.from_tsv(lexicon_compound)
    return fine.tokenize, compound.tokenize


def run_mine(
    corpus_path: str,
    lexicon_fine: str,
    lexicon_compound: str,
    out_path: str,
    cfg: mining_mod.MiningConfig = mining_mod.MiningConfig(),
    jobs: int = 1,
) -> int:
    fine, compound = _tokenizers(lexicon_fine, lexicon_compound)
    texts = (pair.text for pair in corpus_mod.load_corpus(corpus_path))
    candidates = mining_mod.mine_corpus(texts, fine, compound, cfg, jobs=jobs)
    mining_mod.write_candidates(candidates, out_path)
    return len(candidates)


def run_ground(
    corpus_path: str,
    candidates_path: str,
    encyclopedia_path: str,
    lexicon_fine: str,
    lexicon_compound: str,
    out_dir: str,
    backend_spec: BackendSpec = BackendSpec(),
    mode: PropagationMode = PropagationMode.HADAMARD,
    gain: float = 0.5,
    tau_desc: float = 0.2,
    jobs: int = 1,
) -> dict:
    """Ground the corpus and persist fragments + weight maps + provenance.

    The fragment file is canonically ordered by (pair_id, concept) so runs
    with different worker counts produce identical bytes.
    """
    out = Path(out_dir)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    fine, compound = _tokenizers(lexicon_fine, lexicon_compound)
    candidates = {c.surface for c in mining_mod.read_candidates(candidates_path)}
    encyclopedia = corpus_mod.load_encyclopedia(encyclopedia_path)
    backend = make_backend(backend_spec)
    cfg = grounding_mod.GroundingConfig(mode=mode, gain=gain, tau_desc=tau_desc, jobs=jobs)

    records: list[grounding_mod.GroundingRecord] = []
    pairs_seen = 0
    image_refs: dict[str, str] = {}

    def counting_corpus():
        nonlocal pairs_seen
        for pair in corpus_mod.load_corpus(corpus_path):
            pairs_seen += 1
            image_refs[pair.id] = pair.image_ref
            yield pair

    try:
        with grounding_mod.ProvenanceWriter(out / "provenance.jsonl") as provenance:
            for record in grounding_mod.run_grounding(
                counting_corpus(), candidates, encyclopedia, backend, fine, compound, cfg, provenance
            ):
                records.append(record)
    finally:
        _close_backend(backend)

    records.sort(key=lambda r: (r.pair.pair_id, r.pair.concept))

    with open(out / "fragments.jsonl", "w", encoding="utf-8") as fh:
        for record in records:
            semi, sense = record.pair, record.sense
            ref = f"weights/{kb_mod.weight_map_name(semi.pair_id, semi.concept)}"
            kb_mod.write_weight_map(semi.weighted_image.map, out / ref)
            sense_text = None
            if sense.sense_index is not None:
                sense_text = encyclopedia[semi.concept].senses[sense.sense_index - 1]
            fh.write(
                json.dumps(
                    {
                        "concept": semi.concept,
                        "pair_id": semi.pair_id,
                        "image_ref": image_refs[semi.pair_id],
                        "match_score": semi.match_score,
                        "weight_map_ref": ref,
                        "sense_index": sense.sense_index,
                        "sense_text": sense_text,
                        "gain": semi.weighted_image.gain,
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )
    return {"pairs_processed": pairs_seen, "retained": len(records), "out_dir": str(out)}


def _load_fragments(fragments_dir: str | Path) -> list[dict]:
    path = Path(fragments_dir) / "fragments.jsonl"
    fragments = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                fragments.append(json.loads(line))
    return fragments


def run_complete(
    corpus_path: str,
    encyclopedia_path: str,
    fragments_dir: str,
    generator_fixture: str,
    judge_fixture: str,
    out_path: str,
    backend_spec: BackendSpec = BackendSpec(),
    tau_h: float = 0.2,
    gain: float = 0.5,
) -> dict:
    """Generate + filter + judge descriptions for concepts with no grounded sense."""
    fragments = _load_fragments(fragments_dir)
    encyclopedia = corpus_mod.load_encyclopedia(encyclopedia_path)
    by_concept: dict[str, list[dict]] = {}
    for frag in fragments:
        by_concept.setdefault(frag["concept"], []).append(frag)

    needy = sorted(
        concept
        for concept, frags in by_concept.items()
        if all(f["sense_index"] is None for f in frags)
    )

    captions: dict[str, str] = {}
    for pair in corpus_mod.load_corpus(corpus_path):
        captions[pair.id] = pair.text

    backend = make_backend(backend_spec)
    try:
        frag_root = Path(fragments_dir)
        loader = rag_mod.kb_image_loader(frag_root, gain=gain)
        inputs = []
        for concept in needy:
            frags = sorted(by_concept[concept], key=lambda f: (-f["match_score"], f["pair_id"]))
            images = [
                loader(concept, kb_mod.ImageRecord(
                    image_ref=f["image_ref"], weight_map_ref=f["weight_map_ref"],
                    match_score=f["match_score"], pair_id=f["pair_id"],
                ))
                for f in frags
            ]
            inputs.append(
                completion_mod.CompletionInputs(
                    concept=concept,
                    weighted_images=images,
                    context_text=captions[frags[0]["pair_id"]],
                )
            )

        generator = completion_mod.ReplayLlm(generator_fixture)
        judge = completion_mod.ReplayLlm(judge_fixture)
        records = completion_mod.run_completion(inputs, generator, judge, backend, tau_h=tau_h)
        completion_mod.write_completions(records, out_path)
    finally:
        _close_backend(backend)
    counts = {status.value: 0 for status in completion_mod.Status}
    for record in records:
        counts[record.status.value] += 1
    return {"concepts_considered": len(needy), "records": len(records), "by_status": counts}


def run_build(fragments_dir: str, out_dir: str, completions_path: str | None = None) -> kb_mod.KbStats:
    """Assemble the final KB directory from fragments and completions."""
    fragments = _load_fragments(fragments_dir)
    builder = kb_mod.KbBuilder()
    for frag in fragments:
        image = kb_mod.ImageRecord(
            image_ref=frag["image_ref"],
            weight_map_ref=frag["weight_map_ref"],
            match_score=frag["match_score"],
            pair_id=frag["pair_id"],
        )
        sense = None
        if frag["sense_index"] is not None:
            sense = kb_mod.SenseRecord(
                text=frag["sense_text"],
                source=kb_mod.SenseSource.ENCYCLOPEDIA,
                sense_index=frag["sense_index"],
            )
        builder.add_fragment(kb_mod.NodeFragment(concept=frag["concept"], image=image, sense=sense))

    if completions_path:
        for record in completion_mod.read_completions(completions_path):
            if record.status is completion_mod.Status.JUDGED_OK:
                builder.add_fragment(
                    kb_mod.NodeFragment(
                        concept=record.concept,
                        sense=kb_mod.SenseRecord(text=record.text, source=kb_mod.SenseSource.GENERATED, sense_index=1),
                    )
                )

    stats = builder.finalize(out_dir)
    src_root = Path(fragments_dir)
    for node in builder.nodes():
        for img in node.images:
            src = src_root / img.weight_map_ref
            dst = Path(out_dir) / img.weight_map_ref
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
    return stats


def run_stats(kb_dir: str) -> kb_mod.KbStats:
    return kb_mod.stats_from_dir(kb_dir)


def run_index(kb_dir: str, out_path: str, backend_spec: BackendSpec = BackendSpec(),
              max_images_per_concept: int = 10, gain: float = 0.5) -> int:
    nodes = kb_mod.load_kb(kb_dir)
    backend = make_backend(backend_spec)
    try:
        index = rag_mod.build_index(nodes, backend, rag_mod.kb_image_loader(kb_dir, gain=gain), max_images_per_concept)
        rag_mod.save_index(index, out_path)
    finally:
        _close_backend(backend)
    return len(index.entries)


def run_query(index_path: str, image_path: str, backend_spec: BackendSpec = BackendSpec()) -> str:
    from .corpus import ImageTextPair

    index = rag_mod.load_index(index_path)
    image = ImageTextPair(id="query", image_ref=image_path, text="-").load_image()
    backend = make_backend(backend_spec)
    try:
        return rag_mod.retrieve_concept(index, image, backend)
    finally:
        _close_backend(backend)


def run_eval_vqa(samples_path: str, kb_dir: str, llm_fixture: str,
                 include_tag_concepts: bool = False) -> list[rag_mod.EvalResult]:
    samples = rag_mod.load_vqa_samples(samples_path)
    if not samples:
        raise ConceptKbError("no VQA samples to evaluate")
    lexicon = rag_mod.kb_lexicon(kb_mod.load_kb(kb_dir))
    llm = completion_mod.ReplayLlm(llm_fixture)
    refined = rag_mod.refine_vqa_answers(samples, lexicon, llm, include_tag_concepts)
    annotations = [s.gold_annotations for s in samples]
    return [
        rag_mod.mean_soft_accuracy([s.original_answer for s in samples], annotations, metric="soft_accuracy_original"),
        rag_mod.mean_soft_accuracy(refined, annotations, metric="soft_accuracy_refined"),
    ]


def run_eval_vcr(samples_path: str, index_path: str, backend_spec: BackendSpec = BackendSpec(),
                 judgments_path: str | None = None) -> list[rag_mod.EvalResult]:
    from .corpus import ImageTextPair

    index = rag_mod.load_index(index_path)
    backend = make_backend(backend_spec)
    preds, golds = [], []
    try:
        with open(samples_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                image = ImageTextPair(id="q", image_ref=obj["query_image"], text="-").load_image()
                preds.append(rag_mod.retrieve_concept(index, image, backend))
                golds.append(obj["gold_concept"])
    finally:
        _close_backend(backend)
    if not preds:
        raise ConceptKbError("no VCR samples to evaluate")
    results = [rag_mod.exact_match_accuracy(preds, golds, metric="vcr_exact_match")]
    if judgments_path:
        with open(judgments_path, encoding="utf-8") as fh:
            judgments = [json.loads(line)["judgment"] for line in fh if line.strip()]
        win, lose, tie = rag_mod.win_rate(judgments)
        n = len(judgments)
        results += [
            rag_mod.EvalResult(metric="vckdg_win", value=win, n=n),
            rag_mod.EvalResult(metric="vckdg_lose", value=lose, n=n),
            rag_mod.EvalResult(metric="vckdg_tie", value=tie, n=n),
        ]
    return results


def _close_backend(backend: GroundingBackend) -> None:
    close = getattr(backend, "close", None)
    if callable(close):
        close()
