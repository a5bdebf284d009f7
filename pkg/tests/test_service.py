import json

import pytest
from fastapi.testclient import TestClient

from conceptkb.rag import write_vqa_samples, VqaSample
from conceptkb.service import create_app


@pytest.fixture
def client():
    return TestClient(create_app(), raise_server_exceptions=False)


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_stats_missing_kb_is_data_error(client, tmp_path):
    response = client.get("/kb/stats", params={"kb": str(tmp_path / "nope")})
    assert response.status_code == 422
    assert response.json()["error"]["kind"] == "data"


def test_ground_unreachable_sidecar_is_backend_error(client, mini_corpus, tmp_path):
    cands = tmp_path / "cands.tsv"
    cands.write_text("girl\t8\tn\n")
    response = client.post(
        "/pipeline/ground",
        json={
            "corpus": str(mini_corpus["corpus"]),
            "candidates": str(cands),
            "encyclopedia": str(mini_corpus["encyclopedia"]),
            "lexicon_fine": str(mini_corpus["lexicon_fine"]),
            "lexicon_compound": str(mini_corpus["lexicon_compound"]),
            "out": str(tmp_path / "ground"),
            "backend": {"kind": "sidecar", "addr": "127.0.0.1:1"},
        },
    )
    assert response.status_code == 502
    assert response.json()["error"]["kind"] == "backend"


def test_full_chain_through_endpoints(client, mini_corpus, tmp_path):
    fx = mini_corpus
    cands = tmp_path / "candidates.tsv"
    response = client.post(
        "/pipeline/mine",
        json={
            "corpus": str(fx["corpus"]),
            "lexicon_fine": str(fx["lexicon_fine"]),
            "lexicon_compound": str(fx["lexicon_compound"]),
            "out": str(cands),
            "config": {"min_freq": 1, "max_len": 12},
        },
    )
    assert response.status_code == 200, response.text
    assert response.json()["candidate_count"] > 0

    ground_out = tmp_path / "ground"
    response = client.post(
        "/pipeline/ground",
        json={
            "corpus": str(fx["corpus"]),
            "candidates": str(cands),
            "encyclopedia": str(fx["encyclopedia"]),
            "lexicon_fine": str(fx["lexicon_fine"]),
            "lexicon_compound": str(fx["lexicon_compound"]),
            "out": str(ground_out),
            "jobs": 2,
        },
    )
    assert response.status_code == 200, response.text
    body = response.json()
    assert body["pairs_processed"] == 12
    assert body["retained"] > 0
    assert (ground_out / "fragments.jsonl").exists()
    assert (ground_out / "provenance.jsonl").exists()

    completions = tmp_path / "completions.jsonl"
    response = client.post(
        "/pipeline/complete",
        json={
            "corpus": str(fx["corpus"]),
            "encyclopedia": str(fx["encyclopedia"]),
            "fragments": str(ground_out),
            "generator_fixture": str(fx["llm_generate"]),
            "judge_fixture": str(fx["llm_judge"]),
            "out": str(completions),
            "tau_h": -1.0,
        },
    )
    assert response.status_code == 200, response.text

    kb_out = tmp_path / "kb"
    response = client.post(
        "/pipeline/build",
        json={"fragments": str(ground_out), "out": str(kb_out), "completions": str(completions)},
    )
    assert response.status_code == 200, response.text
    built_stats = response.json()
    assert built_stats["concept_count"] > 0

    response = client.get("/kb/stats", params={"kb": str(kb_out)})
    assert response.status_code == 200
    assert response.json() == built_stats

    index_path = tmp_path / "index.jsonl"
    response = client.post("/index/build", json={"kb": str(kb_out), "out": str(index_path)})
    assert response.status_code == 200, response.text
    assert response.json()["entries"] > 0

    image = sorted(fx["image_dir"].glob("*.png"))[0]
    response = client.post("/index/query", json={"index": str(index_path), "image": str(image)})
    assert response.status_code == 200, response.text
    assert response.json()["concept_label"]

    vcr_samples = tmp_path / "vcr.jsonl"
    label = response.json()["concept_label"]
    with open(vcr_samples, "w") as fh:
        fh.write(json.dumps({"query_image": str(image), "gold_concept": label}) + "\n")
    response = client.post("/eval/vcr", json={"samples": str(vcr_samples), "index": str(index_path)})
    assert response.status_code == 200, response.text
    results = response.json()["results"]
    assert results[0]["metric"] == "vcr_exact_match"
    assert results[0]["value"] == 100.0


def test_eval_vqa_endpoint(client, mini_corpus, tmp_path):
    # A KB is needed first; assemble a tiny one directly.
    from conceptkb.kb import ImageRecord, KbBuilder, NodeFragment, SenseRecord, SenseSource, weight_map_name
    from conceptkb.relevance import WeightMap
    from conceptkb.completion import prompt_hash
    from conceptkb.rag import build_okvqa_prompt
    import numpy as np

    builder = KbBuilder()
    ref = f"weights/{weight_map_name('p1', 'fabric')}"
    builder.add_fragment(NodeFragment(
        concept="fabric",
        image=ImageRecord(image_ref="x", weight_map_ref=ref, match_score=0.5, pair_id="p1"),
        sense=SenseRecord("a woven cloth material", SenseSource.ENCYCLOPEDIA, 1),
    ))
    kb_dir = tmp_path / "kb"
    builder.finalize(kb_dir, weight_maps={ref: WeightMap(w=np.zeros((2, 2), dtype=np.float32))})

    samples = [VqaSample(
        question="what fabric is this",
        gold_annotations=tuple(["wool"] * 4 + [f"g{i}" for i in range(6)]),
        image_tags=(),
        original_answer="sheep",
    )]
    samples_path = tmp_path / "samples.jsonl"
    write_vqa_samples(samples, samples_path)

    prompt = build_okvqa_prompt("what fabric is this", "sheep", [], [("fabric", "a woven cloth material")])
    fixture = tmp_path / "llm.jsonl"
    fixture.write_text(json.dumps({"prompt_hash": prompt_hash(prompt), "reply": "wool"}) + "\n")

    response = client.post(
        "/eval/vqa",
        json={"samples": str(samples_path), "kb": str(kb_dir), "llm_fixture": str(fixture)},
    )
    assert response.status_code == 200, response.text
    results = {r["metric"]: r["value"] for r in response.json()["results"]}
    assert results["soft_accuracy_original"] == 0.0
    assert results["soft_accuracy_refined"] == 100.0
