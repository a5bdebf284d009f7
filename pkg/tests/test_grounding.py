import numpy as np
import pytest

from conceptkb.backends.base import grounding_prompt
from conceptkb.corpus import EncyclopediaEntry, ImageTextPair
from conceptkb.grounding import (
    ConceptMentionSet,
    GroundingConfig,
    double_check,
    extract_mentions,
    run_grounding,
    semantic_ground,
    visual_ground,
)
from conceptkb.mining import LexiconTokenizer
from conceptkb.relevance import (
    PatchGrid,
    PropagationMode,
    ReducedAttention,
    RelevanceMatrix,
    WeightMap,
    blend,
    extract_patch_relevance,
    normalize,
    propagate,
    upsample_bilinear,
)

from conftest import make_raster, save_png
from helpers import ScriptedBackend


FINE = LexiconTokenizer({"girl": "n", "apple": "n", "dog": "n"})
COMPOUND = LexiconTokenizer({"little girl": "n", "apple": "n"})


def pair_with_image(tmp_path, rng, pair_id="p1", text="the girl eats an apple"):
    img = make_raster(rng, width=8, height=8)
    path = tmp_path / f"{pair_id}.png"
    save_png(img, path)
    return ImageTextPair(id=pair_id, image_ref=str(path), text=text)


# -- mentions -----------------------------------------------------------------


def test_mentions_intersection(tmp_path, rng):
    pair = pair_with_image(tmp_path, rng)
    mentions = extract_mentions(pair, {"apple"}, FINE.tokenize, COMPOUND.tokenize)
    assert mentions.concepts == ("apple",)


def test_mentions_no_overlap(tmp_path, rng):
    pair = pair_with_image(tmp_path, rng, text="nothing matches here")
    mentions = extract_mentions(pair, {"apple"}, FINE.tokenize, COMPOUND.tokenize)
    assert mentions.concepts == ()


def test_mentions_deduplicated(tmp_path, rng):
    pair = pair_with_image(tmp_path, rng, text="apple apple apple")
    mentions = extract_mentions(pair, {"apple", "girl"}, FINE.tokenize, COMPOUND.tokenize)
    assert mentions.concepts == ("apple",)


# -- visual grounding ------------------------------------------------------------


def test_zero_attention_means_original_image(tmp_path, rng):
    pair = pair_with_image(tmp_path, rng)
    backend = ScriptedBackend(scores={}, tokens=5)
    mentions = ConceptMentionSet(pair_id=pair.id, concepts=("apple",))
    [(concept, weighted)] = visual_ground(pair, mentions, backend, GroundingConfig())
    assert concept == "apple"
    assert np.array_equal(weighted.blended.pixels, pair.load_image().pixels)
    assert np.array_equal(weighted.map.w, np.zeros((8, 8), dtype=np.float32))


def test_toy_backend_weight_map_contract(tmp_path, rng):
    from conceptkb.backends import ToyEncoder

    pair = pair_with_image(tmp_path, rng)
    backend = ToyEncoder(seed=0)
    mentions = ConceptMentionSet(pair_id=pair.id, concepts=("apple", "girl"))
    results = visual_ground(pair, mentions, backend, GroundingConfig(mode=PropagationMode.MATMUL))
    assert len(results) == 2
    for _, weighted in results:
        assert (weighted.map.w >= 0).all() and (weighted.map.w <= 1).all()
        assert weighted.map.w.shape == (8, 8)


def test_injected_attention_highlights_first_patch(tmp_path, rng):
    # Concentrate all class-token relevance on patch (0, 0) and check the
    # emphasized region lands in the upper-left quadrant of the image.
    abar = np.zeros((1, 5, 5))
    abar[0, 0, 1] = 4.0  # CLS row, first patch token
    pair = pair_with_image(tmp_path, rng)
    backend = ScriptedBackend(scores={}, abar=abar)
    cfg = GroundingConfig(mode=PropagationMode.MATMUL)
    mentions = ConceptMentionSet(pair_id=pair.id, concepts=("apple",))
    [(_, weighted)] = visual_ground(pair, mentions, backend, cfg)

    peak = np.unravel_index(np.argmax(weighted.map.w), weighted.map.w.shape)
    assert peak[0] < 4 and peak[1] < 4

    # Oracle: compose the pipeline stages directly on the injected tensor.
    relevance = propagate(ReducedAttention(abar=abar), PropagationMode.MATMUL)
    grid = extract_patch_relevance(relevance, (2, 2))
    expected = normalize(upsample_bilinear(grid, 8, 8))
    assert np.array_equal(weighted.map.w, expected.w)


def test_backend_failure_skips_concept_not_pair(tmp_path, rng):
    pair = pair_with_image(tmp_path, rng)
    backend = ScriptedBackend(scores={}, fail_on={grounding_prompt("apple")})
    mentions = ConceptMentionSet(pair_id=pair.id, concepts=("apple", "girl"))
    results = visual_ground(pair, mentions, backend, GroundingConfig())
    assert [c for c, _ in results] == ["girl"]


# -- double check -----------------------------------------------------------------


def weighted_fixture(rng):
    img = make_raster(rng, width=4, height=4)
    return blend(img, WeightMap(w=np.zeros((4, 4), dtype=np.float32)), source_concept="apple")


def test_double_check_singleton_always_retained(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={grounding_prompt("apple"): 0.1})
    mentions = ConceptMentionSet(pair_id="p", concepts=("apple",))
    retained, score = double_check(weighted, "apple", mentions, backend)
    assert retained and score == 0.1


def test_double_check_argmax_retained(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={grounding_prompt("apple"): 0.9, grounding_prompt("girl"): 0.3})
    mentions = ConceptMentionSet(pair_id="p", concepts=("apple", "girl"))
    retained, score = double_check(weighted, "apple", mentions, backend)
    assert retained and score == 0.9
    retained_girl, _ = double_check(weighted, "girl", mentions, backend)
    assert not retained_girl


def test_double_check_tie_drops_both(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={grounding_prompt("apple"): 0.5, grounding_prompt("girl"): 0.5})
    mentions = ConceptMentionSet(pair_id="p", concepts=("apple", "girl"))
    assert not double_check(weighted, "apple", mentions, backend)[0]
    assert not double_check(weighted, "girl", mentions, backend)[0]


def test_double_check_requires_membership(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={})
    mentions = ConceptMentionSet(pair_id="p", concepts=("girl",))
    with pytest.raises(ValueError):
        double_check(weighted, "apple", mentions, backend)


# -- semantic grounding ------------------------------------------------------------


def entry(*senses):
    return EncyclopediaEntry(concept_surface="apple", senses=senses)


def test_semantic_picks_argmax_over_threshold(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={"s1": 0.3, "s2": 0.8, "s3": 0.1})
    sense = semantic_ground(weighted, entry("s1", "s2", "s3"), backend, tau_desc=0.25)
    assert sense.sense_index == 2 and sense.score == 0.8


def test_semantic_unmatched_below_threshold(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={"s1": 0.1, "s2": 0.15})
    sense = semantic_ground(weighted, entry("s1", "s2"), backend, tau_desc=0.2)
    assert sense.unmatched


def test_semantic_single_sense(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={"only": 0.9})
    sense = semantic_ground(weighted, entry("only"), backend, tau_desc=0.2)
    assert sense.sense_index == 1


def test_semantic_tie_takes_lowest_index(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={"s1": 0.7, "s2": 0.7})
    sense = semantic_ground(weighted, entry("s1", "s2"), backend, tau_desc=0.2)
    assert sense.sense_index == 1


def test_semantic_backend_failure_unmatched(rng):
    weighted = weighted_fixture(rng)
    backend = ScriptedBackend(scores={}, fail_on={"s1"})
    sense = semantic_ground(weighted, entry("s1"), backend, tau_desc=0.2)
    assert sense.unmatched


# -- full pipeline ------------------------------------------------------------


def corpus_fixture(tmp_path, rng, texts):
    pairs = []
    for i, text in enumerate(texts):
        pairs.append(pair_with_image(tmp_path, rng, pair_id=f"p{i:02d}", text=text))
    return pairs


def test_run_grounding_empty_corpus():
    backend = ScriptedBackend(scores={})
    out = list(run_grounding([], set(), {}, backend, FINE.tokenize, COMPOUND.tokenize))
    assert out == []


def test_run_grounding_loser_concept_absent(tmp_path, rng):
    # "girl" never out-scores "apple" on any weighted image, so no girl records.
    texts = ["girl apple", "apple girl dog"]
    pairs = corpus_fixture(tmp_path, rng, texts)
    scores = {grounding_prompt("apple"): 0.9, grounding_prompt("girl"): 0.2, grounding_prompt("dog"): 0.5}
    backend = ScriptedBackend(scores=scores)
    candidates = {"apple", "girl", "dog"}
    records = list(run_grounding(pairs, candidates, {}, backend, FINE.tokenize, COMPOUND.tokenize))

    # Reference loop: for each pair, every mention whose score strictly beats
    # all co-mentions should appear, everything else should not.
    expected = set()
    for pair in pairs:
        mentions = extract_mentions(pair, candidates, FINE.tokenize, COMPOUND.tokenize)
        for concept in mentions.concepts:
            own = scores[grounding_prompt(concept)]
            if all(own > scores[grounding_prompt(other)] for other in mentions.concepts if other != concept):
                expected.add((pair.id, concept))
    assert {(r.pair.pair_id, r.pair.concept) for r in records} == expected
    assert all(r.pair.concept != "girl" for r in records)


def test_run_grounding_soundness_replay(tmp_path, rng):
    texts = ["girl apple dog", "dog girl", "apple dog"]
    pairs = corpus_fixture(tmp_path, rng, texts)
    scores = {grounding_prompt("apple"): 0.9, grounding_prompt("girl"): 0.95, grounding_prompt("dog"): 0.5}
    backend = ScriptedBackend(scores=scores)
    candidates = {"apple", "girl", "dog"}
    records = list(run_grounding(pairs, candidates, {}, backend, FINE.tokenize, COMPOUND.tokenize))
    assert records, "fixture should retain something"
    for record in records:
        pair = next(p for p in pairs if p.id == record.pair.pair_id)
        mentions = extract_mentions(pair, candidates, FINE.tokenize, COMPOUND.tokenize)
        own = backend.score_pair(record.pair.weighted_image, grounding_prompt(record.pair.concept))
        assert own == record.pair.match_score
        for other in mentions.concepts:
            if other != record.pair.concept:
                assert own > backend.score_pair(record.pair.weighted_image, grounding_prompt(other))


def test_run_grounding_deterministic_across_jobs(tmp_path, rng):
    texts = ["girl apple", "dog apple", "girl dog", "apple", "dog girl apple"]
    pairs = corpus_fixture(tmp_path, rng, texts)
    scores = {grounding_prompt("apple"): 0.9, grounding_prompt("girl"): 0.3, grounding_prompt("dog"): 0.6}
    encyclopedia = {"apple": EncyclopediaEntry(concept_surface="apple", senses=("a fruit", "a company"))}

    def run(jobs):
        backend = ScriptedBackend(scores=dict(scores, **{"a fruit": 0.8, "a company": 0.1}))
        events = []
        records = list(
            run_grounding(
                pairs, {"apple", "girl", "dog"}, encyclopedia, backend,
                FINE.tokenize, COMPOUND.tokenize, GroundingConfig(jobs=jobs), events.append,
            )
        )
        summary = [(r.pair.pair_id, r.pair.concept, r.pair.match_score, r.sense.sense_index) for r in records]
        return summary, events

    one = run(1)
    four = run(4)
    assert one == four
    assert one[0], "events should be recorded"


def test_sense_recorded_in_records(tmp_path, rng):
    pairs = corpus_fixture(tmp_path, rng, ["apple"])
    backend = ScriptedBackend(scores={grounding_prompt("apple"): 0.9, "a fruit": 0.7})
    encyclopedia = {"apple": EncyclopediaEntry(concept_surface="apple", senses=("a fruit",))}
    [record] = list(
        run_grounding(pairs, {"apple"}, encyclopedia, backend, FINE.tokenize, COMPOUND.tokenize)
    )
    assert record.sense.sense_index == 1 and record.sense.score == 0.7


def test_provenance_events_shape(tmp_path, rng):
    pairs = corpus_fixture(tmp_path, rng, ["apple girl"])
    backend = ScriptedBackend(scores={grounding_prompt("apple"): 0.9, grounding_prompt("girl"): 0.1})
    events = []
    list(run_grounding(pairs, {"apple", "girl"}, {}, backend, FINE.tokenize, COMPOUND.tokenize, provenance=events.append))
    assert all(set(e) == {"pair_id", "concept", "stage", "outcome", "score"} for e in events)
    stages = {e["stage"] for e in events}
    assert "visual" in stages and "double_check" in stages
