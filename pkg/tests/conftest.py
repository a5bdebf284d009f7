"""Shared fixtures: deterministic images, a 12-pair mini corpus, LLM replays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conceptkb.completion import GENERATE_TEMPLATE, JUDGE_TEMPLATE, prompt_hash
from conceptkb.corpus import RasterImage


def make_raster(rng: np.random.Generator, width: int = 16, height: int = 16, channels: int = 3) -> RasterImage:
    pixels = rng.integers(0, 256, size=(height, width, channels)).astype(np.uint8)
    return RasterImage.from_array(pixels)


def save_png(raster: RasterImage, path: Path) -> None:
    mode = "L" if raster.channels == 1 else "RGB"
    arr = raster.pixels[:, :, 0] if raster.channels == 1 else raster.pixels
    Image.fromarray(arr, mode=mode).save(path)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# Captions pair each image with one to three lexicon words plus filler the
# tokenizers cannot match.
MINI_CAPTIONS = [
    ("p01", "the girl eats an apple today"),
    ("p02", "an apple on the table"),
    ("p03", "a dog chases the girl"),
    ("p04", "the pug sits on fabric"),
    ("p05", "sheep graze beside the dog"),
    ("p06", "a guitar leans on the wall"),
    ("p07", "the girl plays guitar"),
    ("p08", "an apple next to the pug"),
    ("p09", "sheep wool makes warm fabric"),
    ("p10", "the dog and the sheep rest"),
    ("p11", "a girl holds her guitar"),
    ("p12", "fabric covers the old table"),
]

LEXICON_FINE = {
    "girl": "n",
    "apple": "n",
    "dog": "n",
    "pug": "n",
    "sheep": "n",
    "fabric": "n",
    "guitar": "n",
    "wool": "n",
    "table": "n",
}

LEXICON_COMPOUND = dict(LEXICON_FINE, **{"sheep wool": "nz"})

ENCYCLOPEDIA_ENTRIES = [
    {"concept": "apple", "senses": ["a round edible fruit of the apple tree", "a technology company"]},
    {"concept": "girl", "senses": ["a young female person"]},
    {"concept": "dog", "senses": ["a domesticated canine companion"]},
    {"concept": "sheep", "senses": ["a woolly grazing farm animal"]},
    {"concept": "fabric", "senses": ["a woven cloth material", "the structure of something", "a social texture"]},
    {"concept": "guitar", "senses": ["a six-stringed musical instrument"]},
    {"concept": "table", "senses": ["furniture with a flat top", "《famous table story》", "an arrangement of data"]},
]
# "pug" and "wool" have no encyclopedia entry on purpose.


@pytest.fixture
def mini_corpus(tmp_path: Path) -> dict:
    """Self-contained 12-pair corpus with lexicons, encyclopedia, and LLM replays."""
    return build_mini_corpus(tmp_path)


def build_mini_corpus(root: Path) -> dict:
    rng = np.random.default_rng(7)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    corpus_path = root / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for pair_id, text in MINI_CAPTIONS:
            img_path = image_dir / f"{pair_id}.png"
            save_png(make_raster(rng), img_path)
            fh.write(json.dumps({"id": pair_id, "image": str(img_path), "text": text}) + "\n")

    fine_path = root / "lexicon_fine.tsv"
    fine_path.write_text("".join(f"{w}\t{p}\n" for w, p in LEXICON_FINE.items()), encoding="utf-8")
    compound_path = root / "lexicon_compound.tsv"
    compound_path.write_text("".join(f"{w}\t{p}\n" for w, p in LEXICON_COMPOUND.items()), encoding="utf-8")

    ency_path = root / "encyclopedia.jsonl"
    with open(ency_path, "w", encoding="utf-8") as fh:
        for entry in ENCYCLOPEDIA_ENTRIES:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")

    concepts = sorted(LEXICON_FINE) + ["sheep wool"]
    gen_path = root / "llm_generate.jsonl"
    with open(gen_path, "w", encoding="utf-8") as fh:
        for concept in concepts:
            prompt = GENERATE_TEMPLATE.format(concept=concept)
            fh.write(json.dumps({"prompt_hash": prompt_hash(prompt), "reply": f"A {concept} is a commonly seen thing."}) + "\n")

    judge_path = root / "llm_judge.jsonl"
    with open(judge_path, "w", encoding="utf-8") as fh:
        for i, concept in enumerate(concepts):
            description = f"A {concept} is a commonly seen thing."
            for _, text in MINI_CAPTIONS:
                prompt = JUDGE_TEMPLATE.format(text=text, concept=concept, description=description)
                reply = "1" if i % 3 != 2 else "0"
                fh.write(json.dumps({"prompt_hash": prompt_hash(prompt), "reply": reply}) + "\n")

    return {
        "root": root,
        "corpus": corpus_path,
        "lexicon_fine": fine_path,
        "lexicon_compound": compound_path,
        "encyclopedia": ency_path,
        "llm_generate": gen_path,
        "llm_judge": judge_path,
        "image_dir": image_dir,
    }
