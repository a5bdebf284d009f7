"""Knowledge-base persistence, statistics, and file formats.

A finalized KB directory contains:

* ``concepts.jsonl``       one concept node per line, sorted by surface
* ``weights/<pair>__<concept-hash>.cwm``  pixel weight maps
* ``images/manifest.jsonl`` unique (pair_id, image_ref) lines, sorted

The weight-map binary is magic ``CWM1``, little-endian u32 width and height,
then width*height float32 values row-major; trivially bit-exact to test.
"""

from __future__ import annotations

import json
import re
import struct
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import BadMagic, ConflictingSense, TruncatedFile
from .relevance import WeightMap

CWM_MAGIC = b"CWM1"
HISTOGRAM_MAX = 20

_SAFE_ID_RE = re.compile(r"[^A-Za-z0-9_-]")


class SenseSource(str, Enum):
    ENCYCLOPEDIA = "ENCYCLOPEDIA"
    GENERATED = "GENERATED"


@dataclass(frozen=True)
class SenseRecord:
    text: str
    source: SenseSource
    sense_index: int


@dataclass(frozen=True)
class ImageRecord:
    image_ref: str
    weight_map_ref: str
    match_score: float
    pair_id: str


@dataclass
class ConceptNode:
    surface: str
    senses: list[SenseRecord] = field(default_factory=list)
    images: list[ImageRecord] = field(default_factory=list)

    def validate(self) -> None:
        if not self.senses and not self.images:
            raise ValueError(f"concept node {self.surface!r} is empty")
        if any(not np.isfinite(img.match_score) for img in self.images):
            raise ValueError(f"non-finite match score in node {self.surface!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "surface": self.surface,
                "senses": [
                    {"text": s.text, "source": s.source.value, "sense_index": s.sense_index}
                    for s in sorted(self.senses, key=lambda s: s.sense_index)
                ],
                "images": [
                    {
                        "image_ref": i.image_ref,
                        "weight_map_ref": i.weight_map_ref,
                        "match_score": i.match_score,
                        "pair_id": i.pair_id,
                    }
                    for i in sorted(self.images, key=lambda i: i.pair_id)
                ],
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "ConceptNode":
        obj = json.loads(line)
        return cls(
            surface=obj["surface"],
            senses=[
                SenseRecord(text=s["text"], source=SenseSource(s["source"]), sense_index=s["sense_index"])
                for s in obj["senses"]
            ],
            images=[
                ImageRecord(
                    image_ref=i["image_ref"],
                    weight_map_ref=i["weight_map_ref"],
                    match_score=i["match_score"],
                    pair_id=i["pair_id"],
                )
                for i in obj["images"]
            ],
        )


def concept_hash(concept: str) -> str:
    import hashlib

    return hashlib.blake2b(concept.encode("utf-8"), digest_size=6).hexdigest()


def weight_map_name(pair_id: str, concept: str) -> str:
    safe = _SAFE_ID_RE.sub("-", pair_id)
    if safe != pair_id:
        import hashlib

        safe = f"{safe}-{hashlib.blake2b(pair_id.encode('utf-8'), digest_size=4).hexdigest()}"
    return f"{safe}__{concept_hash(concept)}.cwm"


def write_weight_map(map: WeightMap, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(CWM_MAGIC)
        fh.write(struct.pack("<II", map.width, map.height))
        fh.write(np.ascontiguousarray(map.w, dtype="<f4").tobytes())


def read_weight_map(path: str | Path) -> WeightMap:
    data = Path(path).read_bytes()
    if data[:4] != CWM_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFile(f"{path}: header incomplete")
    width, height = struct.unpack("<II", data[4:12])
    expected = 12 + width * height * 4
    if len(data) != expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, header promises {expected}")
    values = np.frombuffer(data[12:], dtype="<f4").reshape(height, width)
    return WeightMap(w=values)


@dataclass
class NodeFragment:
    """One upsert unit: an image for a concept plus an optional sense claim."""

    concept: str
    image: ImageRecord | None = None
    sense: SenseRecord | None = None


class KbBuilder:
    """Accumulate node fragments, then write a canonical KB directory.

    Upserts are idempotent per (concept, pair_id) and (concept, sense_index);
    two different texts claiming the same sense slot raise ConflictingSense.
    The final bytes are a pure function of the fragment multiset.
    """

    def __init__(self):
        self._images: dict[tuple[str, str], ImageRecord] = {}
        self._senses: dict[tuple[str, int], SenseRecord] = {}
        self._stats_cache: KbStats | None = None

    def add_fragment(self, fragment: NodeFragment) -> None:
        self._stats_cache = None
        if fragment.image is not None:
            key = (fragment.concept, fragment.image.pair_id)
            self._images.setdefault(key, fragment.image)
        if fragment.sense is not None:
            key2 = (fragment.concept, fragment.sense.sense_index)
            existing = self._senses.get(key2)
            if existing is None:
                self._senses[key2] = fragment.sense
            elif existing.text != fragment.sense.text:
                raise ConflictingSense(fragment.concept, fragment.sense.sense_index)

    def nodes(self) -> list[ConceptNode]:
        by_surface: dict[str, ConceptNode] = {}
        for (concept, _), image in self._images.items():
            by_surface.setdefault(concept, ConceptNode(surface=concept)).images.append(image)
        for (concept, _), sense in self._senses.items():
            by_surface.setdefault(concept, ConceptNode(surface=concept)).senses.append(sense)
        nodes = [by_surface[s] for s in sorted(by_surface)]
        for node in nodes:
            node.senses.sort(key=lambda s: s.sense_index)
            node.images.sort(key=lambda i: i.pair_id)
            node.validate()
        return nodes

    def finalize(self, out_dir: str | Path, weight_maps: dict[str, WeightMap] | None = None) -> "KbStats":
        """Write the canonical KB layout; returns the incremental stats.

        ``weight_maps`` maps weight_map_ref -> WeightMap for maps not yet on
        disk; refs without a supplied map are assumed to exist already.
        """
        out = Path(out_dir)
        (out / "weights").mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(parents=True, exist_ok=True)
        nodes = self.nodes()

        with open(out / "concepts.jsonl", "w", encoding="utf-8") as fh:
            for node in nodes:
                fh.write(node.to_json() + "\n")

        manifest = sorted({(img.pair_id, img.image_ref) for node in nodes for img in node.images})
        with open(out / "images" / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for pair_id, image_ref in manifest:
                fh.write(json.dumps({"image_ref": image_ref, "pair_id": pair_id}, ensure_ascii=False, sort_keys=True) + "\n")

        if weight_maps:
            for ref, wm in sorted(weight_maps.items()):
                target = out / ref
                target.parent.mkdir(parents=True, exist_ok=True)
                write_weight_map(wm, target)
        return compute_stats(nodes)


@dataclass(frozen=True)
class KbStats:
    concept_count: int
    image_count: int
    avg_images_per_concept: float  # half-up, 2 decimals
    polysemous_count: int
    histogram: dict  # k in 1..20 -> number of concepts with exactly k images
    overflow: int  # concepts with more than 20 images
    avg_description_scalars: float  # mean sense length in Unicode scalar values
    avg_description_chars: float  # mean sense length ignoring combining marks

    def to_dict(self) -> dict:
        return {
            "concept_count": self.concept_count,
            "image_count": self.image_count,
            "avg_images_per_concept": self.avg_images_per_concept,
            "polysemous_count": self.polysemous_count,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "overflow": self.overflow,
            "avg_description_scalars": self.avg_description_scalars,
            "avg_description_chars": self.avg_description_chars,
        }


def round_half_up(value: Decimal | float, places: int = 2) -> float:
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(value).quantize(quantum, rounding=ROUND_HALF_UP))


def average_images_per_concept(image_count: int, concept_count: int) -> float:
    """Exact ratio rounded half-up to two decimals."""
    if concept_count == 0:
        return 0.0
    return round_half_up(Decimal(image_count) / Decimal(concept_count))


def _char_count(text: str) -> int:
    return sum(1 for ch in text if unicodedata.combining(ch) == 0)


def compute_stats(nodes: Iterable[ConceptNode]) -> KbStats:
    concept_count = 0
    image_count = 0
    polysemous = 0
    histogram = {k: 0 for k in range(1, HISTOGRAM_MAX + 1)}
    overflow = 0
    scalar_lengths: list[int] = []
    char_lengths: list[int] = []
    for node in nodes:
        concept_count += 1
        n_images = len(node.images)
        image_count += n_images
        if len(node.senses) > 1:
            polysemous += 1
        if 1 <= n_images <= HISTOGRAM_MAX:
            histogram[n_images] += 1
        elif n_images > HISTOGRAM_MAX:
            overflow += 1
        for sense in node.senses:
            scalar_lengths.append(len(sense.text))
            char_lengths.append(_char_count(sense.text))
    return KbStats(
        concept_count=concept_count,
        image_count=image_count,
        avg_images_per_concept=average_images_per_concept(image_count, concept_count),
        polysemous_count=polysemous,
        histogram=histogram,
        overflow=overflow,
        avg_description_scalars=round_half_up(Decimal(sum(scalar_lengths)) / len(scalar_lengths)) if scalar_lengths else 0.0,
        avg_description_chars=round_half_up(Decimal(sum(char_lengths)) / len(char_lengths)) if char_lengths else 0.0,
    )


def load_kb(kb_dir: str | Path) -> list[ConceptNode]:
    path = Path(kb_dir) / "concepts.jsonl"
    nodes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                nodes.append(ConceptNode.from_json(line))
    return nodes


def stats_from_dir(kb_dir: str | Path) -> KbStats:
    return compute_stats(load_kb(kb_dir))


def iter_kb_weight_maps(kb_dir: str | Path) -> Iterator[tuple[str, WeightMap]]:
    weights_dir = Path(kb_dir) / "weights"
    for path in sorted(weights_dir.glob("*.cwm")):
        yield f"weights/{path.name}", read_weight_map(path)
