"""Corpus and encyclopedia ingestion.

Both inputs are newline-delimited JSON, one record per line:

* corpus:        ``{"id": str, "image": str, "text": str}``
* encyclopedia:  ``{"concept": str, "senses": [str, ...]}``

The ``image`` field is either a filesystem path (resolved lazily, relative
paths are taken relative to the corpus file) or an inline ``data:`` URI with
base64-encoded image bytes, which keeps test fixtures self-contained.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import MalformedRecord, MissingImage

logger = logging.getLogger(__name__)

MAX_SENSES = 3

# Senses that look like encyclopedia entity pages (titles wrapped in CJK book
# quotes) rather than concept descriptions are dropped at load time.
DEFAULT_SENSE_DROP_PATTERN = r"《[^》]*》"


@dataclass(frozen=True)
class RasterImage:
    """Decoded image: integer intensities in [0, 255], 1 or 3 channels."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray  # uint8, shape (height, width, channels)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise ValueError("pixel buffer does not match declared dimensions")
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "RasterImage":
        if pixels.ndim == 2:
            pixels = pixels[:, :, np.newaxis]
        h, w, c = pixels.shape
        return cls(width=w, height=h, channels=c, pixels=np.ascontiguousarray(pixels, dtype=np.uint8))


@dataclass(frozen=True)
class ImageTextPair:
    """One corpus record. The image is decoded on first access."""

    id: str
    image_ref: str
    text: str
    base_dir: Path | None = None

    def load_image(self) -> RasterImage:
        """Decode the referenced image, raising MissingImage on failure."""
        try:
            if self.image_ref.startswith("data:"):
                payload = self.image_ref.split(",", 1)[1]
                raw = base64.b64decode(payload)
                img = Image.open(io.BytesIO(raw))
            else:
                path = Path(self.image_ref)
                if not path.is_absolute() and self.base_dir is not None:
                    path = self.base_dir / path
                img = Image.open(path)
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.uint8)
        except (OSError, ValueError, IndexError) as exc:
            raise MissingImage(self.id, str(exc)) from exc
        return RasterImage.from_array(arr)


@dataclass(frozen=True)
class EncyclopediaEntry:
    """A concept surface with its 1-3 candidate sense descriptions."""

    concept_surface: str
    senses: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.senses) <= MAX_SENSES:
            raise ValueError("an entry carries between 1 and 3 senses")
        if any(not s for s in self.senses):
            raise ValueError("senses must be non-empty")


def load_corpus(path: str | Path) -> Iterator[ImageTextPair]:
    """Stream image-text pairs from a JSONL corpus file, in file order.

    Raises MalformedRecord(line_no) when a line is unparsable or violates a
    record invariant (missing key, empty id/text, duplicate id). Image decoding
    is deferred: a bad image reference only surfaces via MissingImage when the
    consumer calls ``load_image()``. Records are never materialized as a
    whole; only a set of seen ids is retained for the uniqueness check.
    """
    path = Path(path)
    base_dir = path.parent

    def gen() -> Iterator[ImageTextPair]:
        seen_ids: set[str] = set()
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedRecord(line_no, "invalid JSON") from exc
                if not isinstance(obj, dict):
                    raise MalformedRecord(line_no, "record is not an object")
                for key in ("id", "image", "text"):
                    if key not in obj:
                        raise MalformedRecord(line_no, f"missing key {key!r}")
                pair_id, image_ref, text = obj["id"], obj["image"], obj["text"]
                if not isinstance(pair_id, str) or not pair_id:
                    raise MalformedRecord(line_no, "id must be a non-empty string")
                if not isinstance(text, str) or not text:
                    raise MalformedRecord(line_no, "text must be a non-empty string")
                if not isinstance(image_ref, str) or not image_ref:
                    raise MalformedRecord(line_no, "image must be a non-empty string")
                if pair_id in seen_ids:
                    raise MalformedRecord(line_no, f"duplicate id {pair_id!r}")
                seen_ids.add(pair_id)
                yield ImageTextPair(id=pair_id, image_ref=image_ref, text=text, base_dir=base_dir)

    return gen()


def write_corpus(pairs, path: str | Path) -> None:
    """Serialize pairs back to the JSONL corpus format (round-trip inverse)."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"id": p.id, "image": p.image_ref, "text": p.text}, ensure_ascii=False) + "\n")


def load_encyclopedia(
    path: str | Path,
    sense_drop_pattern: str | None = DEFAULT_SENSE_DROP_PATTERN,
) -> dict[str, EncyclopediaEntry]:
    """Load the encyclopedia dump into a concept-surface -> entry map.

    Duplicate concept surfaces keep the first occurrence (a warning is
    logged). Entries with more than three senses are truncated to the first
    three, again with a warning. ``sense_drop_pattern`` removes entity-style
    senses (by default anything containing CJK book-title marks) before
    truncation; entries whose senses are all dropped are omitted.
    """
    drop_re = re.compile(sense_drop_pattern) if sense_drop_pattern else None
    entries: dict[str, EncyclopediaEntry] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, "invalid JSON") from exc
            if not isinstance(obj, dict) or "concept" not in obj or "senses" not in obj:
                raise MalformedRecord(line_no, "expected keys 'concept' and 'senses'")
            concept, senses = obj["concept"], obj["senses"]
            if not isinstance(concept, str) or not concept:
                raise MalformedRecord(line_no, "concept must be a non-empty string")
            if not isinstance(senses, list) or not all(isinstance(s, str) and s for s in senses):
                raise MalformedRecord(line_no, "senses must be a list of non-empty strings")
            if not senses:
                raise MalformedRecord(line_no, "entry needs at least one sense")
            if drop_re is not None:
                kept = [s for s in senses if not drop_re.search(s)]
                if len(kept) < len(senses):
                    logger.warning("dropped %d entity-style sense(s) for %r", len(senses) - len(kept), concept)
                senses = kept
            if not senses:
                logger.warning("all senses of %r dropped by the entity filter; entry omitted", concept)
                continue
            if len(senses) > MAX_SENSES:
                logger.warning("entry %r has %d senses; keeping the first %d", concept, len(senses), MAX_SENSES)
                senses = senses[:MAX_SENSES]
            if concept in entries:
                logger.warning("duplicate encyclopedia entry %r at line %d; first occurrence wins", concept, line_no)
                continue
            entries[concept] = EncyclopediaEntry(concept_surface=concept, senses=tuple(senses))
    return entries


def write_encyclopedia(entries: dict[str, EncyclopediaEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries.values():
            fh.write(
                json.dumps(
                    {"concept": entry.concept_surface, "senses": list(entry.senses)},
                    ensure_ascii=False,
                )
                + "\n"
            )
