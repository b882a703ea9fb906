"""Pseudo-caption corpus construction.

Polygon annotations go in; prompts, provider captions, a frequency-filtered
vocabulary, and per-caption semantic tags (nouns + adjectives) come out.
Everything except the provider call is a pure function.
"""

from __future__ import annotations

import json
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

from .errors import ProviderError, ValidationError
from .lexicon import ADJ, LEXICON, NOUN
from .metrics import normalize


# ---------------------------------------------------------------------------
# records


@dataclass
class PolygonRecord:
    image_id: str
    category: str
    coords: list[float]  # flattened x,y pairs, normalized to [0,1]

    def __post_init__(self):
        if not self.category:
            raise ValidationError("polygon category must be non-empty")
        if len(self.coords) < 6 or len(self.coords) % 2 != 0:
            raise ValidationError(
                f"polygon for {self.image_id!r} needs an even coord count >= 6, "
                f"got {len(self.coords)}"
            )
        if any(not (0.0 <= c <= 1.0) for c in self.coords):
            raise ValidationError(f"polygon for {self.image_id!r} has coords outside [0,1]")


@dataclass
class CaptionRecord:
    image_id: str
    caption: str
    source: str = "provider"  # provider | human
    tags: Optional[list[str]] = None

    def __post_init__(self):
        self.caption = " ".join(self.caption.split())
        if not self.caption:
            raise ValidationError(f"empty caption for {self.image_id!r}")
        if self.source not in ("provider", "human"):
            raise ValidationError(f"bad caption source {self.source!r}")

    def to_json(self) -> dict:
        d = {"image_id": self.image_id, "caption": self.caption, "source": self.source}
        if self.tags is not None:
            d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CaptionRecord":
        return cls(d["image_id"], d["caption"], d.get("source", "provider"), d.get("tags"))


# ---------------------------------------------------------------------------
# prompt construction


@dataclass
class PromptTemplate:
    """Instruction layout: role line, three numbered points, verification tail."""

    role: str = "You are a professional geography scene description expert."
    task: str = (
        "Given a remote sensing image and its corresponding polygon-based "
        "annotations (including approximate coordinates and categories), provide "
        "a single-sentence description focusing on these key points:"
    )
    points: tuple[str, ...] = (
        "Use relative positional terms (e.g., <left side>, <right side>, <top>, "
        "<bottom>, <center>) to describe the locations of main features.",
        "If a category occupies a significantly large portion of the image, "
        "emphasize it with phrases such as <most of> or <large portion of>.",
        "Remain objective and concise, avoiding unnecessary adjectives; emphasize "
        "relative positioning and approximate area coverage.",
    )
    footer: str = (
        "Verify your description by cross-checking the provided annotation data. "
        "Your response must strictly adhere to these specifications."
    )

    def __post_init__(self):
        if len(self.points) != 3:
            raise ValidationError("template must carry exactly three instruction points")


def _listing_line(p: PolygonRecord) -> str:
    coords = ", ".join(f"{c:.2f}" for c in p.coords)
    return f"{p.category} [{coords}]"


def build_prompt(polygons: list[PolygonRecord], template: PromptTemplate | None = None) -> str:
    """Render the instruction text plus a canonical category+coordinates listing.

    Polygons are sorted by (category, first coordinate) so the output is a pure
    function of the set, not the input order.
    """
    if not polygons:
        raise ValidationError("no annotations")
    ids = {p.image_id for p in polygons}
    if len(ids) > 1:
        raise ValidationError(f"mixed image_ids in one prompt: {sorted(ids)}")
    template = template or PromptTemplate()
    ordered = sorted(polygons, key=lambda p: (p.category, p.coords[0]))
    lines = [template.role, template.task]
    lines += [f"{i}) {pt}" for i, pt in enumerate(template.points, 1)]
    lines.append(template.footer)
    lines.append("Semantic segmentation labels:")
    lines += [_listing_line(p) for p in ordered]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# caption providers


class CaptionProvider(Protocol):
    def caption(self, prompt: str) -> str: ...


_LISTING_RE = re.compile(r"^(?P<cat>[^\[\]\n]+?) \[(?P<coords>[\d., ]+)\]$", re.MULTILINE)


def _position_word(x: float, y: float) -> str:
    vert = "top" if y < 0.5 else "bottom"
    horiz = "left" if x < 0.5 else "right"
    return f"{vert} {horiz}"


class StubProvider:
    """Deterministic offline provider: names each category with a coarse
    position derived from its first coordinate pair."""

    provider_id = "stub"

    def caption(self, prompt: str) -> str:
        parts = []
        for m in _LISTING_RE.finditer(prompt):
            coords = [float(c) for c in m.group("coords").split(",")]
            parts.append(f"a {m.group('cat').strip()} in the {_position_word(coords[0], coords[1])}")
        if not parts:
            return "an aerial scene with no annotated features."
        return "The image shows " + ", ".join(parts) + "."


class HttpProvider:
    """POST {"prompt": ...} -> {"caption": ...} with bounded retry/backoff.

    `transport` and `sleep` are injectable for tests; the default transport is
    requests. Safe for concurrent use (no mutable shared state besides the
    per-call retry counter returned in errors).
    """

    provider_id = "http"

    def __init__(
        self,
        url: str,
        transport: Callable[[str, dict], tuple[int, dict]] | None = None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._transport = transport or self._requests_transport
        self.last_retries = 0

    def _requests_transport(self, url: str, payload: dict) -> tuple[int, dict]:
        import requests

        resp = requests.post(url, json=payload, timeout=30)
        try:
            body = resp.json()
        except ValueError:
            body = {}
        return resp.status_code, body

    def caption(self, prompt: str) -> str:
        last_status = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                status, body = self._transport(self.url, {"prompt": prompt})
            except OSError as e:
                last_status = None
                continue
            last_status = status
            if status == 200:
                self.last_retries = attempt
                return body.get("caption", "")
        raise ProviderError(
            f"provider exhausted {self.max_attempts} attempts",
            status=last_status,
            retries=self.max_attempts - 1,
        )


def generate_pseudo_caption(prompt: str, provider: CaptionProvider, image_id: str = "") -> CaptionRecord:
    """Ask the provider for a caption; whitespace-only responses are rejected."""
    text = provider.caption(prompt)
    if not text or not text.strip():
        raise ProviderError("empty caption", status=None)
    return CaptionRecord(image_id=image_id, caption=text, source="provider")


# ---------------------------------------------------------------------------
# vocabulary filtering (frequency threshold) and corpus statistics

_SENT_RE = re.compile(r"[.!?]+")


@dataclass
class CorpusStats:
    images: int
    captions: int
    mean_words: float
    mean_sentences: float
    unique_words: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


@dataclass
class FrequencyTable:
    """Frequency-filtered token table; the precursor to a TagVocabulary."""

    counts: dict[str, int]
    min_count: int
    stats: CorpusStats

    def __contains__(self, token: str) -> bool:
        return token in self.counts


def filter_vocabulary(captions: list[CaptionRecord], min_count: int) -> FrequencyTable:
    """Count lowercased, punctuation-stripped tokens and keep those with
    corpus frequency >= min_count. Also reports corpus-level statistics."""
    if min_count < 1:
        raise ValidationError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    words_per = []
    sents_per = []
    ids = set()
    for rec in captions:
        tokens = normalize(rec.caption)
        counts.update(tokens)
        words_per.append(len(tokens))
        sents_per.append(max(1, len([s for s in _SENT_RE.split(rec.caption) if s.strip()])))
        ids.add(rec.image_id)
    stats = CorpusStats(
        images=len(ids),
        captions=len(captions),
        mean_words=sum(words_per) / len(words_per) if words_per else 0.0,
        mean_sentences=sum(sents_per) / len(sents_per) if sents_per else 0.0,
        unique_words=len(counts),
    )
    kept = {t: c for t, c in counts.items() if c >= min_count}
    return FrequencyTable(counts=kept, min_count=min_count, stats=stats)


# ---------------------------------------------------------------------------
# tag vocabulary and extraction


@dataclass
class TagVocabulary:
    tags: list[str]
    min_count: int
    counts: dict[str, int]

    def __post_init__(self):
        if len(set(self.tags)) != len(self.tags):
            raise ValidationError("duplicate tags in vocabulary")
        if any(self.counts.get(t, 0) < self.min_count for t in self.tags):
            raise ValidationError("vocabulary contains tags below min_count")

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    @classmethod
    def from_counts(cls, counts: dict[str, int], min_count: int) -> "TagVocabulary":
        kept = {t: c for t, c in counts.items() if c >= min_count}
        ordered = sorted(kept, key=lambda t: (-kept[t], t))
        return cls(tags=ordered, min_count=min_count, counts=kept)

    def to_json(self) -> dict:
        return {"tags": self.tags, "min_count": self.min_count, "counts": self.counts}

    @classmethod
    def from_json(cls, d: dict) -> "TagVocabulary":
        return cls(d["tags"], d["min_count"], d["counts"])


def singularize(word: str) -> str:
    if len(word) < 4:
        return word
    if word.endswith("sses"):
        return word[:-2]
    if word.endswith("ies"):
        return word[:-3] + "y"
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


class Tagger(Protocol):
    def tag(self, word: str) -> Optional[str]:
        """Return 'N', 'ADJ', or None for an already-normalized word."""


@dataclass
class LexiconTagger:
    """Default tagger: shipped lexicon plus a few suffix heuristics."""

    lexicon: dict[str, str] = field(default_factory=lambda: dict(LEXICON))

    _ADJ_SUFFIXES = ("al", "ous", "ful", "ive", "ish")
    _NOUN_SUFFIXES = ("tion", "ment", "ness", "ship", "yard")

    def tag(self, word: str) -> Optional[str]:
        pos = self.lexicon.get(word)
        if pos is not None:
            return pos
        if word.endswith(self._NOUN_SUFFIXES):
            return NOUN
        if word.endswith(self._ADJ_SUFFIXES):
            return ADJ
        return None


def extract_tags(caption: str, tagger: Tagger, vocab_filter: FrequencyTable) -> set[str]:
    """Nouns and adjectives of one caption, normalized and intersected with the
    frequency-filtered token set. Unknown words are silently dropped."""
    allowed = {singularize(t) for t in vocab_filter.counts}
    out: set[str] = set()
    for token in normalize(caption):
        if token.endswith("ing"):
            continue
        word = singularize(token)
        if word not in allowed:
            continue
        if tagger.tag(word) in (NOUN, ADJ):
            out.add(word)
    return out


def corpus_tag_set(
    captions: Iterable[CaptionRecord], tagger: Tagger, vocab_filter: FrequencyTable
) -> set[str]:
    """Union of per-caption extractions; order-independent by construction."""
    tags: set[str] = set()
    for rec in captions:
        tags |= extract_tags(rec.caption, tagger, vocab_filter)
    return tags


# ---------------------------------------------------------------------------
# JSONL io


def read_polygons(path: str | Path) -> list[PolygonRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(PolygonRecord(d["image_id"], d["category"], [float(c) for c in d["coords"]]))
    return out


def read_captions(path: str | Path) -> list[CaptionRecord]:
    return [
        CaptionRecord.from_json(json.loads(line))
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]


def write_captions(path: str | Path, captions: Iterable[CaptionRecord]) -> None:
    with open(path, "w") as fh:
        for rec in captions:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
