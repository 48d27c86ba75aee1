"""Click-log modelling, CTR-to-grade conversion, and synthetic ranking data.

Grades are integers 0..4. CTR grading is done in exact rational arithmetic
(clicks/impressions are counts), so ceil() never suffers float rounding and
scaling a query's counts by a common factor provably cannot change a grade.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .errors import EmptyInputError, MissingIdError, ParseError, ValidationError
from .metrics import nearest_rank_percentile

GRADE_MAX = 4
DEFAULT_MIN_IMPRESSIONS = 50
DEFAULT_RESULT_CAP = 30


@dataclass(frozen=True)
class ClickRecord:
    """Aggregated engagement for one (query, document) pair."""

    query_id: str
    doc_id: str
    clicks: int
    impressions: int

    def __post_init__(self):
        if self.clicks < 0 or self.impressions < 0:
            raise ValidationError(
                f"clicks/impressions must be non-negative ({self.query_id}, {self.doc_id})"
            )
        if self.clicks > self.impressions:
            raise ValidationError(
                f"clicks ({self.clicks}) exceed impressions ({self.impressions}) "
                f"for ({self.query_id}, {self.doc_id})"
            )


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not self.doc_id:
            raise ValidationError("doc_id must be non-empty")


@dataclass
class QueryGroup:
    """One query with its candidate documents and aligned grades."""

    query_id: str
    query_text: str
    docs: list[Document]
    grades: list[int]

    def __post_init__(self):
        if len(self.docs) != len(self.grades):
            raise ValidationError(
                f"group {self.query_id}: {len(self.docs)} docs vs {len(self.grades)} grades"
            )
        if not self.docs:
            raise EmptyInputError(f"group {self.query_id} has no documents")
        for g in self.grades:
            _check_grade(g, self.query_id)


@dataclass
class Dataset:
    groups: list[QueryGroup] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for group in self.groups:
            if group.query_id in seen:
                raise ValidationError(f"duplicate query_id {group.query_id!r} in dataset")
            seen.add(group.query_id)

    def __len__(self) -> int:
        return len(self.groups)


def _check_grade(grade: int, context: str) -> None:
    if not isinstance(grade, int) or isinstance(grade, bool) or not 0 <= grade <= GRADE_MAX:
        raise ValidationError(f"grade {grade!r} outside [0, {GRADE_MAX}] in {context}")


# -- CTR grading ------------------------------------------------------------


def _ctr(record: ClickRecord) -> Fraction:
    if record.impressions == 0:
        return Fraction(0)
    return Fraction(record.clicks, record.impressions)


def grade_from_ctr(records: list[ClickRecord], min_impressions: int) -> list[int]:
    """Grades via ceil(4 * ctr / max ctr) over one query's records.

    Records with fewer than ``min_impressions`` impressions are dropped before
    grading; the returned list aligns with the surviving records in input
    order. If every surviving CTR is zero, every grade is zero.
    """
    if records and len({r.query_id for r in records}) > 1:
        raise ValidationError("grade_from_ctr expects records of a single query")
    surviving = [r for r in records if r.impressions >= min_impressions]
    if not surviving:
        raise EmptyInputError("no records left after the impression filter")
    ctrs = [_ctr(r) for r in surviving]
    max_ctr = max(ctrs)
    if max_ctr == 0:
        return [0] * len(surviving)
    return [math.ceil(GRADE_MAX * ctr / max_ctr) for ctr in ctrs]


def ingest_click_log(
    records: list[ClickRecord],
    docs: dict[str, Document],
    min_impressions: int = DEFAULT_MIN_IMPRESSIONS,
    result_cap: int = DEFAULT_RESULT_CAP,
    query_texts: dict[str, str] | None = None,
) -> Dataset:
    """Build a graded dataset from a click log.

    Per query: drop low-impression records, keep the ``result_cap`` documents
    with the most impressions (proxy for the engine's original ordering), then
    grade the kept records. Queries with no surviving records are omitted.
    ``query_texts`` optionally maps query_id to query text; the id itself is
    used when absent.
    """
    missing = sorted({r.doc_id for r in records if r.doc_id not in docs})
    if missing:
        raise MissingIdError(f"unresolvable doc_ids: {', '.join(missing)}", missing)

    by_query: dict[str, list[ClickRecord]] = {}
    for record in records:
        by_query.setdefault(record.query_id, []).append(record)

    groups = []
    for query_id, query_records in by_query.items():
        surviving = [r for r in query_records if r.impressions >= min_impressions]
        if not surviving:
            continue
        order = sorted(range(len(surviving)), key=lambda i: (-surviving[i].impressions, i))
        kept = [surviving[i] for i in order[:result_cap]]
        grades = grade_from_ctr(kept, min_impressions)
        text = query_texts.get(query_id, query_id) if query_texts else query_id
        groups.append(
            QueryGroup(
                query_id=query_id,
                query_text=text,
                docs=[docs[r.doc_id] for r in kept],
                grades=grades,
            )
        )
    return Dataset(groups=groups)


# -- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic faceted-product generator."""

    n_queries: int
    list_size: int = 30
    attribute_vocab_size: int = 120
    query_token_count: int = 4
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValidationError(f"n_queries must be >= 1, got {self.n_queries}")
        if self.list_size < 1:
            raise ValidationError(f"list_size must be >= 1, got {self.list_size}")
        if self.query_token_count < 1:
            raise ValidationError("query_token_count must be >= 1")
        if self.attribute_vocab_size < 2 * self.query_token_count:
            raise ValidationError(
                "attribute_vocab_size must be at least twice query_token_count "
                "so every facet has a non-matching alternative"
            )
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def attribute_vocabulary(size: int, n_groups: int) -> list[list[str]]:
    """Pronounceable attribute words partitioned into facet groups.

    Depends only on (size, n_groups) so separately generated train/test files
    share one vocabulary.
    """
    rng = np.random.default_rng([7340, size, n_groups])
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n_syll = int(rng.integers(2, 5))
        word = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n_syll))
        if word not in seen:
            seen.add(word)
            words.append(word)
    groups: list[list[str]] = [[] for _ in range(n_groups)]
    for i, word in enumerate(words):
        groups[i % n_groups].append(word)
    return groups


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Faceted products with known ground truth.

    A query names one desired attribute word per facet; each document carries
    one word per facet in facet order. The true grade is
    round(4 * matched_facets / facet_count), optionally perturbed by Gaussian
    noise before rounding, clipped to [0, 4]. Pure function of the spec.
    """
    n_facets = spec.query_token_count
    facets = attribute_vocabulary(spec.attribute_vocab_size, n_facets)
    groups = []
    for qi in range(spec.n_queries):
        rng = np.random.default_rng([spec.seed, 1550, qi])
        query_choice = [int(rng.integers(0, len(facets[f]))) for f in range(n_facets)]
        query_tokens = [facets[f][query_choice[f]] for f in range(n_facets)]
        docs = []
        grades = []
        for dj in range(spec.list_size):
            overlap = int(rng.integers(0, n_facets + 1))
            matched = set(int(f) for f in rng.choice(n_facets, size=overlap, replace=False))
            tokens = []
            for f in range(n_facets):
                if f in matched:
                    tokens.append(query_tokens[f])
                else:
                    alt = int(rng.integers(0, len(facets[f]) - 1))
                    if alt >= query_choice[f]:
                        alt += 1
                    tokens.append(facets[f][alt])
            raw = GRADE_MAX * overlap / n_facets
            if spec.noise_std > 0:
                raw += rng.normal(0.0, spec.noise_std)
            grade = int(min(GRADE_MAX, max(0, math.floor(raw + 0.5))))
            docs.append(Document(doc_id=f"q{qi:05d}_d{dj:02d}", text=" ".join(tokens)))
            grades.append(grade)
        groups.append(
            QueryGroup(
                query_id=f"q{qi:05d}",
                query_text=" ".join(query_tokens),
                docs=docs,
                grades=grades,
            )
        )
    return Dataset(groups=groups)


def corpus_lines(dataset: Dataset) -> list[str]:
    """Pre-training corpus: every query text and document text, in dataset order."""
    lines = []
    for group in dataset.groups:
        lines.append(group.query_text)
        lines.extend(doc.text for doc in group.docs)
    return lines


# -- file I/O ---------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """One query group per line; grades always stored as integers."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for group in dataset.groups:
            record = {
                "query_id": group.query_id,
                "query": group.query_text,
                "docs": [
                    {"doc_id": doc.doc_id, "text": doc.text, "grade": grade}
                    for doc, grade in zip(group.docs, group.grades)
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def _parse_group(obj: dict, line_no: int) -> QueryGroup:
    for key in ("query_id", "query", "docs"):
        if key not in obj:
            raise ParseError(f"missing field {key!r}", line_no)
    if not isinstance(obj["docs"], list) or not obj["docs"]:
        raise ParseError("'docs' must be a non-empty array", line_no)
    docs = []
    graded: list[int | None] = []
    ctr_records: list[ClickRecord | None] = []
    for entry in obj["docs"]:
        if not isinstance(entry, dict) or "doc_id" not in entry or "text" not in entry:
            raise ParseError("each doc needs 'doc_id' and 'text'", line_no)
        docs.append(Document(doc_id=str(entry["doc_id"]), text=str(entry["text"])))
        if "grade" in entry:
            grade = entry["grade"]
            _check_grade(grade, f"line {line_no}")
            graded.append(grade)
            ctr_records.append(None)
        elif "clicks" in entry and "impressions" in entry:
            graded.append(None)
            ctr_records.append(
                ClickRecord(
                    query_id=str(obj["query_id"]),
                    doc_id=str(entry["doc_id"]),
                    clicks=int(entry["clicks"]),
                    impressions=int(entry["impressions"]),
                )
            )
        else:
            raise ParseError("doc needs either 'grade' or both 'clicks'/'impressions'", line_no)
    if all(g is not None for g in graded):
        grades = [g for g in graded if g is not None]
    elif all(r is not None for r in ctr_records):
        grades = grade_from_ctr([r for r in ctr_records if r is not None], min_impressions=0)
    else:
        raise ParseError("cannot mix 'grade' docs with 'clicks'/'impressions' docs in one group", line_no)
    return QueryGroup(
        query_id=str(obj["query_id"]),
        query_text=str(obj["query"]),
        docs=docs,
        grades=grades,
    )


def load_dataset(path) -> Dataset:
    groups = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(obj, dict):
                raise ParseError("each line must be a JSON object", line_no)
            groups.append(_parse_group(obj, line_no))
    return Dataset(groups=groups)


# -- summary stats ----------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    group_count: int
    list_len_median: float | None
    list_len_p90: float | None
    query_len_median: float | None
    query_len_p90: float | None

    @property
    def is_empty(self) -> bool:
        return self.group_count == 0


def dataset_stats(dataset: Dataset) -> DatasetStats:
    """Count plus nearest-rank median/p90 of list lengths and query token counts."""
    if not dataset.groups:
        return DatasetStats(0, None, None, None, None)
    list_lens = [len(g.docs) for g in dataset.groups]
    query_lens = [len(g.query_text.split()) for g in dataset.groups]
    return DatasetStats(
        group_count=len(dataset.groups),
        list_len_median=nearest_rank_percentile(list_lens, 50),
        list_len_p90=nearest_rank_percentile(list_lens, 90),
        query_len_median=nearest_rank_percentile(query_lens, 50),
        query_len_p90=nearest_rank_percentile(query_lens, 90),
    )


def split_dataset(dataset: Dataset, first_count: int) -> tuple[Dataset, Dataset]:
    """Split into the first ``first_count`` groups and the rest."""
    if not 0 <= first_count <= len(dataset.groups):
        raise ValidationError(
            f"cannot take {first_count} groups from a dataset of {len(dataset.groups)}"
        )
    return Dataset(groups=list(dataset.groups[:first_count])), Dataset(
        groups=list(dataset.groups[first_count:])
    )
