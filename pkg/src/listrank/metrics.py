"""Evaluation metrics: NDCG over graded relevance, perplexity, metric CSV rows.

NDCG uses gain 2^grade - 1 and discount 1/log2(1 + rank); score ties are
broken by ascending doc_id before the metric is computed so evaluation is
deterministic. An all-zero-grade list scores 1.0, mirroring the convention the
training losses use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, EmptyInputError

if TYPE_CHECKING:
    from .dataset import Dataset, QueryGroup


def dcg(grades_in_rank_order: Sequence[int], k: int | None = None) -> float:
    """Discounted cumulative gain of a graded list in its ranked order."""
    if k is None:
        k = len(grades_in_rank_order)
    total = 0.0
    for rank, grade in enumerate(grades_in_rank_order[:k], start=1):
        total += (2.0**grade - 1.0) / math.log2(1.0 + rank)
    return total


def ndcg_at_k(grades_in_predicted_order: Sequence[int], k: int | None = None) -> float:
    """NDCG of a list whose grades are given in predicted-score order.

    ``k=None`` means full-list NDCG. All-zero grades score 1.0 by convention.
    """
    if k is not None and k <= 0:
        raise ConfigurationError(f"NDCG cutoff k must be positive, got {k}")
    ideal = sorted(grades_in_predicted_order, reverse=True)
    idcg = dcg(ideal, k)
    if idcg == 0.0:
        return 1.0
    return dcg(grades_in_predicted_order, k) / idcg


def order_by_scores(scores: Sequence[float], doc_ids: Sequence[str] | None = None) -> list[int]:
    """Indices sorted by descending score; ties break by ascending doc_id.

    Without doc_ids, ties break by ascending original index.
    """
    n = len(scores)
    if doc_ids is None:
        return sorted(range(n), key=lambda i: (-float(scores[i]), i))
    return sorted(range(n), key=lambda i: (-float(scores[i]), doc_ids[i]))


def mean_ndcg(
    dataset: "Dataset | Iterable[QueryGroup]",
    scorer: Callable[["QueryGroup"], Sequence[float]],
    k: int | None = None,
) -> float:
    """Unweighted mean of per-query NDCG under ``scorer``.

    ``scorer`` maps a query group to one score per document.
    """
    groups = dataset.groups if hasattr(dataset, "groups") else list(dataset)
    if not groups:
        raise EmptyInputError("cannot evaluate mean NDCG over an empty dataset")
    total = 0.0
    count = 0
    for group in groups:
        scores = np.asarray(scorer(group), dtype=np.float64)
        if scores.shape != (len(group.docs),):
            raise ConfigurationError(
                f"scorer returned {scores.shape} scores for a group of {len(group.docs)} docs"
            )
        order = order_by_scores(scores, [d.doc_id for d in group.docs])
        total += ndcg_at_k([group.grades[i] for i in order], k)
        count += 1
    return total / count


def perplexity(mean_mlm_loss: float) -> float:
    """exp(mean token-level cross-entropy)."""
    return float(math.exp(mean_mlm_loss))


def nearest_rank_percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not values:
        raise EmptyInputError("percentile of an empty sequence")
    if not 0.0 < p <= 100.0:
        raise ConfigurationError(f"percentile must lie in (0, 100], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class MetricRow:
    """One evaluation record; serialized as CSV by :func:`metrics_to_csv`."""

    epoch: int
    split: str
    loss_name: str
    loss_value: float | None
    mean_ndcg: float | None


METRIC_CSV_HEADER = "epoch,split,loss_name,loss_value,mean_ndcg"


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6g}"


def metrics_to_csv(rows: Iterable[MetricRow]) -> str:
    """Render metric rows as CSV (header included, 6 significant digits)."""
    lines = [METRIC_CSV_HEADER]
    for row in rows:
        lines.append(
            f"{row.epoch},{row.split},{row.loss_name},{_fmt(row.loss_value)},{_fmt(row.mean_ndcg)}"
        )
    return "\n".join(lines) + "\n"
