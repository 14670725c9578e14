"""
Detection scoring and evaluation metrics.

The TE classifier scores an utterance as sigmoid(TE . AE); with both
vectors unit-norm the logit is their cosine similarity. EER and AP are
reported in percent.
"""

import csv
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from sklearn.metrics import roc_curve
from torch import Tensor

from takws.core.errors import AggregationError, ShapeError, UndefinedMetricError
from takws.core.logging import get_logger
from takws.models.schemas import MetricsReport, ScoreSet

logger = get_logger(__name__)

PROB_EPS = 1e-7
REPORT_COLUMNS = ("keyword", "shots", "method", "sampling_id", "eer", "ap")

Number = Union[float, Tensor]


def _check_pair(ae: Tensor, te: Tensor) -> None:
    if ae.shape[-1] != te.shape[-1]:
        raise ShapeError(f"AE has d={ae.shape[-1]} but TE has d={te.shape[-1]}")


def cosine_score(ae: Tensor, te: Tensor) -> Tensor:
    """Inner product of unit-norm embeddings, i.e. their cosine similarity."""
    _check_pair(ae, te)
    return ae @ te


def keyword_probability(ae: Tensor, te: Tensor) -> Tensor:
    """p(k|x) = sigmoid(TE . AE)"""
    return torch.sigmoid(cosine_score(ae, te))


def score_embeddings(aes: Tensor, te: Tensor, mode: str = "probability") -> np.ndarray:
    """Score a (N, d) batch of acoustic embeddings against one TE."""
    if mode not in ("probability", "cosine"):
        raise ShapeError(f"unknown score mode {mode!r}")
    with torch.no_grad():
        scores = cosine_score(aes, te)
        if mode == "probability":
            scores = torch.sigmoid(scores)
    return scores.detach().cpu().double().numpy()


def bce_loss(p: Number, label: Number) -> Tensor:
    """
    Mean binary cross-entropy; p is clamped to [1e-7, 1 - 1e-7].

    Accepts scalars or tensors of matching shape.
    """
    p = torch.as_tensor(p, dtype=torch.float64) if not isinstance(p, Tensor) else p
    y = torch.as_tensor(label, dtype=p.dtype, device=p.device)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def _arrays(score_set: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in score_set.scores], dtype=np.float64)
    labels = np.array([s.label for s in score_set.scores], dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise UndefinedMetricError(f"non-finite scores for keyword {score_set.keyword!r}")
    return scores, labels


def compute_eer(score_set: ScoreSet) -> float:
    """
    Equal error rate in percent.

    Operating points come from one threshold per distinct score (tied
    scores form a single step). EER is read at the first point where
    FRR - FAR turns non-positive, interpolating linearly from the
    previous point.
    """
    scores, labels = _arrays(score_set)
    if labels.all() or not labels.any():
        raise UndefinedMetricError(
            f"EER needs positives and negatives (keyword {score_set.keyword!r}: "
            f"{int(labels.sum())} pos, {int((~labels).sum())} neg)"
        )
    far, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    frr = 1.0 - tpr
    diff = frr - far
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0 or i == 0:
        return float(100.0 * far[i])
    t = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(100.0 * (far[i - 1] + t * (far[i] - far[i - 1])))


def compute_ap(score_set: ScoreSet) -> float:
    """
    Average precision in percent: mean precision at the rank of each
    positive, ranking by descending score with ties kept in input order.
    """
    scores, labels = _arrays(score_set)
    if not labels.any():
        raise UndefinedMetricError(f"AP needs at least one positive (keyword {score_set.keyword!r})")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float(100.0 * np.mean(hits[ranked] / ranks[ranked]))


def evaluate_score_set(
    score_set: ScoreSet,
    method: str = "",
    shots: int = 0,
    sampling_id: int | None = None,
) -> MetricsReport:
    return MetricsReport(
        keyword=score_set.keyword,
        method=method,
        shots=shots,
        mode=score_set.mode,
        eer=compute_eer(score_set),
        ap=compute_ap(score_set),
        n_pos=score_set.n_pos,
        n_neg=score_set.n_neg,
        sampling_id=sampling_id,
    )


def aggregate(reports: Sequence[MetricsReport], across_keywords: bool = False) -> MetricsReport:
    """
    Average EER and AP over samplings.

    Reports must agree on keyword (unless across_keywords), score
    mode, method and shot count.
    """
    if not reports:
        raise AggregationError("nothing to aggregate")
    first = reports[0]
    fields = ("mode", "method", "shots") if across_keywords else ("keyword", "mode", "method", "shots")
    for field in fields:
        values = sorted({str(getattr(r, field)) for r in reports})
        if len(values) > 1:
            raise AggregationError(f"cannot aggregate reports with mixed {field}: {values}")
    n = len(reports)
    return MetricsReport(
        keyword="*" if across_keywords else first.keyword,
        method=first.method,
        shots=first.shots,
        mode=first.mode,
        eer=sum(r.eer for r in reports) / n,
        ap=sum(r.ap for r in reports) / n,
        n_pos=round(sum(r.n_pos for r in reports) / n),
        n_neg=round(sum(r.n_neg for r in reports) / n),
        sampling_id=None,
        n_samplings=sum(r.n_samplings for r in reports),
    )


def write_report_json(report: MetricsReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n")


def write_reports_csv(reports: Sequence[MetricsReport], path: Union[str, Path], append: bool = False) -> None:
    """Run-level CSV; aggregated rows carry sampling_id 'mean'."""
    path = Path(path)
    write_header = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(REPORT_COLUMNS)
        for r in reports:
            sampling = "mean" if r.sampling_id is None else r.sampling_id
            writer.writerow([r.keyword, r.shots, r.method, sampling, f"{r.eer:.6f}", f"{r.ap:.6f}"])
    logger.info("metrics_written", path=str(path), rows=len(reports))
