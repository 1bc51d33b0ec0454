"""Cross-modal retrieval metrics: R@k and median rank."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

CAPTION_RETRIEVAL = "caption-retrieval"  # image queries, caption gallery
IMAGE_RETRIEVAL = "image-retrieval"  # caption queries, image gallery
DIRECTIONS = (CAPTION_RETRIEVAL, IMAGE_RETRIEVAL)
KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict[int, float]
    medr: float
    score_matrix: np.ndarray = field(repr=False)
    ranks: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {"direction": self.direction, "r1": self.r_at[1], "r5": self.r_at[5],
                "r10": self.r_at[10], "medr": self.medr}

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def rank_of_ground_truth(scores, truth_idx: int) -> int:
    """1-based rank of ``truth_idx``; equal scores at lower indices rank ahead."""
    scores = np.asarray(scores)
    if not 0 <= truth_idx < scores.shape[0]:
        raise ContractError(f"truth index {truth_idx} outside [0, {scores.shape[0]})")
    t = scores[truth_idx]
    return int(1 + np.count_nonzero(scores > t) + np.count_nonzero(scores[:truth_idx] == t))


def evaluate_scores(score_matrix, direction: str = CAPTION_RETRIEVAL) -> RetrievalReport:
    """Metrics for a query x gallery score matrix whose ground truth is the diagonal.

    ``score_matrix`` is always image x caption; for image retrieval it is
    transposed so captions become the queries.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    s = np.asarray(score_matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ContractError(f"expected a non-empty square score matrix, got shape {s.shape}")
    queries = s if direction == CAPTION_RETRIEVAL else s.T
    ranks = np.array([rank_of_ground_truth(row, q) for q, row in enumerate(queries)])
    r_at = {k: 100.0 * float(np.mean(ranks <= k)) for k in KS}
    return RetrievalReport(direction, r_at, float(np.median(ranks)), queries.copy(), ranks)


def evaluate(corpus, model, direction: str = CAPTION_RETRIEVAL) -> RetrievalReport:
    return evaluate_scores(model.score_matrix(corpus), direction)


def evaluate_both(corpus, model) -> dict[str, RetrievalReport]:
    s = model.score_matrix(corpus)
    return {d: evaluate_scores(s, d) for d in DIRECTIONS}


def format_table(reports) -> str:
    lines = [f"{'direction':<18} {'R@1':>6} {'R@5':>6} {'R@10':>6} {'Medr':>6}"]
    for r in reports:
        lines.append(f"{r.direction:<18} {r.r_at[1]:6.1f} {r.r_at[5]:6.1f} {r.r_at[10]:6.1f} {r.medr:6.1f}")
    return "\n".join(lines)
