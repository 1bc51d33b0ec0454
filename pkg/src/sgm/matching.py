"""Two-level graph similarity and the triplet ranking losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .tsg import TextualFeatureGraph
from .vsg import VisualFeatureGraph


@dataclass
class SimilarityBreakdown:
    s_object: Tensor
    s_relationship: Tensor
    s_total: Tensor
    object_score_matrix: np.ndarray  # N_w x N_o
    relationship_score_matrix: np.ndarray  # N_p x N_r
    object_alignment: np.ndarray  # best visual object per word
    relationship_alignment: np.ndarray  # best visual relationship per path

    def to_dict(self) -> dict:
        return {
            "s_total": self.s_total.item(),
            "s_object": self.s_object.item(),
            "s_relationship": self.s_relationship.item(),
            "object_alignment": [int(i) for i in self.object_alignment],
            "relationship_alignment": [int(i) for i in self.relationship_alignment],
        }


def _level_score(text: Tensor, visual: Tensor, normalize: bool):
    if normalize:
        text, visual = ad.normalize_rows(text), ad.normalize_rows(visual)
    m = ad.matmul(text, ad.transpose(visual))
    best, idx = ad.reduce_max_rows(m)
    return ad.mean_all(best), m.data.copy(), idx


def score_pair(vfg: VisualFeatureGraph, tfg: TextualFeatureGraph,
               normalize: bool = False) -> SimilarityBreakdown:
    """Score an image/caption pair as object-level plus relationship-level similarity.

    Each textual row is matched to its best visual row by dot product and the
    maxima are averaged. The relationship level is 0 when either side has no
    relationship rows.
    """
    d_v, d_t = vfg.object_feats.shape[1], tfg.word_feats.shape[1]
    if d_v != d_t:
        raise DimensionError(f"score_pair: visual dim {d_v} != textual dim {d_t}")
    if tfg.word_feats.shape[0] < 1 or vfg.object_feats.shape[0] < 1:
        raise ContractError("score_pair: need at least one word and one visual object")
    s_obj, obj_matrix, obj_idx = _level_score(tfg.word_feats, vfg.object_feats, normalize)

    n_p, n_r = tfg.path_feats.shape[0], vfg.relationship_feats.shape[0]
    if n_p and n_r:
        if vfg.relationship_feats.shape[1] != tfg.path_feats.shape[1]:
            raise DimensionError(
                f"score_pair: relationship dim {vfg.relationship_feats.shape[1]} "
                f"!= path dim {tfg.path_feats.shape[1]}")
        s_rel, rel_matrix, rel_idx = _level_score(tfg.path_feats, vfg.relationship_feats, normalize)
    else:
        s_rel = Tensor(0.0)
        rel_matrix = np.zeros((n_p, n_r))
        rel_idx = np.zeros(0, dtype=np.intp)
    return SimilarityBreakdown(s_obj, s_rel, s_obj + s_rel, obj_matrix, rel_matrix, obj_idx, rel_idx)


def _check_square(scores: Tensor) -> int:
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractError(f"triplet loss needs a square score matrix, got shape {scores.shape}")
    if scores.shape[0] < 2:
        raise ContractError("triplet loss needs at least two pairs for negatives")
    return scores.shape[0]


def triplet_loss_all(scores, margin: float) -> Tensor:
    """Hinge loss summed over every negative in both directions.

    ``scores[k, l]`` is image ``k`` against sentence ``l``; the diagonal holds
    the matching pairs.
    """
    scores = ad.as_tensor(scores)
    b = _check_square(scores)
    idx = np.arange(b)
    diag = ad.gather(scores, idx, idx)
    off = Tensor(1.0 - np.eye(b))
    # [k, l] -> m - S_ll + S_kl : other images against sentence l
    per_sentence = ad.relu(margin + scores - diag) * off
    # [l, k] -> m - S_kk + S_kl : other sentences against image k
    per_image = ad.relu(margin + ad.transpose(scores) - diag) * off
    return ad.sum_all(per_image) + ad.sum_all(per_sentence)


def hardest_negative_terms(scores, margin: float) -> Tensor:
    """Per-pair hinge terms against the hardest in-batch negative of each direction."""
    scores = ad.as_tensor(scores)
    b = _check_square(scores)
    idx = np.arange(b)
    masked = scores.data.copy()
    masked[idx, idx] = -np.inf
    hardest_sentence = np.argmax(masked, axis=1)  # l' for image k
    hardest_image = np.argmax(masked, axis=0)  # k' for sentence l
    diag = ad.gather(scores, idx, idx)
    return (ad.relu(margin - diag + ad.gather(scores, idx, hardest_sentence))
            + ad.relu(margin - diag + ad.gather(scores, hardest_image, idx)))


def triplet_loss_hardest(scores, margin: float, reduction: str = "mean") -> Tensor:
    terms = hardest_negative_terms(scores, margin)
    if reduction == "mean":
        return ad.mean_all(terms)
    if reduction == "sum":
        return ad.sum_all(terms)
    raise ValueError(f"unknown reduction {reduction!r}")
