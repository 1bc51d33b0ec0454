"""Visual scene graph encoder: label embedding, multi-modal fusion and the
asymmetric graph convolution.

Object nodes are refined from their own state only. A relationship node is
refined from the chain ``[subject, relationship, object]`` concatenated in
that order, so swapping the endpoints of a relationship changes its output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .graphs import VisualSceneGraph


@dataclass
class GcnLayer:
    obj_weight: Tensor  # D_out x D_in
    obj_bias: Tensor
    rel_weight: Tensor  # D_out x 3*D_in
    rel_bias: Tensor


@dataclass
class VsgEncoderParams:
    W_o: Tensor  # d2 x C_o
    W_r: Tensor  # d2 x C_r
    W_u: Tensor  # d1 x (d1 + d2)
    gcn_layers: list[GcnLayer]

    @property
    def out_dim(self) -> int:
        return self.gcn_layers[-1].obj_weight.shape[0]


@dataclass
class VisualFeatureGraph:
    object_feats: Tensor  # N_o x D
    relationship_feats: Tensor  # N_r x D, possibly 0 x D


def _label_rows(W: Tensor, ids, kind: str) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    n = W.shape[1]
    bad = [int(i) for i in ids if not 0 <= i < n]
    if bad:
        raise ValidationError([f"{kind} label {i} outside [0, {n})" for i in bad])
    return ad.transpose(W[:, ids])


def embed_labels(graph: VisualSceneGraph, params: VsgEncoderParams) -> tuple[Tensor, Tensor]:
    """Label features for objects and relationships, one row per node.

    Multiplying the embedding matrix by a one-hot label selects a column, so
    the row for a node is simply that column.
    """
    e_obj = _label_rows(params.W_o, [o.label_id for o in graph.objects], "object")
    e_rel = _label_rows(params.W_r, [r.label_id for r in graph.relationships], "relationship")
    return e_obj, e_rel


def fuse(v, e, W_u: Tensor) -> Tensor:
    """``tanh(W_u [v, e])`` for a single node (1-d) or a stack of nodes (rows)."""
    v, e = ad.as_tensor(v), ad.as_tensor(e)
    d1, width = W_u.shape
    if v.shape[-1] != d1 or v.shape[-1] + e.shape[-1] != width:
        raise DimensionError(
            f"fuse: visual dim {v.shape[-1]} + label dim {e.shape[-1]} do not fit W_u {W_u.shape}")
    x = ad.concat([v, e], axis=-1)
    if x.ndim == 1:
        return ad.tanh(ad.matmul(W_u, x))
    return ad.tanh(ad.matmul(x, ad.transpose(W_u)))


def _dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.tanh(ad.matmul(x, ad.transpose(weight)) + bias)


def gcn_forward(obj_states: Tensor, rel_states: Tensor | None, subjects, objects,
                layers: list[GcnLayer]) -> tuple[Tensor, Tensor | None]:
    """Run the graph convolution; ``rel_states=None`` skips relationship nodes."""
    if not layers:
        raise ValueError("gcn_forward needs at least one layer")
    h_obj, h_rel = obj_states, rel_states
    subjects = np.asarray(subjects, dtype=np.intp)
    objects = np.asarray(objects, dtype=np.intp)
    for layer in layers:
        new_obj = _dense(h_obj, layer.obj_weight, layer.obj_bias)
        if h_rel is not None and h_rel.shape[0] > 0:
            chain = ad.concat([ad.take_rows(h_obj, subjects), h_rel, ad.take_rows(h_obj, objects)], axis=-1)
            h_rel = _dense(chain, layer.rel_weight, layer.rel_bias)
        h_obj = new_obj
    return h_obj, h_rel


def encode_vsg(graph: VisualSceneGraph, params: VsgEncoderParams,
               with_relationships: bool = True) -> VisualFeatureGraph:
    """Encode a visual scene graph into object and relationship features.

    With ``with_relationships=False`` the relationship nodes are never touched,
    so their parameters get no gradient, and the result has zero relationship rows.
    """
    e_obj, e_rel = embed_labels(graph, params)
    u_obj = fuse(Tensor(graph.object_features), e_obj, params.W_u)
    use_rel = with_relationships and len(graph.relationships) > 0
    u_rel = fuse(Tensor(graph.relationship_features), e_rel, params.W_u) if use_rel else None
    subs = [r.subject_idx for r in graph.relationships]
    objs = [r.object_idx for r in graph.relationships]
    h_obj, h_rel = gcn_forward(u_obj, u_rel, subs, objs, params.gcn_layers)
    if h_rel is None:
        h_rel = Tensor(np.zeros((0, params.out_dim)))
    return VisualFeatureGraph(h_obj, h_rel)
