"""Textual scene graph encoder.

Words along the sentence are encoded by a word-level bi-GRU; each semantic
relationship path is encoded by a separate path-level bi-GRU whose two final
states are averaged. Both bi-GRUs start from zero hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .graphs import TextualSceneGraph


@dataclass
class GruCell:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BiGru:
    fwd: GruCell
    bwd: GruCell


@dataclass
class TsgEncoderParams:
    W_e: Tensor  # d2 x V
    gru_w: BiGru
    gru_p: BiGru
    # context-free word projection, only used when textual context is disabled
    iso_weight: Tensor  # D x d2
    iso_bias: Tensor


@dataclass
class TextualFeatureGraph:
    word_feats: Tensor  # N_w x D
    path_feats: Tensor  # N_p x D, possibly 0 x D


def gru_cell(x: Tensor, h_prev: Tensor, cell: GruCell) -> Tensor:
    if x.shape != (cell.input_size,) or h_prev.shape != (cell.hidden_size,):
        raise DimensionError(
            f"gru_cell: got x {x.shape}, h {h_prev.shape}; cell expects "
            f"({cell.input_size},), ({cell.hidden_size},)")
    z = ad.sigmoid(cell.W_z @ x + cell.U_z @ h_prev + cell.b_z)
    r = ad.sigmoid(cell.W_r @ x + cell.U_r @ h_prev + cell.b_r)
    candidate = ad.tanh(cell.W_h @ x + cell.U_h @ (r * h_prev) + cell.b_h)
    return (1.0 - z) * h_prev + z * candidate


def run_gru(inputs: Tensor, cell: GruCell, reverse: bool = False) -> list[Tensor]:
    """Hidden state after each input row, listed in input order."""
    h = Tensor(np.zeros(cell.hidden_size))
    n = inputs.shape[0]
    order = range(n - 1, -1, -1) if reverse else range(n)
    states: list[Tensor | None] = [None] * n
    for t in order:
        h = gru_cell(inputs[t], h, cell)
        states[t] = h
    return states


def embed_words(tokens, W_e: Tensor) -> Tensor:
    ids = np.asarray(tokens, dtype=np.intp)
    vocab = W_e.shape[1]
    bad = [int(i) for i in ids if not 0 <= i < vocab]
    if bad:
        raise ValidationError([f"token id {i} outside [0, {vocab})" for i in bad])
    return ad.transpose(W_e[:, ids])


def encode_word_path(tokens, params: TsgEncoderParams, context: bool = True) -> Tensor:
    """Per-word features; without context each word is projected on its own."""
    if len(tokens) < 1:
        raise ValidationError(["sentence must contain at least one token"])
    emb = embed_words(tokens, params.W_e)
    if not context:
        return ad.tanh(ad.matmul(emb, ad.transpose(params.iso_weight)) + params.iso_bias)
    fwd = ad.stack(run_gru(emb, params.gru_w.fwd))
    bwd = ad.stack(run_gru(emb, params.gru_w.bwd, reverse=True))
    return ad.scale(fwd + bwd, 0.5)


def encode_path(inputs: Tensor, gru: BiGru) -> Tensor:
    """Average of the last forward and last backward states over one path."""
    f = run_gru(inputs, gru.fwd)[-1]
    b = run_gru(inputs, gru.bwd, reverse=True)[0]
    return ad.scale(f + b, 0.5)


def encode_relationship_paths(tokens, triplet_paths, params: TsgEncoderParams,
                              word_states: Tensor | None = None) -> Tensor:
    """One feature row per relationship path.

    Path GRUs read word embeddings unless ``word_states`` (the word-level
    bi-GRU outputs) is supplied, in which case they read those instead.
    """
    n_w = len(tokens)
    problems = []
    for p, path in enumerate(triplet_paths):
        if len(path) < 2:
            problems.append(f"path {p}: length {len(path)} < 2")
        problems += [f"path {p}: token index {i} outside [0, {n_w})" for i in path if not 0 <= i < n_w]
    if problems:
        raise ValidationError(problems)
    hidden = params.gru_p.fwd.hidden_size
    if not triplet_paths:
        return Tensor(np.zeros((0, hidden)))
    source = word_states if word_states is not None else embed_words(tokens, params.W_e)
    rows = [encode_path(ad.take_rows(source, path), params.gru_p) for path in triplet_paths]
    return ad.stack(rows)


def encode_tsg(graph: TextualSceneGraph, params: TsgEncoderParams, *, context: bool = True,
               with_relationships: bool = True, path_input: str = "embeddings") -> TextualFeatureGraph:
    words = encode_word_path(graph.tokens, params, context=context)
    if not with_relationships:
        return TextualFeatureGraph(words, Tensor(np.zeros((0, params.gru_p.fwd.hidden_size))))
    if path_input == "embeddings":
        paths = encode_relationship_paths(graph.tokens, graph.triplet_paths, params)
    elif path_input == "word_states":
        paths = encode_relationship_paths(graph.tokens, graph.triplet_paths, params, word_states=words)
    else:
        raise ValueError(f"unknown path_input {path_input!r}")
    return TextualFeatureGraph(words, paths)
