"""Deterministic synthetic corpora for desk-scale training and tests.

Pairs are organised in groups. Every pair in a group shows the same
objects (identical labels and identical region features) and differs from
its group mates only in the relationship label, the relationship feature
and the relation word of the caption. ``group_size=1`` gives a corpus where
objects alone identify each pair; ``group_size=2`` reproduces the
"same objects, different relationship" situation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import (Corpus, ObjectNode, RelationshipNode, TextualSceneGraph,
                     VisualSceneGraph)


@dataclass(frozen=True)
class SynthSpec:
    d1: int = 8
    objects_per_graph: int = 2
    relationships_per_graph: int = 1
    group_size: int = 1
    c_r: int | None = None
    noise: float = 0.05
    filler_words: int = 0

    def relation_classes(self) -> int:
        return self.c_r if self.c_r is not None else max(self.group_size, 2)


class SyntheticWorld:
    """Class centroids shared by every graph drawn from one seed."""

    def __init__(self, rng: np.random.Generator, spec: SynthSpec, c_o: int, c_r: int):
        self.spec = spec
        self.object_centers = rng.standard_normal((c_o, spec.d1))
        self.relation_centers = rng.standard_normal((c_r, spec.d1))

    def object_feature(self, rng: np.random.Generator, label: int) -> np.ndarray:
        f = self.object_centers[label] + self.spec.noise * rng.standard_normal(self.spec.d1)
        return _f32(f)

    def relation_feature(self, rng: np.random.Generator, label: int,
                         sub: np.ndarray, obj: np.ndarray) -> np.ndarray:
        # union region: carries both endpoints plus the predicate appearance
        f = (self.relation_centers[label] + 0.5 * (sub + obj)
             + self.spec.noise * rng.standard_normal(self.spec.d1))
        return _f32(f)


def _f32(x: np.ndarray) -> np.ndarray:
    # features are stored as float32 on disk; keep memory and disk identical
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _vocab(c_o: int, c_r: int, n_filler: int) -> list[str]:
    return (["<unk>"] + [f"obj{i}" for i in range(c_o)] + [f"rel{i}" for i in range(c_r)]
            + [f"w{i}" for i in range(n_filler)])


def generate_synthetic(seed: int, n_pairs: int, spec: SynthSpec | None = None) -> Corpus:
    spec = spec or SynthSpec()
    if n_pairs < 2:
        raise ValueError(f"n_pairs must be >= 2, got {n_pairs}")
    k = spec.objects_per_graph
    if k < 1 or spec.group_size < 1 or spec.d1 < 1:
        raise ValueError("objects_per_graph, group_size and d1 must be >= 1")
    if spec.relationships_per_graph > 0 and k < 2:
        raise ValueError("relationships need at least two objects per graph")
    c_r = spec.relation_classes()
    if spec.group_size > c_r and spec.relationships_per_graph > 0:
        raise ValueError(f"group_size {spec.group_size} needs at least as many relation classes, got {c_r}")

    n_groups = math.ceil(n_pairs / spec.group_size)
    c_o = n_groups * k
    rng = np.random.default_rng(seed)
    world = SyntheticWorld(rng, spec, c_o, c_r)
    obj_word = lambda label: 1 + label
    rel_word = lambda label: 1 + c_o + label

    pairs = []
    group_objects: list[ObjectNode] = []
    for i in range(n_pairs):
        group, member = divmod(i, spec.group_size)
        if member == 0:
            group_objects = [ObjectNode(world.object_feature(rng, group * k + j), group * k + j)
                             for j in range(k)]
        objects = [ObjectNode(o.feature.copy(), o.label_id) for o in group_objects]

        rels = []
        for j in range(spec.relationships_per_graph):
            if spec.group_size > 1:
                label = (member + j) % c_r
            else:
                label = int(rng.integers(c_r))
            s, o = j % k, (j + 1) % k
            feat = world.relation_feature(rng, label, objects[s].feature, objects[o].feature)
            rels.append(RelationshipNode(feat, label, s, o))

        tokens: list[int] = []
        paths: list[list[int]] = []
        mentioned = set()
        for r in rels:
            if spec.filler_words:
                tokens.append(1 + c_o + c_r + int(rng.integers(spec.filler_words)))
            start = len(tokens)
            tokens += [obj_word(objects[r.subject_idx].label_id), rel_word(r.label_id),
                       obj_word(objects[r.object_idx].label_id)]
            paths.append([start, start + 1, start + 2])
            mentioned.update((r.subject_idx, r.object_idx))
        for j, o in enumerate(objects):
            if j not in mentioned:
                tokens.append(obj_word(o.label_id))
        pairs.append((VisualSceneGraph(objects, rels), TextualSceneGraph(tokens, paths)))

    return Corpus(pairs, _vocab(c_o, c_r, spec.filler_words), spec.d1, c_o, c_r)
