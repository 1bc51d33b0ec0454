"""Scene-graph data model, validation and on-disk format.

A corpus lives in two files: ``graphs.json`` holds structure (labels,
endpoints, token ids, relationship paths) and ``features.bin`` holds the
region features. The binary layout is::

    b"SGMF" | u32 row count | u32 dim | float32 rows, row-major

Rows are every object feature of every graph in corpus order, followed by
every relationship feature in corpus order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusIntegrityError, CorpusParseError, ValidationError

FEATURE_MAGIC = b"SGMF"
UNKNOWN_WORD = 0


@dataclass
class ObjectNode:
    feature: np.ndarray
    label_id: int


@dataclass
class RelationshipNode:
    feature: np.ndarray
    label_id: int
    subject_idx: int
    object_idx: int


@dataclass
class VisualSceneGraph:
    objects: list[ObjectNode]
    relationships: list[RelationshipNode] = field(default_factory=list)

    @property
    def object_features(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects])

    @property
    def relationship_features(self) -> np.ndarray:
        if not self.relationships:
            d = len(self.objects[0].feature) if self.objects else 0
            return np.zeros((0, d))
        return np.stack([r.feature for r in self.relationships])


@dataclass
class TextualSceneGraph:
    tokens: list[int]
    triplet_paths: list[list[int]] = field(default_factory=list)


@dataclass
class Corpus:
    pairs: list[tuple[VisualSceneGraph, TextualSceneGraph]]
    vocab: list[str]
    d1: int
    c_o: int
    c_r: int

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def images(self) -> list[VisualSceneGraph]:
        return [v for v, _ in self.pairs]

    @property
    def captions(self) -> list[TextualSceneGraph]:
        return [t for _, t in self.pairs]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def word_id(self, word: str) -> int:
        try:
            return self.vocab.index(word)
        except ValueError:
            return UNKNOWN_WORD

    def subset(self, indices) -> Corpus:
        return Corpus([self.pairs[i] for i in indices], list(self.vocab), self.d1, self.c_o, self.c_r)


def _validate_visual(g: VisualSceneGraph, d1: int | None, c_o: int | None,
                     c_r: int | None, where: str) -> list[str]:
    out = []
    if len(g.objects) < 1:
        out.append(f"{where}: objects must be non-empty")
    for i, o in enumerate(g.objects):
        feat = np.asarray(o.feature)
        if d1 is not None and feat.shape != (d1,):
            out.append(f"{where} object {i}: feature length {feat.size} != d1 {d1}")
        elif not np.all(np.isfinite(feat)):
            out.append(f"{where} object {i}: feature has non-finite values")
        if c_o is not None and not 0 <= o.label_id < c_o:
            out.append(f"{where} object {i}: label {o.label_id} outside [0, {c_o})")
    n_o = len(g.objects)
    for j, r in enumerate(g.relationships):
        feat = np.asarray(r.feature)
        if d1 is not None and feat.shape != (d1,):
            out.append(f"{where} relationship {j}: feature length {feat.size} != d1 {d1}")
        elif not np.all(np.isfinite(feat)):
            out.append(f"{where} relationship {j}: feature has non-finite values")
        if c_r is not None and not 0 <= r.label_id < c_r:
            out.append(f"{where} relationship {j}: label {r.label_id} outside [0, {c_r})")
        for name, idx in (("subject_idx", r.subject_idx), ("object_idx", r.object_idx)):
            if not 0 <= idx < n_o:
                out.append(f"{where} relationship {j}: {name} {idx} outside [0, {n_o})")
        if r.subject_idx == r.object_idx:
            out.append(f"{where} relationship {j}: subject_idx == object_idx ({r.subject_idx})")
    return out


def _validate_textual(g: TextualSceneGraph, vocab_size: int | None, where: str) -> list[str]:
    out = []
    n_w = len(g.tokens)
    if n_w < 1:
        out.append(f"{where}: tokens must be non-empty")
    if vocab_size is not None:
        for i, t in enumerate(g.tokens):
            if not 0 <= t < vocab_size:
                out.append(f"{where} token {i}: id {t} outside [0, {vocab_size})")
    for p, path in enumerate(g.triplet_paths):
        if len(path) < 2:
            out.append(f"{where} path {p}: length {len(path)} < 2")
        for idx in path:
            if not 0 <= idx < n_w:
                out.append(f"{where} path {p}: token index {idx} outside [0, {n_w})")
    return out


def validate(graph, *, d1: int | None = None, c_o: int | None = None, c_r: int | None = None,
             vocab_size: int | None = None) -> list[str]:
    """List every invariant violation of a graph or corpus; empty means valid.

    Dimension bounds are taken from the corpus when validating a
    :class:`Corpus`, otherwise only the supplied ones are checked.
    """
    if isinstance(graph, Corpus):
        out = []
        if len(graph.vocab) < 1:
            out.append("corpus: vocab must contain at least the unknown-word entry")
        for i, (v, t) in enumerate(graph.pairs):
            out += _validate_visual(v, graph.d1, graph.c_o, graph.c_r, f"pair {i} visual")
            out += _validate_textual(t, graph.vocab_size, f"pair {i} text")
        return out
    if isinstance(graph, VisualSceneGraph):
        return _validate_visual(graph, d1, c_o, c_r, "visual graph")
    if isinstance(graph, TextualSceneGraph):
        return _validate_textual(graph, vocab_size, "textual graph")
    raise TypeError(f"cannot validate {type(graph).__name__}")


# ----------------------------------------------------------------------
# binary matrices


def write_matrix(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {rows.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read a features.bin-layout file into a float64 ``(count, dim)`` array."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise CorpusIntegrityError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < 12:
        raise CorpusIntegrityError(f"{path}: truncated header")
    count, dim = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * count * dim:
        raise CorpusIntegrityError(
            f"{path}: header declares {count}x{dim} floats but body holds {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, dim)


# ----------------------------------------------------------------------
# corpus files


def corpus_to_json(corpus: Corpus) -> dict:
    pairs = []
    for v, t in corpus.pairs:
        pairs.append({
            "objects": [{"label": int(o.label_id)} for o in v.objects],
            "relationships": [{"label": int(r.label_id), "sub": int(r.subject_idx),
                               "obj": int(r.object_idx)} for r in v.relationships],
            "tokens": [int(x) for x in t.tokens],
            "paths": [[int(x) for x in p] for p in t.triplet_paths],
        })
    return {"d1": corpus.d1, "c_o": corpus.c_o, "c_r": corpus.c_r,
            "vocab": list(corpus.vocab), "pairs": pairs}


def save_corpus(corpus: Corpus, graph_file, feature_file) -> None:
    with open(graph_file, "w", encoding="utf-8") as fh:
        json.dump(corpus_to_json(corpus), fh, indent=1)
        fh.write("\n")
    rows = [o.feature for v in corpus.images for o in v.objects]
    rows += [r.feature for v in corpus.images for r in v.relationships]
    write_matrix(feature_file, np.stack(rows) if rows else np.zeros((0, corpus.d1)))


def _field(obj: dict, key: str, where: str, kind=int):
    if not isinstance(obj, dict) or key not in obj:
        raise CorpusParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise CorpusParseError(f"{where}: field {key!r} must be an integer")
    if kind is list and not isinstance(val, list):
        raise CorpusParseError(f"{where}: field {key!r} must be a list")
    return val


def load_corpus(graph_file, feature_file) -> Corpus:
    """Load and fully validate a corpus from its graph and feature files."""
    text = Path(graph_file).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(exc.msg, line=exc.lineno) from exc

    d1 = _field(doc, "d1", "header")
    c_o = _field(doc, "c_o", "header")
    c_r = _field(doc, "c_r", "header")
    vocab = _field(doc, "vocab", "header", list)
    raw_pairs = _field(doc, "pairs", "header", list)

    feats = read_matrix(feature_file)
    n_obj = n_rel = 0
    for i, p in enumerate(raw_pairs):
        n_obj += len(_field(p, "objects", f"pair {i}", list))
        n_rel += len(_field(p, "relationships", f"pair {i}", list))
    if feats.shape[0] != n_obj + n_rel:
        raise CorpusIntegrityError(
            f"{feature_file}: {feats.shape[0]} feature rows but graphs declare "
            f"{n_obj} objects + {n_rel} relationships")
    if feats.shape[0] and feats.shape[1] != d1:
        raise CorpusIntegrityError(f"{feature_file}: feature dim {feats.shape[1]} != d1 {d1}")

    pairs = []
    obj_row, rel_row = 0, n_obj
    for i, p in enumerate(raw_pairs):
        objects = []
        for j, o in enumerate(p["objects"]):
            objects.append(ObjectNode(feats[obj_row], _field(o, "label", f"pair {i} object {j}")))
            obj_row += 1
        rels = []
        for j, r in enumerate(p["relationships"]):
            where = f"pair {i} relationship {j}"
            rels.append(RelationshipNode(feats[rel_row], _field(r, "label", where),
                                         _field(r, "sub", where), _field(r, "obj", where)))
            rel_row += 1
        tokens = _field(p, "tokens", f"pair {i}", list)
        paths = _field(p, "paths", f"pair {i}", list)
        pairs.append((VisualSceneGraph(objects, rels),
                      TextualSceneGraph([int(t) for t in tokens], [[int(x) for x in q] for q in paths])))

    corpus = Corpus(pairs, [str(w) for w in vocab], d1, c_o, c_r)
    violations = validate(corpus)
    if violations:
        raise ValidationError(violations)
    return corpus


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    """Structural equality, comparing features exactly."""
    if (a.d1, a.c_o, a.c_r, a.vocab, len(a)) != (b.d1, b.c_o, b.c_r, b.vocab, len(b)):
        return False
    for (va, ta), (vb, tb) in zip(a.pairs, b.pairs):
        if ta.tokens != tb.tokens or ta.triplet_paths != tb.triplet_paths:
            return False
        if len(va.objects) != len(vb.objects) or len(va.relationships) != len(vb.relationships):
            return False
        for oa, ob in zip(va.objects, vb.objects):
            if oa.label_id != ob.label_id or not np.array_equal(oa.feature, ob.feature):
                return False
        for ra, rb in zip(va.relationships, vb.relationships):
            if (ra.label_id, ra.subject_idx, ra.object_idx) != (rb.label_id, rb.subject_idx, rb.object_idx):
                return False
            if not np.array_equal(ra.feature, rb.feature):
                return False
    return True
