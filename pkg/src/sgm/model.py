"""The scene graph matching model: parameters, ablation modes and scoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import DimensionError
from .graphs import Corpus, TextualSceneGraph, VisualSceneGraph, read_matrix
from .matching import SimilarityBreakdown, score_pair
from .tsg import BiGru, GruCell, TextualFeatureGraph, TsgEncoderParams, encode_tsg
from .vsg import GcnLayer, VisualFeatureGraph, VsgEncoderParams, encode_vsg


class Mode(str, Enum):
    SGM = "SGM"
    OOM = "OOM"
    OOM_VREL = "OOM_VREL"
    OOM_TREL = "OOM_TREL"
    OOM_NO_TCXT = "OOM_NO_TCXT"

    @property
    def visual_relationships(self) -> bool:
        return self in (Mode.SGM, Mode.OOM_VREL)

    @property
    def text_relationships(self) -> bool:
        return self in (Mode.SGM, Mode.OOM_TREL)

    @property
    def text_context(self) -> bool:
        return self is not Mode.OOM_NO_TCXT


@dataclass
class ModelConfig:
    d1: int
    c_o: int
    c_r: int
    vocab_size: int
    d2: int = 300
    dim: int = 1024
    gcn_layers: int = 1
    mode: Mode = Mode.SGM
    path_input: str = "embeddings"
    normalize: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        self.mode = Mode(self.mode)
        for name in ("d1", "c_o", "c_r", "vocab_size", "d2", "dim", "gcn_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.path_input not in ("embeddings", "word_states"):
            raise ValueError(f"path_input must be 'embeddings' or 'word_states', got {self.path_input!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


# parameter-name prefixes used only when relationships are processed
RELATIONSHIP_PREFIXES = ("vsg.W_r", "gru_p.")


def _is_relationship_param(name: str) -> bool:
    return name.startswith(RELATIONSHIP_PREFIXES) or (name.startswith("vsg.gcn") and ".rel_" in name)


class SgmModel:
    """All trainable parameters plus the ablation mode that selects how they are used."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        s = config.init_scale

        def p(*shape):
            return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

        c = config
        layers = []
        d_in = c.d1
        for _ in range(c.gcn_layers):
            layers.append(GcnLayer(p(c.dim, d_in), p(c.dim), p(c.dim, 3 * d_in), p(c.dim)))
            d_in = c.dim
        self.vsg = VsgEncoderParams(p(c.d2, c.c_o), p(c.d2, c.c_r), p(c.d1, c.d1 + c.d2), layers)

        def cell(d_in):
            return GruCell(p(c.dim, d_in), p(c.dim, c.dim), p(c.dim),
                           p(c.dim, d_in), p(c.dim, c.dim), p(c.dim),
                           p(c.dim, d_in), p(c.dim, c.dim), p(c.dim))

        w_e = p(c.d2, c.vocab_size)
        gru_w = BiGru(cell(c.d2), cell(c.d2))
        path_in = c.d2 if c.path_input == "embeddings" else c.dim
        gru_p = BiGru(cell(path_in), cell(path_in))
        self.tsg = TsgEncoderParams(w_e, gru_w, gru_p, p(c.dim, c.d2), p(c.dim))

    @property
    def mode(self) -> Mode:
        return self.config.mode

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"vsg.W_o": self.vsg.W_o, "vsg.W_r": self.vsg.W_r, "vsg.W_u": self.vsg.W_u}
        for k, layer in enumerate(self.vsg.gcn_layers):
            out[f"vsg.gcn{k}.obj_weight"] = layer.obj_weight
            out[f"vsg.gcn{k}.obj_bias"] = layer.obj_bias
            out[f"vsg.gcn{k}.rel_weight"] = layer.rel_weight
            out[f"vsg.gcn{k}.rel_bias"] = layer.rel_bias
        out["tsg.W_e"] = self.tsg.W_e
        for gname in ("gru_w", "gru_p"):
            bi = getattr(self.tsg, gname)
            for direction in ("fwd", "bwd"):
                for pname, t in getattr(bi, direction).named().items():
                    out[f"{gname}.{direction}.{pname}"] = t
        out["tsg.iso_weight"] = self.tsg.iso_weight
        out["tsg.iso_bias"] = self.tsg.iso_bias
        return out

    def relationship_parameter_names(self) -> list[str]:
        return [n for n in self.named_parameters() if _is_relationship_param(n)]

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    # ------------------------------------------------------------------

    def check_corpus(self, corpus: Corpus) -> None:
        c = self.config
        for name, want, got in (("d1", c.d1, corpus.d1), ("c_o", c.c_o, corpus.c_o),
                                ("c_r", c.c_r, corpus.c_r), ("vocab", c.vocab_size, corpus.vocab_size)):
            if want != got:
                raise DimensionError(f"model {name}={want} but corpus {name}={got}")

    def encode_visual(self, graph: VisualSceneGraph) -> VisualFeatureGraph:
        return encode_vsg(graph, self.vsg, with_relationships=self.mode.visual_relationships)

    def encode_text(self, graph: TextualSceneGraph) -> TextualFeatureGraph:
        return encode_tsg(graph, self.tsg, context=self.mode.text_context,
                          with_relationships=self.mode.text_relationships,
                          path_input=self.config.path_input)

    def score(self, vfg: VisualFeatureGraph, tfg: TextualFeatureGraph) -> SimilarityBreakdown:
        # single-sided relationship modes fold the relationship rows into the
        # object-level match, since there is nothing on the other side to pair with
        if self.mode is Mode.OOM_VREL and vfg.relationship_feats.shape[0]:
            vfg = VisualFeatureGraph(ad.concat([vfg.object_feats, vfg.relationship_feats], axis=0),
                                     vfg.relationship_feats[0:0])
        elif self.mode is Mode.OOM_TREL and tfg.path_feats.shape[0]:
            tfg = TextualFeatureGraph(ad.concat([tfg.word_feats, tfg.path_feats], axis=0),
                                      tfg.path_feats[0:0])
        return score_pair(vfg, tfg, normalize=self.config.normalize)

    def score_graphs(self, image: VisualSceneGraph, caption: TextualSceneGraph) -> SimilarityBreakdown:
        return self.score(self.encode_visual(image), self.encode_text(caption))

    def batch_scores(self, images, captions) -> Tensor:
        """Differentiable ``len(images) x len(captions)`` total-score matrix."""
        vfgs = [self.encode_visual(g) for g in images]
        tfgs = [self.encode_text(g) for g in captions]
        return ad.stack([ad.stack([self.score(v, t).s_total for t in tfgs]) for v in vfgs])

    def score_matrix(self, corpus: Corpus) -> np.ndarray:
        """Image x caption score matrix without recording gradients."""
        self.check_corpus(corpus)
        with no_grad():
            return self.batch_scores(corpus.images, corpus.captions).data.copy()

    # ------------------------------------------------------------------

    def load_label_embeddings(self, path) -> None:
        """Replace W_o and W_r with rows from an embedding file (C_o + C_r rows of dim d2)."""
        rows = read_matrix(path)
        c = self.config
        if rows.shape != (c.c_o + c.c_r, c.d2):
            raise DimensionError(f"label embedding file has shape {rows.shape}, expected {(c.c_o + c.c_r, c.d2)}")
        self.vsg.W_o.data[...] = rows[:c.c_o].T
        self.vsg.W_r.data[...] = rows[c.c_o:].T

    def load_word_embeddings(self, path) -> None:
        """Replace W_e with rows from an embedding file (V rows of dim d2)."""
        rows = read_matrix(path)
        c = self.config
        if rows.shape != (c.vocab_size, c.d2):
            raise DimensionError(f"word embedding file has shape {rows.shape}, expected {(c.vocab_size, c.d2)}")
        self.tsg.W_e.data[...] = rows.T
