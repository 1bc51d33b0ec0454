"""Central finite-difference checks for every differentiable building block.

Each case builds fresh random tensors in [-2, 2], reduces the op output to a
scalar through a fixed random weighting, and compares the backward pass with
``(f(x + h) - f(x - h)) / 2h``. For the full encoders the comparison runs
on a random sample of coordinates plus one random direction, which keeps a
100-case sweep well under a minute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .graphs import ObjectNode, RelationshipNode, TextualSceneGraph, VisualSceneGraph
from .matching import score_pair, triplet_loss_all, triplet_loss_hardest
from .tsg import BiGru, GruCell, TextualFeatureGraph, TsgEncoderParams, encode_tsg, gru_cell
from .vsg import GcnLayer, VisualFeatureGraph, VsgEncoderParams, encode_vsg, fuse, gcn_forward

STEP = 1e-6
DEFAULT_TOLERANCE = 1e-4

Case = tuple[Callable[[], Tensor], list[Tensor]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-10:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def _eval(f) -> float:
    with no_grad():
        return f().item()


def check_gradients(f: Callable[[], Tensor], tensors: list[Tensor], rng: np.random.Generator | None = None,
                    n_coords: int | None = None, h: float = STEP) -> float:
    """Relative error between backprop and central differences for scalar ``f``.

    With ``n_coords`` set, only that many randomly chosen coordinates are
    differenced, and one extra directional derivative covers the rest.
    """
    for t in tensors:
        t.zero_grad()
    ad.backward(f())
    grads = [t.grad.copy() for t in tensors]

    coords = [(ti, idx) for ti, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if n_coords is not None and n_coords < len(coords):
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    analytic, numeric = [], []
    for ti, idx in coords:
        t = tensors[ti]
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = _eval(f)
        t.data[idx] = orig - h
        down = _eval(f)
        t.data[idx] = orig
        analytic.append(grads[ti][idx])
        numeric.append((up - down) / (2 * h))

    if n_coords is not None:
        dirs = [rng.standard_normal(t.shape) for t in tensors]
        dirs_norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / dirs_norm for d in dirs]
        orig = [t.data.copy() for t in tensors]
        for t, d, o in zip(tensors, dirs, orig):
            t.data[...] = o + h * d
        up = _eval(f)
        for t, d, o in zip(tensors, dirs, orig):
            t.data[...] = o - h * d
        down = _eval(f)
        for t, o in zip(tensors, orig):
            t.data[...] = o
        analytic.append(sum(float((g * d).sum()) for g, d in zip(grads, dirs)))
        numeric.append((up - down) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))


# ----------------------------------------------------------------------
# random cases


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_all(out * Tensor(w))


def _unary(op):
    def make(rng) -> Case:
        x = _t(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        return (lambda: _weighted(op(x), w)), [x]
    return make


def _case_matmul(rng) -> Case:
    m, k, n = rng.integers(1, 5, size=3)
    a, b = _t(rng, m, k), _t(rng, k, n)
    w = rng.standard_normal((m, n))
    v = _t(rng, k)
    wv = rng.standard_normal(m)
    return (lambda: _weighted(ad.matmul(a, b), w) + _weighted(ad.matmul(a, v), wv)
            + ad.matmul(v, v)), [a, b, v]


def _case_add_sub_mul(rng) -> Case:
    a, b, c = _t(rng, 3, 4), _t(rng, 3, 4), _t(rng, 4)
    s = _t(rng)
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted(ad.mul(ad.add(a, c), ad.sub(b, s)) + ad.scale(a, -0.7), w)), [a, b, c, s]


def _case_concat(rng) -> Case:
    a, b = _t(rng, 3, 2), _t(rng, 3, 5)
    u, v = _t(rng, 4), _t(rng, 3)
    w, wv = rng.standard_normal((3, 7)), rng.standard_normal(7)
    return (lambda: _weighted(ad.concat([a, b]), w) + _weighted(ad.concat_rows(u, v), wv)), [a, b, u, v]


def _case_stack_index(rng) -> Case:
    a, b = _t(rng, 4), _t(rng, 4)
    m = _t(rng, 5, 3)
    rows = rng.integers(0, 5, size=6)
    cols = rng.integers(0, 3, size=6)
    w1, w2, w3 = rng.standard_normal((2, 4)), rng.standard_normal((6, 3)), rng.standard_normal(6)
    w4 = rng.standard_normal((3, 5))
    return (lambda: _weighted(ad.stack([a, b]), w1) + _weighted(ad.take_rows(m, rows), w2)
            + _weighted(ad.gather(m, rows, cols), w3) + _weighted(ad.transpose(m), w4)), [a, b, m]


def _case_reductions(rng) -> Case:
    x, m = _t(rng, 4), _t(rng, 3, 5)
    return (lambda: ad.scale(ad.mean_all(x), 1.3) + ad.mean_all(ad.tanh(m)) + ad.sum_all(ad.tanh(x))), [x, m]


def _case_rowmax(rng) -> Case:
    while True:
        m = _t(rng, 4, 5)
        top2 = np.sort(m.data, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) > 1e-4:
            break
    w = rng.standard_normal(4)
    return (lambda: _weighted(ad.reduce_max_rows(m)[0], w)), [m]


def _case_normalize(rng) -> Case:
    x = _t(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted(ad.normalize_rows(x), w)), [x]


def _case_relu(rng) -> Case:
    while True:
        x = _t(rng, 3, 4)
        if np.min(np.abs(x.data)) > 1e-4:
            break
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted(ad.relu(x), w)), [x]


def _random_cell(rng, d_in, d_h) -> GruCell:
    return GruCell(_t(rng, d_h, d_in), _t(rng, d_h, d_h), _t(rng, d_h),
                   _t(rng, d_h, d_in), _t(rng, d_h, d_h), _t(rng, d_h),
                   _t(rng, d_h, d_in), _t(rng, d_h, d_h), _t(rng, d_h))


def _case_gru_cell(rng) -> Case:
    cell = _random_cell(rng, 3, 4)
    x, h = _t(rng, 3), Tensor(rng.uniform(-0.9, 0.9, size=4), requires_grad=True)
    w = rng.standard_normal(4)
    return (lambda: _weighted(gru_cell(x, h, cell), w)), [x, h] + list(cell.named().values())


def _case_fuse(rng) -> Case:
    v, e, W = _t(rng, 2, 3), _t(rng, 2, 2), _t(rng, 3, 5)
    w = rng.standard_normal((2, 3))
    return (lambda: _weighted(fuse(v, e, W), w)), [v, e, W]


def _random_vsg(rng, d1, c_o, c_r, n_o=None, n_r=None) -> VisualSceneGraph:
    n_o = n_o or int(rng.integers(2, 5))
    n_r = int(rng.integers(1, 4)) if n_r is None else n_r
    objects = [ObjectNode(rng.uniform(-2, 2, size=d1), int(rng.integers(c_o))) for _ in range(n_o)]
    rels = []
    for _ in range(n_r):
        s, o = rng.choice(n_o, size=2, replace=False)
        rels.append(RelationshipNode(rng.uniform(-2, 2, size=d1), int(rng.integers(c_r)), int(s), int(o)))
    return VisualSceneGraph(objects, rels)


def _random_vsg_params(rng, d1, d2, dim, c_o, c_r, layers=1) -> VsgEncoderParams:
    gcn = []
    d_in = d1
    for _ in range(layers):
        gcn.append(GcnLayer(_t(rng, dim, d_in), _t(rng, dim), _t(rng, dim, 3 * d_in), _t(rng, dim)))
        d_in = dim
    return VsgEncoderParams(_t(rng, d2, c_o), _t(rng, d2, c_r), _t(rng, d1, d1 + d2), gcn)


def _vsg_tensors(p: VsgEncoderParams) -> list[Tensor]:
    out = [p.W_o, p.W_r, p.W_u]
    for layer in p.gcn_layers:
        out += [layer.obj_weight, layer.obj_bias, layer.rel_weight, layer.rel_bias]
    return out


def _case_gcn(rng) -> Case:
    ho, hr = _t(rng, 3, 2), _t(rng, 2, 2)
    layers = [GcnLayer(_t(rng, 4, 2), _t(rng, 4), _t(rng, 4, 6), _t(rng, 4))]
    subs, objs = [0, 2], [1, 0]
    wo, wr = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))

    def f():
        o, r = gcn_forward(ho, hr, subs, objs, layers)
        return _weighted(o, wo) + _weighted(r, wr)

    layer = layers[0]
    return f, [ho, hr, layer.obj_weight, layer.obj_bias, layer.rel_weight, layer.rel_bias]


def _case_vsg_encoder(rng) -> Case:
    d1, d2, dim, c_o, c_r = 3, 3, 4, 4, 3
    g = _random_vsg(rng, d1, c_o, c_r)
    p = _random_vsg_params(rng, d1, d2, dim, c_o, c_r, layers=int(rng.integers(1, 3)))
    wo = rng.standard_normal((len(g.objects), dim))
    wr = rng.standard_normal((len(g.relationships), dim))

    def f():
        out = encode_vsg(g, p)
        return _weighted(out.object_feats, wo) + _weighted(out.relationship_feats, wr)

    return f, _vsg_tensors(p)


def _random_tsg_params(rng, vocab, d2, dim, path_in=None) -> TsgEncoderParams:
    path_in = path_in or d2
    return TsgEncoderParams(_t(rng, d2, vocab),
                            BiGru(_random_cell(rng, d2, dim), _random_cell(rng, d2, dim)),
                            BiGru(_random_cell(rng, path_in, dim), _random_cell(rng, path_in, dim)),
                            _t(rng, dim, d2), _t(rng, dim))


def _tsg_tensors(p: TsgEncoderParams) -> list[Tensor]:
    out = [p.W_e, p.iso_weight, p.iso_bias]
    for bi in (p.gru_w, p.gru_p):
        out += list(bi.fwd.named().values()) + list(bi.bwd.named().values())
    return out


def _case_tsg_encoder(rng) -> Case:
    vocab, d2, dim, n_w = 6, 3, 4, 5
    tokens = [int(x) for x in rng.integers(0, vocab, size=n_w)]
    paths = [sorted(rng.choice(n_w, size=3, replace=False).tolist()) for _ in range(2)]
    g = TextualSceneGraph(tokens, paths)
    p = _random_tsg_params(rng, vocab, d2, dim)
    ww = rng.standard_normal((n_w, dim))
    wp = rng.standard_normal((len(paths), dim))

    def f():
        out = encode_tsg(g, p)
        return _weighted(out.word_feats, ww) + _weighted(out.path_feats, wp)

    return f, _tsg_tensors(p)


def _untied(m: np.ndarray) -> bool:
    top2 = np.sort(m, axis=1)[:, -2:]
    return m.shape[1] < 2 or float(np.min(top2[:, 1] - top2[:, 0])) > 1e-4


def _case_score_pair(rng) -> Case:
    while True:
        dim = 4
        vo, vr = _t(rng, 3, dim), _t(rng, 2, dim)
        tw, tp = _t(rng, 4, dim), _t(rng, 2, dim)
        if _untied(tw.data @ vo.data.T) and _untied(tp.data @ vr.data.T):
            break
    return (lambda: score_pair(VisualFeatureGraph(vo, vr), TextualFeatureGraph(tw, tp)).s_total), [vo, vr, tw, tp]


def _hinge_clear(s: np.ndarray, margin: float) -> bool:
    d = np.diag(s)
    args = np.concatenate([(margin - d[None, :] + s).ravel(), (margin - d[:, None] + s).ravel()])
    off = s[~np.eye(len(s), dtype=bool)]
    gaps = np.abs(np.subtract.outer(off, off))[~np.eye(off.size, dtype=bool)]
    return float(np.min(np.abs(args))) > 1e-4 and float(np.min(gaps)) > 1e-4


def _case_loss(loss_fn):
    def make(rng) -> Case:
        while True:
            s = _t(rng, 4, 4)
            if _hinge_clear(s.data, 0.2):
                break
        return (lambda: loss_fn(s, 0.2)), [s]
    return make


def _case_loss_through_scores(rng) -> Case:
    """Hardest-negative loss on a score matrix built by score_pair."""
    dim, b = 3, 3
    while True:
        vis = [(_t(rng, 2, dim), _t(rng, 1, dim)) for _ in range(b)]
        txt = [(_t(rng, 3, dim), _t(rng, 1, dim)) for _ in range(b)]
        ok = all(_untied(tw.data @ vo.data.T) for vo, _ in vis for tw, _ in txt)
        if not ok:
            continue
        with no_grad():
            s = np.array([[score_pair(VisualFeatureGraph(*v), TextualFeatureGraph(*t)).s_total.item()
                           for t in txt] for v in vis])
        if _hinge_clear(s, 0.2):
            break

    def f():
        rows = [ad.stack([score_pair(VisualFeatureGraph(*v), TextualFeatureGraph(*t)).s_total for t in txt])
                for v in vis]
        return triplet_loss_hardest(ad.stack(rows), 0.2) + 0.1 * triplet_loss_all(ad.stack(rows), 0.2)

    return f, [x for pair in vis + txt for x in pair]


@dataclass(frozen=True)
class GradCase:
    name: str
    make: Callable[[np.random.Generator], Case]
    n_coords: int | None = None


CASES = (
    GradCase("matmul", _case_matmul),
    GradCase("add/sub/mul/scale", _case_add_sub_mul),
    GradCase("tanh", _unary(ad.tanh)),
    GradCase("sigmoid", _unary(ad.sigmoid)),
    GradCase("relu", _case_relu),
    GradCase("concat", _case_concat),
    GradCase("stack/index/transpose", _case_stack_index),
    GradCase("mean/sum", _case_reductions),
    GradCase("reduce_max_rows", _case_rowmax),
    GradCase("normalize_rows", _case_normalize),
    GradCase("gru_cell", _case_gru_cell),
    GradCase("fuse", _case_fuse),
    GradCase("gcn_forward", _case_gcn),
    GradCase("vsg_encoder", _case_vsg_encoder, n_coords=40),
    GradCase("tsg_encoder", _case_tsg_encoder, n_coords=30),
    GradCase("score_pair", _case_score_pair),
    GradCase("triplet_loss_all", _case_loss(triplet_loss_all)),
    GradCase("triplet_loss_hardest", _case_loss(triplet_loss_hardest)),
    GradCase("loss_through_scores", _case_loss_through_scores, n_coords=40),
)


@dataclass
class GradResult:
    name: str
    cases: int
    max_error: float
    seconds: float

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


def run_case(case: GradCase, n_cases: int, seed: int) -> GradResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_cases):
        f, tensors = case.make(rng)
        worst = max(worst, check_gradients(f, tensors, rng, n_coords=case.n_coords))
    return GradResult(case.name, n_cases, worst, time.perf_counter() - start)


def run_suite(n_cases: int = 100, seed: int = 0, only: list[str] | None = None) -> list[GradResult]:
    return [run_case(c, n_cases, seed) for c in CASES if only is None or c.name in only]
