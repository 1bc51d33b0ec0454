import numpy as np
import pytest

from sgm.autodiff import Tensor
from sgm.graphs import ObjectNode, RelationshipNode, VisualSceneGraph
from sgm.vsg import GcnLayer, VsgEncoderParams


# filled by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_vsg(rng, d1=3, c_o=4, c_r=3, n_o=None, n_r=None):
    n_o = n_o if n_o is not None else int(rng.integers(2, 6))
    n_r = n_r if n_r is not None else int(rng.integers(0, 5))
    objects = [ObjectNode(rng.uniform(-2, 2, d1), int(rng.integers(c_o))) for _ in range(n_o)]
    rels = []
    for _ in range(n_r):
        s, o = rng.choice(n_o, size=2, replace=False)
        rels.append(RelationshipNode(rng.uniform(-2, 2, d1), int(rng.integers(c_r)), int(s), int(o)))
    return VisualSceneGraph(objects, rels)


def random_vsg_params(rng, d1=3, d2=2, dim=4, c_o=4, c_r=3, layers=1, scale=1.0):
    def t(*shape):
        return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)

    gcn, d_in = [], d1
    for _ in range(layers):
        gcn.append(GcnLayer(t(dim, d_in), t(dim), t(dim, 3 * d_in), t(dim)))
        d_in = dim
    return VsgEncoderParams(t(d2, c_o), t(d2, c_r), t(d1, d1 + d2), gcn)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
