from __future__ import annotations

from dataclasses import dataclass

import pytest

from cutbiot.forms import PhysicalParams, StabilizationParams
from cutbiot.geometry import CutRule, build_cut_rules, make_flower_domain
from cutbiot.mesh import ActiveMesh, BackgroundMesh, build_mesh, classify
from cutbiot.spaces import FeSpace, FieldLayout, build_space, make_layout


@dataclass
class Disc:
    """One discretized circle-minus-flower configuration."""

    n: int
    dom: object
    mesh: BackgroundMesh
    active: ActiveMesh
    rules: CutRule
    su: FeSpace
    st: FeSpace
    sf: FeSpace
    layout: FieldLayout


def _discretize(n, subdiv=3):
    dom = make_flower_domain()
    mesh = build_mesh([-1, -1], [1, 1], n)
    active = classify(mesh, dom, subdiv=subdiv)
    rules = build_cut_rules(active, dom, order=5, subdiv=subdiv)
    su = build_space(active, 2, ncomp=2)
    st = build_space(active, 1)
    sf = build_space(active, 2)
    return Disc(n, dom, mesh, active, rules, su, st, sf, make_layout(su, st, sf))


@pytest.fixture(scope="session")
def flower_domain():
    return make_flower_domain()


@pytest.fixture(scope="session")
def disc16():
    return _discretize(16)


@pytest.fixture(scope="session")
def disc32():
    return _discretize(32)


@pytest.fixture(scope="session")
def params():
    return PhysicalParams(mu=1.0, lam=1.0, K=1.0)


@pytest.fixture(scope="session")
def stab():
    return StabilizationParams()
