from __future__ import annotations

import math

import numpy as np
import pytest

from cutbiot.errors import ConfigurationError
from cutbiot.forms import PhysicalParams, StabilizationParams, assemble_system
from cutbiot.solver import solve
from cutbiot.verification import (ErrorReport, eoc, error_norms, galerkin_residual,
                                  make_case)

from oracles import OMEGA_AREA


def test_trig_case_divergence_free(params):
    case = make_case(params, "trig")
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (500, 2))
    assert np.abs(case.div_u(pts)).max() == 0.0
    assert np.abs(case.p_T(pts) - case.p_F(pts)).max() == 0.0  # lambda drops out


@pytest.mark.parametrize("name,prm", [
    ("trig", PhysicalParams(1.0, 1.0, 1.0)),
    ("trig", PhysicalParams(2.0, 1e8, 1e-8)),
    ("trig_div", PhysicalParams(1.0, 1.0, 1.0)),
    ("trig_div", PhysicalParams(0.5, 37.0, 0.2)),
])
def test_strong_residuals_vanish(name, prm):
    case = make_case(prm, name)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (1000, 2))
    r1, r2, r3 = case.strong_residuals(pts)
    scale = max(1.0, np.abs(case.f(pts)).max(), np.abs(case.g(pts)).max())
    assert np.abs(r1).max() <= 1e-10 * scale
    assert np.abs(r2).max() <= 1e-10 * scale
    assert np.abs(r3).max() <= 1e-10 * scale


def test_derivatives_match_finite_differences(params):
    case = make_case(params, "trig_div")
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.9, 0.9, (200, 2))
    eps = 1e-6

    def fd_vec(f, comp=None):
        gx = (f(pts + [eps, 0]) - f(pts - [eps, 0])) / (2 * eps)
        gy = (f(pts + [0, eps]) - f(pts - [0, eps])) / (2 * eps)
        return gx, gy

    gx, gy = fd_vec(case.p_F)
    assert np.abs(case.grad_p_F(pts) - np.column_stack([gx, gy])).max() < 1e-6
    gu = case.grad_u(pts)
    for c in range(2):
        gx, gy = fd_vec(lambda p, c=c: case.u(p)[:, c])
        assert np.abs(gu[:, c, 0] - gx).max() < 1e-6
        assert np.abs(gu[:, c, 1] - gy).max() < 1e-6
    lap_fd = (case.p_F(pts + [eps, 0]) + case.p_F(pts - [eps, 0])
              + case.p_F(pts + [0, eps]) + case.p_F(pts - [0, eps])
              - 4 * case.p_F(pts)) / eps ** 2
    assert np.abs(case.lap_p_F(pts) - lap_fd).max() < 1e-3


def test_unknown_case_rejected(params):
    with pytest.raises(ConfigurationError):
        make_case(params, "nope")


class _FieldCase:
    """Duck-typed case with prescribed fields, for norm checks."""

    def __init__(self, u=None, p_t=None, p_f=None, params=None):
        self.params = params or PhysicalParams()
        self._u = u or (lambda p: np.zeros((len(p), 2)))
        self._pt = p_t or (lambda p: np.zeros(len(p)))
        self._pf = p_f or (lambda p: np.zeros(len(p)))

    def u(self, p):
        return self._u(p)

    def grad_u(self, p):
        eps = 1e-7
        gx = (self._u(p + [eps, 0]) - self._u(p - [eps, 0])) / (2 * eps)
        gy = (self._u(p + [0, eps]) - self._u(p - [0, eps])) / (2 * eps)
        return np.stack([gx, gy], axis=-1)

    def p_T(self, p):
        return self._pt(p)

    def p_F(self, p):
        return self._pf(p)

    def grad_p_F(self, p):
        eps = 1e-7
        gx = (self._pf(p + [eps, 0]) - self._pf(p - [eps, 0])) / (2 * eps)
        gy = (self._pf(p + [0, eps]) - self._pf(p - [0, eps])) / (2 * eps)
        return np.column_stack([gx, gy])


def test_error_norm_of_unit_field_is_area(disc16, stab):
    # |1|_L2(Omega)^2 = |Omega|
    case = _FieldCase(p_f=lambda p: np.ones(len(p)))
    x = np.zeros(disc16.layout.total)
    rep = error_norms(x, case, disc16.su, disc16.st, disc16.sf, disc16.rules,
                      stab, disc16.layout)
    assert rep.pF_L2 ** 2 == pytest.approx(OMEGA_AREA, abs=1e-3)


def test_error_norms_zero_for_representable_fields(disc16, stab):
    # exact interpolant of Q2-representable fields has zero error
    u_poly = lambda p: np.column_stack([p[:, 0] ** 2 - p[:, 1], p[:, 0] * p[:, 1]])
    pt_poly = lambda p: 1.0 - 0.5 * p[:, 1]
    pf_poly = lambda p: p[:, 0] * p[:, 1] + 2.0

    class _PolyCase(_FieldCase):
        def grad_u(self, p):
            g = np.zeros((len(p), 2, 2))
            g[:, 0, 0] = 2 * p[:, 0]
            g[:, 0, 1] = -1.0
            g[:, 1, 0] = p[:, 1]
            g[:, 1, 1] = p[:, 0]
            return g

        def grad_p_F(self, p):
            return np.column_stack([p[:, 1], p[:, 0]])

    case = _PolyCase(u=u_poly, p_t=pt_poly, p_f=pf_poly)
    x = np.concatenate([disc16.su.interpolate(u_poly),
                        disc16.st.interpolate(pt_poly),
                        disc16.sf.interpolate(pf_poly)])
    rep = error_norms(x, case, disc16.su, disc16.st, disc16.sf, disc16.rules,
                      stab, disc16.layout)
    for v in (rep.u_star, rep.u_L2, rep.pT_star, rep.pF_star, rep.pF_L2):
        assert v < 1e-10


def test_lambda_weight_in_f_norm(disc16, stab):
    # with K=0 the F-norm collapses to lambda^{-1/2} L2
    case = _FieldCase(p_f=lambda p: np.ones(len(p)),
                      params=PhysicalParams(lam=1e8, K=0.0))
    x = np.zeros(disc16.layout.total)
    rep = error_norms(x, case, disc16.su, disc16.st, disc16.sf, disc16.rules,
                      stab, disc16.layout)
    assert rep.pF_F <= 1e-4 * rep.pF_L2 + 1e-15


def test_starred_norms_dominate(disc16, params, stab):
    case = make_case(params, "trig")
    system = assemble_system(disc16.su, disc16.st, disc16.sf, disc16.rules,
                             params, stab, case.boundary_data())
    rep = solve(system)
    err = error_norms(rep.x, case, disc16.su, disc16.st, disc16.sf, disc16.rules,
                      stab, disc16.layout)
    assert err.u_star >= err.u_V
    assert err.pT_star >= err.pT_L2
    assert err.pF_star >= err.pF_F
    assert all(v >= 0 for v in vars(err).values() if isinstance(v, float))


def test_eoc_formula():
    assert eoc([(0.2, 0.1), (0.1, 0.05)]) == [pytest.approx(1.0)]
    assert eoc([(0.2, 0.1), (0.1, 0.025)]) == [pytest.approx(2.0)]
    # reported 3D values: u-energy errors 1.89e-1 -> 4.21e-2 over one halving
    rate = eoc([(1.0, 1.89e-1), (0.5, 4.21e-2)])[0]
    assert rate == pytest.approx(2.17, abs=0.005)


def test_eoc_validation_and_saturation():
    with pytest.raises(ConfigurationError):
        eoc([(0.1, 1.0)])
    with pytest.raises(ConfigurationError):
        eoc([(0.1, 1.0), (0.2, 0.5)])
    rates = eoc([(0.2, 0.1), (0.1, 0.0)])
    assert math.isnan(rates[0])


def test_galerkin_residual_small_and_gamma_independent(disc16, params):
    case = make_case(params, "trig")
    for scale in (1.0, 2.0):
        stab = StabilizationParams(gamma_u=40.0 * scale, gamma_p=40.0 * scale)
        system = assemble_system(disc16.su, disc16.st, disc16.sf, disc16.rules,
                                 params, stab, case.boundary_data())
        rep = solve(system)
        res = galerkin_residual(system, rep.x)
        assert res <= 1e-8 * np.abs(system.rhs).max()


def test_galerkin_residual_zero_data(disc16, params, stab):
    system = assemble_system(disc16.su, disc16.st, disc16.sf, disc16.rules,
                             params, stab)
    rep = solve(system)
    assert galerkin_residual(system, rep.x) == 0.0


def test_divergence_variant_rates(flower_domain, stab):
    # the lambda-sensitive manufactured case keeps optimal starred rates
    from cutbiot.geometry import build_cut_rules
    from cutbiot.mesh import build_mesh, classify
    from cutbiot.spaces import build_space, make_layout

    prm = PhysicalParams(mu=1.0, lam=10.0, K=1.0)
    case = make_case(prm, "trig_div")
    seq = {"u_star": [], "pT_star": [], "pF_star": [], "pF_L2": []}
    for n in (16, 32, 64):
        mesh = build_mesh([-1, -1], [1, 1], n)
        act = classify(mesh, flower_domain)
        rules = build_cut_rules(act, flower_domain)
        su, st, sf = build_space(act, 2, 2), build_space(act, 1), build_space(act, 2)
        lay = make_layout(su, st, sf)
        system = assemble_system(su, st, sf, rules, prm, stab, case.boundary_data())
        rep = solve(system)
        err = error_norms(rep.x, case, su, st, sf, rules, stab, lay)
        for k in seq:
            seq[k].append((rules.h, getattr(err, {"u_star": "u_star",
                                                  "pT_star": "pT_star",
                                                  "pF_star": "pF_star",
                                                  "pF_L2": "pF_L2"}[k])))
    for k, gate in [("u_star", 1.85), ("pT_star", 1.85), ("pF_star", 1.85),
                    ("pF_L2", 2.5)]:
        assert eoc(seq[k])[-1] >= gate, (k, seq[k])
