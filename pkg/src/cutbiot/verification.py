"""Manufactured solutions, discrete error norms, and consistency checks.

The trigonometric case reproduces the 2D benchmark fields; a second variant
adds a quadratic bulge to the first displacement component so that the
divergence (and hence the total pressure) carries an explicit lambda
dependence.  All derivatives are closed forms; the source terms f and g are
written out independently so the strong-form residual genuinely checks the
hand-coded calculus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .forms import BlockSystem, BoundaryData, PhysicalParams, StabilizationParams
from .geometry import TAG_DIRICHLET, TAG_STRESS, CutRule
from .spaces import FeSpace, FieldLayout

PI = math.pi


class ManufacturedCase:
    """Analytic solution triple with derived data for the one-step system."""

    def __init__(self, params: PhysicalParams, bulge: bool = False, name: str = "trig"):
        self.params = params
        self.bulge = bulge
        self.name = name

    # displacement -----------------------------------------------------
    def u(self, p):
        x, y = p[:, 0], p[:, 1]
        u0 = np.cos(PI * y)
        if self.bulge:
            u0 = u0 + x * x
        return np.column_stack([u0, np.sin(PI * x)])

    def grad_u(self, p):
        x, y = p[:, 0], p[:, 1]
        g = np.zeros((len(p), 2, 2))
        g[:, 0, 1] = -PI * np.sin(PI * y)
        g[:, 1, 0] = PI * np.cos(PI * x)
        if self.bulge:
            g[:, 0, 0] = 2.0 * x
        return g

    def eps_u(self, p):
        g = self.grad_u(p)
        return 0.5 * (g + np.transpose(g, (0, 2, 1)))

    def div_u(self, p):
        return 2.0 * p[:, 0] if self.bulge else np.zeros(len(p))

    def div_eps_u(self, p):
        x, y = p[:, 0], p[:, 1]
        r = np.column_stack([-0.5 * PI * PI * np.cos(PI * y),
                             -0.5 * PI * PI * np.sin(PI * x)])
        if self.bulge:
            r[:, 0] += 2.0
        return r

    # pressures ----------------------------------------------------------
    def p_F(self, p):
        return np.sin(PI * p[:, 0]) * np.sin(PI * p[:, 1])

    def grad_p_F(self, p):
        x, y = p[:, 0], p[:, 1]
        return PI * np.column_stack([np.cos(PI * x) * np.sin(PI * y),
                                     np.sin(PI * x) * np.cos(PI * y)])

    def lap_p_F(self, p):
        return -2.0 * PI * PI * self.p_F(p)

    def p_T(self, p):
        return self.p_F(p) - self.params.lam * self.div_u(p)

    def grad_p_T(self, p):
        g = self.grad_p_F(p)
        if self.bulge:
            g = g.copy()
            g[:, 0] -= 2.0 * self.params.lam
        return g

    # sources, written out explicitly ------------------------------------
    def f(self, p):
        mu, lam = self.params.mu, self.params.lam
        x, y = p[:, 0], p[:, 1]
        f0 = 0.5 * mu * PI * PI * np.cos(PI * y) + PI * np.cos(PI * x) * np.sin(PI * y)
        f1 = 0.5 * mu * PI * PI * np.sin(PI * x) + PI * np.sin(PI * x) * np.cos(PI * y)
        if self.bulge:
            f0 = f0 - 2.0 * mu - 2.0 * lam
        return np.column_stack([f0, f1])

    def g(self, p):
        lam, K = self.params.lam, self.params.K
        pf = np.sin(PI * p[:, 0]) * np.sin(PI * p[:, 1])
        out = -(1.0 / lam + 2.0 * PI * PI * K) * pf
        if self.bulge:
            out = out - 2.0 * p[:, 0]
        return out

    # traces and data ------------------------------------------------------
    def sigma_N(self, p, normals):
        t = self.params.mu * self.eps_u(p) - self.p_T(p)[:, None, None] * np.eye(2)
        return np.einsum("nij,nj->ni", t, normals)

    def g_N(self, p, normals):
        return self.params.K * np.einsum("nk,nk->n", self.grad_p_F(p), normals)

    def boundary_data(self) -> BoundaryData:
        return BoundaryData(f=self.f, g=self.g, u_D=self.u, g_N=self.g_N,
                            sigma_N=self.sigma_N, p_FD=self.p_F)

    def strong_residuals(self, p):
        """Pointwise residuals of the three strong equations; ~0 by calculus."""
        prm = self.params
        r1 = -prm.mu * self.div_eps_u(p) + self.grad_p_T(p) - self.f(p)
        r2 = -self.div_u(p) - self.p_T(p) / prm.lam + self.p_F(p) / prm.lam
        r3 = (self.p_T(p) - 2.0 * self.p_F(p)) / prm.lam \
            + prm.K * self.lap_p_F(p) - self.g(p)
        return r1, r2, r3


CASE_NAMES = ("trig", "trig_div")


def make_case(params: PhysicalParams, name: str = "trig") -> ManufacturedCase:
    """Manufactured cases: `trig` (divergence-free) and `trig_div` (lambda-sensitive)."""
    if name == "trig":
        return ManufacturedCase(params, bulge=False, name=name)
    if name == "trig_div":
        return ManufacturedCase(params, bulge=True, name=name)
    raise ConfigurationError(f"unknown manufactured case {name!r}")


# ---------------------------------------------------------------------------
# error norms

@dataclass(frozen=True)
class ErrorReport:
    """Discrete-norm, starred-norm and L2 errors for one solve."""

    h: float
    lam: float
    K: float
    u_V: float
    u_star: float
    u_L2: float
    pT_L2: float
    pT_star: float
    pF_F: float
    pF_star: float
    pF_L2: float

    def as_dict(self) -> dict:
        return {
            "err_u_star": self.u_star, "err_u_L2": self.u_L2,
            "err_pT_star": self.pT_star, "err_pF_star": self.pF_star,
            "err_pF_L2": self.pF_L2,
        }


def _field_coeffs(x: np.ndarray, layout: FieldLayout):
    return x[layout.s_u], x[layout.s_t], x[layout.s_f]


def error_norms(x: np.ndarray, case: ManufacturedCase, space_u: FeSpace,
                space_t: FeSpace, space_f: FeSpace, rules: CutRule,
                stab: StabilizationParams, layout: FieldLayout) -> ErrorReport:
    """Quadrature evaluation of all error norms against the analytic fields."""
    if space_u.active is not space_t.active or space_u.active is not space_f.active:
        raise ConfigurationError("spaces for error evaluation must share a mesh")
    prm = case.params
    h = rules.h
    xu, xt, xf = _field_coeffs(x, layout)

    acc = dict(strain=0.0, uL2=0.0, TL2=0.0, gradF=0.0, FL2=0.0,
               pen_u=0.0, flux_u=0.0, T_bnd=0.0, pen_F=0.0, flux_F=0.0)

    active = space_u.active
    cells = active.interior_cells
    if len(cells):
        Nu, Gu = space_u.eval_basis(int(cells[0]), rules.ref_pts)
        Nt, _ = space_t.eval_basis(int(cells[0]), rules.ref_pts)
        Nf, Gf = space_f.eval_basis(int(cells[0]), rules.ref_pts)
        origins = active.mesh.cell_origin(cells)
        pts = (origins[:, None, :] + h * rules.ref_pts[None, :, :]).reshape(-1, 2)
        w = rules.int_wts
        cu = space_u.vector_dofs(space_u.cell_dofs[space_u._cell_row[cells]])
        ct = space_t.cell_dofs[space_t._cell_row[cells]]
        cf = space_f.cell_dofs[space_f._cell_row[cells]]
        U0, U1 = xu[cu[:, 0::2]], xu[cu[:, 1::2]]
        nq = len(w)
        uh = np.stack([np.einsum("qa,ca->cq", Nu, U0),
                       np.einsum("qa,ca->cq", Nu, U1)], axis=-1)
        gh0 = np.einsum("qak,ca->cqk", Gu, U0)
        gh1 = np.einsum("qak,ca->cqk", Gu, U1)
        e_u = case.u(pts).reshape(len(cells), nq, 2) - uh
        ge = case.grad_u(pts).reshape(len(cells), nq, 2, 2)
        ge[:, :, 0, :] -= gh0
        ge[:, :, 1, :] -= gh1
        eps = 0.5 * (ge + np.transpose(ge, (0, 1, 3, 2)))
        dens = eps[:, :, 0, 0] ** 2 + eps[:, :, 1, 1] ** 2 + 2.0 * eps[:, :, 0, 1] ** 2
        acc["strain"] += float(np.einsum("cq,q->", dens, w))
        acc["uL2"] += float(np.einsum("cq,q->", (e_u ** 2).sum(-1), w))
        th = np.einsum("qa,ca->cq", Nt, xt[ct])
        e_t = case.p_T(pts).reshape(len(cells), nq) - th
        acc["TL2"] += float(np.einsum("cq,q->", e_t ** 2, w))
        fh = np.einsum("qa,ca->cq", Nf, xf[cf])
        e_f = case.p_F(pts).reshape(len(cells), nq) - fh
        acc["FL2"] += float(np.einsum("cq,q->", e_f ** 2, w))
        gfh = np.einsum("qak,ca->cqk", Gf, xf[cf])
        ge_f = case.grad_p_F(pts).reshape(len(cells), nq, 2) - gfh
        acc["gradF"] += float(np.einsum("cqk,q->", ge_f ** 2, w))

    for c in sorted(rules.cut):
        r = rules.cut[c]
        du = space_u.vector_dofs(space_u.dofs_on_cell(c))
        dt = space_t.dofs_on_cell(c)
        df = space_f.dofs_on_cell(c)
        if len(r.vol_wts):
            ploc = space_u.local_coords(c, r.vol_pts)
            Nu, Gu = space_u.eval_basis(c, ploc)
            Nt, _ = space_t.eval_basis(c, ploc)
            Nf, Gf = space_f.eval_basis(c, ploc)
            w = r.vol_wts
            e_u = case.u(r.vol_pts) - np.column_stack([Nu @ xu[du[0::2]], Nu @ xu[du[1::2]]])
            ge = case.grad_u(r.vol_pts)
            ge[:, 0, :] -= np.einsum("qak,a->qk", Gu, xu[du[0::2]])
            ge[:, 1, :] -= np.einsum("qak,a->qk", Gu, xu[du[1::2]])
            eps = 0.5 * (ge + np.transpose(ge, (0, 2, 1)))
            dens = eps[:, 0, 0] ** 2 + eps[:, 1, 1] ** 2 + 2.0 * eps[:, 0, 1] ** 2
            acc["strain"] += float(dens @ w)
            acc["uL2"] += float(((e_u ** 2).sum(-1)) @ w)
            e_t = case.p_T(r.vol_pts) - Nt @ xt[dt]
            acc["TL2"] += float((e_t ** 2) @ w)
            e_f = case.p_F(r.vol_pts) - Nf @ xf[df]
            acc["FL2"] += float((e_f ** 2) @ w)
            ge_f = case.grad_p_F(r.vol_pts) - np.einsum("qak,a->qk", Gf, xf[df])
            acc["gradF"] += float(((ge_f ** 2).sum(-1)) @ w)

        for tag in (TAG_DIRICHLET, TAG_STRESS):
            m = r.bnd_tags == tag
            if not m.any():
                continue
            pts, w, nrm = r.bnd_pts[m], r.bnd_wts[m], r.bnd_normals[m]
            ploc = space_u.local_coords(c, pts)
            if tag == TAG_DIRICHLET:
                Nu, Gu = space_u.eval_basis(c, ploc)
                e_u = case.u(pts) - np.column_stack([Nu @ xu[du[0::2]], Nu @ xu[du[1::2]]])
                acc["pen_u"] += float(((e_u ** 2).sum(-1)) @ w)
                ge = case.grad_u(pts)
                ge[:, 0, :] -= np.einsum("qak,a->qk", Gu, xu[du[0::2]])
                ge[:, 1, :] -= np.einsum("qak,a->qk", Gu, xu[du[1::2]])
                nde = np.einsum("qik,qk->qi", ge, nrm)
                acc["flux_u"] += float(((nde ** 2).sum(-1)) @ w)
                Nt, _ = space_t.eval_basis(c, ploc)
                e_t = case.p_T(pts) - Nt @ xt[dt]
                acc["T_bnd"] += float((e_t ** 2) @ w)
            else:
                Nf, Gf = space_f.eval_basis(c, ploc)
                e_f = case.p_F(pts) - Nf @ xf[df]
                acc["pen_F"] += float((e_f ** 2) @ w)
                ge_f = case.grad_p_F(pts) - np.einsum("qak,a->qk", Gf, xf[df])
                nde = np.einsum("qk,qk->q", ge_f, nrm)
                acc["flux_F"] += float((nde ** 2) @ w)

    mu, lam, K = prm.mu, prm.lam, prm.K
    uV2 = mu * acc["strain"] + stab.gamma_u * mu / h * acc["pen_u"]
    u_star2 = uV2 + mu * h * acc["flux_u"]
    pT_star2 = acc["TL2"] + h * acc["T_bnd"]
    pF_F2 = K * acc["gradF"] + stab.gamma_p * K / h * acc["pen_F"] + acc["FL2"] / lam
    pF_star2 = pF_F2 + K * h * acc["flux_F"]
    return ErrorReport(
        h=h, lam=lam, K=K,
        u_V=math.sqrt(uV2), u_star=math.sqrt(u_star2), u_L2=math.sqrt(acc["uL2"]),
        pT_L2=math.sqrt(acc["TL2"]), pT_star=math.sqrt(pT_star2),
        pF_F=math.sqrt(pF_F2), pF_star=math.sqrt(pF_star2),
        pF_L2=math.sqrt(acc["FL2"]),
    )


def eoc(levels: list[tuple[float, float]]) -> list[float]:
    """Experimental orders of convergence for a refinement series.

    Takes (h, E) pairs with strictly decreasing h and returns one rate per
    step, log(E_prev/E_next)/log(h_prev/h_next).  A zero error makes the
    rate undefined (saturated); it is reported as nan.
    """
    if len(levels) < 2:
        raise ConfigurationError("need at least two levels to compute EOC")
    hs = [lv[0] for lv in levels]
    if any(h2 >= h1 for h1, h2 in zip(hs, hs[1:])):
        raise ConfigurationError("mesh sizes must be strictly decreasing")
    rates = []
    for (h1, e1), (h2, e2) in zip(levels, levels[1:]):
        if e1 <= 0.0 or e2 <= 0.0:
            rates.append(float("nan"))
        else:
            rates.append(math.log(e1 / e2) / math.log(h1 / h2))
    return rates


def galerkin_residual(system: BlockSystem, x: np.ndarray) -> float:
    """Max-norm residual of the assembled equations at the discrete solution.

    Consistency check behind the weak orthogonality property: the residual
    must vanish to solver tolerance and be independent of the Nitsche
    penalties.
    """
    return float(np.abs(system.matrix @ x - system.rhs).max())


def eval_fields(x: np.ndarray, space_u: FeSpace, space_t: FeSpace, space_f: FeSpace,
                layout: FieldLayout, c: int, pts_local: np.ndarray):
    """Discrete (u, p_T, p_F) at local points of one active cell."""
    xu, xt, xf = _field_coeffs(x, layout)
    du = space_u.vector_dofs(space_u.dofs_on_cell(c))
    Nu, _ = space_u.eval_basis(c, pts_local)
    Nt, _ = space_t.eval_basis(c, pts_local)
    Nf, _ = space_f.eval_basis(c, pts_local)
    u = np.column_stack([Nu @ xu[du[0::2]], Nu @ xu[du[1::2]]])
    pT = Nt @ xt[space_t.dofs_on_cell(c)]
    pF = Nf @ xf[space_f.dofs_on_cell(c)]
    return u, pT, pF
