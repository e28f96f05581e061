"""Assembly of the discrete three-field Biot system.

Builds the elastic, coupling, mass and Darcy forms with Nitsche terms on the
tagged boundary parts, the facet-based ghost penalties with per-field
scalings, and the right-hand side, into one sparse symmetric indefinite
block system over the (u, p_T, p_F) layout.  Interior cells share a single
reference local matrix per form; cut cells are integrated with their
individual rules; ghost facets of equal orientation share one jump matrix.
Assembly is single-threaded and bitwise deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ConfigurationError
from .geometry import TAG_DIRICHLET, TAG_STRESS, CutRule
from .mesh import ActiveMesh
from .quadrature import gauss_1d, tensor_square
from .spaces import FeSpace, FieldLayout, make_layout, ref_basis


@dataclass(frozen=True)
class PhysicalParams:
    """Material constants; alpha=1, c0=1/lambda and dt=1 are built in."""

    mu: float = 1.0
    lam: float = 1.0
    K: float = 1.0

    def __post_init__(self):
        if self.mu <= 0 or self.lam <= 0:
            raise ConfigurationError("mu and lambda must be positive")
        if self.K < 0:
            raise ConfigurationError(f"hydraulic conductivity K must be >= 0, got {self.K}")

    @property
    def c0(self) -> float:
        return 1.0 / self.lam


@dataclass(frozen=True)
class StabilizationParams:
    """Nitsche penalties and ghost-penalty factors.

    gamma_g_u scales the displacement and fluid-pressure ghost penalties,
    gamma_g_p the total-pressure one; ghost_order caps the highest
    normal-derivative jump in the facet sums (per field it is additionally
    capped by the space degree).
    """

    gamma_u: float = 40.0
    gamma_p: float = 40.0
    gamma_g_u: float = 0.1
    gamma_g_p: float = 0.01
    ghost_order: int = 2

    def __post_init__(self):
        if self.gamma_u <= 0 or self.gamma_p <= 0:
            raise ConfigurationError("Nitsche parameters must be positive")
        if self.gamma_g_u < 0 or self.gamma_g_p < 0:
            raise ConfigurationError("ghost-penalty factors must be >= 0")
        if self.ghost_order < 1:
            raise ConfigurationError("ghost_order must be >= 1")


@dataclass(frozen=True)
class BoundaryData:
    """Problem data: volume sources and traces on the boundary parts.

    Normal-dependent data (g_N, sigma_N) receive (points, normals).
    """

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    u_D: Callable[[np.ndarray], np.ndarray]
    g_N: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sigma_N: Callable[[np.ndarray, np.ndarray], np.ndarray]
    p_FD: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def zero(cls) -> "BoundaryData":
        return cls(
            f=lambda p: np.zeros((len(p), 2)),
            g=lambda p: np.zeros(len(p)),
            u_D=lambda p: np.zeros((len(p), 2)),
            g_N=lambda p, n: np.zeros(len(p)),
            sigma_N=lambda p, n: np.zeros((len(p), 2)),
            p_FD=lambda p: np.zeros(len(p)),
        )


# ---------------------------------------------------------------------------
# small dense building blocks

def _vrows(a0, a1) -> np.ndarray:
    """Interleave per-component rows into vector-dof columns (..., 2*nloc)."""
    n = a0 if isinstance(a0, np.ndarray) else a1
    out = np.zeros((*n.shape[:-1], 2 * n.shape[-1]))
    if isinstance(a0, np.ndarray):
        out[..., 0::2] = a0
    if isinstance(a1, np.ndarray):
        out[..., 1::2] = a1
    return out


def _strain_rows(G: np.ndarray):
    """(e11, e22, e12) rows of the symmetric gradient, each (nq, 2*nloc)."""
    e11 = _vrows(G[:, :, 0], None)
    e22 = _vrows(None, G[:, :, 1])
    e12 = 0.5 * _vrows(G[:, :, 1], G[:, :, 0])
    return e11, e22, e12


def _div_rows(G: np.ndarray) -> np.ndarray:
    return _vrows(G[:, :, 0], G[:, :, 1])


def _qf(rows: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("qa,qb,q->ab", rows, rows, w, optimize=True)


def _pair(rows_r: np.ndarray, rows_c: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("qa,qb,q->ab", rows_r, rows_c, w, optimize=True)


def _strain_local(G: np.ndarray, w: np.ndarray) -> np.ndarray:
    e11, e22, e12 = _strain_rows(G)
    return _qf(e11, w) + _qf(e22, w) + 2.0 * _qf(e12, w)


def _traction_rows(N: np.ndarray, G: np.ndarray, nrm: np.ndarray):
    """(E, Phi): rows of eps(phi)*n and of the vector basis, (nq, 2, 2*nloc)."""
    nq, nloc = N.shape
    Gn = np.einsum("qak,qk->qa", G, nrm)
    E = np.zeros((nq, 2, 2 * nloc))
    E[:, 0, 0::2] = 0.5 * (G[:, :, 0] * nrm[:, 0:1] + Gn)
    E[:, 0, 1::2] = 0.5 * (G[:, :, 0] * nrm[:, 1:2])
    E[:, 1, 0::2] = 0.5 * (G[:, :, 1] * nrm[:, 0:1])
    E[:, 1, 1::2] = 0.5 * (G[:, :, 1] * nrm[:, 1:2] + Gn)
    Phi = np.zeros((nq, 2, 2 * nloc))
    Phi[:, 0, 0::2] = N
    Phi[:, 1, 1::2] = N
    return E, Phi


class _Triplets:
    """COO accumulator for one sparse block."""

    def __init__(self, shape):
        self.shape = shape
        self.r: list[np.ndarray] = []
        self.c: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def add_local(self, rows: np.ndarray, cols: np.ndarray, loc: np.ndarray):
        """Scatter one local matrix; rows (nr,), cols (nc,), loc (nr, nc)."""
        nr, nc = loc.shape
        self.r.append(np.repeat(rows, nc))
        self.c.append(np.tile(cols, nr))
        self.v.append(loc.ravel())

    def add_batch(self, rows: np.ndarray, cols: np.ndarray, loc: np.ndarray):
        """Scatter the same local matrix over many cells.

        rows (ncells, nr), cols (ncells, nc), loc (nr, nc) or (ncells, nr, nc).
        """
        ncells, nr = rows.shape
        nc = cols.shape[1]
        R = np.broadcast_to(rows[:, :, None], (ncells, nr, nc))
        C = np.broadcast_to(cols[:, None, :], (ncells, nr, nc))
        if loc.ndim == 2:
            V = np.broadcast_to(loc[None, :, :], (ncells, nr, nc))
        else:
            V = loc
        self.r.append(R.ravel())
        self.c.append(C.ravel())
        self.v.append(np.ascontiguousarray(V).ravel())

    def tocsr(self) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix(self.shape)
        coo = sp.coo_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
            shape=self.shape,
        )
        return coo.tocsr()


def _interior_data(space: FeSpace, rules: CutRule):
    """Reference tabulation shared by all uncut cells, plus their dof rows."""
    vals, grads = space.eval_basis(int(space.active.active_cells[0]), rules.ref_pts)
    cells = space.active.interior_cells
    sdofs = space.cell_dofs[space._cell_row[cells]]
    return vals, grads, rules.int_wts, sdofs


def _cut_iter(space: FeSpace, rules: CutRule):
    for c in sorted(rules.cut):
        r = rules.cut[c]
        yield c, r, space.cell_dofs[space.row_of_cell(c)]


# ---------------------------------------------------------------------------
# bilinear forms

def assemble_a1(space_u: FeSpace, rules: CutRule, params: PhysicalParams,
                stab: StabilizationParams) -> sp.csr_matrix:
    """Elastic block with Nitsche terms on the Dirichlet boundary part."""
    return sum(_a1_parts(space_u, rules, params, stab).values())


def _a1_parts(space_u, rules, params, stab):
    n = space_u.n_dofs
    mu, h = params.mu, rules.h
    t_strain, t_nit, t_pen = (_Triplets((n, n)) for _ in range(3))

    vals, grads, wts, sdofs = _interior_data(space_u, rules)
    if len(sdofs):
        loc = mu * _strain_local(grads, wts)
        vd = space_u.vector_dofs(sdofs)
        t_strain.add_batch(vd, vd, loc)

    for c, r, sd in _cut_iter(space_u, rules):
        vd = space_u.vector_dofs(sd)
        if len(r.vol_wts):
            _, G = space_u.eval_basis(c, space_u.local_coords(c, r.vol_pts))
            t_strain.add_local(vd, vd, mu * _strain_local(G, r.vol_wts))
        m = r.bnd_tags == TAG_DIRICHLET
        if m.any():
            pts, w, nrm = r.bnd_pts[m], r.bnd_wts[m], r.bnd_normals[m]
            N, G = space_u.eval_basis(c, space_u.local_coords(c, pts))
            E, Phi = _traction_rows(N, G, nrm)
            F = np.einsum("qka,qkb,q->ab", E, Phi, w, optimize=True)
            t_nit.add_local(vd, vd, -mu * (F + F.T))
            Pm = np.einsum("qka,qkb,q->ab", Phi, Phi, w, optimize=True)
            t_pen.add_local(vd, vd, (stab.gamma_u * mu / h) * Pm)

    return {"a1_strain": t_strain.tocsr(), "a1_nitsche": t_nit.tocsr(),
            "a1_penalty": t_pen.tocsr()}


def assemble_b1(space_u: FeSpace, space_t: FeSpace, rules: CutRule) -> sp.csr_matrix:
    """Coupling b1(v, q) = -(div v, q) + (v.n, q) on the Dirichlet part.

    Returned with test-function rows in the total-pressure space, i.e. the
    block that multiplies u in the second equation.
    """
    return sum(_b1_parts(space_u, space_t, rules).values())


def _b1_parts(space_u, space_t, rules):
    nt, nu = space_t.n_dofs, space_u.n_dofs
    t_vol, t_bnd = _Triplets((nt, nu)), _Triplets((nt, nu))

    _, grads, wts, sdofs_u = _interior_data(space_u, rules)
    if len(sdofs_u):
        cells = space_u.active.interior_cells
        sdofs_t = space_t.cell_dofs[space_t._cell_row[cells]]
        psi, _ = space_t.eval_basis(int(cells[0]), rules.ref_pts)
        loc = -_pair(psi, _div_rows(grads), wts)
        t_vol.add_batch(sdofs_t, space_u.vector_dofs(sdofs_u), loc)

    for c, r, sd_u in _cut_iter(space_u, rules):
        sd_t = space_t.dofs_on_cell(c)
        vd = space_u.vector_dofs(sd_u)
        if len(r.vol_wts):
            ploc = space_u.local_coords(c, r.vol_pts)
            _, G = space_u.eval_basis(c, ploc)
            psi, _ = space_t.eval_basis(c, ploc)
            t_vol.add_local(sd_t, vd, -_pair(psi, _div_rows(G), r.vol_wts))
        m = r.bnd_tags == TAG_DIRICHLET
        if m.any():
            pts, w, nrm = r.bnd_pts[m], r.bnd_wts[m], r.bnd_normals[m]
            ploc = space_u.local_coords(c, pts)
            N, _ = space_u.eval_basis(c, ploc)
            psi, _ = space_t.eval_basis(c, ploc)
            vn = _vrows(N * nrm[:, 0:1], N * nrm[:, 1:2])
            t_bnd.add_local(sd_t, vd, _pair(psi, vn, w))

    return {"b1_vol": t_vol.tocsr(), "b1_bnd": t_bnd.tocsr()}


def _scalar_mass(space_r: FeSpace, space_c: FeSpace, rules: CutRule,
                 scale: float) -> sp.csr_matrix:
    # pairs scalar node dofs; vector fields apply it per component
    tri = _Triplets((space_r.n_nodes, space_c.n_nodes))
    cells = space_r.active.interior_cells
    if len(cells):
        Nr, _ = space_r.eval_basis(int(cells[0]), rules.ref_pts)
        Nc, _ = space_c.eval_basis(int(cells[0]), rules.ref_pts)
        loc = scale * _pair(Nr, Nc, rules.int_wts)
        tri.add_batch(space_r.cell_dofs[space_r._cell_row[cells]],
                      space_c.cell_dofs[space_c._cell_row[cells]], loc)
    for c, r, sd_r in _cut_iter(space_r, rules):
        if not len(r.vol_wts):
            continue
        ploc = space_r.local_coords(c, r.vol_pts)
        Nr, _ = space_r.eval_basis(c, ploc)
        Nc, _ = space_c.eval_basis(c, ploc)
        tri.add_local(sd_r, space_c.dofs_on_cell(c), scale * _pair(Nr, Nc, r.vol_wts))
    return tri.tocsr()


def mass_matrix(space_r: FeSpace, space_c: FeSpace, rules: CutRule,
                scale: float = 1.0) -> sp.csr_matrix:
    """Scalar mass pairing over the physical domain (cut cells restricted)."""
    return _scalar_mass(space_r, space_c, rules, scale)


def assemble_a2(space_t: FeSpace, rules: CutRule, params: PhysicalParams) -> sp.csr_matrix:
    """Total-pressure mass, scaled by 1/lambda."""
    return _scalar_mass(space_t, space_t, rules, 1.0 / params.lam)


def assemble_b2(space_f: FeSpace, space_t: FeSpace, rules: CutRule,
                params: PhysicalParams) -> sp.csr_matrix:
    """Fluid/total-pressure mass coupling, scaled by 1/lambda; rows in p_T."""
    return _scalar_mass(space_t, space_f, rules, 1.0 / params.lam)


def assemble_a3(space_f: FeSpace, rules: CutRule, params: PhysicalParams,
                stab: StabilizationParams) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Darcy part with Nitsche terms on the stress part, and the 2/lambda mass.

    Returns (a3_1, a3_2); the full form is their sum.
    """
    parts = _a3_parts(space_f, rules, params, stab)
    a31 = parts["a3_stiff"] + parts["a3_nitsche"] + parts["a3_penalty"]
    return a31, parts["a3_mass"]


def _a3_parts(space_f, rules, params, stab):
    n = space_f.n_dofs
    K, lam, h = params.K, params.lam, rules.h
    t_stiff, t_nit, t_pen = (_Triplets((n, n)) for _ in range(3))

    vals, grads, wts, sdofs = _interior_data(space_f, rules)
    if len(sdofs):
        loc = K * np.einsum("qak,qbk,q->ab", grads, grads, wts, optimize=True)
        t_stiff.add_batch(sdofs, sdofs, loc)

    for c, r, sd in _cut_iter(space_f, rules):
        if len(r.vol_wts):
            _, G = space_f.eval_basis(c, space_f.local_coords(c, r.vol_pts))
            t_stiff.add_local(sd, sd, K * np.einsum("qak,qbk,q->ab", G, G, r.vol_wts,
                                                    optimize=True))
        m = r.bnd_tags == TAG_STRESS
        if m.any():
            pts, w, nrm = r.bnd_pts[m], r.bnd_wts[m], r.bnd_normals[m]
            N, G = space_f.eval_basis(c, space_f.local_coords(c, pts))
            Gn = np.einsum("qak,qk->qa", G, nrm)
            Fl = _pair(Gn, N, w)
            t_nit.add_local(sd, sd, -K * (Fl + Fl.T))
            t_pen.add_local(sd, sd, (stab.gamma_p * K / h) * _pair(N, N, w))

    return {"a3_stiff": t_stiff.tocsr(), "a3_nitsche": t_nit.tocsr(),
            "a3_penalty": t_pen.tocsr(),
            "a3_mass": _scalar_mass(space_f, space_f, rules, 2.0 / params.lam)}


# ---------------------------------------------------------------------------
# ghost penalty

def _ghost_jump_rows(degree: int, axis: int, j: int):
    """Rows of the order-j normal-derivative jump on one facet.

    Returns (rows (nq, 2*nloc) over [plus-cell, minus-cell] dofs, weights).
    The 1/j! multinomial normalization and all h powers of the penalty
    weight h^(2j-1) are folded in; they cancel exactly on the uniform mesh,
    so the rows are resolution-free.
    """
    basis = ref_basis(degree)
    t, w = gauss_1d(2 * degree)
    tan = basis.eval_1d(t)
    cj = 1.0 / math.factorial(j)
    d0 = basis.eval_1d(np.array([0.0]), j)[0]
    d1 = basis.eval_1d(np.array([1.0]), j)[0]
    if axis == 0:
        jp = (tan[:, :, None] * d0[None, None, :]).reshape(len(t), -1)
        jm = (tan[:, :, None] * d1[None, None, :]).reshape(len(t), -1)
    else:
        jp = (d0[None, :, None] * tan[:, None, :]).reshape(len(t), -1)
        jm = (d1[None, :, None] * tan[:, None, :]).reshape(len(t), -1)
    return cj * np.concatenate([jp, -jm], axis=1), w


def _ghost_facet_matrix(degree: int, axis: int, ghost_order: int) -> np.ndarray:
    """Jump matrix of one ghost facet over [plus-cell, minus-cell] dofs."""
    nloc = ref_basis(degree).n_basis
    G = np.zeros((2 * nloc, 2 * nloc))
    for j in range(1, ghost_order + 1):
        rows, w = _ghost_jump_rows(degree, axis, j)
        G += _qf(rows, w)
    return G


def assemble_ghost(space: FeSpace, active: ActiveMesh, scaling: float,
                   ghost_order: int, gamma: float) -> sp.csr_matrix:
    """Facet ghost penalty over the ghost set, scaled by `scaling * gamma`.

    Penalizes squared jumps of normal derivatives of orders 1..ghost_order
    with weights h^(2j-1) per order j.
    """
    if active is not space.active:
        raise AssemblyError("space and active mesh do not match")
    if ghost_order > space.degree:
        raise ConfigurationError(
            f"ghost_order {ghost_order} exceeds space degree {space.degree}; "
            "higher normal-derivative jumps vanish identically"
        )
    mesh = active.mesh
    n = space.n_dofs
    tri = _Triplets((n, n))
    ghost = active.ghost_facets
    if len(ghost) == 0 or gamma == 0.0 or scaling == 0.0:
        return tri.tocsr()

    fc = mesh.facet_cells[ghost]
    fax = mesh.facet_axis[ghost]
    for axis in (0, 1):
        sel = fax == axis
        if not sel.any():
            continue
        G = gamma * scaling * _ghost_facet_matrix(space.degree, axis, ghost_order)
        rows_p = space._cell_row[fc[sel, 1]]
        rows_m = space._cell_row[fc[sel, 0]]
        if np.any(rows_p < 0) or np.any(rows_m < 0):
            raise AssemblyError("ghost facet with inactive neighbor")
        combined = np.concatenate(
            [space.cell_dofs[rows_p], space.cell_dofs[rows_m]], axis=1)
        for comp in range(space.ncomp):
            dofs = combined if space.ncomp == 1 else 2 * combined + comp
            tri.add_batch(dofs, dofs, G)
    return tri.tocsr()


def ghost_seminorm(space: FeSpace, active: ActiveMesh, v: np.ndarray,
                   ghost_order: int, gamma: float = 1.0,
                   scaling: float = 1.0) -> float:
    """|v|_g evaluated through the facet jumps directly.

    Numerically exact annihilation for globally smooth fields: jumps cancel
    before squaring, unlike the quadratic form of the assembled matrix.
    """
    if ghost_order > space.degree:
        raise ConfigurationError(
            f"ghost_order {ghost_order} exceeds space degree {space.degree}")
    mesh = active.mesh
    ghost = active.ghost_facets
    if len(ghost) == 0:
        return 0.0
    fc = mesh.facet_cells[ghost]
    fax = mesh.facet_axis[ghost]
    acc = 0.0
    for axis in (0, 1):
        sel = fax == axis
        if not sel.any():
            continue
        combined = np.concatenate(
            [space.cell_dofs[space._cell_row[fc[sel, 1]]],
             space.cell_dofs[space._cell_row[fc[sel, 0]]]], axis=1)
        for j in range(1, ghost_order + 1):
            rows, w = _ghost_jump_rows(space.degree, axis, j)
            for comp in range(space.ncomp):
                dofs = combined if space.ncomp == 1 else 2 * combined + comp
                jumps = v[dofs] @ rows.T  # (nfacets, nq)
                acc += float(np.einsum("fq,q->", jumps ** 2, w))
    return math.sqrt(gamma * scaling * acc)


# ---------------------------------------------------------------------------
# right-hand side

def assemble_rhs(space_u: FeSpace, space_t: FeSpace, space_f: FeSpace,
                 rules: CutRule, params: PhysicalParams, stab: StabilizationParams,
                 bdata: BoundaryData) -> np.ndarray:
    """Load vector (L1, L2, L3) stacked over the field layout."""
    layout = make_layout(space_u, space_t, space_f)
    rhs = np.zeros(layout.total)
    mu, K, h = params.mu, params.K, rules.h
    off_t, off_f = layout.offset("pT"), layout.offset("pF")

    # volume sources over interior cells, batched
    cells = space_u.active.interior_cells
    if len(cells):
        Nu, _ = space_u.eval_basis(int(cells[0]), rules.ref_pts)
        Nf, _ = space_f.eval_basis(int(cells[0]), rules.ref_pts)
        origins = space_u.active.mesh.cell_origin(cells)
        pts = (origins[:, None, :] + rules.h * rules.ref_pts[None, :, :]).reshape(-1, 2)
        fv = bdata.f(pts).reshape(len(cells), -1, 2)
        gv = bdata.g(pts).reshape(len(cells), -1)
        w = rules.int_wts
        contrib_u = np.einsum("cq,q,qa->ca", fv[:, :, 0], w, Nu, optimize=True)
        contrib_v = np.einsum("cq,q,qa->ca", fv[:, :, 1], w, Nu, optimize=True)
        vd = space_u.vector_dofs(space_u.cell_dofs[space_u._cell_row[cells]])
        np.add.at(rhs, vd[:, 0::2].ravel(), contrib_u.ravel())
        np.add.at(rhs, vd[:, 1::2].ravel(), contrib_v.ravel())
        contrib_g = np.einsum("cq,q,qa->ca", gv, w, Nf, optimize=True)
        fd = space_f.cell_dofs[space_f._cell_row[cells]]
        np.add.at(rhs, off_f + fd.ravel(), contrib_g.ravel())

    for c, r, sd_u in _cut_iter(space_u, rules):
        vd = space_u.vector_dofs(sd_u)
        sd_t = space_t.dofs_on_cell(c)
        sd_f = space_f.dofs_on_cell(c)
        if len(r.vol_wts):
            ploc = space_u.local_coords(c, r.vol_pts)
            Nu, _ = space_u.eval_basis(c, ploc)
            Nf, _ = space_f.eval_basis(c, ploc)
            fv = bdata.f(r.vol_pts)
            gv = bdata.g(r.vol_pts)
            np.add.at(rhs, vd[0::2], np.einsum("q,q,qa->a", fv[:, 0], r.vol_wts, Nu))
            np.add.at(rhs, vd[1::2], np.einsum("q,q,qa->a", fv[:, 1], r.vol_wts, Nu))
            np.add.at(rhs, off_f + sd_f, np.einsum("q,q,qa->a", gv, r.vol_wts, Nf))

        md = r.bnd_tags == TAG_DIRICHLET
        if md.any():
            pts, w, nrm = r.bnd_pts[md], r.bnd_wts[md], r.bnd_normals[md]
            ploc = space_u.local_coords(c, pts)
            Nu, Gu = space_u.eval_basis(c, ploc)
            E, Phi = _traction_rows(Nu, Gu, nrm)
            uD = bdata.u_D(pts)
            # L1: -(u_D, mu eps(v) n) + gamma_u mu / h (u_D, v)
            np.add.at(rhs, vd, -mu * np.einsum("qk,qka,q->a", uD, E, w, optimize=True))
            np.add.at(rhs, vd, (stab.gamma_u * mu / h)
                      * np.einsum("qk,qka,q->a", uD, Phi, w, optimize=True))
            # L2: (u_D . n, q_T)
            psi, _ = space_t.eval_basis(c, ploc)
            udn = np.einsum("qk,qk->q", uD, nrm)
            np.add.at(rhs, off_t + sd_t, np.einsum("q,q,qa->a", udn, w, psi))
            # L3: -(g_N, q_F)
            Nf, _ = space_f.eval_basis(c, ploc)
            gN = bdata.g_N(pts, nrm)
            np.add.at(rhs, off_f + sd_f, -np.einsum("q,q,qa->a", gN, w, Nf))

        ms = r.bnd_tags == TAG_STRESS
        if ms.any():
            pts, w, nrm = r.bnd_pts[ms], r.bnd_wts[ms], r.bnd_normals[ms]
            ploc = space_u.local_coords(c, pts)
            Nu, _ = space_u.eval_basis(c, ploc)
            sN = bdata.sigma_N(pts, nrm)
            np.add.at(rhs, vd[0::2], np.einsum("q,q,qa->a", sN[:, 0], w, Nu))
            np.add.at(rhs, vd[1::2], np.einsum("q,q,qa->a", sN[:, 1], w, Nu))
            # L3 stress terms: +(p_FD, K grad q . n) - gamma_p K / h (p_FD, q)
            Nf, Gf = space_f.eval_basis(c, ploc)
            Gn = np.einsum("qak,qk->qa", Gf, nrm)
            pD = bdata.p_FD(pts)
            np.add.at(rhs, off_f + sd_f, K * np.einsum("q,q,qa->a", pD, w, Gn))
            np.add.at(rhs, off_f + sd_f, -(stab.gamma_p * K / h)
                      * np.einsum("q,q,qa->a", pD, w, Nf))
    return rhs


# ---------------------------------------------------------------------------
# system composition

@dataclass
class BlockSystem:
    """Assembled sparse symmetric system with per-form bookkeeping.

    `parts` maps a term name to (row_field, col_field, sign, block) where the
    block is the form in its natural orientation; off-diagonal blocks also
    enter transposed at the mirrored position.  `matrix` is their signed sum.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    layout: FieldLayout
    h: float
    params: PhysicalParams
    stab: StabilizationParams
    parts: dict = field(default_factory=dict)

    def form(self, prefix: str) -> sp.csr_matrix:
        """Sum of the natural blocks whose name starts with `prefix`."""
        picked = [blk for name, (_, _, _, blk) in self.parts.items()
                  if name.startswith(prefix)]
        if not picked:
            raise KeyError(f"no term named {prefix}*")
        return sum(picked)

    def symmetry_defect(self) -> float:
        d = self.matrix - self.matrix.T
        amax = np.abs(self.matrix.data).max() if self.matrix.nnz else 1.0
        return (np.abs(d.data).max() / amax) if d.nnz else 0.0

    def block_nnz(self, row_field: str, col_field: str) -> int:
        sl = {"u": self.layout.s_u, "pT": self.layout.s_t, "pF": self.layout.s_f}
        blk = self.matrix[sl[row_field], :][:, sl[col_field]]
        blk.eliminate_zeros()
        return blk.nnz


_PLACEMENT = {
    "a1_strain": ("u", "u", 1.0), "a1_nitsche": ("u", "u", 1.0), "a1_penalty": ("u", "u", 1.0),
    "b1_vol": ("pT", "u", 1.0), "b1_bnd": ("pT", "u", 1.0),
    "a2_mass": ("pT", "pT", -1.0),
    "b2_mass": ("pT", "pF", 1.0),
    "a3_stiff": ("pF", "pF", -1.0), "a3_nitsche": ("pF", "pF", -1.0),
    "a3_penalty": ("pF", "pF", -1.0), "a3_mass": ("pF", "pF", -1.0),
    "g1": ("u", "u", 1.0), "g2": ("pT", "pT", -1.0),
    "g3_1": ("pF", "pF", -1.0), "g3_2": ("pF", "pF", -1.0),
}


def assemble_system(space_u: FeSpace, space_t: FeSpace, space_f: FeSpace,
                    rules: CutRule, params: PhysicalParams, stab: StabilizationParams,
                    bdata: BoundaryData | None = None,
                    include_ghost: bool = True) -> BlockSystem:
    """Assemble the full block system.

    Row/column blocks over (u, p_T, p_F):
        [[A1+g1,  B1^T,          0        ],
         [B1,    -(A2+g2),       B2       ],
         [0,      B2^T,         -(A3+g3)  ]]
    Dropping `include_ghost` removes exactly the ghost-penalty terms.
    """
    if not (space_u.active is space_t.active is space_f.active):
        raise AssemblyError("spaces must share one active mesh")
    layout = make_layout(space_u, space_t, space_f)
    active = space_u.active

    parts: dict[str, tuple] = {}

    def put(name, block):
        rf, cf, sign = _PLACEMENT[name]
        parts[name] = (rf, cf, sign, block)

    for name, blk in _a1_parts(space_u, rules, params, stab).items():
        put(name, blk)
    for name, blk in _b1_parts(space_u, space_t, rules).items():
        put(name, blk)
    put("a2_mass", assemble_a2(space_t, rules, params))
    put("b2_mass", assemble_b2(space_f, space_t, rules, params))
    for name, blk in _a3_parts(space_f, rules, params, stab).items():
        put(name, blk)

    if include_ghost:
        go_u = min(space_u.degree, stab.ghost_order)
        go_t = min(space_t.degree, stab.ghost_order)
        go_f = min(space_f.degree, stab.ghost_order)
        h = rules.h
        put("g1", assemble_ghost(space_u, active, params.mu, go_u, stab.gamma_g_u))
        put("g2", assemble_ghost(space_t, active, h * h, go_t, stab.gamma_g_p))
        g3_unit = assemble_ghost(space_f, active, 1.0, go_f, stab.gamma_g_u)
        put("g3_1", params.K * g3_unit)
        put("g3_2", (1.0 / params.lam) * g3_unit)

    matrix = compose_matrix(parts, layout)

    if bdata is None:
        rhs = np.zeros(layout.total)
    else:
        rhs = assemble_rhs(space_u, space_t, space_f, rules, params, stab, bdata)

    return BlockSystem(matrix=matrix, rhs=rhs, layout=layout, h=rules.h,
                       params=params, stab=stab, parts=parts)


def compose_matrix(parts: dict, layout: FieldLayout) -> sp.csr_matrix:
    """Signed sum of placed blocks; off-diagonal forms enter twice (mirrored)."""
    offs = {"u": 0, "pT": layout.n_u, "pF": layout.n_u + layout.n_t}
    rr, cc, vv = [], [], []
    for name in sorted(parts):
        rf, cf, sign, blk = parts[name]
        coo = blk.tocoo()
        rr.append(coo.row + offs[rf])
        cc.append(coo.col + offs[cf])
        vv.append(sign * coo.data)
        if rf != cf:
            rr.append(coo.col + offs[cf])
            cc.append(coo.row + offs[rf])
            vv.append(sign * coo.data)
    return sp.coo_matrix(
        (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))),
        shape=(layout.total, layout.total),
    ).tocsr()


def without_ghost(system: BlockSystem) -> BlockSystem:
    """The same system with every ghost-penalty term removed.

    Shares the right-hand side (ghost terms never touch it); used by the
    cut-translation sweep to run the unstabilized arm without reassembly.
    """
    kept = {k: v for k, v in system.parts.items() if not k.startswith("g")}
    return BlockSystem(matrix=compose_matrix(kept, system.layout), rhs=system.rhs,
                       layout=system.layout, h=system.h, params=system.params,
                       stab=system.stab, parts=kept)


_PARAM_SCALE = {
    "a1_strain": lambda p: p.mu, "a1_nitsche": lambda p: p.mu, "a1_penalty": lambda p: p.mu,
    "b1_vol": lambda p: 1.0, "b1_bnd": lambda p: 1.0,
    "a2_mass": lambda p: 1.0 / p.lam, "b2_mass": lambda p: 1.0 / p.lam,
    "a3_stiff": lambda p: p.K, "a3_nitsche": lambda p: p.K, "a3_penalty": lambda p: p.K,
    "a3_mass": lambda p: 1.0 / p.lam,
    "g1": lambda p: p.mu, "g2": lambda p: 1.0, "g3_1": lambda p: p.K,
    "g3_2": lambda p: 1.0 / p.lam,
}


def with_params(system: BlockSystem, params: PhysicalParams,
                rhs: np.ndarray | None = None) -> BlockSystem:
    """Rescale a system assembled at unit parameters to new (mu, lambda, K).

    Every material parameter enters each term linearly, so blocks rescale
    exactly; the caller must have assembled at mu = lambda = K = 1.
    """
    base = system.params
    if (base.mu, base.lam, base.K) != (1.0, 1.0, 1.0):
        raise AssemblyError("parameter rescaling requires a unit-parameter assembly")
    parts = {}
    for name, (rf, cf, sign, blk) in system.parts.items():
        s = _PARAM_SCALE[name](params)
        parts[name] = (rf, cf, sign, blk if s == 1.0 else s * blk)
    return BlockSystem(matrix=compose_matrix(parts, system.layout),
                       rhs=system.rhs if rhs is None else rhs,
                       layout=system.layout, h=system.h, params=params,
                       stab=system.stab, parts=parts)


# ---------------------------------------------------------------------------
# helpers for property tests and norms over whole background cells

def full_cell_matrix(space: FeSpace, kind: str = "mass",
                     cells: np.ndarray | None = None,
                     order: int | None = None) -> sp.csr_matrix:
    """Mass or stiffness over entire background cells (no cut restriction)."""
    if order is None:
        order = 2 * space.degree + 1
    ref, w = tensor_square(order)
    h = space.h
    cells = space.active.active_cells if cells is None else np.asarray(cells)
    vals, grads = space.eval_basis(int(space.active.active_cells[0]), ref)
    wts = w * h * h
    if kind == "mass":
        loc = _pair(vals, vals, wts)
    elif kind == "stiff":
        loc = np.einsum("qak,qbk,q->ab", grads, grads, wts, optimize=True)
    else:
        raise ConfigurationError(f"unknown kind {kind!r}")
    tri = _Triplets((space.n_dofs, space.n_dofs))
    sdofs = space.cell_dofs[space._cell_row[cells]]
    if space.ncomp == 1:
        tri.add_batch(sdofs, sdofs, loc)
    else:
        for comp in range(2):
            d = 2 * sdofs + comp
            tri.add_batch(d, d, loc)
    return tri.tocsr()


def dump_matrix(system: BlockSystem, path) -> None:
    """MatrixMarket coordinate dump for external inspection."""
    from scipy.io import mmwrite

    mmwrite(path, system.matrix.tocoo())
