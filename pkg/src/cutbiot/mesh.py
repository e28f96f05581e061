"""Structured square background mesh, cell classification, ghost facets.

The background mesh is a uniform grid of axis-aligned square cells over a
square box.  Classification against an implicit domain probes a uniform
point grid per cell and refines the verdict for candidate cut cells with the
marching-triangles clip from the geometry module, demoting slivers whose
inside area is negligible.  Mesh objects are immutable after construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError
from .geometry import SLIVER_FRACTION, LevelSetDomain, clip_cell

logger = logging.getLogger(__name__)


class CellTag(IntEnum):
    OUTSIDE = 0
    INTERIOR = 1
    CUT = 2


@dataclass(frozen=True)
class MeshConfig:
    """Box corners and resolution; the unit used by cut-translation sweeps."""

    box_lo: tuple[float, float]
    box_hi: tuple[float, float]
    n: int

    @property
    def h(self) -> float:
        return (self.box_hi[0] - self.box_lo[0]) / self.n


def translate_box(cfg: MeshConfig, delta: float) -> MeshConfig:
    """Shift the box by delta*h along both axes; the geometry stays fixed."""
    if delta < 0:
        raise ConfigurationError(f"translation delta must be >= 0, got {delta}")
    s = delta * cfg.h
    return replace(
        cfg,
        box_lo=(cfg.box_lo[0] + s, cfg.box_lo[1] + s),
        box_hi=(cfg.box_hi[0] + s, cfg.box_hi[1] + s),
    )


class BackgroundMesh:
    """Uniform n-by-n grid of square cells with facet adjacency.

    Cells are numbered ix*n + iy (x-major); facets know their normal axis,
    their two neighbor cells (-1 outside the box) and their lower endpoint.
    """

    def __init__(self, box_lo, box_hi, n: int):
        box_lo = np.asarray(box_lo, dtype=float)
        box_hi = np.asarray(box_hi, dtype=float)
        if not np.all(box_hi > box_lo):
            raise ConfigurationError("box_hi must exceed box_lo componentwise")
        ext = box_hi - box_lo
        if abs(ext[0] - ext[1]) > 1e-12 * max(ext):
            raise ConfigurationError(f"box must be square, got extents {ext.tolist()}")
        if n < 2:
            raise ConfigurationError(f"need at least 2 cells per axis, got {n}")
        self.box_lo = box_lo
        self.box_hi = box_hi
        self.n = int(n)
        self.h = float(ext[0]) / n
        self.n_cells = n * n
        self._build_facets()

    def _build_facets(self):
        n, h = self.n, self.h
        # vertical facets (normal = x): grid line ix in 0..n, row iy in 0..n-1
        ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="ij")
        ix, iy = ix.ravel(), iy.ravel()
        v_minus = np.where(ix > 0, (ix - 1) * n + iy, -1)
        v_plus = np.where(ix < n, ix * n + iy, -1)
        v_origin = self.box_lo + np.column_stack([ix * h, iy * h])
        # horizontal facets (normal = y): column ix in 0..n-1, line iy in 0..n
        jx, jy = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="ij")
        jx, jy = jx.ravel(), jy.ravel()
        h_minus = np.where(jy > 0, jx * n + (jy - 1), -1)
        h_plus = np.where(jy < n, jx * n + jy, -1)
        h_origin = self.box_lo + np.column_stack([jx * h, jy * h])

        self.facet_axis = np.concatenate([
            np.zeros(len(v_minus), dtype=np.int8),
            np.ones(len(h_minus), dtype=np.int8),
        ])
        self.facet_cells = np.concatenate([
            np.column_stack([v_minus, v_plus]),
            np.column_stack([h_minus, h_plus]),
        ]).astype(np.int64)
        self.facet_origin = np.concatenate([v_origin, h_origin])
        self.n_facets = len(self.facet_axis)

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero((self.facet_cells >= 0).all(axis=1))

    def cell_index(self, ix: int, iy: int) -> int:
        return ix * self.n + iy

    def cell_origin(self, c) -> np.ndarray:
        """Lower-left corner of cell(s) c; vectorized over arrays."""
        c = np.asarray(c)
        ix, iy = c // self.n, c % self.n
        return self.box_lo + self.h * np.stack([ix, iy], axis=-1).astype(float)

    def facet_endpoints(self, f: int) -> np.ndarray:
        o = self.facet_origin[f]
        d = np.array([0.0, self.h]) if self.facet_axis[f] == 0 else np.array([self.h, 0.0])
        return np.stack([o, o + d])

    def facet_normal(self, f: int) -> np.ndarray:
        return np.array([1.0, 0.0]) if self.facet_axis[f] == 0 else np.array([0.0, 1.0])


def build_mesh(box_lo, box_hi, n: int) -> BackgroundMesh:
    """Uniform square background mesh; h = side/n."""
    return BackgroundMesh(box_lo, box_hi, n)


@dataclass(frozen=True)
class ActiveMesh:
    """Classification of a background mesh against an implicit domain.

    Active cells are the interior and cut ones; ghost facets are the
    interior facets with two active neighbors of which at least one is cut.
    """

    mesh: BackgroundMesh
    tags: np.ndarray
    active_cells: np.ndarray
    interior_cells: np.ndarray
    cut_cells: np.ndarray
    cut_stress_cells: np.ndarray
    ghost_facets: np.ndarray
    n_probe: int
    subdiv: int
    _clips: dict = field(default_factory=dict, repr=False)

    def clip_for(self, c: int):
        return self._clips.get(c)

    @property
    def n_active(self) -> int:
        return len(self.active_cells)


def classify(mesh: BackgroundMesh, dom: LevelSetDomain, n_probe: int = 8,
             subdiv: int = 3) -> ActiveMesh:
    """Tag every cell OUTSIDE / INTERIOR / CUT against the domain.

    A cell is interior when the membership function is negative at every
    probe point, outside when positive everywhere, cut otherwise.  Candidate
    cut cells are then clipped; cells whose inside-area fraction falls below
    the sliver tolerance are demoted to outside (logged), and cells the clip
    finds entirely inside are promoted to interior.
    """
    if n_probe < 2:
        raise ConfigurationError(f"n_probe must be >= 2, got {n_probe}")
    n = mesh.n
    t = np.linspace(0.0, 1.0, n_probe)
    PX, PY = np.meshgrid(t, t, indexing="ij")
    offsets = np.column_stack([PX.ravel(), PY.ravel()])  # includes corners

    origins = mesh.cell_origin(np.arange(mesh.n_cells))
    pts = origins[:, None, :] + mesh.h * offsets[None, :, :]
    psi = dom.psi(pts.reshape(-1, 2)).reshape(mesh.n_cells, -1)

    tags = np.full(mesh.n_cells, CellTag.CUT, dtype=np.int8)
    tags[(psi < 0.0).all(axis=1)] = CellTag.INTERIOR
    tags[(psi > 0.0).all(axis=1)] = CellTag.OUTSIDE

    clips: dict[int, object] = {}
    stress_cells = []
    h2 = mesh.h * mesh.h
    for c in np.flatnonzero(tags == CellTag.CUT):
        lo = mesh.cell_origin(int(c))
        clip = clip_cell(lo, mesh.h, dom, subdiv)
        if clip.area < SLIVER_FRACTION * h2:
            logger.warning("cell %d: sliver below tolerance, reclassified outside", c)
            tags[c] = CellTag.OUTSIDE
            continue
        if len(clip.segs) == 0:
            tags[c] = CellTag.INTERIOR if clip.area >= (1.0 - SLIVER_FRACTION) * h2 \
                else CellTag.CUT
            if tags[c] == CellTag.INTERIOR:
                continue
        clips[int(c)] = clip
        if len(clip.segs):
            mids = clip.segs.mean(axis=1)
            if np.any(dom.branch(mids) == 2):
                stress_cells.append(int(c))

    active = np.flatnonzero(tags != CellTag.OUTSIDE)
    interior = np.flatnonzero(tags == CellTag.INTERIOR)
    cut = np.flatnonzero(tags == CellTag.CUT)

    inter = mesh.interior_facets
    nb = mesh.facet_cells[inter]
    both_active = (tags[nb[:, 0]] != CellTag.OUTSIDE) & (tags[nb[:, 1]] != CellTag.OUTSIDE)
    any_cut = (tags[nb[:, 0]] == CellTag.CUT) | (tags[nb[:, 1]] == CellTag.CUT)
    ghost = inter[both_active & any_cut]

    return ActiveMesh(
        mesh=mesh,
        tags=tags,
        active_cells=active,
        interior_cells=interior,
        cut_cells=cut,
        cut_stress_cells=np.array(stress_cells, dtype=np.int64),
        ghost_facets=ghost,
        n_probe=n_probe,
        subdiv=subdiv,
        _clips=clips,
    )


def dump_classification(active: ActiveMesh) -> str:
    """Plain-text debug table `cell_index,tag`, one row per cell."""
    names = {CellTag.OUTSIDE: "outside", CellTag.INTERIOR: "interior", CellTag.CUT: "cut"}
    lines = ["cell_index,tag"]
    lines += [f"{c},{names[CellTag(t)]}" for c, t in enumerate(active.tags)]
    return "\n".join(lines) + "\n"
