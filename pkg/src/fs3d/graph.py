"""Periodic atomic configurations, neighbor lists and angular triplets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class AtomicConfiguration:
    z: np.ndarray
    x: np.ndarray
    lattice: np.ndarray | None = None
    pbc: tuple = (False, False, False)
    task: int = 0
    charge: int = 0
    spin: int = 0
    energy: float | None = None
    forces: np.ndarray | None = None
    stress: np.ndarray | None = None
    magmoms: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        self.pbc = tuple(bool(p) for p in self.pbc)
        if self.lattice is not None:
            self.lattice = np.asarray(self.lattice, dtype=np.float64).reshape(3, 3)
        n = len(self.z)
        if self.x.shape[0] != n:
            raise GeometryError(f"{n} atomic numbers but {self.x.shape[0]} positions")
        if np.any(self.z < 1):
            raise GeometryError("atomic numbers must be >= 1")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
            if self.forces.shape[0] != n:
                raise GeometryError("forces do not match atom count")
        if self.magmoms is not None:
            self.magmoms = np.asarray(self.magmoms, dtype=np.float64).reshape(-1)
            if self.magmoms.shape[0] != n:
                raise GeometryError("magmoms do not match atom count")
        if self.stress is not None:
            self.stress = np.asarray(self.stress, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            check_lattice(self.lattice, self.pbc)

    @property
    def n_atoms(self) -> int:
        return len(self.z)

    @property
    def periodic(self) -> bool:
        return all(self.pbc)

    @property
    def volume(self) -> float:
        if self.lattice is None:
            raise GeometryError("no lattice")
        return float(np.linalg.det(self.lattice))


def check_lattice(lattice, pbc):
    if lattice is None:
        raise GeometryError("periodic axes need a lattice")
    for a in range(3):
        if pbc[a] and np.linalg.norm(lattice[a]) == 0.0:
            raise GeometryError(f"periodic axis {a} has a zero lattice row")
    det = np.linalg.det(lattice)
    if all(pbc) and not det > 0:
        raise GeometryError(f"lattice determinant {det} is not positive")
    if abs(det) < 1e-12:
        raise GeometryError("degenerate lattice")


@dataclass
class NeighborGraph:
    n_atoms: int
    tgt: np.ndarray          # i
    src: np.ndarray          # j
    shift: np.ndarray        # s, integer image offsets
    shift_vec: np.ndarray    # s @ L
    vec: np.ndarray          # x_j + s L - x_i
    dist: np.ndarray
    unit: np.ndarray
    r_cut: float
    trip_ij: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    trip_ik: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def n_edges(self) -> int:
        return len(self.tgt)

    @property
    def n_triplets(self) -> int:
        return len(self.trip_ij)

    @property
    def counts(self) -> np.ndarray:
        """|N(i)| for every atom."""
        return np.bincount(self.tgt, minlength=self.n_atoms)

    @property
    def cos_angle(self) -> np.ndarray:
        c = np.einsum("ij,ij->i", self.unit[self.trip_ij], self.unit[self.trip_ik])
        return np.clip(c, -1.0, 1.0)

    def edge_keys(self) -> list[tuple]:
        return [(int(i), int(j), tuple(int(v) for v in s))
                for i, j, s in zip(self.tgt, self.src, self.shift)]


def reciprocal_heights(lattice: np.ndarray) -> np.ndarray:
    """Distance between opposite faces of the cell, per axis."""
    recip = np.linalg.inv(lattice).T
    return 1.0 / np.linalg.norm(recip, axis=1)


def image_bounds(x, lattice, pbc, r_cut) -> np.ndarray:
    """Per-axis shell count so that every image within ``r_cut`` is enumerated.

    Bounds use reciprocal row norms, which stay correct for skewed cells, and
    include the spread of the (unwrapped) fractional coordinates.
    """
    bounds = np.zeros(3, dtype=np.int64)
    if not any(pbc):
        return bounds
    recip = np.linalg.inv(lattice).T
    frac = x @ np.linalg.inv(lattice)
    for a in range(3):
        if not pbc[a]:
            continue
        spread = float(frac[:, a].max() - frac[:, a].min()) if len(x) else 0.0
        bounds[a] = int(math.ceil(r_cut * np.linalg.norm(recip[a]) + spread))
    return bounds


def _shift_grid(bounds):
    axes = [np.arange(-b, b + 1) for b in bounds]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def build_neighbor_list(config: AtomicConfiguration, r_cut: float) -> NeighborGraph:
    """All directed edges (i, j, s) with 0 < |x_j + s L - x_i| < r_cut, sorted."""
    if not r_cut > 0:
        raise GeometryError("cutoff must be positive")
    x = config.x
    if not np.all(np.isfinite(x)):
        raise GeometryError("non-finite positions")
    pbc = config.pbc
    n = len(x)
    lattice = config.lattice if config.lattice is not None else np.eye(3)
    if any(pbc):
        check_lattice(config.lattice, pbc)
    shifts = _shift_grid(image_bounds(x, lattice, pbc, r_cut))
    svec = shifts @ lattice
    tgts, srcs, sh = [], [], []
    # d[s, i, j] = x_j + svec_s - x_i
    base = x[None, :, :] - x[:, None, :]
    for k in range(len(shifts)):
        d = base + svec[k]
        r2 = np.einsum("ijc,ijc->ij", d, d)
        mask = r2 < r_cut * r_cut
        if not shifts[k].any():
            np.fill_diagonal(mask, False)
        mask &= r2 > 0.0
        ii, jj = np.nonzero(mask)
        tgts.append(ii)
        srcs.append(jj)
        sh.append(np.repeat(shifts[k][None], len(ii), axis=0))
    tgt = np.concatenate(tgts) if tgts else np.zeros(0, np.int64)
    src = np.concatenate(srcs) if srcs else np.zeros(0, np.int64)
    shift = np.concatenate(sh) if sh else np.zeros((0, 3), np.int64)
    order = np.lexsort((shift[:, 2], shift[:, 1], shift[:, 0], src, tgt))
    tgt, src, shift = tgt[order].astype(np.int64), src[order].astype(np.int64), shift[order].astype(np.int64)
    g = _assemble(n, x, lattice, tgt, src, shift, r_cut)
    return build_triplets(g)


def _assemble(n, x, lattice, tgt, src, shift, r_cut) -> NeighborGraph:
    shift_vec = shift.astype(np.float64) @ lattice
    vec = x[src] + shift_vec - x[tgt]
    dist = np.sqrt(np.einsum("ij,ij->i", vec, vec))
    unit = vec / dist[:, None] if len(dist) else vec
    return NeighborGraph(n, tgt, src, shift, shift_vec, vec, dist, unit, float(r_cut))


def build_triplets(g: NeighborGraph) -> NeighborGraph:
    """Attach all ordered pairs of distinct edges sharing a center atom."""
    counts = np.bincount(g.tgt, minlength=g.n_atoms)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if g.n_atoms else np.zeros(0, np.int64)
    ij_parts, ik_parts = [], []
    for i in range(g.n_atoms):
        c = counts[i]
        if c < 2:
            continue
        idx = np.arange(starts[i], starts[i] + c)
        a = np.repeat(idx, c)
        b = np.tile(idx, c)
        keep = a != b
        ij_parts.append(a[keep])
        ik_parts.append(b[keep])
    g.trip_ij = np.concatenate(ij_parts).astype(np.int64) if ij_parts else np.zeros(0, np.int64)
    g.trip_ik = np.concatenate(ik_parts).astype(np.int64) if ik_parts else np.zeros(0, np.int64)
    return g


def minimum_image_distance(xa, xb, lattice=None, pbc=(True, True, True)):
    """Nearest periodic image of ``xb`` seen from ``xa``.

    Returns ``(r, unit, s)`` with ``xb + s L - xa`` the shortest displacement.
    Rounding the fractional displacement gives the answer for well-shaped
    cells; the candidate is then refined by enumerating every shift that could
    beat it, which keeps skewed cells correct.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    d = xb - xa
    if lattice is None or not any(pbc):
        s = np.zeros(3, dtype=np.int64)
    else:
        lattice = np.asarray(lattice, dtype=np.float64)
        per = np.array(pbc, dtype=bool)
        frac = d @ np.linalg.inv(lattice)
        s = np.where(per, -np.rint(frac), 0).astype(np.int64)
        best = d + s @ lattice
        r_best = float(np.linalg.norm(best))
        recip = np.linalg.inv(lattice).T
        span = np.where(per, np.ceil(r_best * np.linalg.norm(recip, axis=1)), 0).astype(np.int64)
        cand = s[None, :] + _shift_grid(span)
        disp = d[None, :] + cand @ lattice
        r2 = np.einsum("ij,ij->i", disp, disp)
        k = int(np.lexsort((np.abs(cand).sum(1), r2))[0])
        if r2[k] < r_best * r_best:
            s = cand[k]
    disp = d + s @ (lattice if lattice is not None else np.eye(3))
    r = float(np.linalg.norm(disp))
    unit = disp / r if r > 0 else np.zeros(3)
    return r, unit, s


@dataclass
class BatchGraph:
    """Disjoint union of several configurations' neighbor graphs."""

    graph: NeighborGraph
    configs: list
    atom_config: np.ndarray
    edge_config: np.ndarray
    atom_offset: np.ndarray

    @property
    def n_configs(self) -> int:
        return len(self.configs)


def batch_graphs(configs, r_cut: float, graphs=None) -> BatchGraph:
    if graphs is None:
        graphs = [build_neighbor_list(c, r_cut) for c in configs]
    offs = np.concatenate([[0], np.cumsum([g.n_atoms for g in graphs])]).astype(np.int64)
    eoffs = np.concatenate([[0], np.cumsum([g.n_edges for g in graphs])]).astype(np.int64)

    def cat(name, shift=None, width=None):
        parts = []
        for k, g in enumerate(graphs):
            a = getattr(g, name)
            parts.append(a + shift[k] if shift is not None else a)
        if parts:
            return np.concatenate(parts)
        return np.zeros((0,) + ((width,) if width else ()), dtype=np.float64)

    tgt = cat("tgt", offs).astype(np.int64)
    src = cat("src", offs).astype(np.int64)
    g = NeighborGraph(
        int(offs[-1]), tgt, src,
        cat("shift", width=3).astype(np.int64).reshape(-1, 3),
        cat("shift_vec", width=3).reshape(-1, 3),
        cat("vec", width=3).reshape(-1, 3),
        cat("dist"), cat("unit", width=3).reshape(-1, 3), float(r_cut),
        cat("trip_ij", eoffs).astype(np.int64), cat("trip_ik", eoffs).astype(np.int64),
    )
    atom_config = np.repeat(np.arange(len(graphs)), [gg.n_atoms for gg in graphs]).astype(np.int64)
    edge_config = atom_config[tgt] if len(tgt) else np.zeros(0, np.int64)
    return BatchGraph(g, list(configs), atom_config, edge_config, offs[:-1])
