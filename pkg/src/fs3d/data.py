"""Dataset records (one JSON object per line) and the synthetic LJ teacher."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import AtomicConfiguration, GeometryError, build_neighbor_list

RECORD_KEYS = ("z", "x", "lattice", "pbc", "task", "charge", "spin",
               "energy", "forces", "stress", "magmoms")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# records


def _list(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def to_record(c: AtomicConfiguration) -> dict:
    return {
        "z": [int(v) for v in c.z],
        "x": _list(c.x),
        "lattice": _list(c.lattice),
        "pbc": [bool(p) for p in c.pbc],
        "task": int(c.task),
        "charge": int(c.charge),
        "spin": int(c.spin),
        "energy": None if c.energy is None else float(c.energy),
        "forces": _list(c.forces),
        "stress": _list(c.stress),
        "magmoms": _list(c.magmoms),
    }


def from_record(rec: dict) -> AtomicConfiguration:
    unknown = set(rec) - set(RECORD_KEYS)
    if unknown:
        raise DatasetError(f"unknown record keys {sorted(unknown)}")
    if "z" not in rec or "x" not in rec:
        raise DatasetError("record needs z and x")
    try:
        return AtomicConfiguration(
            z=rec["z"], x=np.asarray(rec["x"], dtype=np.float64).reshape(-1, 3),
            lattice=rec.get("lattice"), pbc=tuple(rec.get("pbc") or (False, False, False)),
            task=int(rec.get("task", 0)), charge=int(rec.get("charge", 0)), spin=int(rec.get("spin", 0)),
            energy=rec.get("energy"), forces=rec.get("forces"), stress=rec.get("stress"),
            magmoms=rec.get("magmoms"))
    except (GeometryError, ValueError, TypeError) as exc:
        raise DatasetError(str(exc)) from exc


def dumps(c: AtomicConfiguration) -> str:
    return json.dumps(to_record(c), separators=(",", ":"), allow_nan=False)


def loads(line: str) -> AtomicConfiguration:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"bad record: {exc}") from exc
    if not isinstance(rec, dict):
        raise DatasetError("record is not an object")
    return from_record(rec)


def write_dataset(path, configs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in configs:
            fh.write(dumps(c) + "\n")


def read_dataset(path) -> list[AtomicConfiguration]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(loads(line))
                except DatasetError as exc:
                    raise DatasetError(f"{path}:{k}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# teacher


@dataclass
class LJTeacher:
    """Pairwise Lennard-Jones with a quintic switch between r_on and r_cut.

    Element parameters are indexed by atomic number; mixing is Lorentz-Berthelot.
    """

    sigma: dict = field(default_factory=lambda: {1: 1.8, 2: 2.0, 3: 2.2, 4: 2.4})
    epsilon: dict = field(default_factory=lambda: {1: 0.05, 2: 0.10, 3: 0.15, 4: 0.20})
    e_ref: dict = field(default_factory=lambda: {1: -1.0, 2: -2.0, 3: -1.5, 4: -0.5})
    mu: dict = field(default_factory=lambda: {1: 0.5, 2: 1.0, 3: 1.5, 4: 2.0})
    r_cut: float = 4.5
    r_on: float = 3.6
    task_scale: float = 0.1

    @property
    def elements(self) -> list[int]:
        return sorted(self.sigma)

    def pair(self, za, zb, task=0):
        s = 0.5 * (np.vectorize(self.sigma.get)(za) + np.vectorize(self.sigma.get)(zb))
        e = np.sqrt(np.vectorize(self.epsilon.get)(za) * np.vectorize(self.epsilon.get)(zb))
        return s, e * (1.0 + self.task_scale * task)

    def switch(self, r):
        """S = 1 below r_on, 0 at r_cut, C2 in between; returns (S, dS/dr)."""
        w = self.r_cut - self.r_on
        x = np.clip((r - self.r_on) / w, 0.0, 1.0)
        s = 1.0 - x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)
        ds = -30.0 * x * x * (1.0 - x) ** 2 / w
        return s, ds

    def phi(self, r, sig, eps):
        """Switched pair energy and its radial derivative."""
        q6 = (sig / r) ** 6
        lj = 4.0 * eps * (q6 * q6 - q6)
        dlj = 4.0 * eps * (-12.0 * q6 * q6 + 6.0 * q6) / r
        s, ds = self.switch(r)
        return lj * s, dlj * s + lj * ds

    def evaluate(self, c: AtomicConfiguration) -> dict:
        """Energy, forces -dE/dX, virial stress (1/V) dE/d(eps) and magnetic moments."""
        g = build_neighbor_list(c, self.r_cut)
        n = c.n_atoms
        vec = c.x[g.src] + g.shift_vec - c.x[g.tgt] if g.n_edges else np.zeros((0, 3))
        r = np.linalg.norm(vec, axis=1)
        sig, eps = self.pair(c.z[g.tgt], c.z[g.src], c.task) if g.n_edges else (np.zeros(0), np.zeros(0))
        e_pair, de = self.phi(r, sig, eps) if g.n_edges else (np.zeros(0), np.zeros(0))
        energy = 0.5 * float(e_pair.sum()) + float(sum(self.e_ref[int(z)] for z in c.z))
        # directed edges count each pair twice
        fvec = (0.5 * de / np.where(r > 0, r, 1.0))[:, None] * vec
        forces = np.zeros((n, 3))
        np.add.at(forces, g.tgt, fvec)
        np.add.at(forces, g.src, -fvec)
        stress = None
        if c.periodic:
            stress = np.einsum("e,ei,ej->ij", 0.5 * de / r, vec, vec) / c.volume
        s, _ = self.switch(r)
        coord = np.zeros(n)
        np.add.at(coord, g.tgt, s)
        magmoms = np.array([self.mu[int(z)] for z in c.z]) / (1.0 + 0.1 * coord)
        return {"energy": energy, "forces": forces, "stress": stress, "magmoms": magmoms}

    def label(self, c: AtomicConfiguration) -> AtomicConfiguration:
        out = self.evaluate(c)
        return AtomicConfiguration(c.z, c.x, c.lattice, c.pbc, c.task, c.charge, c.spin,
                                   out["energy"], out["forces"], out["stress"], out["magmoms"])


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenConfig:
    n_configs: int = 100
    atoms: tuple = (4, 12)
    cell: tuple = (6.0, 8.0)
    min_sep: float = 2.0
    n_tasks: int = 2
    skew: float = 0.1
    retries: int = 200


def random_configuration(rng: np.random.Generator, gc: GenConfig, elements) -> AtomicConfiguration:
    lo, hi = gc.atoms
    if not 1 <= lo <= hi:
        raise ValueError("atom range must satisfy 1 <= min <= max")
    if not 0 < gc.cell[0] <= gc.cell[1]:
        raise ValueError("cell range must satisfy 0 < min <= max")
    n = int(rng.integers(lo, hi + 1))
    lat = np.diag(rng.uniform(gc.cell[0], gc.cell[1], size=3))
    lat += np.triu(rng.uniform(-gc.skew, gc.skew, size=(3, 3)), k=1) * lat[0, 0]
    frac: list = []
    for _ in range(n):
        for _ in range(gc.retries):
            f = rng.random(3)
            if all(_min_image(f - g, lat) >= gc.min_sep for g in frac):
                frac.append(f)
                break
        else:
            raise GeometryError(f"could not place {n} atoms {gc.min_sep} A apart in the cell")
    x = np.asarray(frac).reshape(-1, 3) @ lat
    z = rng.choice(np.asarray(elements), size=n)
    return AtomicConfiguration(z, x, lat, (True, True, True), task=int(rng.integers(0, gc.n_tasks)))


def _min_image(df, lat):
    df = df - np.rint(df)
    best = math.inf
    for s in np.ndindex(3, 3, 3):
        d = (df + np.asarray(s) - 1) @ lat
        best = min(best, float(np.sqrt(d @ d)))
    return best


def generate(seed: int, gc: GenConfig, teacher: LJTeacher | None = None) -> list[AtomicConfiguration]:
    teacher = teacher or LJTeacher()
    rng = np.random.default_rng(seed)
    return [teacher.label(random_configuration(rng, gc, teacher.elements)) for _ in range(gc.n_configs)]
