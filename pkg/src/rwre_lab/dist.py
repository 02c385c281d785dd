"""Sparse lattice distributions, absorbing exit laws, and prefactor fields.

SparseLatticeDist represents a (sub-)probability mass function on Z^d at a
fixed time index, as a site -> mass map plus the mass removed by pruning.
Site iteration is always in sorted (lexicographic) order so that any
accumulation over the support is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import Site, l1, parity_ok

DIST_SCHEMA = "rwre-lab/dist/1"
EXIT_SCHEMA = "rwre-lab/exit-law/1"
FIELD_SCHEMA = "rwre-lab/prefactor-field/1"


@dataclass
class SparseLatticeDist:
    """Mass function at time n for a walk started at start."""

    n: int
    start: Site
    mass: dict[Site, float]
    pruned_mass: float = 0.0

    @property
    def d(self) -> int:
        return len(self.start)

    def total_mass(self) -> float:
        return sum(self.mass[x] for x in sorted(self.mass))

    def sites(self) -> list[Site]:
        return sorted(self.mass)

    def bounding_box(self) -> tuple[Site, Site]:
        ks = self.sites()
        if not ks:
            return self.start, self.start
        arr = np.array(ks)
        return tuple(int(v) for v in arr.min(axis=0)), tuple(int(v) for v in arr.max(axis=0))

    def validate(self, full_law: bool = True, tol: float = 1e-10) -> None:
        """Check the parity / L1-ball / normalization invariants."""
        for x, m in self.mass.items():
            if m <= 0:
                raise AssertionError(f"non-positive mass {m!r} at {x}")
            if not parity_ok(x, self.n, self.start):
                raise AssertionError(f"site {x} off the parity class of n={self.n}")
            if l1(tuple(a - b for a, b in zip(x, self.start))) > self.n:
                raise AssertionError(f"site {x} outside the L1 ball of radius {self.n}")
        if self.pruned_mass < 0:
            raise AssertionError("negative pruned mass")
        if full_law and abs(self.total_mass() + self.pruned_mass - 1.0) > tol:
            raise AssertionError(
                f"mass + pruned = {self.total_mass() + self.pruned_mass!r} differs from 1"
            )

    def to_json(self) -> dict:
        return {
            "schema": DIST_SCHEMA,
            "n": self.n,
            "start": list(self.start),
            "pruned_mass": self.pruned_mass,
            "mass": [[*x, self.mass[x]] for x in self.sites()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SparseLatticeDist":
        start = tuple(obj["start"])
        d = len(start)
        mass = {tuple(int(c) for c in row[:d]): float(row[d]) for row in obj["mass"]}
        return cls(int(obj["n"]), start, mass, float(obj["pruned_mass"]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.d)] + ["mass"])
            for x in self.sites():
                w.writerow([*x, repr(self.mass[x])])

    @classmethod
    def read_csv(cls, path, n: int, start: Site, pruned_mass: float = 0.0) -> "SparseLatticeDist":
        d = len(start)
        mass = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                x = tuple(int(row[f"x{i + 1}"]) for i in range(d))
                mass[x] = float(row["mass"])
        return cls(n, start, mass, pruned_mass)


def delta_dist(start: Site) -> SparseLatticeDist:
    return SparseLatticeDist(0, tuple(start), {tuple(start): 1.0})


@dataclass
class ExitLaw:
    """Joint law of (first exit site, exit time) for a walk absorbed on the
    complement of a region, censored at t_max."""

    start: Site
    t_max: int
    mass: dict[tuple[Site, int], float]
    interior_mass: float = 0.0  # censored: still inside at t_max
    pruned_mass: float = 0.0

    @property
    def d(self) -> int:
        return len(self.start)

    def total_mass(self) -> float:
        return sum(self.mass[k] for k in sorted(self.mass, key=lambda k: (k[1], k[0])))

    def exit_site_marginal(self) -> dict[Site, float]:
        out: dict[Site, float] = {}
        for (x, _), m in sorted(self.mass.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            out[x] = out.get(x, 0.0) + m
        return out

    def validate(self, tol: float = 1e-10) -> None:
        tot = self.total_mass() + self.interior_mass + self.pruned_mass
        if abs(tot - 1.0) > tol:
            raise AssertionError(f"exit law mass {tot!r} differs from 1")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.d)] + ["t", "mass"])
            for (x, t) in sorted(self.mass, key=lambda k: (k[1], k[0])):
                w.writerow([*x, t, repr(self.mass[(x, t)])])

    def to_json(self) -> dict:
        return {
            "schema": EXIT_SCHEMA,
            "start": list(self.start),
            "t_max": self.t_max,
            "interior_mass": self.interior_mass,
            "pruned_mass": self.pruned_mass,
            "mass": [[*x, t, self.mass[(x, t)]] for (x, t) in
                     sorted(self.mass, key=lambda k: (k[1], k[0]))],
        }


@dataclass
class PrefactorField:
    """Values of the finite-horizon prefactor surrogate on a window box.

    values[x - lo] = sum over starts y of P^y(walk at x after `horizon`
    steps), or the Cesaro average of those over horizons < n. The halo
    used during computation always equals the horizon, so every window
    site is exact (exact=True throughout)."""

    horizon: int
    lo: Site
    hi: Site
    values: np.ndarray
    mode: str = "fixed-horizon"  # or "cesaro" / "constant-one"
    exact: bool = True

    @property
    def d(self) -> int:
        return len(self.lo)

    def contains(self, x: Site) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, x, self.hi))

    def value_at(self, x: Site) -> float:
        if not self.contains(x):
            raise KeyError(f"site {x} outside field window {self.lo}..{self.hi}")
        idx = tuple(c - l for c, l in zip(x, self.lo))
        return float(self.values[idx])

    def window_shape(self) -> tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def validate(self) -> None:
        if self.values.shape != self.window_shape():
            raise AssertionError("field array shape does not match window")
        if np.any(self.values < 0):
            raise AssertionError("negative prefactor values")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.d)] + ["value"])
            for idx in np.ndindex(*self.values.shape):
                site = tuple(l + i for l, i in zip(self.lo, idx))
                w.writerow([*site, repr(float(self.values[idx]))])

    def to_json(self) -> dict:
        return {
            "schema": FIELD_SCHEMA,
            "horizon": self.horizon,
            "mode": self.mode,
            "lo": list(self.lo),
            "hi": list(self.hi),
            "exact": self.exact,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrefactorField":
        return cls(
            horizon=int(obj["horizon"]),
            lo=tuple(obj["lo"]),
            hi=tuple(obj["hi"]),
            values=np.asarray(obj["values"], dtype=np.float64),
            mode=obj["mode"],
            exact=bool(obj["exact"]),
        )


def constant_one_field(lo: Site, hi: Site) -> PrefactorField:
    shape = tuple(h - l + 1 for l, h in zip(lo, hi))
    return PrefactorField(0, tuple(lo), tuple(hi), np.ones(shape), mode="constant-one")


def dump_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
