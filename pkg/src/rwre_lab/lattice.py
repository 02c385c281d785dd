"""Lattice geometry: directions, scale functions, box partitions, and
drift-aligned parallelograms with point classification.

Sites are tuples of python ints. The 2d nearest-neighbor directions are
indexed 0..2d-1 in the canonical order +e1, -e1, +e2, -e2, ...
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

Site = tuple[int, ...]


def directions(d: int) -> list[Site]:
    """Canonical list of the 2d unit directions."""
    out = []
    for i in range(d):
        plus = [0] * d
        plus[i] = 1
        minus = [0] * d
        minus[i] = -1
        out.append(tuple(plus))
        out.append(tuple(minus))
    return out


def add(x: Site, e: Site) -> Site:
    return tuple(a + b for a, b in zip(x, e))


def dot(x: Site, y) -> float:
    return sum(a * b for a, b in zip(x, y))


def l1(x: Site) -> int:
    return sum(abs(a) for a in x)


def parity_ok(x: Site, n: int, start: Site | None = None) -> bool:
    """True iff x is reachable from start in exactly n steps, parity-wise."""
    s = sum(x) if start is None else sum(a - b for a, b in zip(x, start))
    return (s + n) % 2 == 0


def scale_R(k: int, N: int) -> int:
    """Slowly growing scale family: floor(ln N) for k=0,
    floor(exp((ln ln N)^(k+1))) for k >= 1. Requires N >= 3."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if N < 3:
        raise ValueError("scale_R requires N >= 3")
    if k == 0:
        return math.floor(math.log(N))
    return math.floor(math.exp(math.log(math.log(N)) ** (k + 1)))


@dataclass(frozen=True)
class BoxPartition:
    """Partition of Z^d into axis-aligned cubes of side M,
    box index k covering [k_i*M, (k_i+1)*M) in each coordinate."""

    M: int

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("box side M must be >= 1")

    def box_of(self, x: Site) -> Site:
        return tuple(c // self.M for c in x)

    def box_sites(self, k: Site) -> list[Site]:
        """All sites of box k (use only for small M)."""
        import itertools

        ranges = [range(ki * self.M, (ki + 1) * self.M) for ki in k]
        return [tuple(p) for p in itertools.product(*ranges)]


@dataclass(frozen=True)
class ParallelogramGeom:
    """Drift-aligned parallelogram: depth 2N^2 along the axis direction,
    transverse half-width N*w around the line spanned by the drift.

    Membership: |s| < N^2 and ||x - z - drift*s/drift_axis||_inf < N*w,
    where s = <x-z, e_axis>. The middle third scales both bounds by 1/3.
    """

    center: Site
    N: int
    drift: tuple[float, ...]
    axis: int = 0
    width: float | None = None
    _w: float = field(init=False, repr=False, compare=False, default=0.0)

    def __post_init__(self):
        d = len(self.center)
        if self.N < 2:
            raise ValueError("parallelogram size N must be >= 2")
        if not 0 <= self.axis < d:
            raise ValueError("axis out of range")
        if len(self.drift) != d:
            raise ValueError("drift dimension mismatch")
        if self.drift[self.axis] <= 0:
            raise ValueError("drift must have positive axis component")
        w = self.width
        if w is None:
            w = float(scale_R(5, self.N)) if self.N >= 3 else 1.0
        if w <= 0:
            raise ValueError("width factor must be positive")
        object.__setattr__(self, "_w", float(w))

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def width_factor(self) -> float:
        return self._w

    def _coords(self, x: Site) -> tuple[int, float]:
        rel = tuple(a - b for a, b in zip(x, self.center))
        s = rel[self.axis]
        scale = s / self.drift[self.axis]
        t = max(
            abs(rel[j] - self.drift[j] * scale)
            for j in range(self.d)
        )
        return s, t

    def contains(self, x: Site, shrink: float = 1.0) -> bool:
        s, t = self._coords(x)
        return abs(s) < self.N**2 * shrink and t < self.N * self._w * shrink

    def bounding_box(self) -> tuple[Site, Site]:
        """Inclusive axis-aligned bounds containing the parallelogram
        and its exterior boundary layer."""
        lo, hi = [], []
        smax = self.N**2
        for j in range(self.d):
            if j == self.axis:
                lo.append(self.center[j] - smax)
                hi.append(self.center[j] + smax)
            else:
                reach = math.ceil(
                    self.N * self._w + abs(self.drift[j] / self.drift[self.axis]) * smax
                )
                lo.append(self.center[j] - reach)
                hi.append(self.center[j] + reach)
        return tuple(lo), tuple(hi)


def classify_point(geom: ParallelogramGeom, x: Site) -> str:
    """One of middle-third / interior / boundary / right-boundary / exterior.

    interior = parallelogram membership (middle-third is its refinement);
    boundary = non-member L1-adjacent to a member (right-boundary when the
    axis displacement equals N^2); exterior = everything else.
    """
    if geom.contains(x):
        return "middle-third" if geom.contains(x, shrink=1.0 / 3.0) else "interior"
    if any(geom.contains(add(x, e)) for e in directions(geom.d)):
        s, _ = geom._coords(x)
        return "right-boundary" if s == geom.N**2 else "boundary"
    return "exterior"
