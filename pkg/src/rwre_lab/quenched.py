"""Exact per-environment computations by lattice dynamic programming.

Forward quenched distributions, absorbing exit laws, the adjoint
prefactor recursion with Cesaro averaging, environment-convolution, and
the normalization constant Z. All computations run on a dense array over
the relevant bounding box (fixed operation order, hence bitwise
reproducible) and are converted back to sorted sparse maps.

The forward and adjoint recursions share one kernel: both apply
new(x+e) += cur(x) * omega(x, e) per step; the forward case starts from a
point mass on a box padded so no mass escapes, the adjoint case starts
from all-ones and only the window shrunk by the remaining horizon is
trusted (values are exact there because corruption from the array edge
travels one site per step).
"""

from __future__ import annotations

import math

import numpy as np

from .dist import ExitLaw, PrefactorField, SparseLatticeDist, delta_dist
from .environment import Environment
from .errors import ResourceLimitError
from .lattice import ParallelogramGeom, Site, directions

DEFAULT_SITE_BUDGET = 20_000_000


def _check_cells(shape: tuple[int, ...], budget: int, what: str) -> None:
    cells = math.prod(shape)
    if cells > budget:
        raise ResourceLimitError(
            f"{what} needs {cells} lattice cells, over the budget of {budget}"
        )


def _step(cur: np.ndarray, laws: np.ndarray, out: np.ndarray) -> None:
    """out(x+e) += cur(x) * laws(x, e) over all 2d directions."""
    d = cur.ndim
    out[...] = 0.0
    for j in range(2 * d):
        axis, sign = divmod(j, 2)
        flow = cur * laws[..., j]
        src = [slice(None)] * d
        dst = [slice(None)] * d
        if sign == 0:  # +e_axis
            src[axis] = slice(0, -1)
            dst[axis] = slice(1, None)
        else:  # -e_axis
            src[axis] = slice(1, None)
            dst[axis] = slice(0, -1)
        out[tuple(dst)] += flow[tuple(src)]


def _prune(arr: np.ndarray, tau: float) -> float:
    if tau <= 0.0:
        return 0.0
    mask = (arr > 0.0) & (arr < tau)
    removed = float(arr[mask].sum())
    arr[mask] = 0.0
    return removed


def _dense_from_dist(dist: SparseLatticeDist, pad: int) -> tuple[Site, np.ndarray]:
    lo0, hi0 = dist.bounding_box()
    lo = tuple(a - pad for a in lo0)
    hi = tuple(a + pad for a in hi0)
    arr = np.zeros(tuple(h - l + 1 for l, h in zip(lo, hi)))
    for x in dist.sites():
        arr[tuple(c - l for c, l in zip(x, lo))] = dist.mass[x]
    return lo, arr


def _sparse_from_dense(lo: Site, arr: np.ndarray) -> dict[Site, float]:
    idx = np.argwhere(arr > 0.0)
    vals = arr[tuple(idx.T)]
    return {
        tuple(int(c) + l for c, l in zip(row, lo)): float(v)
        for row, v in zip(idx, vals)
    }


def evolve_forward(
    env: Environment,
    dist: SparseLatticeDist,
    steps: int,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> SparseLatticeDist:
    """Evolve a distribution forward: mass'(x+e) += mass(x)*omega(x,e) per
    step; entries below the prune threshold move to pruned-mass."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if prune < 0:
        raise ValueError("prune threshold must be >= 0")
    if steps == 0:
        return SparseLatticeDist(dist.n, dist.start, dict(dist.mass), dist.pruned_mass)
    lo, arr = _dense_from_dist(dist, steps)
    _check_cells(arr.shape, site_budget, "forward evolution box")
    hi = tuple(l + s - 1 for l, s in zip(lo, arr.shape))
    laws = env.block_laws(lo, hi)
    nxt = np.empty_like(arr)
    pruned = dist.pruned_mass
    for _ in range(steps):
        _step(arr, laws, nxt)
        arr, nxt = nxt, arr
        pruned += _prune(arr, prune)
    return SparseLatticeDist(dist.n + steps, dist.start, _sparse_from_dense(lo, arr), pruned)


def quenched_distribution(
    env: Environment,
    start: Site,
    n: int,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> SparseLatticeDist:
    """Quenched law of the walk at time n started from start."""
    return evolve_forward(env, delta_dist(start), n, prune, site_budget)


def env_convolve(
    env: Environment,
    first: SparseLatticeDist,
    k: int,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> SparseLatticeDist:
    """Environment-convolution of first with the quenched k-step family:
    (nu * que_k)(x) = sum_y nu(y) * P^y(walk at x after k steps in the
    environment shifted to y). For nearest-neighbor quenched kernels this
    equals forward evolution by k steps, which is how it is computed."""
    return evolve_forward(env, first, k, prune, site_budget)


def _adjoint_run(
    env: Environment,
    n: int,
    lo: Site,
    hi: Site,
    init: np.ndarray | None,
    halo: int,
    prune: float,
    site_budget: int,
    cesaro: bool,
) -> np.ndarray:
    """Run the adjoint recursion for n steps on the window dilated by halo,
    returning the window values (or their Cesaro mean over horizons < n)."""
    d = env.d
    dlo = tuple(l - halo for l in lo)
    dhi = tuple(h + halo for h in hi)
    shape = tuple(h - l + 1 for l, h in zip(dlo, dhi))
    _check_cells(shape, site_budget, "prefactor window plus halo")
    laws = env.block_laws(dlo, dhi)
    if init is None:
        cur = np.ones(shape)
    else:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != shape:
            raise ValueError(
                f"initial field shape {init.shape} must cover the window plus halo {shape}"
            )
        cur = init.copy()
    window = tuple(slice(l - dl, l - dl + (h - l + 1)) for l, h, dl in zip(lo, hi, dlo))
    acc = np.zeros(tuple(h - l + 1 for l, h in zip(lo, hi))) if cesaro else None
    nxt = np.empty_like(cur)
    for t in range(n):
        if cesaro:
            acc += cur[window]
        _step(cur, laws, nxt)
        cur, nxt = nxt, cur
        _prune(cur, prune)
    if cesaro:
        return acc / n
    return cur[window].copy()


def prefactor_field(
    env: Environment,
    n: int,
    lo: Site,
    hi: Site,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> PrefactorField:
    """Finite-horizon prefactor f_n(x) = sum_y P^y(walk at x after n steps)
    on the window lo..hi, via the adjoint recursion
    h_{t+1}(x) = sum_e omega(x-e, e) h_t(x-e) with h_0 = 1. The halo equals
    n, so every window value is exact."""
    if n < 0:
        raise ValueError("horizon must be >= 0")
    if any(h < l for l, h in zip(lo, hi)):
        raise ValueError("empty window")
    vals = _adjoint_run(env, n, tuple(lo), tuple(hi), None, n, prune, site_budget, False)
    return PrefactorField(n, tuple(lo), tuple(hi), vals, mode="fixed-horizon")


def cesaro_prefactor(
    env: Environment,
    n: int,
    lo: Site,
    hi: Site,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> PrefactorField:
    """Cesaro mean (1/n) * sum_{N<n} f_N on the window, computed in one
    adjoint pass."""
    if n < 1:
        raise ValueError("cesaro horizon must be >= 1")
    if any(h < l for l, h in zip(lo, hi)):
        raise ValueError("empty window")
    vals = _adjoint_run(env, n, tuple(lo), tuple(hi), None, n, prune, site_budget, True)
    return PrefactorField(n, tuple(lo), tuple(hi), vals, mode="cesaro")


def adjoint_evolve(
    env: Environment,
    field: PrefactorField,
    m: int,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> PrefactorField:
    """Evolve a fixed-horizon field m more adjoint steps. The result is
    exact on the window shrunk by m (the semigroup identity
    f_{n+m}(x) = sum_y f_n(y) P^y(walk at x after m steps))."""
    if field.mode != "fixed-horizon":
        raise ValueError("adjoint_evolve applies to fixed-horizon fields")
    lo = tuple(l + m for l in field.lo)
    hi = tuple(h - m for h in field.hi)
    if any(h < l for l, h in zip(lo, hi)):
        raise ValueError("window too small: shrinking by m leaves it empty")
    vals = _adjoint_run(env, m, lo, hi, field.values, m, prune, site_budget, False)
    return PrefactorField(field.horizon + m, lo, hi, vals, mode="fixed-horizon")


def _interior_mask_geom(geom: ParallelogramGeom, lo: Site, hi: Site) -> np.ndarray:
    grids = np.meshgrid(
        *[np.arange(l, h + 1, dtype=np.int64) for l, h in zip(lo, hi)], indexing="ij"
    )
    rel = [g - c for g, c in zip(grids, geom.center)]
    s = rel[geom.axis].astype(np.float64)
    scale = s / geom.drift[geom.axis]
    t = np.zeros_like(s)
    for j in range(geom.d):
        np.maximum(t, np.abs(rel[j] - geom.drift[j] * scale), out=t)
    return (np.abs(s) < geom.N**2) & (t < geom.N * geom.width_factor)


def region_masks(
    region, d: int, site_budget: int = DEFAULT_SITE_BUDGET
) -> tuple[Site, Site, np.ndarray]:
    """Bounding box and interior mask for a ParallelogramGeom or an explicit
    site set (interior = set members all of whose neighbors are members)."""
    if isinstance(region, ParallelogramGeom):
        lo, hi = region.bounding_box()
        _check_cells(tuple(h - l + 1 for l, h in zip(lo, hi)), site_budget, "exit region")
        return lo, hi, _interior_mask_geom(region, lo, hi)
    sites = {tuple(x) for x in region}
    if not sites:
        raise ValueError("empty region")
    arr = np.array(sorted(sites))
    lo = tuple(int(v) - 1 for v in arr.min(axis=0))
    hi = tuple(int(v) + 1 for v in arr.max(axis=0))
    _check_cells(tuple(h - l + 1 for l, h in zip(lo, hi)), site_budget, "exit region")
    member = np.zeros(tuple(h - l + 1 for l, h in zip(lo, hi)), dtype=bool)
    for x in sorted(sites):
        member[tuple(c - l for c, l in zip(x, lo))] = True
    interior = member.copy()
    for e in directions(d):
        interior &= np.roll(member, shift=[-c for c in e], axis=tuple(range(d)))
    # roll wraps around; the outer pad ring is all False so wrapped values
    # only ever turn interior off, which is correct here
    return lo, hi, interior


def exit_law(
    env: Environment,
    start: Site,
    region,
    t_max: int,
    prune: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> ExitLaw:
    """Joint law of (first exit site, exit time), absorbing outside the
    interior of region, censored at t_max."""
    if t_max < 0:
        raise ValueError("t_max must be >= 0")
    start = tuple(start)
    lo, hi, interior = region_masks(region, len(start), site_budget)
    sidx = tuple(c - l for c, l in zip(start, lo))
    if not all(0 <= i < s for i, s in zip(sidx, interior.shape)) or not interior[sidx]:
        raise ValueError(f"start {start} is not interior to the region")
    laws = env.block_laws(lo, hi)
    cur = np.zeros(interior.shape)
    cur[sidx] = 1.0
    nxt = np.empty_like(cur)
    mass: dict[tuple[Site, int], float] = {}
    pruned = 0.0
    for t in range(1, t_max + 1):
        _step(cur, laws, nxt)
        cur, nxt = nxt, cur
        exits = np.where(interior, 0.0, cur)
        idx = np.argwhere(exits > 0.0)
        for row in idx:
            site = tuple(int(c) + l for c, l in zip(row, lo))
            mass[(site, t)] = float(exits[tuple(row)])
        cur[~interior] = 0.0
        pruned += _prune(cur, prune)
        if not cur.any():
            break
    return ExitLaw(start, t_max, mass, float(cur.sum()), pruned)


def normalization_constant(annealed: SparseLatticeDist, prefactor: PrefactorField) -> float:
    """Z = sum_x annealed(x) * f(x). The field must cover (and be exact on)
    the annealed support."""
    uncovered = [x for x in annealed.sites() if not prefactor.contains(x)]
    if uncovered or not prefactor.exact:
        shown = ", ".join(map(str, uncovered[:10]))
        more = "" if len(uncovered) <= 10 else f" (+{len(uncovered) - 10} more)"
        raise ValueError(f"prefactor field does not cover the support: {shown}{more}")
    return float(sum(annealed.mass[x] * prefactor.value_at(x) for x in annealed.sites()))
