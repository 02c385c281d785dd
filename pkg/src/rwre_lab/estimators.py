"""Annealed estimation and defect diagnostics: partition distances between
quenched and annealed laws, annealed regularity scalings, exit-law and
fixed-time box defects, box-average concentration of the prefactor, the
annealed local-CLT defect, the prefactor local-CLT defect, and the chain of
intermediate measures interpolating between the quenched law and the
annealed law times the prefactor.

Annealed laws are exact-DP-per-environment averages, so environment
sampling (the replica count K) is the only statistical noise.  Error bars
on nonlinear functionals come from leave-one-out jackknife over replicas;
pruning losses are added on top as a deterministic bound.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dist import PrefactorField, SparseLatticeDist, constant_one_field, dump_json
from .environment import Environment, EnvironmentSpec
from .errors import ResourceLimitError
from .lattice import BoxPartition, Site
from .quenched import (
    DEFAULT_SITE_BUDGET,
    cesaro_prefactor,
    env_convolve,
    evolve_forward,
    exit_law,
    normalization_constant,
    prefactor_field,
    quenched_distribution,
)
from .rng import env_seed

REPORT_SCHEMA = "rwre-lab/defect-report/1"

_DIM_NOTE = (
    "dimension below 4: the asymptotic statements behind these diagnostics "
    "assume d >= 4 (d >= 2 for the local CLT); desk-scale trends only"
)


# ---------------------------------------------------------------------------
# report container


@dataclass
class DefectReport:
    """Grid of defect values with error bars and provenance metadata.

    Each row is a dict with at least metric, param, defect, err, samples.
    The error bar combines the jackknife standard error with twice the
    pruned mass that could hide inside the defect.
    """

    kind: str
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def validate(self) -> "DefectReport":
        for row in self.rows:
            if row["defect"] < 0:
                raise ValueError(f"negative defect in row {row}")
            if row["err"] < 0:
                raise ValueError(f"negative error bar in row {row}")
        return self

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, "kind": self.kind, "rows": self.rows, "meta": self.meta}

    def write_csv(self, path) -> None:
        cols = ["metric", "param", "defect", "err", "samples"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                vals = []
                for c in cols:
                    v = row.get(c)
                    vals.append(repr(float(v)) if isinstance(v, float) else str(v))
                fh.write(",".join(vals) + "\n")

    def write_json(self, path) -> None:
        dump_json(self.to_json(), path)


def _meta(spec: EnvironmentSpec, seed: int, K: int, extra: dict | None = None) -> dict:
    meta = {
        "spec": spec.canonical(),
        "spec_hash": spec.spec_hash(),
        "seed": seed,
        "environments": K,
    }
    if spec.d < 4:
        meta["note"] = _DIM_NOTE
    if extra:
        meta.update(extra)
    return meta


# ---------------------------------------------------------------------------
# dense embedding and jackknife helpers


def _union_box(dists) -> tuple[Site, Site]:
    los, his = [], []
    for dist in dists:
        if not dist.mass:
            continue
        lo, hi = dist.bounding_box()
        los.append(lo)
        his.append(hi)
    if not los:
        raise ValueError("no support to embed")
    d = len(los[0])
    lo = tuple(min(l[j] for l in los) for j in range(d))
    hi = tuple(max(h[j] for h in his) for j in range(d))
    return lo, hi


def _to_dense(dist: SparseLatticeDist, lo: Site, hi: Site) -> np.ndarray:
    arr = np.zeros(tuple(h - l + 1 for l, h in zip(lo, hi)))
    for x in dist.sites():
        arr[tuple(c - l for c, l in zip(x, lo))] = dist.mass[x]
    return arr


def _jackknife(stack: np.ndarray, metric) -> tuple[float, float]:
    """Value of metric at the replica mean and its leave-one-out jackknife
    standard error. One replica gives error 0 by convention."""
    K = stack.shape[0]
    total = stack.sum(axis=0)
    full = float(metric(total / K))
    if K < 2:
        return full, 0.0
    vals = np.array([metric((total - stack[k]) / (K - 1)) for k in range(K)])
    se = math.sqrt((K - 1) / K * float(((vals - vals.mean()) ** 2).sum()))
    return full, se


def _window_sum(arr: np.ndarray, side: int, axis: int) -> np.ndarray:
    """Sliding sums of length ``side`` along one axis; a single full-axis
    window when the side reaches the extent."""
    if side >= arr.shape[axis]:
        return arr.sum(axis=axis, keepdims=True)
    c = np.cumsum(arr, axis=axis)
    head = np.take(c, np.arange(side - 1, arr.shape[axis]), axis=axis)
    tail = np.take(c, np.arange(0, arr.shape[axis] - side), axis=axis)
    out = head.copy()
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(1, None)
    out[tuple(sl)] -= tail
    return out


def _max_window_abs(diff: np.ndarray, sides) -> float:
    win = diff
    for ax, s in enumerate(sides):
        win = _window_sum(win, int(s), ax)
    return float(np.abs(win).max())


# ---------------------------------------------------------------------------
# annealed law


@dataclass
class AnnealedDistribution:
    """K-environment average of exact quenched laws, with the per-site
    standard error of the mean and (optionally) the replica laws."""

    dist: SparseLatticeDist
    se: dict[Site, float]
    K: int
    seed: int
    replicas: list[SparseLatticeDist] | None = None

    def se_at(self, x: Site) -> float:
        return self.se.get(tuple(x), 0.0)


def _replica_map(worker, count: int, threads: int) -> list:
    """Run ``worker`` over replica indices with results in index order, so
    the reduction never depends on scheduling."""
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, range(count)))
    return [worker(k) for k in range(count)]


def annealed_distribution(
    spec: EnvironmentSpec,
    start: Site,
    n: int,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    keep_replicas: bool = False,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> AnnealedDistribution:
    """Annealed law at time n as the average of K exact quenched laws over
    fresh environments. Only environment sampling contributes noise."""
    if K < 1:
        raise ValueError("need at least one environment replica")
    start = tuple(int(c) for c in start)

    def worker(k):
        env = Environment(spec, env_seed(seed, k))
        return quenched_distribution(env, start, n, prune=tau, site_budget=site_budget)

    replicas = _replica_map(worker, K, threads)
    sums: dict[Site, float] = {}
    sumsq: dict[Site, float] = {}
    pruned = 0.0
    for dist in replicas:
        pruned += dist.pruned_mass
        for x in dist.sites():
            m = dist.mass[x]
            sums[x] = sums.get(x, 0.0) + m
            sumsq[x] = sumsq.get(x, 0.0) + m * m
    mean = {x: sums[x] / K for x in sorted(sums)}
    se = {}
    for x in sorted(sums):
        if K > 1:
            var = max(0.0, (sumsq[x] - K * mean[x] * mean[x]) / (K - 1))
            se[x] = math.sqrt(var / K)
        else:
            se[x] = 0.0
    dist = SparseLatticeDist(n, start, mean, pruned / K)
    return AnnealedDistribution(
        dist=dist, se=se, K=K, seed=seed, replicas=replicas if keep_replicas else None
    )


# ---------------------------------------------------------------------------
# partition distance


def _box_masses(dist: SparseLatticeDist, part: BoxPartition | None) -> dict:
    out: dict = {}
    for x in dist.sites():
        key = part.box_of(x) if part is not None else 0
        out[key] = out.get(key, 0.0) + dist.mass[x]
    return out


def l1_partition_distance(p: SparseLatticeDist, q: SparseLatticeDist, partition) -> float:
    """L1 distance between the box marginals of p and q over the cubic
    partition: sum over boxes of |p(box) - q(box)|, twice the total
    variation on the partition sigma-algebra.

    ``partition`` may be a BoxPartition, an integer side length, or
    None/inf for the single-box partition (total-mass difference)."""
    if p.n != q.n:
        raise ValueError(f"time index mismatch: {p.n} vs {q.n}")
    if partition is None or partition == math.inf:
        part = None
    elif isinstance(partition, BoxPartition):
        part = partition
    else:
        part = BoxPartition(int(partition))
    pb = _box_masses(p, part)
    qb = _box_masses(q, part)
    keys = sorted(set(pb) | set(qb))
    return float(sum(abs(pb.get(k, 0.0) - qb.get(k, 0.0)) for k in keys))


def l1_point_distance(p: SparseLatticeDist, q: SparseLatticeDist) -> float:
    """Plain L1 distance over sites (the finest partition)."""
    if p.n != q.n:
        raise ValueError(f"time index mismatch: {p.n} vs {q.n}")
    keys = sorted(set(p.mass) | set(q.mass))
    return float(sum(abs(p.mass.get(k, 0.0) - q.mass.get(k, 0.0)) for k in keys))


# ---------------------------------------------------------------------------
# annealed regularity


def annealed_regularity_report(
    spec: EnvironmentSpec,
    n_grid,
    K: int,
    w: float = 10.0,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> DefectReport:
    """Finite-n regularity scalings of the annealed law: the sup of the
    mass scaled by n^(d/2), the largest space-time unit-neighbor difference
    |P(X_n = x) - P(X_{n+1} = x+e)| scaled by n^((d+1)/2), and the mass
    outside the ball of radius w*sqrt(n) around the empirical mean."""
    grid = [int(n) for n in n_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("n grid must be strictly increasing")
    d = spec.d
    start = (0,) * d
    rows = []
    for n in grid:

        def worker(k):
            env = Environment(spec, env_seed(seed, k))
            dn = quenched_distribution(env, start, n, prune=tau, site_budget=site_budget)
            dn1 = evolve_forward(env, dn, 1, prune=tau, site_budget=site_budget)
            return dn, dn1

        pairs = _replica_map(worker, K, threads)
        lo, hi = _union_box([p[1] for p in pairs] + [p[0] for p in pairs])
        shape = tuple(h - l + 1 for l, h in zip(lo, hi))
        stack = np.zeros((K, 2) + shape)
        pruned = 0.0
        for k, (dn, dn1) in enumerate(pairs):
            stack[k, 0] = _to_dense(dn, lo, hi)
            stack[k, 1] = _to_dense(dn1, lo, hi)
            pruned += dn.pruned_mass + dn1.pruned_mass
        pruned /= K
        grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij")
        coords = np.stack([g.astype(np.float64) for g in grids], axis=-1)

        def sup_metric(mean):
            return mean[0].max() * n ** (d / 2.0)

        def neighbor_metric(mean):
            a, b = mean[0], mean[1]
            best = 0.0
            for ax in range(d):
                for sgn in (1, -1):
                    shifted = np.roll(b, -sgn, axis=ax)
                    edge = [slice(None)] * d
                    edge[ax] = slice(-1, None) if sgn == 1 else slice(0, 1)
                    shifted[tuple(edge)] = 0.0
                    best = max(best, float(np.abs(a - shifted).max()))
            return best * n ** ((d + 1) / 2.0)

        def ball_metric(mean):
            m = mean[0]
            total = m.sum()
            if total <= 0:
                return 0.0
            mu = (m[..., None] * coords).reshape(-1, d).sum(axis=0) / total
            dist2 = ((coords - mu) ** 2).sum(axis=-1)
            outside = dist2 > (w * w) * n
            return float(m[outside].sum())

        for name, metric, prune_scale in (
            ("sup-scaled", sup_metric, n ** (d / 2.0)),
            ("neighbor-scaled", neighbor_metric, n ** ((d + 1) / 2.0)),
            ("outside-ball-mass", ball_metric, 1.0),
        ):
            val, se = _jackknife(stack, metric)
            rows.append(
                {
                    "metric": name,
                    "param": n,
                    "defect": val,
                    "err": se + 2.0 * pruned * prune_scale,
                    "samples": K,
                }
            )
    return DefectReport(
        kind="annealed-regularity",
        rows=rows,
        meta=_meta(spec, seed, K, {"w": w, "n_grid": grid, "tau": tau}),
    ).validate()


# ---------------------------------------------------------------------------
# exit-law box defect


def exit_law_box_defect(
    env: Environment,
    spec: EnvironmentSpec,
    geom,
    theta: float,
    K: int,
    t_max: int,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> DefectReport:
    """Quenched-vs-annealed exit-law defect through the right face of the
    parallelogram: the largest |quenched - annealed| mass over transverse
    cubes of side N^theta crossed with time windows of the same length,
    plus the non-right-exit masses of both laws."""
    start = geom.center
    que = exit_law(env, start, geom, t_max, prune=tau, site_budget=site_budget)

    def worker(k):
        e = Environment(spec, env_seed(seed, k))
        return exit_law(e, start, geom, t_max, prune=tau, site_budget=site_budget)

    replicas = _replica_map(worker, K, threads)

    axis = geom.axis
    trans_axes = [a for a in range(geom.d) if a != axis]
    right_level = geom.center[axis] + geom.N * geom.N

    def right_items(law):
        out = {}
        for (site, t), m in law.mass.items():
            if site[axis] == right_level:
                key = tuple(site[a] for a in trans_axes) + (t,)
                out[key] = out.get(key, 0.0) + m
        return out

    que_right = right_items(que)
    rep_right = [right_items(r) for r in replicas]
    keys = set(que_right)
    for r in rep_right:
        keys |= set(r)

    side = max(1, math.ceil(geom.N**theta))
    rows = []
    if keys:
        dims = len(trans_axes) + 1
        los = [min(k[i] for k in keys) for i in range(dims)]
        his = [max(k[i] for k in keys) for i in range(dims)]
        shape = tuple(h - l + 1 for l, h in zip(los, his))
        if math.prod(shape) * (K + 1) > site_budget:
            raise ResourceLimitError("right-face exit histogram exceeds the site budget")

        def embed(items):
            arr = np.zeros(shape)
            for key, m in items.items():
                arr[tuple(c - l for c, l in zip(key, los))] = m
            return arr

        que_arr = embed(que_right)
        stack = np.stack([embed(r) for r in rep_right])
        sides = [side] * dims
        val, se = _jackknife(stack, lambda mean: _max_window_abs(que_arr - mean, sides))
    else:
        val, se = 0.0, 0.0
    pruned = que.pruned_mass + sum(r.pruned_mass for r in replicas) / K
    rows.append(
        {"metric": "right-window-defect", "param": theta, "defect": val,
         "err": se + 2.0 * pruned, "samples": K}
    )

    que_right_total = sum(que_right.values())
    rows.append(
        {"metric": "non-right-exit-quenched", "param": theta,
         "defect": que.total_mass() - que_right_total,
         "err": 2.0 * (que.pruned_mass + que.interior_mass), "samples": 1}
    )
    nr_stack = np.array(
        [[r.total_mass() - sum(rr.values())] for r, rr in zip(replicas, rep_right)]
    )
    nr_val, nr_se = _jackknife(nr_stack, lambda mean: float(mean[0]))
    ann_tail = (sum(r.pruned_mass for r in replicas) + sum(r.interior_mass for r in replicas)) / K
    rows.append(
        {"metric": "non-right-exit-annealed", "param": theta, "defect": nr_val,
         "err": nr_se + 2.0 * ann_tail, "samples": K}
    )
    meta = _meta(spec, seed, K, {
        "theta": theta, "side": side, "t_max": t_max, "tau": tau,
        "N": geom.N, "censored_quenched": que.interior_mass,
        "censored_annealed_mean": sum(r.interior_mass for r in replicas) / K,
    })
    return DefectReport(kind="exit-law-box-defect", rows=rows, meta=meta).validate()


# ---------------------------------------------------------------------------
# fixed-time box defect


def fixed_time_box_defect(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    theta_grid,
    m_grid,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> DefectReport:
    """Fixed-time quenched-vs-annealed comparison: the partition distance
    lambda(M) for each box side M, and the largest single-cube defect at
    side n^theta for each theta."""
    if n < 2:
        raise ValueError("fixed-time defect needs n >= 2")
    start = (0,) * spec.d
    que = quenched_distribution(env, start, n, prune=tau, site_budget=site_budget)

    def worker(k):
        e = Environment(spec, env_seed(seed, k))
        return quenched_distribution(e, start, n, prune=tau, site_budget=site_budget)

    replicas = _replica_map(worker, K, threads)
    lo, hi = _union_box(replicas + [que])
    que_arr = _to_dense(que, lo, hi)
    stack = np.stack([_to_dense(r, lo, hi) for r in replicas])
    pruned = que.pruned_mass + sum(r.pruned_mass for r in replicas) / K

    rows = []
    for M in m_grid:
        M = int(M)
        if M < 1:
            raise ValueError("box side must be >= 1")
        offsets = np.meshgrid(*[np.arange(l, h + 1) // M for l, h in zip(lo, hi)], indexing="ij")
        flat_keys = np.stack([o.ravel() for o in offsets], axis=1)
        uniq, inv = np.unique(flat_keys, axis=0, return_inverse=True)
        que_boxes = np.bincount(inv, weights=que_arr.ravel(), minlength=len(uniq))
        rep_boxes = np.stack(
            [np.bincount(inv, weights=stack[k].ravel(), minlength=len(uniq)) for k in range(K)]
        )
        val, se = _jackknife(rep_boxes, lambda mean: float(np.abs(que_boxes - mean).sum()))
        rows.append(
            {"metric": "lambda", "param": M, "defect": val,
             "err": se + 2.0 * pruned, "samples": K}
        )
    for theta in theta_grid:
        side = max(1, math.ceil(n ** float(theta)))
        sides = [side] * spec.d
        val, se = _jackknife(stack, lambda mean: _max_window_abs(que_arr - mean, sides))
        rows.append(
            {"metric": "cube-defect", "param": float(theta), "defect": val,
             "err": se + 2.0 * pruned, "samples": K}
        )
    meta = _meta(spec, seed, K, {"n": n, "tau": tau, "m_grid": [int(m) for m in m_grid],
                                 "theta_grid": [float(t) for t in theta_grid]})
    return DefectReport(kind="fixed-time-box-defect", rows=rows, meta=meta).validate()


# ---------------------------------------------------------------------------
# box-average concentration of the prefactor


def box_average_deviation(prefactor: PrefactorField, m_grid) -> DefectReport:
    """Largest deviation of box averages of the prefactor from 1: for each
    box side M, max over disjoint M-cubes (anchored at the window corner,
    complete cubes only) of |box mean - 1|.

    The window must hold at least 5 complete cubes of the largest M."""
    grid = sorted(int(m) for m in m_grid)
    if not grid or grid[0] < 1:
        raise ValueError("box sides must be positive integers")
    shape = prefactor.window_shape()
    m_max = grid[-1]
    n_max = math.prod(s // m_max for s in shape)
    if n_max < 5:
        raise ValueError(
            f"window {shape} too small: need >= 5 disjoint cubes of side {m_max}, have {n_max}"
        )
    rows = []
    for M in grid:
        counts = [s // M for s in shape]
        trimmed = prefactor.values[tuple(slice(0, c * M) for c in counts)]
        blocked = trimmed.reshape(tuple(x for c in counts for x in (c, M)))
        mean_axes = tuple(range(1, 2 * len(counts), 2))
        means = blocked.mean(axis=mean_axes)
        rows.append(
            {"metric": "box-average-deviation", "param": M,
             "defect": float(np.abs(means - 1.0).max()), "err": 0.0,
             "samples": int(means.size)}
        )
    meta = {
        "mode": prefactor.mode,
        "horizon": prefactor.horizon,
        "window_lo": list(prefactor.lo),
        "window_hi": list(prefactor.hi),
    }
    return DefectReport(kind="box-average-deviation", rows=rows, meta=meta).validate()


# ---------------------------------------------------------------------------
# annealed local CLT defect


GAUSS_FLOOR = 1e-16


def lclt_gaussian(points: np.ndarray, mu, sigma, n: int) -> np.ndarray:
    """Lattice local-CLT density 2*(2 pi n)^{-d/2} det(Sigma)^{-1/2}
    exp(-(x-mu)' Sigma^{-1} (x-mu) / (2n)) at integer points; the factor 2
    normalizes over one parity class."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = mu.size
    eigs = np.linalg.eigvalsh(sigma)
    if eigs.min() <= 0:
        raise ValueError("covariance must be positive definite")
    inv = np.linalg.inv(sigma)
    det = float(np.linalg.det(sigma))
    diff = points.astype(np.float64) - mu
    quad = np.einsum("...i,ij,...j->...", diff, inv, diff)
    return 2.0 * (2.0 * math.pi * n) ** (-d / 2.0) / math.sqrt(det) * np.exp(-quad / (2.0 * n))


def lclt_defect(
    dist: SparseLatticeDist,
    mu,
    sigma,
    n: int,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> float:
    """L1 defect between a full law at time n and the local-CLT Gaussian on
    its parity class, with mu the time-n location. The Gaussian is cut off
    where its density drops below 1e-16 and the cut mass is added to the
    defect."""
    if n < 1:
        raise ValueError("local CLT defect needs n >= 1")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    d = dist.d
    if mu.size != d:
        raise ValueError("mu dimension mismatch")
    sigma = np.asarray(sigma, dtype=np.float64).reshape(d, d)
    eigs = np.linalg.eigvalsh(sigma)
    if eigs.min() <= 0:
        raise ValueError("covariance must be positive definite")
    dist.validate(full_law=True, tol=1e-8)
    peak = 2.0 * (2.0 * math.pi * n) ** (-d / 2.0) / math.sqrt(float(np.linalg.det(sigma)))
    if peak <= GAUSS_FLOOR:
        return float(dist.total_mass() + 1.0)
    radius = math.sqrt(2.0 * n * math.log(peak / GAUSS_FLOOR) * float(eigs.max()))
    lo = [math.floor(m - radius) for m in mu]
    hi = [math.ceil(m + radius) for m in mu]
    if dist.mass:
        slo, shi = dist.bounding_box()
        lo = [min(a, b) for a, b in zip(lo, slo)]
        hi = [max(a, b) for a, b in zip(hi, shi)]
    shape = tuple(h - l + 1 for l, h in zip(lo, hi))
    if math.prod(shape) > site_budget:
        raise ResourceLimitError(f"local CLT enumeration box {shape} exceeds the site budget")
    grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij")
    points = np.stack(grids, axis=-1)
    l1_from_start = np.zeros(shape, dtype=np.int64)
    for j, s in enumerate(dist.start):
        l1_from_start += np.abs(grids[j] - s)
    on_class = (l1_from_start + n) % 2 == 0
    g = lclt_gaussian(points, mu, sigma, n)
    g = np.where(on_class & (g >= GAUSS_FLOOR), g, 0.0)
    p = _to_dense(dist, tuple(lo), tuple(hi))
    defect = float(np.abs(p - g).sum())
    truncated = max(0.0, 1.0 - float(g.sum()))
    return defect + truncated


# ---------------------------------------------------------------------------
# prefactor local CLT defect


def _field_for_mode(env, mode, n, lo, hi, tau, site_budget) -> PrefactorField:
    if mode == "cesaro":
        return cesaro_prefactor(env, n, lo, hi, prune=tau, site_budget=site_budget)
    if mode == "fixed-horizon":
        return prefactor_field(env, n, lo, hi, prune=tau, site_budget=site_budget)
    if mode == "constant-one":
        return constant_one_field(lo, hi)
    raise ValueError(f"unknown prefactor mode {mode!r}")


def prefactor_lclt_defect(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    K: int,
    mode: str = "cesaro",
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> float:
    """Pointwise defect D_n = sum_x |quenched(x) - annealed(x) * f(x)| with
    the prefactor f built per ``mode`` on a window covering both supports.
    The constant-one mode is the no-correction baseline the environment
    dependent prefactors are measured against."""
    report = prefactor_lclt_report(
        env, spec, n, K, modes=(mode,), tau=tau, seed=seed, threads=threads,
        site_budget=site_budget,
    )
    return report.rows[0]["defect"]


def prefactor_lclt_report(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    K: int,
    modes=("cesaro", "constant-one"),
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> DefectReport:
    """Prefactor-LCLT defects for several prefactor modes against the same
    annealed replicas, with jackknife error bars and, when two or more
    modes are given, the paired difference of the first two."""
    start = (0,) * spec.d
    que = quenched_distribution(env, start, n, prune=tau, site_budget=site_budget)
    ann = annealed_distribution(
        spec, start, n, K, tau=tau, seed=seed, threads=threads,
        keep_replicas=True, site_budget=site_budget,
    )
    lo, hi = _union_box(ann.replicas + [que])
    que_arr = _to_dense(que, lo, hi)
    stack = np.stack([_to_dense(r, lo, hi) for r in ann.replicas])
    pruned = que.pruned_mass + sum(r.pruned_mass for r in ann.replicas) / K
    fields = {}
    for mode in modes:
        f = _field_for_mode(env, mode, n, lo, hi, tau, site_budget)
        if not (f.contains(lo) and f.contains(hi)):
            raise ValueError("prefactor window does not cover the law supports")
        fields[mode] = f
    rows = []
    for mode in modes:
        fvals = fields[mode].values
        val, se = _jackknife(stack, lambda mean: float(np.abs(que_arr - mean * fvals).sum()))
        rows.append(
            {"metric": f"defect-{mode}", "param": n, "defect": val,
             "err": se + 2.0 * pruned, "samples": K}
        )
    if len(modes) >= 2:
        fa, fb = fields[modes[0]].values, fields[modes[1]].values

        def paired(mean):
            da = float(np.abs(que_arr - mean * fa).sum())
            db = float(np.abs(que_arr - mean * fb).sum())
            return da - db

        diff, se = _jackknife(stack, paired)
        rows.append(
            {"metric": f"difference-{modes[0]}-vs-{modes[1]}", "param": n,
             "defect": abs(diff), "err": se + 2.0 * pruned, "samples": K,
             "signed_difference": diff}
        )
    meta = _meta(spec, seed, K, {"n": n, "tau": tau, "modes": list(modes),
                                 "env_seed": str(env.seed)})
    return DefectReport(kind="prefactor-lclt", rows=rows, meta=meta).validate()


# ---------------------------------------------------------------------------
# intermediate measures


def _scaled_dist(base: SparseLatticeDist, fvals: PrefactorField, z: float) -> SparseLatticeDist:
    mass = {x: base.mass[x] * fvals.value_at(x) / z for x in base.sites()}
    return SparseLatticeDist(base.n, base.start, mass, 0.0)


def _box_redistributed(
    que: SparseLatticeDist, f: PrefactorField, side: int
) -> SparseLatticeDist:
    """Quenched box measure times prefactor: quenched mass of each side-M
    box spread over the parity-compatible sites of the box proportionally
    to f."""
    part = BoxPartition(side)
    boxes: dict = {}
    for x in que.sites():
        key = part.box_of(x)
        boxes[key] = boxes.get(key, 0.0) + que.mass[x]
    mass: dict = {}
    for key in sorted(boxes):
        box_mass = boxes[key]
        cells = [
            x for x in part.box_sites(key)
            if f.contains(x) and (sum(abs(c - s) for c, s in zip(x, que.start)) + que.n) % 2 == 0
        ]
        weights = [f.value_at(x) for x in cells]
        total = sum(weights)
        if total <= 0.0:
            raise AssertionError("prefactor vanished on a box with quenched mass")
        for x, wgt in zip(cells, weights):
            m = box_mass * wgt / total
            if m > 0.0:
                mass[x] = mass.get(x, 0.0) + m
    return SparseLatticeDist(que.n, que.start, dict(sorted(mass.items())), que.pruned_mass)


def intermediate_measures_defects(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    eps: float,
    delta: float,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> tuple[float, float, float]:
    """L1 distances along the interpolation chain from the annealed law
    times the prefactor to the quenched law; see the report variant for
    the full breakdown."""
    rep = intermediate_measures_report(
        env, spec, n, eps, delta, K, tau=tau, seed=seed, threads=threads,
        site_budget=site_budget,
    )
    return rep["d1"], rep["d2"], rep["d3"]


def intermediate_measures_report(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    eps: float,
    delta: float,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> dict:
    """Build the four measures of the interpolation chain exactly and
    report the three consecutive L1 distances.

    Chain at time n: (1) annealed times Cesaro prefactor, normalized by
    Z; (2) the same at time n-k, environment-convolved k steps; (3) the
    box-redistributed quenched law times the prefactor at n-k, convolved
    k steps; (4) the quenched law. k = ceil(n^eps), box side l =
    ceil(n^delta). The triangle and convolution-contraction facts are
    asserted on every run."""
    if n < 2:
        raise ValueError("need n >= 2")
    k = math.ceil(n**eps)
    ell = math.ceil(n**delta)
    if k >= n:
        raise ValueError(f"k = ceil(n^eps) = {k} must be below n = {n}")
    start = (0,) * spec.d

    que_nk = quenched_distribution(env, start, n - k, prune=tau, site_budget=site_budget)
    que_n = env_convolve(env, que_nk, k, prune=tau, site_budget=site_budget)

    def worker(j):
        e = Environment(spec, env_seed(seed, j))
        dnk = quenched_distribution(e, start, n - k, prune=tau, site_budget=site_budget)
        dn = evolve_forward(e, dnk, k, prune=tau, site_budget=site_budget)
        return dnk, dn

    pairs = _replica_map(worker, K, threads)

    def mean_of(dists, time):
        sums: dict = {}
        for dd in dists:
            for x in dd.sites():
                sums[x] = sums.get(x, 0.0) + dd.mass[x]
        mass = {x: sums[x] / K for x in sorted(sums)}
        pr = sum(dd.pruned_mass for dd in dists) / K
        return SparseLatticeDist(time, start, mass, pr)

    ann_nk = mean_of([p[0] for p in pairs], n - k)
    ann_n = mean_of([p[1] for p in pairs], n)

    lo_n, hi_n = _union_box([ann_n, que_n])
    f_n = cesaro_prefactor(env, n, lo_n, hi_n, prune=tau, site_budget=site_budget)
    z_n = normalization_constant(ann_n, f_n)
    z_inline = sum(ann_n.mass[x] * f_n.value_at(x) for x in ann_n.sites())
    if abs(z_n - z_inline) > 1e-12 * max(1.0, abs(z_n)):
        raise AssertionError("normalization constant mismatch between code paths")
    mu1 = _scaled_dist(ann_n, f_n, z_n)

    lo_k, hi_k = _union_box([ann_nk, que_nk])
    lo_k = tuple((l // ell) * ell for l in lo_k)
    hi_k = tuple(-((-h - 1) // ell) * ell - 1 for h in hi_k)
    f_nk = cesaro_prefactor(env, n - k, lo_k, hi_k, prune=tau, site_budget=site_budget)
    z_nk = normalization_constant(ann_nk, f_nk)
    first2 = _scaled_dist(ann_nk, f_nk, z_nk)
    mu2 = env_convolve(env, first2, k, prune=tau, site_budget=site_budget)

    first3 = _box_redistributed(que_nk, f_nk, ell)
    mu3 = env_convolve(env, first3, k, prune=tau, site_budget=site_budget)

    d1 = l1_point_distance(mu1, mu2)
    d2 = l1_point_distance(mu2, mu3)
    d3 = l1_point_distance(mu3, que_n)
    direct = l1_point_distance(mu1, que_n)
    if direct > d1 + d2 + d3 + 1e-9:
        raise AssertionError("triangle inequality failed across the measure chain")
    if d2 > l1_point_distance(first2, first3) + 1e-9:
        raise AssertionError("environment convolution expanded an L1 distance")
    if d3 > l1_point_distance(first3, que_nk) + 1e-9:
        raise AssertionError("environment convolution expanded an L1 distance")
    return {
        "schema": "rwre-lab/intermediate-measures/1",
        "n": n, "k": k, "box_side": ell, "eps": eps, "delta": delta,
        "K": K, "seed": seed, "tau": tau,
        "z_n": z_n, "z_nk": z_nk,
        "d1": d1, "d2": d2, "d3": d3,
        "direct": direct,
        "triangle_slack": d1 + d2 + d3 - direct,
        "spec_hash": spec.spec_hash(),
        "note": _DIM_NOTE if spec.d < 4 else "",
    }
