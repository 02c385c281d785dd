"""Coupling constructions between quenched and annealed laws: the optimal
total-variation coupling over a cubic box partition, its point refinement
through uniform ellipticity, and the iterated merge coupling of two walks
in one environment.

The box coupling puts min(p, q) mass on each diagonal box pair, which is
the largest diagonal any coupling can have; the residual is completed as a
product of the normalized leftover marginals (any valid completion would
do; this one is the default and the point refinement relies on it).  The
point refinement pushes a box coupling forward d*M steps through the
conditional endpoint laws, so every diagonal box contributes at least
eta^(2dM) of its mass to exact point agreement.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dist import SparseLatticeDist
from .environment import Environment, EnvironmentSpec
from .lattice import BoxPartition, Site, l1
from .quenched import DEFAULT_SITE_BUDGET, evolve_forward, quenched_distribution
from .rng import TAG_ENV, TAG_PAIR, derive_key128, env_seed, stream
from .walker import wilson_ci


def _as_partition(partition) -> BoxPartition | None:
    if partition is None or partition == math.inf:
        return None
    if isinstance(partition, BoxPartition):
        return partition
    return BoxPartition(int(partition))


def _box_masses(dist: SparseLatticeDist, part: BoxPartition | None) -> dict:
    out: dict = {}
    for x in dist.sites():
        key = part.box_of(x) if part is not None else 0
        out[key] = out.get(key, 0.0) + dist.mass[x]
    return out


# ---------------------------------------------------------------------------
# box-level coupling


@dataclass
class BoxCoupling:
    """Joint law on pairs of partition boxes with maximal diagonal mass."""

    joint: dict
    p_boxes: dict
    q_boxes: dict
    diagonal_mass: float
    side: int | None
    n: int

    def off_diagonal_mass(self) -> float:
        return sum(m for (a, b), m in self.joint.items() if a != b)

    def validate(self, tol: float = 1e-12) -> "BoxCoupling":
        rows: dict = {}
        cols: dict = {}
        diag = 0.0
        for (a, b), m in sorted(self.joint.items()):
            if m < 0:
                raise ValueError(f"negative joint mass at {(a, b)}")
            rows[a] = rows.get(a, 0.0) + m
            cols[b] = cols.get(b, 0.0) + m
            if a == b:
                diag += m
        for key in sorted(set(rows) | set(self.p_boxes)):
            if abs(rows.get(key, 0.0) - self.p_boxes.get(key, 0.0)) > tol:
                raise ValueError(f"row marginal mismatch at box {key}")
        for key in sorted(set(cols) | set(self.q_boxes)):
            if abs(cols.get(key, 0.0) - self.q_boxes.get(key, 0.0)) > tol:
                raise ValueError(f"column marginal mismatch at box {key}")
        l1_boxes = sum(
            abs(self.p_boxes.get(k, 0.0) - self.q_boxes.get(k, 0.0))
            for k in sorted(set(self.p_boxes) | set(self.q_boxes))
        )
        total = sum(self.p_boxes.values())
        if abs(self.diagonal_mass - (total - 0.5 * l1_boxes)) > 1e-12:
            raise ValueError("diagonal mass is not total - L1/2")
        if abs(diag - self.diagonal_mass) > 1e-12:
            raise ValueError("stored diagonal mass disagrees with the joint")
        return self

    def write_csv(self, path) -> None:
        _write_coupling_csv(self.joint, path)


def _write_coupling_csv(joint: dict, path) -> None:
    def render(key):
        if isinstance(key, tuple):
            return "/".join(str(int(c)) for c in key)
        return str(key)

    with open(path, "w") as fh:
        fh.write("left,right,mass\n")
        for (a, b), m in sorted(joint.items()):
            fh.write(f"{render(a)},{render(b)},{repr(float(m))}\n")


def tv_box_coupling(p: SparseLatticeDist, q: SparseLatticeDist, partition) -> BoxCoupling:
    """Optimal-diagonal coupling of the box marginals of p and q: each box
    keeps min(p, q) on the diagonal and the leftovers couple as a product
    of the normalized residuals."""
    if p.n != q.n:
        raise ValueError(f"time index mismatch: {p.n} vs {q.n}")
    if abs(p.total_mass() - q.total_mass()) > 1e-9:
        raise ValueError("cannot couple laws with different total masses")
    part = _as_partition(partition)
    pb = _box_masses(p, part)
    qb = _box_masses(q, part)
    keys = sorted(set(pb) | set(qb))
    joint: dict = {}
    diag = 0.0
    rp: dict = {}
    rq: dict = {}
    for k in keys:
        a, b = pb.get(k, 0.0), qb.get(k, 0.0)
        m = min(a, b)
        if m > 0.0:
            joint[(k, k)] = m
            diag += m
        if a > m:
            rp[k] = a - m
        if b > m:
            rq[k] = b - m
    denom = sum(rq[k] for k in sorted(rq))
    if denom > 0.0:
        for ka in sorted(rp):
            for kb in sorted(rq):
                joint[(ka, kb)] = joint.get((ka, kb), 0.0) + rp[ka] * rq[kb] / denom
    return BoxCoupling(
        joint=joint,
        p_boxes=pb,
        q_boxes=qb,
        diagonal_mass=diag,
        side=part.M if part is not None else None,
        n=p.n,
    ).validate()


# ---------------------------------------------------------------------------
# point-level refinement


@dataclass
class PointCoupling:
    """Coupling of two time-n point laws obtained by refining a box
    coupling through d*M conditional steps. ``joint`` is None when the
    support was too large to materialize; the diagonal and marginals are
    always available."""

    diagonal: dict
    diagonal_mass: float
    p_marginal: dict
    q_marginal: dict
    p_law: SparseLatticeDist
    q_law: SparseLatticeDist
    box_diagonal: dict
    box_side: int
    steps: int
    pruning_loss: float
    eta: float = 0.0
    joint: dict | None = None

    @property
    def materialized(self) -> bool:
        return self.joint is not None

    def box_of(self, x: Site):
        return tuple(int(c) // self.box_side for c in x)

    def diagonal_bound_slack(self) -> float:
        """Smallest value of Theta(x, x) - Theta_box(B_x, B_x) * eta^(2dM)
        over the union of the two marginal supports; nonnegative means the
        ellipticity diagonal bound holds everywhere."""
        floor = self.eta ** (2 * self.steps)
        slack = math.inf
        for x in sorted(set(self.p_law.mass) | set(self.q_law.mass)):
            box_mass = self.box_diagonal.get(self.box_of(x), 0.0)
            slack = min(slack, self.diagonal.get(x, 0.0) - box_mass * floor)
        if math.isinf(slack):
            raise ValueError("coupling has empty marginals")
        return float(slack)

    def validate(self, tol: float = 1e-10) -> "PointCoupling":
        slack = tol + self.pruning_loss
        for x in sorted(set(self.p_marginal) | set(self.p_law.mass)):
            if abs(self.p_marginal.get(x, 0.0) - self.p_law.mass.get(x, 0.0)) > slack:
                raise ValueError(f"left marginal mismatch at {x}")
        for y in sorted(set(self.q_marginal) | set(self.q_law.mass)):
            if abs(self.q_marginal.get(y, 0.0) - self.q_law.mass.get(y, 0.0)) > slack:
                raise ValueError(f"right marginal mismatch at {y}")
        if any(m < 0 for m in self.diagonal.values()):
            raise ValueError("negative diagonal mass")
        if self.joint is not None:
            if any(m < 0 for m in self.joint.values()):
                raise ValueError("negative joint mass")
            diag = sum(m for (a, b), m in self.joint.items() if a == b)
            if abs(diag - self.diagonal_mass) > 1e-10:
                raise ValueError("diagonal disagrees with the materialized joint")
        return self

    def write_csv(self, path) -> None:
        if self.joint is None:
            raise ValueError("coupling was not materialized; nothing to export")
        flat = {
            ("/".join(map(str, a)), "/".join(map(str, b))): m for (a, b), m in self.joint.items()
        }
        with open(path, "w") as fh:
            fh.write("left,right,mass\n")
            for (a, b), m in sorted(flat.items()):
                fh.write(f"{a},{b},{repr(float(m))}\n")


def _restricted(dist: SparseLatticeDist, part: BoxPartition, key) -> SparseLatticeDist:
    mass = {x: dist.mass[x] for x in dist.sites() if part.box_of(x) == key}
    return SparseLatticeDist(dist.n, dist.start, mass, 0.0)


def refine_point_coupling(
    box_coupling: BoxCoupling,
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    M: int,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    pair_budget: int = 2_000_000,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> PointCoupling:
    """Refine a box coupling of the time-(n - dM) annealed and quenched
    laws into a coupling of the time-n point laws.

    The inputs are recomputed from (spec, seed, K) and (env,) and checked
    against ``box_coupling``, which must be the default product-completed
    coupling with the annealed law on the left; the rank-one structure of
    that completion is what keeps the refinement tractable.  Each joint
    box pair routes its mass through the two conditional dM-step endpoint
    laws, so marginals are exact and every diagonal box keeps at least
    eta^(2dM) of its mass on exact point matches."""
    d = spec.d
    dM = d * M
    if n < dM:
        raise ValueError(f"need n >= d*M = {dM}, got n = {n}")
    nk = n - dM
    start = (0,) * d
    part = BoxPartition(M)

    que_nk = quenched_distribution(env, start, nk, prune=tau, site_budget=site_budget)
    replicas = [
        quenched_distribution(
            Environment(spec, env_seed(seed, k)), start, nk, prune=tau, site_budget=site_budget
        )
        for k in range(K)
    ]
    sums: dict = {}
    for r in replicas:
        for x in r.sites():
            sums[x] = sums.get(x, 0.0) + r.mass[x]
    ann_nk = SparseLatticeDist(
        nk, start, {x: sums[x] / K for x in sorted(sums)},
        sum(r.pruned_mass for r in replicas) / K,
    )
    expected = tv_box_coupling(ann_nk, que_nk, part)
    for key in sorted(set(expected.joint) | set(box_coupling.joint)):
        if abs(expected.joint.get(key, 0.0) - box_coupling.joint.get(key, 0.0)) > 1e-9:
            raise ValueError(
                "box coupling does not match the default product-completed coupling "
                "of the time-(n-dM) annealed (left) and quenched (right) laws"
            )

    pb, qb = expected.p_boxes, expected.q_boxes
    mins = {k: min(pb.get(k, 0.0), qb.get(k, 0.0)) for k in sorted(set(pb) | set(qb))}
    rp = {k: pb[k] - mins[k] for k in sorted(pb) if pb[k] > mins[k]}
    rq = {k: qb[k] - mins[k] for k in sorted(qb) if qb[k] > mins[k]}
    denom = sum(rq[k] for k in sorted(rq))

    pruned_acc = [que_nk.pruned_mass + ann_nk.pruned_mass]

    def cond_que(key) -> dict:
        restricted = _restricted(que_nk, part, key)
        ev = evolve_forward(env, restricted, dM, prune=tau, site_budget=site_budget)
        pruned_acc[0] += ev.pruned_mass
        total = qb[key]
        return {x: ev.mass[x] / total for x in ev.sites()}

    def cond_ann(key) -> dict:
        acc: dict = {}
        pr = 0.0
        for k, r in enumerate(replicas):
            restricted = _restricted(r, part, key)
            if not restricted.mass:
                continue
            e = Environment(spec, env_seed(seed, k))
            ev = evolve_forward(e, restricted, dM, prune=tau, site_budget=site_budget)
            pr += ev.pruned_mass
            for x in ev.sites():
                acc[x] = acc.get(x, 0.0) + ev.mass[x]
        pruned_acc[0] += pr / K
        total = pb[key] * K
        return {x: acc[x] / total for x in sorted(acc)}

    ca = {k: cond_ann(k) for k in sorted(pb) if pb[k] > 0}
    cq = {k: cond_que(k) for k in sorted(qb) if qb[k] > 0}

    ann_mix: dict = {}
    for k in sorted(rp):
        for x, v in ca[k].items():
            ann_mix[x] = ann_mix.get(x, 0.0) + rp[k] * v
    que_mix: dict = {}
    for k in sorted(rq):
        for y, v in cq[k].items():
            que_mix[y] = que_mix.get(y, 0.0) + rq[k] * v

    diag_pairs = sum(
        len(ca[k]) * len(cq[k]) for k in sorted(mins) if mins[k] > 0 and k in ca and k in cq
    )
    mix_pairs = len(ann_mix) * len(que_mix) if denom > 0 else 0
    materialize = diag_pairs + mix_pairs <= pair_budget

    diagonal: dict = {}
    joint: dict | None = {} if materialize else None
    for k in sorted(mins):
        m = mins[k]
        if m <= 0 or k not in ca or k not in cq:
            continue
        cak, cqk = ca[k], cq[k]
        if materialize:
            for x, vx in sorted(cak.items()):
                for y, vy in sorted(cqk.items()):
                    w = m * vx * vy
                    if w > 0.0:
                        joint[(x, y)] = joint.get((x, y), 0.0) + w
        for x in sorted(set(cak) & set(cqk)):
            diagonal[x] = diagonal.get(x, 0.0) + m * cak[x] * cqk[x]
    if denom > 0:
        if materialize:
            for x, vx in sorted(ann_mix.items()):
                for y, vy in sorted(que_mix.items()):
                    w = vx * vy / denom
                    if w > 0.0:
                        joint[(x, y)] = joint.get((x, y), 0.0) + w
        for x in sorted(set(ann_mix) & set(que_mix)):
            diagonal[x] = diagonal.get(x, 0.0) + ann_mix[x] * que_mix[x] / denom

    p_marg: dict = {}
    for k in sorted(pb):
        if pb[k] <= 0:
            continue
        for x, v in ca[k].items():
            p_marg[x] = p_marg.get(x, 0.0) + pb[k] * v
    q_marg: dict = {}
    for k in sorted(qb):
        if qb[k] <= 0:
            continue
        for y, v in cq[k].items():
            q_marg[y] = q_marg.get(y, 0.0) + qb[k] * v

    ann_n_sums: dict = {}
    pr_n = 0.0
    for k, r in enumerate(replicas):
        e = Environment(spec, env_seed(seed, k))
        ev = evolve_forward(e, r, dM, prune=tau, site_budget=site_budget)
        pr_n += ev.pruned_mass
        for x in ev.sites():
            ann_n_sums[x] = ann_n_sums.get(x, 0.0) + ev.mass[x]
    ann_n = SparseLatticeDist(
        n, start, {x: ann_n_sums[x] / K for x in sorted(ann_n_sums)}, pr_n / K
    )
    que_n = evolve_forward(env, que_nk, dM, prune=tau, site_budget=site_budget)

    return PointCoupling(
        diagonal=dict(sorted(diagonal.items())),
        diagonal_mass=float(sum(diagonal[x] for x in sorted(diagonal))),
        p_marginal=dict(sorted(p_marg.items())),
        q_marginal=dict(sorted(q_marg.items())),
        p_law=ann_n,
        q_law=que_n,
        box_diagonal={k: mins[k] for k in sorted(mins) if mins[k] > 0},
        box_side=M,
        steps=dM,
        pruning_loss=float(pruned_acc[0] + pr_n / K + que_n.pruned_mass),
        eta=spec.eta,
        joint=joint,
    ).validate()


def build_couplings(
    env: Environment,
    spec: EnvironmentSpec,
    n: int,
    M: int,
    K: int,
    tau: float = 0.0,
    seed: int = 0,
    pair_budget: int = 2_000_000,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> tuple[BoxCoupling, PointCoupling]:
    """Full pipeline for one environment: the box coupling of the
    time-(n - dM) annealed (K replicas) and quenched laws, and its point
    refinement at time n."""
    d = spec.d
    dM = d * M
    if n < dM:
        raise ValueError(f"need n >= d*M = {dM}, got n = {n}")
    nk = n - dM
    start = (0,) * d
    que_nk = quenched_distribution(env, start, nk, prune=tau, site_budget=site_budget)
    sums: dict = {}
    pruned = 0.0
    for k in range(K):
        r = quenched_distribution(
            Environment(spec, env_seed(seed, k)), start, nk, prune=tau, site_budget=site_budget
        )
        pruned += r.pruned_mass
        for x in r.sites():
            sums[x] = sums.get(x, 0.0) + r.mass[x]
    ann_nk = SparseLatticeDist(
        nk, start, {x: sums[x] / K for x in sorted(sums)}, pruned / K
    )
    box = tv_box_coupling(ann_nk, que_nk, BoxPartition(M))
    point = refine_point_coupling(
        box, env, spec, n, M, K, tau=tau, seed=seed,
        pair_budget=pair_budget, site_budget=site_budget,
    )
    return box, point


# ---------------------------------------------------------------------------
# iterated pair-walk coupling


def _sample_sorted(items, rng) -> Site:
    total = sum(m for _, m in items)
    u = rng.random() * total
    acc = 0.0
    for x, m in items:
        acc += m
        if u < acc:
            return x
    return items[-1][0]


def _sample_maximal(a: dict, b: dict, rng) -> tuple[Site, Site]:
    """Draw one pair from the maximal coupling of two normalized point
    laws: identical with probability sum min(a, b), independent normalized
    residuals otherwise."""
    keys = sorted(set(a) | set(b))
    mins = [(x, min(a.get(x, 0.0), b.get(x, 0.0))) for x in keys]
    overlap = sum(m for _, m in mins)
    if rng.random() < overlap:
        x = _sample_sorted([it for it in mins if it[1] > 0], rng)
        return x, x
    ra = [(x, a.get(x, 0.0) - m) for x, m in mins]
    rb = [(x, b.get(x, 0.0) - m) for x, m in mins]
    x = _sample_sorted([it for it in ra if it[1] > 0], rng)
    y = _sample_sorted([it for it in rb if it[1] > 0], rng)
    return x, y


def coupled_pair_walk(
    env: Environment,
    x: Site,
    y: Site,
    theta: float,
    M: int,
    rounds: int,
    rng,
    n: int | None = None,
    tau: float = 0.0,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> dict:
    """Run the iterated merge coupling of two walks in one environment.

    Rounds last h = max(ceil(n^theta), d*M) steps.  When the pair is within
    n^theta' (theta' midway between theta and (d+1)theta/2), the round
    couples the two h-step quenched laws: a box coupling at horizon h - dM
    picks a box pair, a landing box shared by both walks hands the final dM
    steps to the maximal coupling of the conditional endpoint laws, and
    anything else samples the conditionals independently.  Distant pairs
    move independently.  Once the positions coincide the pair moves as one
    walk forever, so merging is absorbing.

    ``n`` defaults to the smallest scale putting the initial pair within
    n^theta, so the first round is already a coupling round."""
    x = tuple(int(c) for c in x)
    y = tuple(int(c) for c in y)
    d = env.d
    if len(x) != d or len(y) != d:
        raise ValueError("site dimension mismatch")
    dist0 = l1(tuple(a - b for a, b in zip(x, y)))
    if dist0 % 2:
        raise ValueError("pair sites must have equal parity, or no coupling can merge them")
    if M < 2:
        raise ValueError("box side M must be >= 2")
    if not 0 < theta < 1:
        raise ValueError("theta must be in (0, 1)")
    if n is None:
        n = max(2, math.ceil(max(dist0, 2) ** (1.0 / theta)))
    dM = d * M
    h = max(math.ceil(n**theta), dM)
    theta_prime = (theta + (d + 1) * theta / 2.0) / 2.0
    close_scale = n**theta_prime

    merged_round = None
    merged_flags = []
    diag_masses = []
    part = BoxPartition(M)
    for rnd in range(1, rounds + 1):
        if x == y:
            if merged_round is None:
                merged_round = rnd - 1
            law = quenched_distribution(env, x, h, prune=tau, site_budget=site_budget)
            x = _sample_sorted(sorted(law.mass.items()), rng)
            y = x
            merged_flags.append(True)
            diag_masses.append(1.0)
            continue
        gap = l1(tuple(a - b for a, b in zip(x, y)))
        if gap <= close_scale:
            law_x = quenched_distribution(env, x, h - dM, prune=tau, site_budget=site_budget)
            law_y = quenched_distribution(env, y, h - dM, prune=tau, site_budget=site_budget)
            box = tv_box_coupling(law_x, law_y, part)
            diag_masses.append(box.diagonal_mass)
            kx, ky = _sample_box_pair(sorted(box.joint.items()), rng)
            cond_x = _conditional_endpoint(env, law_x, part, kx, dM, tau, site_budget)
            cond_y = _conditional_endpoint(env, law_y, part, ky, dM, tau, site_budget)
            if kx == ky:
                x, y = _sample_maximal(cond_x, cond_y, rng)
            else:
                x = _sample_sorted(sorted(cond_x.items()), rng)
                y = _sample_sorted(sorted(cond_y.items()), rng)
        else:
            diag_masses.append(None)
            law_x = quenched_distribution(env, x, h, prune=tau, site_budget=site_budget)
            law_y = quenched_distribution(env, y, h, prune=tau, site_budget=site_budget)
            x = _sample_sorted(sorted(law_x.mass.items()), rng)
            y = _sample_sorted(sorted(law_y.mass.items()), rng)
        if x == y and merged_round is None:
            merged_round = rnd
        merged_flags.append(x == y)
    return {
        "merged_round": merged_round,
        "merged": merged_round is not None,
        "rounds": rounds,
        "h": h,
        "n": n,
        "theta": theta,
        "theta_prime": theta_prime,
        "merged_flags": merged_flags,
        "diagonal_masses": diag_masses,
        "final_positions": [list(x), list(y)],
    }


def _sample_box_pair(items, rng):
    total = sum(m for _, m in items)
    u = rng.random() * total
    acc = 0.0
    for key, m in items:
        acc += m
        if u < acc:
            return key
    return items[-1][0]


def _conditional_endpoint(env, law, part, key, steps, tau, site_budget) -> dict:
    restricted = {x: law.mass[x] for x in law.sites() if part.box_of(x) == key}
    total = sum(restricted[x] for x in sorted(restricted))
    base = SparseLatticeDist(law.n, law.start, restricted, 0.0)
    ev = evolve_forward(env, base, steps, prune=tau, site_budget=site_budget)
    return {x: ev.mass[x] / total for x in ev.sites()}


def pair_merge_ensemble(
    spec: EnvironmentSpec,
    x: Site,
    y: Site,
    theta: float,
    M: int,
    rounds: int,
    pairs: int,
    seed: int = 0,
    n: int | None = None,
    tau: float = 0.0,
    threads: int = 1,
    site_budget: int = DEFAULT_SITE_BUDGET,
) -> dict:
    """Merge-frequency curve over independent environments: for each round
    k, the fraction of pairs merged by k with a Wilson interval, against
    the ellipticity lower bound 1 - (1 - eta^(2dM)/2)^k."""
    if pairs < 1:
        raise ValueError("need at least one pair")

    def worker(i):
        env = Environment(spec, derive_key128(seed, TAG_ENV, i))
        rng = stream(seed, TAG_PAIR, i)
        rep = coupled_pair_walk(
            env, x, y, theta, M, rounds, rng, n=n, tau=tau, site_budget=site_budget
        )
        return rep["merged_flags"]

    if threads > 1 and pairs > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flags = list(pool.map(worker, range(pairs)))
    else:
        flags = [worker(i) for i in range(pairs)]
    merged_by = np.array(flags, dtype=bool)
    rate = spec.eta ** (2 * spec.d * M) / 2.0
    rows = []
    for k in range(1, rounds + 1):
        hits = int(merged_by[:, : k].any(axis=1).sum())
        est = hits / pairs
        lo, hi = wilson_ci(hits, pairs)
        rows.append(
            {
                "round": k,
                "merged": hits,
                "estimate": est,
                "ci_lo": lo,
                "ci_hi": hi,
                "bound": 1.0 - (1.0 - rate) ** k,
            }
        )
    return {
        "schema": "rwre-lab/pair-merge/1",
        "pairs": pairs,
        "rounds": rounds,
        "theta": theta,
        "M": M,
        "x": list(x),
        "y": list(y),
        "per_round_rate_bound": rate,
        "rows": rows,
    }
