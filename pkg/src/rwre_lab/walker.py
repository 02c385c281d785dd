"""Monte Carlo walks in a fixed environment, directional hitting times,
regeneration detection, two-walk intersection counts, and the two
ballisticity probes (directional exit curve and box-exit probe).

Walk sampling is the only stochastic primitive here: one uniform per step,
mapped through the cumulative site law.  Everything downstream of a stream
is deterministic, so identical (seed, config) pairs reproduce trajectories
bit for bit regardless of how replicas are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .environment import Environment, EnvironmentSpec
from .errors import ResourceLimitError
from .lattice import ParallelogramGeom, Site, directions, scale_R
from .rng import TAG_ENV, TAG_PROBE, derive_key128, stream


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """A nearest-neighbour path X_0..X_n on Z^d.

    ``steps`` holds the unit increments X_{t+1} - X_t as an (n, d) integer
    array; positions are derived lazily and cached.
    """

    start: Site
    steps: np.ndarray
    _positions: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.start = tuple(int(c) for c in self.start)
        self.steps = np.asarray(self.steps, dtype=np.int64).reshape(-1, len(self.start))

    @property
    def n(self) -> int:
        return self.steps.shape[0]

    @property
    def d(self) -> int:
        return len(self.start)

    @property
    def positions(self) -> np.ndarray:
        """(n+1, d) array of visited sites, including the start."""
        if self._positions is None:
            pos = np.empty((self.n + 1, self.d), dtype=np.int64)
            pos[0] = self.start
            if self.n:
                np.cumsum(self.steps, axis=0, out=pos[1:])
                pos[1:] += pos[0]
            self._positions = pos
        return self._positions

    def levels(self, ell) -> np.ndarray:
        """Inner products <X_t, ell> along the path."""
        return self.positions @ np.asarray(ell, dtype=np.int64)

    def validate(self) -> "Trajectory":
        if self.n and not np.all(np.abs(self.steps).sum(axis=1) == 1):
            raise ValueError("trajectory has a step that is not a unit lattice move")
        return self

    def write_csv(self, path) -> None:
        d = self.d
        with open(path, "w") as fh:
            fh.write("t," + ",".join(f"x{j + 1}" for j in range(d)) + "\n")
            for t, row in enumerate(self.positions):
                fh.write(str(t) + "," + ",".join(str(int(c)) for c in row) + "\n")


def simulate_walk(env: Environment, start: Site, n: int, rng: np.random.Generator) -> Trajectory:
    """Sample an n-step quenched walk from ``start`` driven by ``rng``.

    Each step draws one uniform and inverts the cumulative law of the
    current site, so the trajectory is a pure function of the stream.
    """
    if n < 0:
        raise ValueError("walk length must be nonnegative")
    d = env.d
    dirs = np.asarray(directions(d), dtype=np.int64)
    steps = np.empty((n, d), dtype=np.int64)
    x = tuple(int(c) for c in start)
    u = rng.random(n)
    last = 2 * d - 1
    for t in range(n):
        cum = env.site_cumlaw(x)
        j = int(np.searchsorted(cum, u[t], side="right"))
        if j > last:
            j = last
        e = dirs[j]
        steps[t] = e
        x = tuple(int(a + b) for a, b in zip(x, e))
    return Trajectory(start=start, steps=steps)


def directional_hitting_time(traj: Trajectory, ell, L: int):
    """First t with <X_t, ell> >= L, or None when the path never gets there."""
    lev = traj.levels(ell)
    hits = np.nonzero(lev >= L)[0]
    return int(hits[0]) if hits.size else None


# ---------------------------------------------------------------------------
# regeneration detection


@dataclass(frozen=True)
class RegenerationRecord:
    """A fresh-level time t: the path sits strictly above its past and never
    returns to or below the level of X_{t+1} afterwards (as far as observed).

    ``margin_reached`` is the largest level gain over <X_t, ell> seen in the
    remaining path; the record is confirmed when it is at least the
    requested margin.
    """

    t: int
    site: Site
    level: int
    margin_reached: int
    confirmed: bool


def default_margin(n: int) -> int:
    """Confirmation margin policy for an n-step walk: 2 R_1(n), capped at n/10."""
    if n < 3:
        return 0
    return min(2 * scale_R(1, n), n // 10)


def _unit_coordinate(ell, d: int) -> np.ndarray:
    e = np.asarray(ell, dtype=np.int64)
    if e.shape != (d,) or np.abs(e).sum() != 1:
        raise ValueError("direction must be a signed unit coordinate vector")
    return e


def detect_regenerations(traj: Trajectory, ell, margin: int | None = None) -> list[RegenerationRecord]:
    """Single-pass regeneration scan along direction ``ell``.

    A time t qualifies when (1) every earlier level is strictly below
    <X_t, ell>, (2) the walk steps up at t, and (3) every later observed
    level stays strictly above <X_{t+1}, ell>.  Candidates are kept on a
    stack whose gate levels <X_{t+1}, ell> are strictly increasing, so each
    new level pops every candidate it refutes and the scan is linear.
    """
    e = _unit_coordinate(ell, traj.d)
    if margin is None:
        margin = default_margin(traj.n)
    if margin < 0:
        raise ValueError("confirmation margin must be >= 0")
    lev = traj.levels(e)
    n = traj.n
    stack: list[int] = []
    running_max = None
    for s in range(1, n + 1):
        here = lev[s]
        while stack and lev[stack[-1] + 1] >= here:
            stack.pop()
        t = s - 1
        fresh = running_max is None or lev[t] > running_max
        if fresh and here > lev[t]:
            stack.append(t)
        running_max = lev[t] if running_max is None else max(running_max, lev[t])
    if not stack:
        return []
    suffix_max = np.maximum.accumulate(lev[::-1])[::-1]
    out = []
    for t in stack:
        reached = int(suffix_max[t] - lev[t])
        out.append(
            RegenerationRecord(
                t=int(t),
                site=tuple(int(c) for c in traj.positions[t]),
                level=int(lev[t]),
                margin_reached=reached,
                confirmed=reached >= margin,
            )
        )
    return out


def brute_force_regenerations(traj: Trajectory, ell, margin: int | None = None) -> list[RegenerationRecord]:
    """Literal O(n^2) transcription of the regeneration conditions.

    Reference implementation used to cross-check the stack detector; never
    called on hot paths.
    """
    e = _unit_coordinate(ell, traj.d)
    if margin is None:
        margin = default_margin(traj.n)
    lev = traj.levels(e)
    n = traj.n
    out = []
    for t in range(n):
        if bool(np.any(lev[:t] >= lev[t])):
            continue
        if lev[t + 1] <= lev[t]:
            continue
        if bool(np.any(lev[t + 2:] <= lev[t + 1])):
            continue
        reached = int(lev[t:].max() - lev[t])
        out.append(
            RegenerationRecord(
                t=int(t),
                site=tuple(int(c) for c in traj.positions[t]),
                level=int(lev[t]),
                margin_reached=reached,
                confirmed=reached >= margin,
            )
        )
    return out


# ---------------------------------------------------------------------------
# two-walk intersections


def intersection_count(
    env: Environment,
    start: Site,
    N: int,
    rng_pair,
    geom: ParallelogramGeom | None = None,
    drift=None,
    t_max: int = 100_000,
) -> int:
    """Distinct sites visited by both of two independent walks inside the
    parallelogram around ``start``.

    Both walks run in the *same* environment until they leave the region or
    hit ``t_max``.  Only in-region sites count, so the result is at least 1
    (the shared start) and identical streams give the full single-walk trace.
    """
    start = tuple(int(c) for c in start)
    d = env.d
    if geom is None:
        if drift is None:
            drift = tuple(1 if j == 0 else 0 for j in range(d))
        geom = ParallelogramGeom(center=start, N=N, drift=drift)
    if not geom.contains(start):
        raise ValueError("start site must lie inside the parallelogram")
    dirs = np.asarray(directions(d), dtype=np.int64)
    last = 2 * d - 1
    traces: list[set] = []
    for rng in rng_pair:
        x = start
        visited = {x}
        for _ in range(t_max):
            cum = env.site_cumlaw(x)
            j = int(np.searchsorted(cum, rng.random(), side="right"))
            if j > last:
                j = last
            e = dirs[j]
            x = tuple(int(a + b) for a, b in zip(x, e))
            if not geom.contains(x):
                break
            visited.add(x)
        traces.append(visited)
    return len(traces[0] & traces[1])


# ---------------------------------------------------------------------------
# small-sample binomial interval


def wilson_ci(successes: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("Wilson interval needs at least one trial")
    phat = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (phat + z2 / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z2 / (4 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


# ---------------------------------------------------------------------------
# ballisticity probe: directional exit curve


def condition_t_curve(
    spec: EnvironmentSpec,
    ell,
    l_grid,
    samples: int,
    t_max: int | None = None,
    seed: int = 0,
) -> dict:
    """Annealed back-exit curve: for each L in the grid, estimate the
    probability that the walk reaches level -L (against ``ell``) before
    level +L, with Wilson intervals and a tail-exponent fit.

    Every sample runs in a fresh environment.  Runs that decide neither
    side within ``t_max`` are reported as censored; an all-censored L is
    flagged and left out of the fit.  The fitted exponent is the slope of
    log(-log p) against log L over the usable points.
    """
    d = spec.d
    e = _unit_coordinate(ell, d)
    grid = [int(L) for L in l_grid]
    if not grid or any(L <= 0 for L in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("L grid must be strictly increasing positive integers")
    if samples < 100:
        raise ValueError("need at least 100 samples per grid point")
    if t_max is None:
        t_max = 200 * grid[-1] ** 2
    dirs = np.asarray(directions(d), dtype=np.int64)
    ell_steps = dirs @ e
    last = 2 * d - 1
    origin = (0,) * d
    rows = []
    for li, L in enumerate(grid):
        neg = pos = censored = 0
        for j in range(samples):
            env = Environment(spec, derive_key128(seed, TAG_ENV, li, j))
            rng = stream(seed, TAG_PROBE, li, j)
            x = origin
            level = 0
            decided = 0
            for _ in range(t_max):
                cum = env.site_cumlaw(x)
                k = int(np.searchsorted(cum, rng.random(), side="right"))
                if k > last:
                    k = last
                x = tuple(int(a + b) for a, b in zip(x, dirs[k]))
                level += int(ell_steps[k])
                if level >= L:
                    decided = 1
                    break
                if level <= -L:
                    decided = -1
                    break
            if decided > 0:
                pos += 1
            elif decided < 0:
                neg += 1
            else:
                censored += 1
        done = neg + pos
        if done:
            est = neg / done
            lo, hi = wilson_ci(neg, done)
        else:
            est = lo = hi = None
        rows.append(
            {
                "L": L,
                "neg": neg,
                "pos": pos,
                "censored": censored,
                "estimate": est,
                "ci_lo": lo,
                "ci_hi": hi,
                "excluded": done == 0,
            }
        )
    xs, ys = [], []
    for row in rows:
        p = row["estimate"]
        if row["excluded"] or p is None or not (0.0 < p < 1.0):
            continue
        xs.append(math.log(row["L"]))
        ys.append(math.log(-math.log(p)))
    if len(xs) >= 2:
        slope, intercept = np.polyfit(np.asarray(xs), np.asarray(ys), 1)
        gamma_hat, fit_intercept = float(slope), float(intercept)
    else:
        gamma_hat = fit_intercept = None
    return {
        "schema": "rwre-lab/probe-t/1",
        "ell": [int(c) for c in e],
        "samples": samples,
        "t_max": t_max,
        "rows": rows,
        "gamma_hat": gamma_hat,
        "fit_intercept": fit_intercept,
        "fit_points": len(xs),
    }


# ---------------------------------------------------------------------------
# ballisticity probe: box exit


def _probe_starts(level_lo, level_hi, half_width, d, max_starts):
    """Deterministic grid of start points: levels in [level_lo, level_hi),
    transverse coordinates in (-half_width, half_width), subsampled evenly
    per axis (keeping extremes) so the grid never exceeds ``max_starts``."""

    def pick(values, k):
        if len(values) <= k:
            return list(values)
        idx = np.unique(np.round(np.linspace(0, len(values) - 1, k)).astype(int))
        return [values[i] for i in idx]

    levels = list(range(level_lo, level_hi))
    trans = list(range(-half_width + 1, half_width))
    n_axes = d - 1
    per_level = max(1, min(len(levels), max_starts))
    if n_axes:
        per_trans = max(1, int((max_starts / per_level) ** (1.0 / n_axes)))
    else:
        per_trans = 1
    levels = pick(levels, per_level)
    trans = pick(trans, per_trans)
    starts = []
    for lv in levels:
        stack = [[lv]]
        for _ in range(n_axes):
            stack = [p + [t] for p in stack for t in trans]
        starts.extend(tuple(p) for p in stack)
    return starts[:max_starts]


def condition_p_probe(
    spec: EnvironmentSpec,
    ell,
    n0: int,
    m_exponent: float,
    samples: int,
    aspect: int | None = None,
    t_max: int | None = None,
    seed: int = 0,
    max_starts: int = 32,
    site_budget: int = 100_000_000,
) -> dict:
    """Box-exit probe: estimate, over a grid of starts in the inner block,
    the annealed chance that the walk leaves the box anywhere but through
    its right face, and compare the worst case against n0^(-m_exponent).

    The box spans levels (-n0/2, n0) along ``ell`` with transverse extent
    ``aspect`` (default 25 n0^3); the inner block sits in levels
    [n0/3, n0) with a 25-fold narrower transverse extent.  A right exit
    must reach level >= n0 while staying transversally inside the box.
    Censored walks count as non-right exits and are reported.  The scale
    at which the bound would carry its intended asymptotic force is
    astronomically large, so the report never certifies it; it only states
    whether the estimate clears the threshold at this n0.
    """
    d = spec.d
    e = _unit_coordinate(ell, d)
    if n0 < 2 or n0 % 2:
        raise ValueError("n0 must be an even integer >= 2")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    width = int(aspect) if aspect is not None else 25 * n0**3
    if width < 1:
        raise ValueError("box aspect must be a positive integer")
    inner_width = max(1, round(width / 25))
    n_levels = n0 + n0 // 2 - 1
    volume = n_levels * (2 * width - 1) ** (d - 1)
    if volume > site_budget:
        raise ResourceLimitError(
            f"box volume {volume} exceeds the site budget {site_budget}; "
            "pass a smaller aspect"
        )
    if t_max is None:
        t_max = 1000 * n0 * n0
    axis = int(np.nonzero(e)[0][0])
    sign = int(e[axis])
    dirs = np.asarray(directions(d), dtype=np.int64)
    last = 2 * d - 1
    lo_level = -(n0 // 2)
    inner_lo = -((-n0) // 3)
    starts_rel = _probe_starts(inner_lo, n0, inner_width, d, max_starts)
    trans_axes = [a for a in range(d) if a != axis]

    def to_site(rel):
        x = [0] * d
        x[axis] = sign * rel[0]
        for a, t in zip(trans_axes, rel[1:]):
            x[a] = t
        return tuple(x)

    rows = []
    threshold = float(n0) ** (-float(m_exponent))
    for si, rel in enumerate(starts_rel):
        x0 = to_site(rel)
        non_right = censored = 0
        for j in range(samples):
            env = Environment(spec, derive_key128(seed, TAG_ENV, si, j))
            rng = stream(seed, TAG_PROBE, si, j)
            x = list(x0)
            outcome = None
            for _ in range(t_max):
                cum = env.site_cumlaw(tuple(x))
                k = int(np.searchsorted(cum, rng.random(), side="right"))
                if k > last:
                    k = last
                step = dirs[k]
                for a in range(d):
                    x[a] += int(step[a])
                level = sign * x[axis]
                inside_trans = all(abs(x[a]) < width for a in trans_axes)
                if lo_level < level < n0 and inside_trans:
                    continue
                outcome = "right" if (level >= n0 and inside_trans) else "other"
                break
            if outcome is None:
                censored += 1
            elif outcome == "other":
                non_right += 1
        bad = non_right + censored
        est = bad / samples
        lo, hi = wilson_ci(bad, samples)
        rows.append(
            {
                "start": [int(c) for c in x0],
                "non_right": non_right,
                "censored": censored,
                "estimate": est,
                "ci_lo": lo,
                "ci_hi": hi,
            }
        )
    worst = max(rows, key=lambda r: (r["estimate"], r["start"]))
    log_eta = math.log(spec.eta)
    try:
        c0 = math.exp(100.0 + 4.0 * d * log_eta * log_eta)
    except OverflowError:
        c0 = math.inf
    return {
        "schema": "rwre-lab/probe-p/1",
        "ell": [int(c) for c in e],
        "n0": n0,
        "m_exponent": float(m_exponent),
        "aspect": width,
        "inner_aspect": inner_width,
        "samples_per_start": samples,
        "t_max": t_max,
        "threshold": threshold,
        "starts": rows,
        "n_starts": len(rows),
        "sup_estimate": worst["estimate"],
        "sup_ci_lo": worst["ci_lo"],
        "sup_ci_hi": worst["ci_hi"],
        "censored_total": sum(r["censored"] for r in rows),
        "fulfilled_at_scale": worst["estimate"] < threshold,
        "scale_lower_bound": c0,
        "certified": False,
        "note": (
            "finite-sample probe only; the asymptotic hypothesis needs even "
            f"box scales above {c0:.3g}, far beyond desk range"
        ),
    }
