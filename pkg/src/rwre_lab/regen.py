"""Annealed regeneration ensembles and the quantities derived from them:
limiting velocity, drift direction, covariance in the local-CLT
normalization, increment-tail curves, and i.i.d. diagnostics.

Each walk runs in a fresh environment so the pooled increments are genuine
annealed samples.  The increment from the walk start to the first confirmed
regeneration has a different law than the later ones and is always dropped;
only gaps between consecutive confirmed regenerations are pooled.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .environment import Environment, EnvironmentSpec
from .errors import InsufficientDataError
from .rng import TAG_PROBE, TAG_WALK, env_seed, stream
from .walker import _unit_coordinate, default_margin, detect_regenerations, simulate_walk

ENSEMBLE_SCHEMA = "rwre-lab/regen-ensemble/1"


@dataclass
class RegenerationEnsemble:
    """Pooled (dtau, dx) increments between consecutive confirmed
    regenerations, tagged by the walk that produced them."""

    ell: tuple
    dtau: np.ndarray
    dx: np.ndarray
    walk_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ell = tuple(int(c) for c in self.ell)
        self.dtau = np.asarray(self.dtau, dtype=np.int64).reshape(-1)
        self.dx = np.asarray(self.dx, dtype=np.int64).reshape(self.dtau.size, len(self.ell))
        self.walk_ids = np.asarray(self.walk_ids, dtype=np.int64).reshape(-1)
        if self.walk_ids.size != self.dtau.size:
            raise ValueError("walk_ids and dtau must have equal length")

    @property
    def size(self) -> int:
        return int(self.dtau.size)

    @property
    def d(self) -> int:
        return len(self.ell)

    def validate(self) -> "RegenerationEnsemble":
        """Check the structural facts every increment must satisfy: at least
        one unit of progress along ell, a time cost at least the L1
        displacement, and matching parity between the two."""
        if self.size == 0:
            return self
        if np.any(self.dtau < 1):
            raise ValueError("every regeneration increment needs dtau >= 1")
        gain = self.dx @ np.asarray(self.ell, dtype=np.int64)
        if np.any(gain < 1):
            raise ValueError("every increment must advance at least one level along ell")
        l1 = np.abs(self.dx).sum(axis=1)
        if np.any(self.dtau < l1):
            raise ValueError("dtau below the L1 displacement is impossible for a lattice walk")
        if np.any((self.dtau - l1) % 2):
            raise ValueError("dtau and the L1 displacement must share parity")
        if np.any(np.diff(self.walk_ids) < 0):
            raise ValueError("walk ids must be nondecreasing")
        return self

    def write_csv(self, path) -> None:
        d = self.d
        with open(path, "w") as fh:
            fh.write("walk_id,k," + "dtau," + ",".join(f"dx{j + 1}" for j in range(d)) + "\n")
            k = 0
            prev = None
            for wid, dt, row in zip(self.walk_ids, self.dtau, self.dx):
                k = k + 1 if prev == wid else 0
                prev = wid
                fh.write(
                    f"{int(wid)},{k},{int(dt)},"
                    + ",".join(str(int(c)) for c in row)
                    + "\n"
                )

    @classmethod
    def read_csv(cls, path, ell) -> "RegenerationEnsemble":
        data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.int64, ndmin=2)
        if data.size == 0:
            d = len(tuple(ell))
            return cls(ell=ell, dtau=np.empty(0), dx=np.empty((0, d)), walk_ids=np.empty(0))
        return cls(ell=ell, dtau=data[:, 2], dx=data[:, 3:], walk_ids=data[:, 0])


def _walk_increments(spec, ell, steps, margin, seed, walk_id):
    """Confirmed regeneration increments of one fresh-environment walk."""
    env = Environment(spec, env_seed(seed, walk_id))
    traj = simulate_walk(env, (0,) * spec.d, steps, stream(seed, TAG_WALK, walk_id))
    records = detect_regenerations(traj, ell, margin)
    confirmed = [r for r in records if r.confirmed]
    discarded = len(records) - len(confirmed)
    dts, dxs = [], []
    for a, b in zip(confirmed, confirmed[1:]):
        dts.append(b.t - a.t)
        dxs.append([sb - sa for sa, sb in zip(a.site, b.site)])
    return dts, dxs, discarded


def collect_ensemble(
    spec: EnvironmentSpec,
    ell,
    walks: int,
    steps: int,
    margin: int | None = None,
    seed: int = 0,
    threads: int = 1,
    min_increments: int = 10,
) -> RegenerationEnsemble:
    """Pool confirmed regeneration increments over ``walks`` independent
    walks of ``steps`` steps, one fresh environment per walk.

    The first confirmed regeneration of each walk only anchors the chain;
    its own increment from the origin is discarded.  Raises an
    insufficient-data error when fewer than ``min_increments`` increments
    survive, which is the expected outcome for non-ballistic laws.
    """
    if walks < 1:
        raise ValueError("need at least one walk")
    e = _unit_coordinate(ell, spec.d)
    if margin is None:
        margin = default_margin(steps)
    args = [(spec, tuple(int(c) for c in e), steps, margin, seed, i) for i in range(walks)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _walk_increments(*a), args))
    else:
        results = [_walk_increments(*a) for a in args]
    dtau, dx, wids = [], [], []
    discarded = 0
    walks_with_data = 0
    for wid, (dts, dxs, disc) in enumerate(results):
        discarded += disc
        if dts:
            walks_with_data += 1
        dtau.extend(dts)
        dx.extend(dxs)
        wids.extend([wid] * len(dts))
    if len(dtau) < min_increments:
        raise InsufficientDataError(
            f"only {len(dtau)} confirmed regeneration increments over {walks} walks "
            f"(need {min_increments}); the law may not be ballistic along ell"
        )
    ens = RegenerationEnsemble(
        ell=e,
        dtau=np.asarray(dtau, dtype=np.int64),
        dx=np.asarray(dx, dtype=np.int64),
        walk_ids=np.asarray(wids, dtype=np.int64),
        meta={
            "schema": ENSEMBLE_SCHEMA,
            "spec": spec.canonical(),
            "walks": walks,
            "steps_per_walk": steps,
            "margin": margin,
            "seed": seed,
            "discarded_unconfirmed": discarded,
            "walks_with_increments": walks_with_data,
        },
    )
    return ens.validate()


class VelocityEstimate(NamedTuple):
    vhat: np.ndarray
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    mean_dtau: float
    se_vhat: np.ndarray
    degenerate: bool


def velocity_covariance(ensemble: RegenerationEnsemble) -> VelocityEstimate:
    """Velocity, direction, and covariance estimates from the ensemble.

    vhat = mean(dx)/mean(dtau) (the regeneration representation of the
    limiting velocity), theta_hat its unit vector, and sigma_hat the sample
    covariance of dx - vhat*dtau scaled by 1/mean(dtau), which is the
    normalization the local limit theorem uses.  Standard errors for vhat
    come from the usual ratio-estimator linearization.
    """
    m = ensemble.size
    if m < 30:
        raise InsufficientDataError(f"velocity estimate needs >= 30 increments, have {m}")
    dtau = ensemble.dtau.astype(np.float64)
    dx = ensemble.dx.astype(np.float64)
    mean_dtau = float(dtau.mean())
    mean_dx = dx.mean(axis=0)
    vhat = mean_dx / mean_dtau
    norm = float(np.linalg.norm(mean_dx))
    degenerate = False
    if norm > 0:
        theta_hat = mean_dx / norm
    else:
        theta_hat = np.zeros_like(mean_dx)
        degenerate = True
    resid = dx - vhat[None, :] * dtau[:, None]
    cov = (resid.T @ resid) / (m - 1)
    sigma_hat = (cov + cov.T) / (2.0 * mean_dtau)
    eigs = np.linalg.eigvalsh(sigma_hat)
    if eigs.min() < -1e-10:
        raise AssertionError("covariance estimate lost positive semidefiniteness")
    if eigs.min() < 1e-12:
        degenerate = True
        warnings.warn("regeneration covariance estimate is (near) degenerate", stacklevel=2)
    se_vhat = np.sqrt(resid.var(axis=0, ddof=1) / m) / mean_dtau
    return VelocityEstimate(vhat, theta_hat, sigma_hat, mean_dtau, se_vhat, degenerate)


def regen_diagnostics(
    ensemble: RegenerationEnsemble,
    N: int,
    R: int,
    bootstrap: int = 1000,
    seed: int = 0,
) -> dict:
    """Diagnostics for the i.i.d. picture: the dtau survival curve, the
    lag-1 Pearson correlation of consecutive within-walk increments with a
    bootstrap interval, and the frequency of walks whose first min(N^2,
    count) increments all fit under R.

    Walks that contributed no increments carry no evidence about the
    bounded-increment event and are excluded from its denominator.
    """
    dtau = ensemble.dtau
    size = ensemble.size
    report: dict = {
        "schema": "rwre-lab/regen-diag/1",
        "size": size,
        "N": int(N),
        "R": int(R),
    }
    if size:
        kmax = int(dtau.max())
        ks = np.arange(1, kmax + 1)
        surv = (dtau[None, :] > ks[:, None]).mean(axis=1)
        report["tail_k"] = ks.tolist()
        report["tail_survival"] = [float(s) for s in surv]
    else:
        report["tail_k"] = []
        report["tail_survival"] = []

    same_walk = ensemble.walk_ids[1:] == ensemble.walk_ids[:-1]
    a = dtau[:-1][same_walk].astype(np.float64)
    b = dtau[1:][same_walk].astype(np.float64)
    pairs = int(a.size)
    lag1: dict = {"pairs": pairs, "meets_minimum_size": size >= 100}
    if pairs >= 2 and a.std() > 0 and b.std() > 0:
        r = float(np.corrcoef(a, b)[0, 1])
        rng = stream(seed, TAG_PROBE, 0xD1A6)
        boots = np.empty(bootstrap)
        boots[:] = np.nan
        for i in range(bootstrap):
            idx = rng.integers(0, pairs, size=pairs)
            ra, rb = a[idx], b[idx]
            if ra.std() > 0 and rb.std() > 0:
                boots[i] = np.corrcoef(ra, rb)[0, 1]
        usable = boots[~np.isnan(boots)]
        lag1.update(
            r=r,
            ci_lo=float(np.percentile(usable, 2.5)),
            ci_hi=float(np.percentile(usable, 97.5)),
            bootstrap=bootstrap,
            bootstrap_skipped=int(bootstrap - usable.size),
        )
    else:
        lag1.update(r=None, ci_lo=None, ci_hi=None, note="too few usable pairs")
    report["lag1"] = lag1

    wids = ensemble.walk_ids
    counted = ok = 0
    for wid in np.unique(wids):
        walk_dtau = dtau[wids == wid]
        if walk_dtau.size == 0:
            continue
        first = walk_dtau[: min(N * N, walk_dtau.size)]
        counted += 1
        if np.all(first <= R):
            ok += 1
    report["bounded_increments"] = {
        "frequency": (ok / counted) if counted else None,
        "walks_counted": counted,
        "walks_excluded": int(ensemble.meta.get("walks", counted) - counted),
    }
    return report
