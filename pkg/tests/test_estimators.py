"""Estimator tests: annealed averaging against closed forms, partition
distances and their exact inequalities, regularity scalings, exit-law and
fixed-time box defects with manual windowing oracles, box-average
concentration, both local-CLT defects, and the intermediate-measure
chain."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwre_lab.dist import SparseLatticeDist
from rwre_lab.environment import Environment, EnvironmentSpec, homogeneous_spec
from rwre_lab.estimators import (
    DefectReport,
    annealed_distribution,
    annealed_regularity_report,
    box_average_deviation,
    exit_law_box_defect,
    fixed_time_box_defect,
    intermediate_measures_defects,
    intermediate_measures_report,
    l1_partition_distance,
    l1_point_distance,
    lclt_defect,
    lclt_gaussian,
    prefactor_lclt_defect,
    prefactor_lclt_report,
)
from rwre_lab.lattice import BoxPartition, ParallelogramGeom
from rwre_lab.quenched import cesaro_prefactor, exit_law, prefactor_field, quenched_distribution
from rwre_lab.rng import env_seed

DIRICHLET_1D = EnvironmentSpec(1, "elliptic-dirichlet", 0.1, {"alpha": [2.0, 1.0]})
DIRICHLET_2D = EnvironmentSpec(
    2, "elliptic-dirichlet", 0.05, {"alpha": [3.0, 1.0, 2.0, 2.0]}
)
TWO_POINT_1D = EnvironmentSpec(
    1,
    "two-point",
    0.2,
    {"law_a": [0.6, 0.4], "law_b": [0.8, 0.2], "p": 0.5},
)
UNIFORM_1D = homogeneous_spec(1, [0.5, 0.5])
UNIFORM_2D = homogeneous_spec(2, [0.25, 0.25, 0.25, 0.25])


# ---------------------------------------------------------------------------
# annealed distributions


def test_homogeneous_annealed_equals_quenched():
    spec = homogeneous_spec(1, [0.6, 0.4])
    ann = annealed_distribution(spec, (0,), 6, K=4, seed=0)
    que = quenched_distribution(Environment(spec, 123), (0,), 6)
    assert set(ann.dist.mass) == set(que.mass)
    for x in que.mass:
        assert ann.dist.mass[x] == pytest.approx(que.mass[x], abs=1e-15)
        assert ann.se_at(x) == 0.0


def test_two_point_annealed_limit():
    # per-site laws are independent, so the two-step annealed law is the
    # product expectation: {2: 0.7*0.7, 0: 0.7*0.3 + 0.3*0.7, -2: 0.3*0.3}
    ann = annealed_distribution(TWO_POINT_1D, (0,), 2, K=3000, seed=7)
    exact = {(2,): 0.49, (0,): 0.42, (-2,): 0.09}
    for x, p in exact.items():
        assert abs(ann.dist.mass[x] - p) <= 4.0 * ann.se_at(x)


def test_annealed_zero_steps():
    ann = annealed_distribution(DIRICHLET_1D, (2,), 0, K=5, seed=1)
    assert ann.dist.mass == {(2,): 1.0}
    assert ann.se_at((2,)) == 0.0


def test_annealed_error_shrinks_with_replicas():
    a = annealed_distribution(DIRICHLET_1D, (0,), 6, K=250, seed=1)
    b = annealed_distribution(DIRICHLET_1D, (0,), 6, K=500, seed=2)
    common = sorted(set(a.se) & set(b.se))
    ratio = np.mean([a.se[x] for x in common]) / np.mean([b.se[x] for x in common])
    assert math.sqrt(2.0) * 0.7 <= ratio <= math.sqrt(2.0) * 1.3


def test_annealed_replicas_and_threads():
    ann = annealed_distribution(DIRICHLET_1D, (0,), 4, K=6, seed=3, keep_replicas=True)
    assert len(ann.replicas) == 6
    mean = {}
    for rep in ann.replicas:
        for x, m in rep.mass.items():
            mean[x] = mean.get(x, 0.0) + m / 6
    for x, m in mean.items():
        assert ann.dist.mass[x] == pytest.approx(m, abs=1e-15)
    threaded = annealed_distribution(DIRICHLET_1D, (0,), 4, K=6, seed=3, threads=3)
    assert threaded.dist.mass == ann.dist.mass
    assert threaded.se == ann.se


def test_annealed_needs_a_replica():
    with pytest.raises(ValueError):
        annealed_distribution(DIRICHLET_1D, (0,), 2, K=0)


# ---------------------------------------------------------------------------
# partition distances

mass_dicts = st.dictionaries(
    st.integers(min_value=-6, max_value=6).map(lambda v: (v,)),
    st.floats(min_value=0.01, max_value=1.0),
    min_size=1,
    max_size=8,
)


def _dist(masses, n=2):
    return SparseLatticeDist(n, (0,), dict(masses))


def test_l1_identical_is_zero():
    p = _dist({(0,): 0.5, (2,): 0.5})
    assert l1_partition_distance(p, p, 1) == 0.0
    assert l1_partition_distance(p, p, None) == 0.0


def test_l1_disjoint_supports():
    p = _dist({(0,): 1.0})
    q = _dist({(4,): 1.0})
    assert l1_partition_distance(p, q, 1) == 2.0


def test_l1_two_box_example():
    p = _dist({(0,): 0.6, (2,): 0.4})
    q = _dist({(0,): 0.4, (2,): 0.6})
    assert l1_partition_distance(p, q, 1) == pytest.approx(0.4, abs=1e-15)


def test_l1_single_box_is_total_mass_gap():
    p = _dist({(0,): 0.9})
    q = _dist({(4,): 0.6})
    assert l1_partition_distance(p, q, None) == pytest.approx(0.3, abs=1e-15)
    assert l1_partition_distance(p, q, math.inf) == pytest.approx(0.3, abs=1e-15)


def test_l1_time_mismatch():
    with pytest.raises(ValueError):
        l1_partition_distance(_dist({(0,): 1.0}, n=2), _dist({(0,): 1.0}, n=4), 1)
    with pytest.raises(ValueError):
        l1_point_distance(_dist({(0,): 1.0}, n=2), _dist({(0,): 1.0}, n=4))


@given(mass_dicts, mass_dicts)
def test_l1_symmetry(pm, qm):
    p, q = _dist(pm), _dist(qm)
    assert l1_partition_distance(p, q, 2) == l1_partition_distance(q, p, 2)


@given(mass_dicts, mass_dicts, mass_dicts)
def test_l1_triangle_inequality(pm, qm, rm):
    p, q, r = _dist(pm), _dist(qm), _dist(rm)
    dpr = l1_partition_distance(p, r, 2)
    dpq = l1_partition_distance(p, q, 2)
    dqr = l1_partition_distance(q, r, 2)
    assert dpr <= dpq + dqr + 1e-12


@given(mass_dicts, mass_dicts, st.integers(min_value=1, max_value=4))
def test_l1_coarsening_monotone(pm, qm, M):
    p, q = _dist(pm), _dist(qm)
    fine = l1_partition_distance(p, q, M)
    coarse = l1_partition_distance(p, q, 2 * M)
    assert coarse <= fine + 1e-12


def test_l1_matches_manual_box_sums():
    rng = np.random.default_rng(5)
    sites = [(int(v),) for v in rng.integers(-9, 10, size=12)]
    p = _dist({x: float(rng.random()) for x in sites})
    q = _dist({x: float(rng.random()) for x in set(sites) | {(11,)}})
    part = BoxPartition(3)
    acc_p, acc_q = {}, {}
    for dist, acc in ((p, acc_p), (q, acc_q)):
        for x, m in dist.mass.items():
            acc[part.box_of(x)] = acc.get(part.box_of(x), 0.0) + m
    manual = sum(
        abs(acc_p.get(k, 0.0) - acc_q.get(k, 0.0)) for k in set(acc_p) | set(acc_q)
    )
    assert l1_partition_distance(p, q, part) == pytest.approx(manual, abs=1e-14)


# ---------------------------------------------------------------------------
# annealed regularity


def test_regularity_sup_binomial_example():
    report = annealed_regularity_report(UNIFORM_1D, [2], K=2, seed=0)
    sup_row = next(r for r in report.rows if r["metric"] == "sup-scaled")
    assert sup_row["defect"] / 2 ** 0.5 == pytest.approx(0.5, abs=1e-12)
    assert sup_row["err"] == 0.0  # identical replicas


def test_regularity_outside_ball_mass_is_tiny():
    report = annealed_regularity_report(UNIFORM_2D, [100], K=2, w=10.0, seed=0)
    ball_row = next(r for r in report.rows if r["metric"] == "outside-ball-mass")
    assert ball_row["defect"] < 1e-3


def test_regularity_scaled_sup_stays_in_band():
    report = annealed_regularity_report(UNIFORM_2D, [8, 16, 32, 64], K=2, seed=0)
    sups = [r["defect"] for r in report.rows if r["metric"] == "sup-scaled"]
    assert len(sups) == 4
    assert max(sups) / min(sups) <= 2.0


def test_regularity_grid_must_increase():
    with pytest.raises(ValueError):
        annealed_regularity_report(UNIFORM_1D, [4, 2], K=2)
    with pytest.raises(ValueError):
        annealed_regularity_report(UNIFORM_1D, [], K=2)


# ---------------------------------------------------------------------------
# exit-law box defect


def test_exit_defect_homogeneous_is_zero():
    spec = homogeneous_spec(2, [0.4, 0.2, 0.2, 0.2])
    env = Environment(spec, env_seed(0, 99))
    geom = ParallelogramGeom(center=(0, 0), N=2, drift=(1.0, 0.0), width=2.0)
    report = exit_law_box_defect(env, spec, geom, theta=0.5, K=2, t_max=200, seed=0)
    by_metric = {r["metric"]: r for r in report.rows}
    assert by_metric["right-window-defect"]["defect"] <= 1e-12
    gap = abs(
        by_metric["non-right-exit-quenched"]["defect"]
        - by_metric["non-right-exit-annealed"]["defect"]
    )
    assert gap <= 1e-12
    assert "censored_quenched" in report.meta
    assert "censored_annealed_mean" in report.meta


def test_exit_defect_matches_manual_windowing():
    spec = DIRICHLET_1D
    seed, K, theta, t_max = 3, 3, 0.5, 300
    env = Environment(spec, env_seed(seed, 1000))
    geom = ParallelogramGeom(center=(0,), N=2, drift=(1.0,), width=3.0)
    report = exit_law_box_defect(env, spec, geom, theta=theta, K=K, t_max=t_max, seed=seed)
    row = next(r for r in report.rows if r["metric"] == "right-window-defect")

    def right_face_by_time(law):
        out = {}
        for (site, t), m in law.mass.items():
            if site[0] == geom.N**2:
                out[t] = out.get(t, 0.0) + m
        return out

    que = right_face_by_time(exit_law(env, (0,), geom, t_max))
    reps = [
        right_face_by_time(exit_law(Environment(spec, env_seed(seed, k)), (0,), geom, t_max))
        for k in range(K)
    ]
    ann = {}
    for rep in reps:
        for t, m in rep.items():
            ann[t] = ann.get(t, 0.0) + m / K
    ts = sorted(set(que) | set(ann))
    side = max(1, math.ceil(geom.N**theta))
    best = 0.0
    for t0 in range(min(ts), max(ts) - side + 2):
        win = sum(que.get(t, 0.0) - ann.get(t, 0.0) for t in range(t0, t0 + side))
        best = max(best, abs(win))
    assert row["defect"] == pytest.approx(best, abs=1e-12)


# ---------------------------------------------------------------------------
# fixed-time box defect


def test_fixed_time_homogeneous_lambda_zero():
    spec = homogeneous_spec(2, [0.4, 0.2, 0.2, 0.2])
    env = Environment(spec, env_seed(0, 50))
    report = fixed_time_box_defect(env, spec, 8, [0.5], [1, 2], K=2, seed=0)
    for row in report.rows:
        assert row["defect"] <= 1e-12


def test_fixed_time_lambda_coarsening():
    env = Environment(DIRICHLET_1D, env_seed(4, 100))
    report = fixed_time_box_defect(env, DIRICHLET_1D, 8, [], [1, 2, 4], K=4, seed=4)
    lams = [r["defect"] for r in report.rows if r["metric"] == "lambda"]
    assert lams[0] >= lams[1] - 1e-12
    assert lams[1] >= lams[2] - 1e-12
    assert lams[0] > 0  # disorder shows up at the finest partition


def test_fixed_time_lambda_matches_l1_oracle():
    env = Environment(DIRICHLET_1D, env_seed(4, 100))
    K = 4
    report = fixed_time_box_defect(env, DIRICHLET_1D, 8, [], [2], K=K, seed=4)
    row = next(r for r in report.rows if r["metric"] == "lambda")
    que = quenched_distribution(env, (0,), 8)
    ann = annealed_distribution(DIRICHLET_1D, (0,), 8, K=K, seed=4)
    assert row["defect"] == pytest.approx(
        l1_partition_distance(que, ann.dist, 2), abs=1e-12
    )


def test_fixed_time_needs_two_steps():
    env = Environment(DIRICHLET_1D, 1)
    with pytest.raises(ValueError):
        fixed_time_box_defect(env, DIRICHLET_1D, 1, [0.5], [1], K=2)


# ---------------------------------------------------------------------------
# box-average concentration


def test_box_average_homogeneous_field_is_flat():
    env = Environment(homogeneous_spec(1, [0.6, 0.4]), 2)
    fld = prefactor_field(env, 6, (-10,), (9,))
    report = box_average_deviation(fld, [1, 2, 4])
    for row in report.rows:
        assert row["defect"] <= 1e-12
        assert row["err"] == 0.0


def test_box_average_singleton_boxes():
    env = Environment(DIRICHLET_1D, 6)
    fld = cesaro_prefactor(env, 8, (-10,), (9,))
    report = box_average_deviation(fld, [1, 4])
    m1 = next(r for r in report.rows if r["param"] == 1)
    assert m1["defect"] == pytest.approx(float(np.abs(fld.values - 1.0).max()), abs=1e-15)
    m4 = next(r for r in report.rows if r["param"] == 4)
    assert m4["defect"] <= m1["defect"] + 1e-15


def test_box_average_needs_enough_cubes():
    env = Environment(DIRICHLET_1D, 6)
    fld = cesaro_prefactor(env, 4, (-3,), (3,))
    with pytest.raises(ValueError, match="cubes"):
        box_average_deviation(fld, [4])


# ---------------------------------------------------------------------------
# local CLT defect


def test_gaussian_normalizes_on_parity_class():
    for d, n in ((1, 8), (1, 16), (2, 8)):
        lo, hi = -120, 120
        axes = [np.arange(lo, hi + 1)] * d
        grids = np.meshgrid(*axes, indexing="ij")
        points = np.stack(grids, axis=-1)
        parity = (sum(np.abs(g) for g in grids) + n) % 2 == 0
        g = lclt_gaussian(points, np.zeros(d), np.eye(d), n)
        total = float(g[parity].sum())
        assert abs(total - 1.0) < 1e-6


def test_origin_defect_two_steps():
    g0 = float(lclt_gaussian(np.array([[0]]), [0.0], [[1.0]], 2)[0])
    assert abs(abs(0.5 - g0) - 0.0642) < 1e-4


def test_defect_decreases_along_n():
    env = Environment(UNIFORM_1D, 0)
    defects = []
    for n in (4, 16, 64):
        dist = quenched_distribution(env, (0,), n)
        defects.append(lclt_defect(dist, [0.0], [[1.0]], n))
    assert defects[0] > defects[1] > defects[2]
    for v in defects:
        assert 0.0 <= v <= 2.0


def test_lclt_defect_validation():
    env = Environment(UNIFORM_1D, 0)
    dist = quenched_distribution(env, (0,), 4)
    with pytest.raises(ValueError):
        lclt_defect(dist, [0.0], [[0.0]], 4)  # singular covariance
    with pytest.raises(ValueError):
        lclt_defect(dist, [0.0, 0.0], [[1.0]], 4)  # dimension mismatch
    with pytest.raises(ValueError):
        lclt_defect(dist, [0.0], [[1.0]], 0)
    clipped = SparseLatticeDist(4, (0,), {(0,): 0.3})
    with pytest.raises(AssertionError):
        lclt_defect(clipped, [0.0], [[1.0]], 4)  # not a full law


# ---------------------------------------------------------------------------
# prefactor local CLT defect


def test_prefactor_lclt_homogeneous_zero():
    spec = homogeneous_spec(1, [0.6, 0.4])
    env = Environment(spec, env_seed(0, 9))
    report = prefactor_lclt_report(env, spec, 8, K=3, seed=0)
    by_metric = {r["metric"]: r for r in report.rows}
    assert by_metric["defect-cesaro"]["defect"] <= 1e-10
    assert by_metric["defect-constant-one"]["defect"] <= 1e-10
    diff = by_metric["difference-cesaro-vs-constant-one"]
    assert abs(diff["signed_difference"]) <= 1e-10
    assert "note" in report.meta  # low-dimension caveat is recorded


def test_prefactor_lclt_zero_horizon():
    env = Environment(DIRICHLET_1D, env_seed(0, 3))
    for mode in ("constant-one", "fixed-horizon"):
        assert prefactor_lclt_defect(env, DIRICHLET_1D, 0, K=2, mode=mode, seed=0) == 0.0
    with pytest.raises(ValueError):
        prefactor_lclt_defect(env, DIRICHLET_1D, 0, K=2, mode="cesaro", seed=0)


def test_prefactor_lclt_rejects_unknown_mode():
    env = Environment(DIRICHLET_1D, 1)
    with pytest.raises(ValueError, match="mode"):
        prefactor_lclt_defect(env, DIRICHLET_1D, 4, K=2, mode="bogus")


def test_prefactor_lclt_disordered_in_range():
    env = Environment(DIRICHLET_1D, env_seed(5, 1))
    report = prefactor_lclt_report(env, DIRICHLET_1D, 8, K=30, seed=5)
    for row in report.rows:
        if row["metric"].startswith("defect-"):
            assert 0.0 <= row["defect"] <= 2.0
            assert row["err"] >= 0.0


# ---------------------------------------------------------------------------
# intermediate measures


def test_intermediate_chain_homogeneous_1d():
    spec = homogeneous_spec(1, [0.6, 0.4])
    env = Environment(spec, env_seed(0, 2))
    d1, d2, d3 = intermediate_measures_defects(env, spec, 6, 0.3, 0.3, K=2, seed=0)
    assert d1 <= 1e-12
    assert d2 <= 1e-12
    assert d3 <= 1e-12  # side-2 boxes hold a single parity site in d=1


def test_intermediate_chain_homogeneous_2d():
    spec = homogeneous_spec(2, [0.4, 0.2, 0.2, 0.2])
    env = Environment(spec, env_seed(0, 2))
    rep = intermediate_measures_report(env, spec, 6, 0.3, 0.3, K=2, seed=0)
    # annealed equals quenched and f is flat, so the first two measures
    # both collapse onto the quenched law and d2, d3 measure the same
    # box-redistribution gap (a 2x2 box mixes two parity sites in d=2)
    assert rep["d1"] <= 1e-12
    assert abs(rep["d2"] - rep["d3"]) <= 1e-12
    assert 0.0 < rep["d2"] < 0.5


def test_intermediate_chain_singleton_boxes():
    env = Environment(DIRICHLET_2D, env_seed(1, 4))
    rep = intermediate_measures_report(env, DIRICHLET_2D, 6, 0.3, 0.0, K=3, seed=1)
    assert rep["box_side"] == 1
    assert rep["d3"] <= 1e-15


def test_intermediate_chain_triangle_and_bounds():
    env = Environment(DIRICHLET_2D, env_seed(2, 4))
    rep = intermediate_measures_report(env, DIRICHLET_2D, 8, 0.3, 0.25, K=5, seed=2)
    assert rep["triangle_slack"] >= -1e-9
    assert rep["direct"] <= rep["d1"] + rep["d2"] + rep["d3"] + 1e-9
    for key in ("d1", "d2", "d3", "direct"):
        assert 0.0 <= rep[key] <= 2.0
    assert rep["z_n"] > 0.0 and rep["z_nk"] > 0.0
    assert rep["k"] == math.ceil(8**0.3)


def test_intermediate_chain_validation():
    env = Environment(DIRICHLET_1D, 1)
    with pytest.raises(ValueError):
        intermediate_measures_report(env, DIRICHLET_1D, 1, 0.3, 0.1, K=2)
    with pytest.raises(ValueError):
        intermediate_measures_report(env, DIRICHLET_1D, 4, 1.0, 0.1, K=2)


# ---------------------------------------------------------------------------
# report plumbing


def test_defect_report_validation_and_csv(tmp_path):
    report = DefectReport(
        kind="demo",
        rows=[{"metric": "m", "param": 1, "defect": 0.5, "err": 0.0, "samples": 3}],
    )
    report.validate()
    path = tmp_path / "report.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,param,defect,err,samples"
    assert lines[1] == "m,1,0.5,0.0,3"
    bad = DefectReport(kind="demo", rows=[{"metric": "m", "param": 1, "defect": -0.1, "err": 0.0, "samples": 1}])
    with pytest.raises(ValueError):
        bad.validate()
