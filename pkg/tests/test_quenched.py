"""Dynamic-programming tests: forward evolution against hand-computed and
path-enumeration oracles, conservation and pruning accounting, the
environment-convolution identities, the adjoint prefactor recursion with
its semigroup law, exit laws, and the normalization constant."""

import math

import numpy as np
import pytest

from rwre_lab.dist import SparseLatticeDist, constant_one_field, delta_dist
from rwre_lab.environment import Environment, EnvironmentSpec, drifted_1d_spec, homogeneous_spec
from rwre_lab.errors import ResourceLimitError
from rwre_lab.lattice import ParallelogramGeom, classify_point, directions
from rwre_lab.quenched import (
    adjoint_evolve,
    cesaro_prefactor,
    env_convolve,
    evolve_forward,
    exit_law,
    normalization_constant,
    prefactor_field,
    quenched_distribution,
)
from rwre_lab.rng import TAG_WALK, stream
from rwre_lab.walker import simulate_walk

DIRICHLET_1D = EnvironmentSpec(1, "elliptic-dirichlet", 0.1, {"alpha": [2.0, 1.0]})
DIRICHLET_2D = EnvironmentSpec(
    2, "elliptic-dirichlet", 0.05, {"alpha": [3.0, 1.0, 2.0, 2.0]}
)
UNIFORM_1D = homogeneous_spec(1, [0.5, 0.5])


class PinnedEnvironment:
    """Site->law table with a default law elsewhere.

    Implements exactly the interface the dynamic programs consume (d and
    block_laws), so oracle laws can be pinned per site, which hash-derived
    environments cannot do.
    """

    def __init__(self, d, laws, default):
        self.d = d
        self._laws = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in laws.items()}
        self._default = np.asarray(default, dtype=np.float64)

    def block_laws(self, lo, hi):
        shape = tuple(h - l + 1 for l, h in zip(lo, hi))
        out = np.empty(shape + (2 * self.d,))
        out[...] = self._default
        for site, law in self._laws.items():
            idx = tuple(c - l for c, l in zip(site, lo))
            if all(0 <= i < s for i, s in zip(idx, shape)):
                out[idx] = law
        return out


def pinned_example_env():
    """d=1 environment with right-probabilities 0.5 / 0.7 / 0.6 at sites
    -1 / 0 / +1 and a fair coin elsewhere."""
    return PinnedEnvironment(
        1,
        {(-1,): [0.5, 0.5], (0,): [0.7, 0.3], (1,): [0.6, 0.4]},
        [0.5, 0.5],
    )


def enumerate_paths(env, start, n):
    """Independent oracle: sum the probability of every one of the (2d)^n
    direction sequences."""
    dirs = directions(env.d)
    lo = tuple(c - n for c in start)
    hi = tuple(c + n for c in start)
    laws = env.block_laws(lo, hi)
    acc = {}

    def rec(x, t, prob):
        if t == n:
            acc[x] = acc.get(x, 0.0) + prob
            return
        law = laws[tuple(c - l for c, l in zip(x, lo))]
        for j, e in enumerate(dirs):
            rec(tuple(a + b for a, b in zip(x, e)), t + 1, prob * law[j])

    rec(tuple(start), 0, 1.0)
    return acc


def max_abs_diff(mass, oracle):
    keys = set(mass) | {k for k, v in oracle.items() if v > 0}
    return max(abs(mass.get(k, 0.0) - oracle.get(k, 0.0)) for k in keys)


# ---------------------------------------------------------------------------
# forward evolution


def test_two_step_law_in_pinned_environment():
    dist = evolve_forward(pinned_example_env(), delta_dist((0,)), 2)
    assert dist.n == 2
    assert abs(dist.mass[(2,)] - 0.42) < 1e-15
    assert abs(dist.mass[(0,)] - 0.43) < 1e-15
    assert abs(dist.mass[(-2,)] - 0.15) < 1e-15
    assert set(dist.mass) == {(2,), (0,), (-2,)}


def test_zero_steps_copies_input():
    start = delta_dist((3,))
    out = evolve_forward(pinned_example_env(), start, 0)
    assert out.n == 0 and out.mass == start.mass
    out.mass[(3,)] = 0.5  # the copy must be independent
    assert start.mass[(3,)] == 1.0


def test_evolve_rejects_bad_arguments():
    env = pinned_example_env()
    with pytest.raises(ValueError):
        evolve_forward(env, delta_dist((0,)), -1)
    with pytest.raises(ValueError):
        evolve_forward(env, delta_dist((0,)), 1, prune=-0.1)


def test_uniform_walk_small_laws():
    env = Environment(UNIFORM_1D, 0)
    one = quenched_distribution(env, (0,), 1)
    assert one.mass == {(-1,): 0.5, (1,): 0.5}
    two = quenched_distribution(env, (0,), 2)
    assert abs(two.mass[(0,)] - 0.5) < 1e-15
    assert abs(two.mass[(2,)] - 0.25) < 1e-15
    assert abs(two.mass[(-2,)] - 0.25) < 1e-15


def test_homogeneous_walk_is_binomial():
    p = 0.7
    n = 9
    env = Environment(drifted_1d_spec(p), 5)
    dist = quenched_distribution(env, (0,), n)
    for k in range(n + 1):
        x = 2 * k - n
        expect = math.comb(n, k) * p**k * (1 - p) ** (n - k)
        assert abs(dist.mass[(x,)] - expect) < 1e-12


def test_dp_matches_path_enumeration():
    for i in range(3):
        env = Environment(DIRICHLET_1D, 100 + i)
        dist = quenched_distribution(env, (0,), 5)
        assert max_abs_diff(dist.mass, enumerate_paths(env, (0,), 5)) < 1e-12
    for i in range(3):
        env = Environment(DIRICHLET_2D, 200 + i)
        dist = quenched_distribution(env, (1, -1), 4)
        assert max_abs_diff(dist.mass, enumerate_paths(env, (1, -1), 4)) < 1e-12


def test_conservation_over_hundred_steps():
    env = Environment(DIRICHLET_1D, 7)
    dist = quenched_distribution(env, (0,), 100)
    assert abs(dist.total_mass() + dist.pruned_mass - 1.0) < 1e-12
    dist.validate(full_law=True, tol=1e-12)


def test_pruning_accounting_and_soundness():
    env = Environment(DIRICHLET_1D, 8)
    exact = quenched_distribution(env, (0,), 60)
    pruned = quenched_distribution(env, (0,), 60, prune=1e-7)
    assert pruned.pruned_mass > 0
    assert abs(pruned.total_mass() + pruned.pruned_mass - 1.0) < 1e-12
    keys = set(exact.mass) | set(pruned.mass)
    l1 = sum(abs(exact.mass.get(k, 0.0) - pruned.mass.get(k, 0.0)) for k in keys)
    assert l1 <= 2.0 * pruned.pruned_mass + 1e-15


def test_site_budget_enforced():
    env = Environment(DIRICHLET_2D, 1)
    with pytest.raises(ResourceLimitError):
        quenched_distribution(env, (0, 0), 10, site_budget=50)


# ---------------------------------------------------------------------------
# environment convolution


def test_convolve_zero_steps_is_identity():
    env = pinned_example_env()
    nu = SparseLatticeDist(1, (0,), {(-1,): 0.3, (1,): 0.7})
    out = env_convolve(env, nu, 0)
    assert out.mass == nu.mass


def test_convolve_of_delta_is_quenched_law():
    env = Environment(DIRICHLET_1D, 11)
    a = env_convolve(env, delta_dist((0,)), 6)
    b = quenched_distribution(env, (0,), 6)
    assert max_abs_diff(a.mass, b.mass) < 1e-15


def test_convolve_is_linear_in_the_first_measure():
    env = pinned_example_env()
    nu = SparseLatticeDist(1, (0,), {(-1,): 0.3, (1,): 0.7})
    out = env_convolve(env, nu, 3)
    oracle = {}
    for y, w in nu.mass.items():
        part = quenched_distribution(env, y, 3)
        for x, m in part.mass.items():
            oracle[x] = oracle.get(x, 0.0) + w * m
    assert max_abs_diff(out.mass, oracle) < 1e-12


def test_forward_semigroup():
    env = Environment(DIRICHLET_2D, 21)
    start = delta_dist((0, 0))
    once = evolve_forward(env, evolve_forward(env, start, 2), 3)
    direct = evolve_forward(env, start, 5)
    assert max_abs_diff(once.mass, direct.mass) < 1e-12


# ---------------------------------------------------------------------------
# prefactor recursion


def test_prefactor_is_one_in_homogeneous_environments():
    env = Environment(homogeneous_spec(2, [0.4, 0.2, 0.2, 0.2]), 3)
    fld = prefactor_field(env, 6, (-3, -3), (3, 3))
    assert np.all(np.abs(fld.values - 1.0) < 1e-12)
    zero = prefactor_field(env, 0, (-2, -2), (2, 2))
    assert np.all(zero.values == 1.0)


def test_prefactor_one_step_pinned_value():
    fld = prefactor_field(pinned_example_env(), 1, (-1,), (1,))
    assert abs(fld.value_at((0,)) - 0.9) < 1e-15


def test_cesaro_examples():
    env = pinned_example_env()
    first = cesaro_prefactor(env, 1, (-1,), (1,))
    assert np.all(first.values == 1.0)  # mean over horizon 0 only
    second = cesaro_prefactor(env, 2, (0,), (0,))
    assert abs(second.value_at((0,)) - 0.95) < 1e-15
    homog = Environment(UNIFORM_1D, 0)
    fld = cesaro_prefactor(homog, 50, (-5,), (5,))
    assert np.all(np.abs(fld.values - 1.0) < 1e-12)


def test_prefactor_window_validation():
    env = pinned_example_env()
    with pytest.raises(ValueError):
        prefactor_field(env, -1, (0,), (0,))
    with pytest.raises(ValueError):
        prefactor_field(env, 2, (1,), (0,))
    with pytest.raises(ValueError):
        cesaro_prefactor(env, 0, (0,), (0,))


def test_adjoint_semigroup_identity():
    for seed in (31, 32):
        env = Environment(DIRICHLET_2D, seed)
        for n, m in ((1, 1), (2, 3), (5, 5)):
            wide = prefactor_field(env, n, (-2 - m, -2 - m), (2 + m, 2 + m))
            stepped = adjoint_evolve(env, wide, m)
            direct = prefactor_field(env, n + m, (-2, -2), (2, 2))
            assert stepped.lo == direct.lo and stepped.hi == direct.hi
            assert float(np.abs(stepped.values - direct.values).max()) < 1e-10


def test_adjoint_evolve_rejects_wrong_mode_and_small_window():
    env = Environment(DIRICHLET_2D, 33)
    ces = cesaro_prefactor(env, 2, (-1, -1), (1, 1))
    with pytest.raises(ValueError):
        adjoint_evolve(env, ces, 1)
    fld = prefactor_field(env, 1, (-1, -1), (1, 1))
    with pytest.raises(ValueError):
        adjoint_evolve(env, fld, 2)


# ---------------------------------------------------------------------------
# normalization constant


def test_normalization_is_one_for_constant_field():
    env = Environment(UNIFORM_1D, 0)
    dist = quenched_distribution(env, (0,), 8)
    lo, hi = dist.bounding_box()
    assert normalization_constant(dist, constant_one_field(lo, hi)) == pytest.approx(1.0)


def test_normalization_is_one_in_homogeneous_environments():
    env = Environment(homogeneous_spec(1, [0.6, 0.4]), 4)
    dist = quenched_distribution(env, (0,), 10)
    fld = prefactor_field(env, 10, *dist.bounding_box())
    assert abs(normalization_constant(dist, fld) - 1.0) < 1e-12


def test_normalization_pinned_example():
    env = pinned_example_env()
    one = quenched_distribution(env, (0,), 1)
    fld = prefactor_field(env, 1, (-1,), (1,))
    z = normalization_constant(one, fld)
    manual = 0.7 * fld.value_at((1,)) + 0.3 * fld.value_at((-1,))
    assert abs(z - manual) < 1e-15
    assert abs(z - 1.08) < 1e-12


def test_normalization_requires_coverage():
    env = pinned_example_env()
    dist = quenched_distribution(env, (0,), 4)
    small = prefactor_field(env, 4, (-1,), (1,))
    with pytest.raises(ValueError, match="cover"):
        normalization_constant(dist, small)


# ---------------------------------------------------------------------------
# exit laws


def test_exit_law_one_step_example():
    env = pinned_example_env()
    law = exit_law(env, (0,), [(-1,), (0,), (1,)], t_max=10)
    assert abs(law.mass[((1,), 1)] - 0.7) < 1e-15
    assert abs(law.mass[((-1,), 1)] - 0.3) < 1e-15
    assert set(law.mass) == {((1,), 1), ((-1,), 1)}
    assert law.interior_mass == 0.0
    law.validate()


def test_exit_law_censoring_at_zero():
    env = pinned_example_env()
    law = exit_law(env, (0,), [(-1,), (0,), (1,)], t_max=0)
    assert law.mass == {}
    assert law.interior_mass == 1.0


def test_exit_law_start_must_be_interior():
    env = pinned_example_env()
    with pytest.raises(ValueError, match="interior"):
        exit_law(env, (1,), [(-1,), (0,), (1,)], t_max=5)
    with pytest.raises(ValueError):
        exit_law(env, (0,), [(-1,), (0,), (1,)], t_max=-1)


def test_exit_law_conserves_mass_on_parallelogram():
    env = Environment(DIRICHLET_2D, 9)
    geom = ParallelogramGeom(center=(0, 0), N=2, drift=(1.0, 0.0), width=2.0)
    law = exit_law(env, (0, 0), geom, t_max=400)
    assert abs(law.total_mass() + law.interior_mass + law.pruned_mass - 1.0) < 1e-10
    for site, t in law.mass:
        assert 1 <= t <= 400
        assert classify_point(geom, site) in ("boundary", "right-boundary")


def test_exit_law_region_budget():
    env = Environment(DIRICHLET_2D, 9)
    geom = ParallelogramGeom(center=(0, 0), N=5, drift=(1.0, 0.0), width=2.0)
    with pytest.raises(ResourceLimitError):
        exit_law(env, (0, 0), geom, t_max=10, site_budget=100)


# ---------------------------------------------------------------------------
# Monte Carlo consistency


def test_walk_frequencies_match_dp():
    env = Environment(DIRICHLET_1D, 13)
    walks = 100_000
    horizon = 10
    counts5: dict = {}
    counts10: dict = {}
    for i in range(walks):
        traj = simulate_walk(env, (0,), horizon, stream(99, TAG_WALK, i))
        x5 = (int(traj.positions[5][0]),)
        x10 = (int(traj.positions[10][0]),)
        counts5[x5] = counts5.get(x5, 0) + 1
        counts10[x10] = counts10.get(x10, 0) + 1
    for n, counts in ((5, counts5), (10, counts10)):
        dp = quenched_distribution(env, (0,), n)
        assert set(counts) <= set(dp.mass)
        for x, p in dp.mass.items():
            freq = counts.get(x, 0) / walks
            se = math.sqrt(p * (1.0 - p) / walks)
            # the 2/walks term covers count granularity at far-tail sites
            assert abs(freq - p) <= 4.0 * se + 2.0 / walks, (n, x, freq, p)
