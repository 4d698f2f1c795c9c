import numpy as np
import pytest

from gphier.lattice import FrequencyLattice
from gphier.tensor import DensityMatrix, h_alpha_norm, random_density_matrix
from gphier.dynamics import collision
from gphier.randomization import (
    SignField,
    all_plus,
    collision_omega_operator_norm,
    deterministic_collision_norm,
    enumerate_fields,
    omega_l2_h_alpha,
    randomize_function,
    sample_field,
)


@pytest.fixture
def lat():
    return FrequencyLattice(1, 1)


def test_sample_determinism(lat):
    a = sample_field(lat, 42, level=3, sample=5)
    b = sample_field(lat, 42, level=3, sample=5)
    assert np.array_equal(a.values, b.values)
    c = sample_field(lat, 42, level=4, sample=5)
    assert not np.array_equal(a.values, c.values) or lat.size < 4


def test_sample_is_pm_one(lat):
    f = sample_field(lat, 0)
    assert set(np.unique(f.values)) <= {-1, 1}
    with pytest.raises(ValueError):
        SignField(np.array([0, 1, 1], dtype=np.int8), "bad")


def test_empirical_mean_clt():
    lat = FrequencyLattice(1, 2)
    n = 100_000
    total = np.zeros(lat.size)
    for i in range(0, n, 1000):
        block = np.stack([
            sample_field(lat, 7, level=2, sample=i + s).values
            for s in range(1000)
        ])
        total += block.sum(axis=0)
    mean = total / n
    assert np.all(np.abs(mean) <= 4.0 / np.sqrt(n))


def test_all_plus(lat):
    f = all_plus(lat)
    assert np.all(f.values == 1)
    vec = np.arange(lat.size) + 1j
    assert np.array_equal(randomize_function(vec, f), vec)


def test_randomize_norm_and_involution(lat):
    rng = np.random.default_rng(1)
    vec = rng.standard_normal(lat.size) + 1j * rng.standard_normal(lat.size)
    f = sample_field(lat, 2)
    out = randomize_function(vec, f)
    assert np.linalg.norm(out) == np.linalg.norm(vec)
    assert np.array_equal(randomize_function(out, f), vec)


def test_omega_constant_evaluator(lat):
    g = random_density_matrix(lat, 1, 3)
    est = omega_l2_h_alpha(lambda fields: g, lat, [2], 1.0, method="exact")
    assert est.value == pytest.approx(h_alpha_norm(g, 1.0), rel=1e-13)
    mc = omega_l2_h_alpha(lambda fields: g, lat, [2], 1.0, method="mc",
                          mc_samples=16, seed=0)
    assert mc.stderr == pytest.approx(0.0, abs=1e-12)


def test_omega_sign_product_modulus(lat):
    # output c * h(a) h(b) h(c') h(d) on a fixed unit tensor: the averaged
    # norm is |c| because the sign product has modulus one
    base = DensityMatrix.zeros(lat, 1)
    base.data[0, 2] = 1.0
    c = 0.37 - 0.11j

    def evaluator(fields):
        h = fields[2].values
        return (c * h[0] * h[1] * h[2] * h[0]) * base

    est = omega_l2_h_alpha(evaluator, lat, [2], 0.0, method="exact")
    assert est.value == pytest.approx(abs(c), rel=1e-13)


def test_omega_exact_vs_mc(lat):
    gamma = random_density_matrix(lat, 2, 4, alpha=1.0, norm=1.0)

    def evaluator(fields):
        f = fields[0]
        return collision(gamma, 1, 2, "+", f) - collision(gamma, 1, 2, "-", f)

    exact = omega_l2_h_alpha(evaluator, lat, [0], 1.0, method="exact")
    assert exact.samples == 8
    mc = omega_l2_h_alpha(evaluator, lat, [0], 1.0, method="mc",
                          mc_samples=10_000, seed=5)
    assert abs(mc.value**2 - exact.value**2) <= 4.0 * mc.stderr
    assert mc.agrees_with(exact.value)


def test_enumeration_cap(lat):
    with pytest.raises(ValueError, match="cap"):
        omega_l2_h_alpha(lambda f: None, lat, list(range(2, 12)), 0.0,
                         method="exact")


def test_unused_level_seeds_do_not_matter(lat):
    gamma = random_density_matrix(lat, 2, 6)

    def evaluator(fields):
        f = fields[2]  # level 3 never read
        return collision(gamma, 1, 2, "+", f) - collision(gamma, 1, 2, "-", f)

    a = omega_l2_h_alpha(evaluator, lat, [2, 3], 1.0, method="mc",
                         mc_samples=64, seed=9)
    b = omega_l2_h_alpha(evaluator, lat, [2, 3], 1.0, method="mc",
                         mc_samples=64, seed=9)
    assert a.value == b.value


def test_operator_norm_majorizes(lat):
    sigma, mat = collision_omega_operator_norm(lat, 1, 1, 1.0)
    assert mat.shape == (72, 81)
    worst = 0.0
    for trial in range(12):
        g = random_density_matrix(lat, 2, 50 + trial)

        def ev(fields, g=g):
            f = fields[0]
            return collision(g, 1, 2, "+", f) - collision(g, 1, 2, "-", f)

        est = omega_l2_h_alpha(ev, lat, [0], 1.0, method="exact")
        worst = max(worst, est.value / h_alpha_norm(g, 1.0))
    assert worst <= sigma * (1 + 1e-12)
    assert worst > 0.1 * sigma  # the bound is within reach of random data


def test_operator_norm_iterative_matches_dense(lat):
    # the k=2 domain takes the dense route; compare against a direct
    # power-iteration estimate of the same normal operator (random start:
    # structured vectors can be orthogonal to the dominant eigenspace)
    sigma, stacked = collision_omega_operator_norm(lat, 2, 1, 0.5,
                                                   dim_cap=2**16)
    assert stacked is not None
    gram = stacked.T @ stacked
    v = np.random.default_rng(3).standard_normal(gram.shape[0])
    for _ in range(300):
        v = gram @ v
        v /= np.linalg.norm(v)
    assert sigma == pytest.approx(np.sqrt(v @ (gram @ v)), rel=1e-8)


def test_deterministic_norm_bounds_instance(lat):
    g = random_density_matrix(lat, 2, 60)
    s = deterministic_collision_norm(lat, 1, 1, 1.0)
    out = collision(g, 1, 2, "+") - collision(g, 1, 2, "-")
    assert h_alpha_norm(out, 1.0) <= s * h_alpha_norm(g, 1.0) * (1 + 1e-12)


def test_enumerate_fields_order(lat):
    fields = enumerate_fields(lat)
    assert len(fields) == 8
    assert np.array_equal(fields[0].values, [1, 1, 1])
    assert np.array_equal(fields[-1].values, [-1, -1, -1])
