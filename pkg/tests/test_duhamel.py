import math

import numpy as np
import pytest

from gphier.lattice import FrequencyLattice
from gphier.tensor import (
    DensityMatrix,
    HierarchyState,
    h_alpha_norm,
    random_state,
)
from gphier.dynamics import (
    HierarchyMode,
    evolve_truncated,
    free_evolve,
    full_collision,
    level_energy,
)
from gphier.duhamel import (
    DuhamelEvaluator,
    QuadratureSpec,
    cauchy_diagnostic,
    decay_profile,
    duhamel_term,
    integral_residual,
    simplex_check,
    solution_time_modulus,
    truncated_solution,
)
from gphier.randomization import sample_field


@pytest.fixture
def lat():
    return FrequencyLattice(1, 1)


@pytest.fixture
def quad():
    return QuadratureSpec(q=12, j_max=4)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(q=1)


def test_depth_zero_is_free_evolution(lat, quad):
    st = random_state(lat, 2, 0)
    mode = HierarchyMode.deterministic()
    out = duhamel_term(st, 1, 0, 0.4, mode, quad)
    ref = free_evolve(st.level(1), 0.4)
    assert h_alpha_norm(out - ref, 0.0) < 1e-14


def test_depth_one_closed_form(lat, quad):
    # single-mode data: the time integral has an elementary antiderivative
    g2 = DensityMatrix.zeros(lat, 2)
    i0, i1 = lat.index_of([0]), lat.index_of([1])
    g2.data[i1, i0, i0, i0] = 1.0
    st = HierarchyState(lat, 2, {2: g2})
    mode = HierarchyMode.deterministic()
    t = 0.37
    term = duhamel_term(st, 1, 1, t, mode, quad)
    coll = full_collision(g2)
    e_in = 1.0  # |1|^2 + |0|^2 - |0|^2 - |0|^2
    e_out = level_energy(lat, 1).reshape(3, 3)
    expected = np.zeros((3, 3), dtype=complex)
    for a in range(3):
        for b in range(3):
            if coll.data[a, b] == 0:
                continue
            eo = e_out[a, b]
            if abs(eo - e_in) < 1e-14:
                integral = t * np.exp(-1j * t * e_in)
            else:
                integral = np.exp(-1j * t * eo) \
                    * (np.exp(1j * t * (eo - e_in)) - 1) / (1j * (eo - e_in))
            expected[a, b] = -1j * integral * coll.data[a, b]
    assert np.max(np.abs(term.data - expected)) < 1e-10


def test_depth_positive_at_zero_time(lat, quad):
    st = random_state(lat, 3, 1)
    mode = HierarchyMode.deterministic()
    out = duhamel_term(st, 1, 2, 0.0, mode, quad)
    assert not np.any(out.data)


def test_term_bounds(lat, quad):
    st = random_state(lat, 2, 2)
    mode = HierarchyMode.deterministic()
    with pytest.raises(ValueError):
        duhamel_term(st, 1, 5, 0.1, mode, quad)  # beyond j_max
    with pytest.raises(ValueError):
        duhamel_term(st, 2, 1, 0.1, mode, quad)  # exceeds K_max


def test_missing_leaf_level_gives_zero(lat, quad):
    st = HierarchyState(lat, 3, {1: random_state(lat, 1, 3).level(1)})
    mode = HierarchyMode.deterministic()
    out = duhamel_term(st, 1, 2, 0.2, mode, quad)
    assert not np.any(out.data)


def test_truncated_solution_top_level(lat, quad):
    st = random_state(lat, 3, 4)
    mode = HierarchyMode.deterministic()
    sol = truncated_solution(st, 3, 3, 0.3, mode, quad)
    ref = free_evolve(st.level(3), 0.3)
    assert h_alpha_norm(sol - ref, 0.0) < 1e-13


def test_truncated_solution_at_zero(lat, quad):
    st = random_state(lat, 3, 5)
    mode = HierarchyMode.deterministic()
    sol = truncated_solution(st, 3, 1, 0.0, mode, quad)
    assert h_alpha_norm(sol - st.level(1), 0.0) < 1e-14


@pytest.mark.parametrize("which", ["deterministic", "dependent", "independent"])
def test_solution_matches_ode(lat, which):
    st = random_state(lat, 3, 6, alpha=1.0, level_norms=[1.0] * 3)
    f = sample_field(lat, 7)
    mode = {
        "deterministic": HierarchyMode.deterministic(),
        "dependent": HierarchyMode.dependent(f),
        "independent": HierarchyMode.independent(
            {2: sample_field(lat, 8, level=2), 3: sample_field(lat, 8, level=3)}
        ),
    }[which]
    quad = QuadratureSpec(q=16, j_max=3)
    grid = (0.0, 0.05, 0.1)
    traj = evolve_truncated(st, 3, 0.1, 1e-4, mode, grid_times=grid)
    ev = DuhamelEvaluator(st, mode, quad)
    for k in (1, 2, 3):
        sol = ev.solution_batch(3, k, grid)
        for i in range(len(grid)):
            diff = ev._wrap(k, sol[:, i]) - traj.states[i].level(k)
            rel = h_alpha_norm(diff, 1.0) \
                / (1 + h_alpha_norm(ev._wrap(k, sol[:, i]), 1.0))
            assert rel < 1e-5


def test_integral_residual_vanishes(lat):
    st = random_state(lat, 3, 9, alpha=1.0, level_norms=[1.0] * 3)
    quad = QuadratureSpec(q=16, j_max=3)
    mode = HierarchyMode.dependent(sample_field(lat, 10))
    for k in (1, 2):
        assert integral_residual(st, 3, k, 0.1, mode, quad, alpha=1.0) < 1e-6
    assert integral_residual(st, 3, 1, 0.0, mode, quad, alpha=1.0) == 0.0
    with pytest.raises(ValueError):
        integral_residual(st, 3, 3, 0.1, mode, quad)


def test_integral_residual_single_level(lat):
    # one-level data: the collision integrand vanishes, pure free evolution
    st = HierarchyState(lat, 3, {1: random_state(lat, 1, 11).level(1)})
    quad = QuadratureSpec(q=12, j_max=3)
    mode = HierarchyMode.deterministic()
    assert integral_residual(st, 3, 1, 0.2, mode, quad) < 1e-12


def test_simplex_identity(quad):
    num, exact = simplex_check(2, 1.0, quad)
    assert exact == 0.5
    assert abs(num - exact) < 1e-12
    num, exact = simplex_check(1, 0.3, quad)
    assert exact == pytest.approx(0.3)
    num, exact = simplex_check(4, 0.7, quad)
    assert abs(num - 0.7**4 / 24.0) < 1e-10


def test_decay_profile_zero_top(lat, quad):
    st = HierarchyState(lat, 3, {
        1: random_state(lat, 1, 12).level(1),
        2: random_state(lat, 2, 13).level(2),
    })
    mode = HierarchyMode.deterministic()
    norms, normalized = decay_profile(st, 1, 0.3, mode, 2, quad, alpha=1.0)
    assert norms[2] == 0.0
    assert norms[0] == pytest.approx(h_alpha_norm(st.level(1), 1.0), rel=1e-13)


def test_decay_chain_bound(lat):
    st = random_state(lat, 3, 14, alpha=1.0, level_norms=[1.0] * 3)
    quad = QuadratureSpec(q=12, j_max=3)
    mode = HierarchyMode.independent(
        {lv: sample_field(lat, 20, level=lv) for lv in (2, 3)}
    )
    t = 0.5
    norms, _ = decay_profile(st, 1, t, mode, 2, quad, alpha=1.0,
                             norm_stat="omega_l2")
    from gphier.randomization import collision_omega_operator_norm

    sig = {}
    for m in (2, 3):
        sig[m] = max(
            collision_omega_operator_norm(lat, m - 1, jj, 1.0, dim_cap=2**16)[0]
            for jj in range(1, m)
        )
    for j in (1, 2):
        bound = (t**j / math.factorial(j)) \
            * math.prod((1 + i) * sig[2 + i] for i in range(j)) \
            * h_alpha_norm(st.level(1 + j), 1.0)
        assert norms[j] <= bound + 1e-8


def test_dependent_decay_shape():
    # non-resonant data under the shared-field mode: the factorial-normalized
    # diagnostics stay below a margin of the depth-1 value
    from gphier.expansion import nonresonant_sample

    lat = FrequencyLattice(1, 5)
    st = nonresonant_sample(lat, 3, 30, target_c1=1.0)
    mode = HierarchyMode.dependent(sample_field(lat, 31))
    quad = QuadratureSpec(q=6, j_max=2)
    norms, normalized = decay_profile(st, 1, 0.1, mode, 2, quad, alpha=1.0,
                                      norm_stat="omega_l2", mc_samples=16,
                                      seed=32)
    assert normalized[2] <= normalized[1] * 1.5


def test_cauchy_increment_identity(lat):
    st = random_state(lat, 4, 15, alpha=1.0,
                      level_norms=[0.5**k for k in range(1, 5)])
    mode = HierarchyMode.dependent(sample_field(lat, 16))
    quad = QuadratureSpec(q=8, j_max=4)
    ev = DuhamelEvaluator(st, mode, quad)
    N, k, t = 2, 1, 0.1
    lhs = ev.solution_batch(N + 1, k, [t])[:, 0] - ev.solution_batch(N, k, [t])[:, 0]
    rhs = ev.term_batch(k, N + 1 - k, [t])[:, 0]
    assert np.max(np.abs(lhs - rhs)) < 1e-13


def test_cauchy_diagnostic_decreasing(lat):
    st = random_state(lat, 5, 17, alpha=1.0,
                      level_norms=[0.5**k for k in range(1, 6)])
    mode = HierarchyMode.dependent(sample_field(lat, 18))
    quad = QuadratureSpec(q=4, j_max=5)
    D = cauchy_diagnostic(st, [2, 3, 4], 0.1, mode, quad, alpha=1.0, xi=0.5,
                          grid_times=(0.0, 0.1))
    assert D[1] < D[0] and D[2] < D[1]
    assert D[1] / D[0] < 1.0


def test_solution_time_modulus_decreases(lat):
    st = random_state(lat, 2, 19, alpha=2.0, level_norms=[1.0, 1.0])
    mode = HierarchyMode.independent({2: sample_field(lat, 21, level=2)})
    quad = QuadratureSpec(q=8, j_max=2)
    ratios = solution_time_modulus(st, 2, [0.0, 0.05], (1e-2, 1e-3), mode,
                                   quad, alpha=1.0, xi=0.5)
    assert ratios[1e-3] <= ratios[1e-2] * (1 + 1e-9)
