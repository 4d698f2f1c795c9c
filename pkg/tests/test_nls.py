import numpy as np
import pytest

from gphier.lattice import FrequencyLattice
from gphier.nls import (
    factorized_residual,
    mass,
    nls_evolve,
    nls_nonlinearity,
    nls_rhs,
)


@pytest.fixture
def lat():
    return FrequencyLattice(1, 8)


def sobolev_random(lat, seed, decay=2.0):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(lat.size) + 1j * rng.standard_normal(lat.size)
    phi = raw / lat.brackets**decay
    return phi / np.sqrt(mass(phi))


def test_nonlinearity_direct_sum(lat):
    phi = sobolev_random(lat, 0)
    out = nls_nonlinearity(phi, lat)
    # brute-force triple sum over a - b + c = xi, everything in the box
    brute = np.zeros(lat.size, dtype=complex)
    pts = lat.points.ravel()
    for ia, a in enumerate(pts):
        for ib, b in enumerate(pts):
            for ic, c in enumerate(pts):
                out_freq = a - b + c
                if abs(out_freq) <= lat.M:
                    io = lat.index_of([out_freq])
                    brute[io] += phi[ia] * np.conj(phi[ib]) * phi[ic]
    assert np.max(np.abs(out - brute)) < 1e-13


def test_zero_stays_zero(lat):
    traj = nls_evolve(np.zeros(lat.size), 0.1, 1e-3, lattice=lat)
    assert not np.any(traj.ip_coeffs)


def test_single_mode_closed_form(lat):
    phi = np.zeros(lat.size, dtype=complex)
    zidx = lat.index_of([3])
    phi[zidx] = 1.0
    traj = nls_evolve(phi, 1.0, 1e-3, lattice=lat)
    final = traj.phi_at(len(traj.times) - 1)
    exact = np.exp(-1j * (9.0 + 1.0) * 1.0)
    assert abs(final[zidx] - exact) < 1e-8
    assert np.max(np.abs(np.delete(final, zidx))) == 0.0


def test_mass_conservation(lat):
    phi = sobolev_random(lat, 1, decay=0.0)  # rough data, mass 1
    traj = nls_evolve(phi, 1.0, 1e-3, lattice=lat)
    drift = abs(mass(traj.phi_at(len(traj.times) - 1)) - 1.0)
    assert drift < 1e-8


def test_rk4_order(lat):
    phi = sobolev_random(lat, 2)
    T = 0.25
    ref = nls_evolve(phi, T, 1e-3 / 8, lattice=lat)
    refT = ref.phi_at(len(ref.times) - 1)

    def err(dt):
        tr = nls_evolve(phi, T, dt, lattice=lat)
        return np.linalg.norm(tr.phi_at(len(tr.times) - 1) - refT)

    ratio = err(1e-3) / err(5e-4)
    assert 12 < ratio < 20


def test_algebraic_residual(lat):
    phi = sobolev_random(lat, 3)
    traj = nls_evolve(phi, 0.2, 1e-3, lattice=lat)
    for k in (1, 2):
        r = factorized_residual(traj, k, [0.05, 0.15], alpha=1.0,
                                derivative="product-rule")
        assert r < 1e-10


def test_single_mode_residual(lat):
    phi = np.zeros(lat.size, dtype=complex)
    phi[lat.index_of([2])] = 1.0
    traj = nls_evolve(phi, 0.2, 1e-3, lattice=lat)
    r = factorized_residual(traj, 1, [0.1], alpha=1.0,
                            derivative="product-rule")
    assert r < 1e-10


def test_fd_residual(lat):
    phi = sobolev_random(lat, 4)
    traj = nls_evolve(phi, 0.5, 1e-3, lattice=lat)
    for k in (1, 2):
        r = factorized_residual(traj, k, [0.1, 0.25, 0.4], alpha=1.0,
                                derivative="finite-difference")
        assert r < 1e-6


def test_fd_requires_interior_step(lat):
    phi = sobolev_random(lat, 5)
    traj = nls_evolve(phi, 0.01, 1e-3, lattice=lat)
    with pytest.raises(ValueError, match="stencil"):
        factorized_residual(traj, 1, [0.0], derivative="finite-difference")


def test_rhs_matches_single_mode_ode(lat):
    # i a' - |z|^2 a = |a|^2 a for a single occupied mode
    phi = np.zeros(lat.size, dtype=complex)
    i = lat.index_of([-4])
    phi[i] = 0.3 + 0.4j
    out = nls_rhs(phi, lat)
    expected = -1j * (16.0 * phi[i] + abs(phi[i]) ** 2 * phi[i])
    assert out[i] == pytest.approx(expected, rel=1e-14)
    assert np.max(np.abs(np.delete(out, i))) == 0.0


def test_time_grid_alignment(lat):
    phi = sobolev_random(lat, 6)
    traj = nls_evolve(phi, 0.1, 1e-3, lattice=lat)
    with pytest.raises(ValueError, match="step grid"):
        traj.step_of(0.0505)
    assert traj.step_of(0.05) == 50


def test_state_serialization(tmp_path, lat):
    from gphier.nls import NlsState, load_nls_state, save_nls_state
    from gphier.tensor import SerializationError

    phi = sobolev_random(lat, 7)
    path = tmp_path / "phi.json"
    save_nls_state(NlsState(phi, 0.25), lat, path)
    back, lat2 = load_nls_state(path)
    assert lat2 == lat and back.time == 0.25
    assert np.array_equal(back.coefficients, phi)
    with pytest.raises(SerializationError, match="mismatch"):
        load_nls_state(path, lattice=FrequencyLattice(1, 4))
