"""Galerkin cubic defocusing NLS on the lattice, and factorized-state checks.

The nonlinearity is the lattice-truncated double convolution: the
coefficient at xi sums phi(a) conj(phi(b)) phi(c) over a - b + c = xi
with a, b, c, xi all inside the box, the same in-box rule the hierarchy
collision sums use.  Pure tensor powers of an NLS solution then solve
the deterministic hierarchy exactly, level by level.
"""

import json
from dataclasses import dataclass

import numpy as np

from .dynamics import free_evolve, full_collision, level_energy
from .lattice import FrequencyLattice
from .tensor import (
    DEFAULT_MEMORY_GUARD,
    DensityMatrix,
    SerializationError,
    factorized,
    h_alpha_norm,
)

__all__ = [
    "NlsState",
    "NlsTrajectory",
    "nls_nonlinearity",
    "nls_rhs",
    "nls_evolve",
    "mass",
    "factorized_residual",
    "save_nls_state",
    "load_nls_state",
]


@dataclass(frozen=True)
class NlsState:
    """Coefficient vector over the lattice at a time stamp."""

    coefficients: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.complex128)
        object.__setattr__(self, "coefficients", c)


_NLS_TABLES = {}


def _tables(lattice):
    """Scatter tables for the in-box double convolution."""
    key = (lattice.d, lattice.M)
    if key not in _NLS_TABLES:
        F = lattice.size
        side = 4 * lattice.M + 1
        sstrides = side ** np.arange(lattice.d - 1, -1, -1, dtype=np.int64)
        # pair (a, b) -> shift index of a - b
        a, b = (x.ravel() for x in np.meshgrid(np.arange(F), np.arange(F),
                                               indexing="ij"))
        pair_shift = (lattice.points[a] - lattice.points[b]
                      + 2 * lattice.M) @ sstrides
        # (out, in) pairs per shift: out - in = shift
        o, i = (x.ravel() for x in np.meshgrid(np.arange(F), np.arange(F),
                                               indexing="ij"))
        out_shift = (lattice.points[o] - lattice.points[i]
                     + 2 * lattice.M) @ sstrides
        _NLS_TABLES[key] = (pair_shift, o, i, out_shift, side**lattice.d)
    return _NLS_TABLES[key]


def nls_nonlinearity(phi_hat, lattice):
    """Coefficients of |phi|^2 phi under the in-box truncation."""
    pair_shift, out_idx, in_idx, out_shift, nshift = _tables(lattice)
    prod = np.outer(phi_hat, np.conj(phi_hat)).ravel()
    w = np.bincount(pair_shift, weights=prod.real, minlength=nshift) \
        + 1j * np.bincount(pair_shift, weights=prod.imag, minlength=nshift)
    vals = w[out_shift] * phi_hat[in_idx]
    out = np.bincount(out_idx, weights=vals.real, minlength=lattice.size) \
        + 1j * np.bincount(out_idx, weights=vals.imag, minlength=lattice.size)
    return out


def nls_rhs(phi_hat, lattice, coupling=1.0):
    """d phi / dt from i phi' + Laplacian phi = coupling |phi|^2 phi."""
    return -1j * (lattice.energies * phi_hat
                  + coupling * nls_nonlinearity(phi_hat, lattice))


@dataclass
class NlsTrajectory:
    """Full step history; ip_coeffs holds the interaction-picture variables."""

    lattice: object
    times: np.ndarray
    ip_coeffs: np.ndarray  # (n_steps+1, F)
    dt: float
    coupling: float = 1.0

    def phi_at(self, step):
        t = self.times[step]
        return np.exp(-1j * t * self.lattice.energies) * self.ip_coeffs[step]

    def step_of(self, t):
        step = int(round(t / self.dt))
        if not (0 <= step < len(self.times)) or abs(self.times[step] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the step grid")
        return step


def nls_evolve(phi0, T, dt, lattice=None, coupling=1.0):
    """RK4 trajectory in the interaction picture, storing every step.

    The dispersion phases are applied exactly; only the nonlinear term
    is stepped, so mass drift is O(dt^4) per unit time.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if isinstance(phi0, NlsState):
        phi0 = phi0.coefficients
    phi0 = np.asarray(phi0, dtype=np.complex128)
    if lattice is None:
        raise ValueError("lattice required")
    e = lattice.energies.astype(np.float64)
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9:
        raise ValueError("T must be an integer multiple of dt")

    def rate(t, b):
        ph = np.exp(-1j * t * e)
        return -1j * coupling * np.conj(ph) * nls_nonlinearity(ph * b, lattice)

    times = np.arange(nsteps + 1) * dt
    out = np.empty((nsteps + 1, lattice.size), dtype=np.complex128)
    out[0] = phi0
    b = phi0.copy()
    for n in range(nsteps):
        t = times[n]
        k1 = rate(t, b)
        k2 = rate(t + 0.5 * dt, b + 0.5 * dt * k1)
        k3 = rate(t + 0.5 * dt, b + 0.5 * dt * k2)
        k4 = rate(t + dt, b + dt * k3)
        b = b + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(b)):
            raise RuntimeError(
                f"non-finite NLS coefficient at t={t + dt}; the defocusing "
                "Galerkin system is mass-bounded, so this indicates a bug"
            )
        out[n + 1] = b
    return NlsTrajectory(lattice, times, out, dt, coupling)


def mass(phi_hat):
    return float(np.sum(np.abs(phi_hat) ** 2))


def save_nls_state(state, lattice, path):
    """Coefficient list in codec order, with the lattice parameters."""
    if isinstance(state, NlsState):
        coeffs, t = state.coefficients, state.time
    else:
        coeffs, t = np.asarray(state, dtype=np.complex128), 0.0
    obj = {
        "d": lattice.d, "M": lattice.M, "time": float(t),
        "coefficients": [{"re": float(c.real), "im": float(c.imag)}
                         for c in coeffs],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_nls_state(path, lattice=None):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SerializationError(f"not valid JSON: {exc}") from exc
    try:
        d, M, t, entries = obj["d"], obj["M"], obj["time"], obj["coefficients"]
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed coefficient file: {exc}") from exc
    if lattice is None:
        lattice = FrequencyLattice(d, M)
    elif lattice.d != d or lattice.M != M:
        raise SerializationError("lattice mismatch")
    if len(entries) != lattice.size:
        raise SerializationError(
            f"coefficient list length {len(entries)} != F={lattice.size}"
        )
    coeffs = np.array([complex(e["re"], e["im"]) for e in entries])
    return NlsState(coeffs, t), lattice


def _product_rule_rate(phi, dphi, k, lattice, guard):
    """d/dt of the order-k pure tensor power, assembled term by term."""
    total = None
    for slot in range(2 * k):
        factors = []
        for ax in range(2 * k):
            base = phi if ax < k else np.conj(phi)
            if ax == slot:
                base = dphi if ax < k else np.conj(dphi)
            factors.append(base)
        term = np.ones((), dtype=np.complex128)
        for f in factors:
            term = np.multiply.outer(term, f)
        total = term if total is None else total + term
    return total


def factorized_residual(traj, k, grid_times, alpha=1.0,
                        derivative="product-rule", guard=DEFAULT_MEMORY_GUARD):
    """Hierarchy defect of the pure tensor powers of an NLS trajectory.

    Measures, at each grid time, the H^alpha norm of
    i d/dt gamma^(k) + (|xi'|^2 - |xi|^2) gamma^(k) - B gamma^(k+1)
    for gamma^(k) the k-fold tensor power of phi(t).

    derivative 'product-rule' assembles d/dt gamma exactly from the
    equation's right-hand side (an algebraic identity: the residual is
    pure roundoff for any coefficient vector); 'finite-difference'
    differences the stored interaction-picture trajectory with a
    five-point stencil, so the residual reflects the time resolution.
    """
    lat = traj.lattice
    disp = -level_energy(lat, k).reshape((lat.size,) * (2 * k))
    worst = 0.0
    for t in grid_times:
        step = traj.step_of(t)
        phi = traj.phi_at(step)
        gamma1 = factorized(phi, k + 1, lat, guard=guard)
        coll = full_collision(gamma1)
        if derivative == "product-rule":
            dphi = nls_rhs(phi, lat, traj.coupling)
            dgamma = _product_rule_rate(phi, dphi, k, lat, guard)
            gamma = factorized(phi, k, lat, guard=guard)
            resid = 1j * dgamma + disp * gamma.data - coll.data
        elif derivative == "finite-difference":
            n = len(traj.times) - 1
            if not (3 <= step <= n - 3):
                raise ValueError(
                    f"seven-point stencil needs 3 <= step <= {n - 3}, got {step}"
                )
            # 6th-order centered stencil on the interaction-picture tensors
            coeffs = {-3: -1.0, -2: 9.0, -1: -45.0, 1: 45.0, 2: -9.0, 3: 1.0}
            d_ip = None
            for off, c in coeffs.items():
                snap = factorized(
                    traj.ip_coeffs[step + off], k, lat, guard=guard
                ).data
                d_ip = c * snap if d_ip is None else d_ip + c * snap
            d_ip = d_ip / (60.0 * traj.dt)
            d_ip_dm = DensityMatrix(lat, k, "dense", data=d_ip)
            resid = 1j * free_evolve(d_ip_dm, t).data - coll.data
        else:
            raise ValueError(f"unknown derivative method {derivative!r}")
        worst = max(
            worst,
            h_alpha_norm(DensityMatrix(lat, k, "dense", data=resid), alpha),
        )
    return worst
