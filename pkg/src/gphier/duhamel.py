"""Iterated Duhamel terms, explicit truncated solutions, residual checks.

The j-fold nested time integral over the simplex 0 <= t_j <= ... <= t_1
<= t is evaluated by recursive tensor-product Gauss-Legendre quadrature
(cost q^j).  Evaluation is batched over quadrature subtrees, with leaf
propagation grouped by distinct dispersion-energy values so the deepest
level reduces to small dense matrix products.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dynamics import full_collision_matrix, level_energy
from .tensor import DensityMatrix, h_alpha_norm

__all__ = [
    "QuadratureSpec",
    "DuhamelEvaluator",
    "duhamel_term",
    "truncated_solution",
    "integral_residual",
    "simplex_check",
    "decay_profile",
    "cauchy_diagnostic",
    "solution_time_modulus",
]

_CHUNK = 2**23  # cap on complex elements materialized per batch


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss-Legendre order per nesting level and the depth cap."""

    q: int = 12
    j_max: int = 4

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("quadrature order must be >= 2")

    def nodes(self):
        x, w = np.polynomial.legendre.leggauss(self.q)
        return x, w


class DuhamelEvaluator:
    """Batched evaluator of Duhamel terms for one initial state and mode.

    Precomputes, per hierarchy level: the flattened initial coefficients,
    the dispersion energies grouped by distinct value, the (possibly
    randomized) full collision matrices, and the leaf matrices obtained
    by pushing each energy group of the initial data through a collision.
    """

    def __init__(self, state0, mode, quad=None):
        self.state = state0
        self.mode = mode
        self.quad = quad if quad is not None else QuadratureSpec()
        self.lattice = state0.lattice
        self._gamma = {}
        self._ebuckets = {}
        self._mats = {}
        self._leaf = {}
        self._gl = self.quad.nodes()

    def _gamma_flat(self, m):
        if m not in self._gamma:
            g = self.state.level(m)
            self._gamma[m] = None if g is None else g.to_dense().data.reshape(-1)
        return self._gamma[m]

    def _buckets(self, m):
        if m not in self._ebuckets:
            vals, inv = np.unique(level_energy(self.lattice, m), return_inverse=True)
            self._ebuckets[m] = (vals, inv)
        return self._ebuckets[m]

    def _mat(self, m):
        if m not in self._mats:
            self._mats[m] = full_collision_matrix(
                self.lattice, m, self.mode.field_for_level(m)
            )
        return self._mats[m]

    def _leaf_matrix(self, m):
        """Collision applied to each energy group of gamma0^(m)."""
        if m not in self._leaf:
            g = self._gamma_flat(m)
            vals, inv = self._buckets(m)
            cols = sp.csr_matrix(
                (g, (np.arange(g.size), inv)), shape=(g.size, vals.size)
            )
            self._leaf[m] = np.asarray((self._mat(m) @ cols).todense())
        return self._leaf[m]

    def _phases(self, m, gaps):
        """exp(-i * gap * E_m) as a (dim_m, len(gaps)) array."""
        vals, inv = self._buckets(m)
        table = np.exp(-1j * np.outer(vals, gaps))
        return table[inv, :]

    def _free(self, m, times):
        """(dim_m, n) free evolutions of gamma0^(m)."""
        g = self._gamma_flat(m)
        return self._phases(m, np.asarray(times)) * g[:, None]

    def term_batch(self, k, j, times):
        """Duh_j at level k for a batch of times; (dim_k, n) array."""
        if j < 0 or j > self.quad.j_max:
            raise ValueError(f"depth {j} outside 0..{self.quad.j_max}")
        if k + j > self.state.K_max:
            raise ValueError(f"level {k}+depth {j} exceeds K_max={self.state.K_max}")
        times = np.asarray(times, dtype=np.float64)
        F = self.lattice.size
        dim_k = F ** (2 * k)
        if self._gamma_flat(k + j) is None:
            return np.zeros((dim_k, times.size), dtype=np.complex128)
        if j == 0:
            return self._free(k, times)
        return self._descend(k, j, times)

    def _descend(self, level, depth, s):
        """Duh_depth at this level for times s; recursion over the subtree."""
        F = self.lattice.size
        dim = F ** (2 * level)
        dim_child = F ** (2 * (level + 1))
        q = self.quad.q
        max_cols = max(1, _CHUNK // max(dim, dim_child))
        batch = max(1, max_cols // q)
        out = np.empty((dim, s.size), dtype=np.complex128)
        x, w = self._gl
        for lo in range(0, s.size, batch):
            sb = s[lo:lo + batch]
            u = 0.5 * sb[:, None] * (x[None, :] + 1.0)      # (ns, q) child times
            wu = 0.5 * sb[:, None] * w[None, :]             # GL weights on [0, s]
            uf = u.reshape(-1)
            if depth == 1:
                vals, _ = self._buckets(level + 1)
                P = np.exp(-1j * np.outer(vals, uf))
                BV = self._leaf_matrix(level + 1) @ P       # (dim, ns*q)
            else:
                child = self._descend(level + 1, depth - 1, uf)
                BV = self._mat(level + 1) @ child
            gaps = (sb[:, None] - u).reshape(-1)
            BV *= self._phases(level, gaps)
            folded = np.einsum("dnr,nr->dn", BV.reshape(dim, sb.size, q), wu)
            out[:, lo:lo + sb.size] = -1j * folded
        return out

    def solution_batch(self, N, k, times):
        """Truncated-hierarchy solution at level k; sum of Duh_0..Duh_(N-k)."""
        if k > N:
            raise ValueError("level k must be <= truncation N")
        times = np.asarray(times, dtype=np.float64)
        F = self.lattice.size
        acc = np.zeros((F ** (2 * k), times.size), dtype=np.complex128)
        for j in range(0, N - k + 1):
            if k + j > self.state.K_max:
                break
            acc += self.term_batch(k, j, times)
        return acc

    def _wrap(self, k, col):
        F = self.lattice.size
        return DensityMatrix(
            self.lattice, k, "dense", data=col.reshape((F,) * (2 * k)).copy()
        )

    def term(self, k, j, t):
        return self._wrap(k, self.term_batch(k, j, [t])[:, 0])

    def solution(self, N, k, t):
        return self._wrap(k, self.solution_batch(N, k, [t])[:, 0])


def duhamel_term(state0, k, j, t, mode, quad=None):
    """Duhamel expansion term of depth j at level k, evaluated at time t.

    Depth 0 is the free evolution of gamma0^(k); depth j >= 1 is the
    j-fold nested integral with the (-i)^j prefactor, alternating free
    evolution and full collisions with the mode's per-level fields.
    """
    return DuhamelEvaluator(state0, mode, quad).term(k, j, t)


def truncated_solution(state0, N, k, t, mode, quad=None):
    """Explicit solution of the depth-N truncated hierarchy at level k."""
    return DuhamelEvaluator(state0, mode, quad).solution(N, k, t)


def integral_residual(state0, N, k, t, mode, quad=None, alpha=1.0):
    """H^alpha norm of the integral-equation defect of the truncated solution.

    Measures gamma^(k)(t) - U(t) gamma0^(k) + i * int_0^t U(t-s)
    [B^(k+1)] gamma^(k+1)(s) ds with gamma the truncated solution; for
    k <= N-1 this vanishes up to quadrature error.
    """
    if k > N - 1:
        raise ValueError("residual is defined for levels k <= N-1")
    ev = DuhamelEvaluator(state0, mode, quad)
    q = ev.quad.q
    x, w = ev._gl
    nodes = 0.5 * t * (x + 1.0)
    weights = 0.5 * t * w
    sol_k = ev.solution_batch(N, k, [t])[:, 0]
    free_k = ev._free(k, [t])[:, 0] if ev._gamma_flat(k) is not None \
        else np.zeros_like(sol_k)
    resid = sol_k - free_k
    if t > 0:
        upper = ev.solution_batch(N, k + 1, nodes)
        integrand = ev._mat(k + 1) @ upper
        integrand *= ev._phases(k, t - nodes)
        resid = resid + 1j * (integrand @ weights)
    return h_alpha_norm(ev._wrap(k, resid), alpha)


def simplex_check(j, t, quad=None):
    """Nested quadrature of the constant 1 against the exact t^j / j!."""
    if j < 1:
        raise ValueError("depth must be >= 1")
    quad = quad if quad is not None else QuadratureSpec()
    x, w = quad.nodes()

    def nested(s, depth):
        if depth == 0:
            return 1.0
        u = 0.5 * s * (x + 1.0)
        wu = 0.5 * s * w
        return float(sum(wi * nested(ui, depth - 1) for ui, wi in zip(u, wu)))

    return nested(t, j), t**j / math.factorial(j)


def decay_profile(state0, k, t, mode, j_max, quad=None, alpha=1.0,
                  norm_stat="pointwise", mc_samples=0, seed=0):
    """Norms of Duh_j for j = 0..j_max plus factorial-normalized diagnostics.

    norm_stat 'pointwise' takes plain H^alpha norms for the mode's own
    fields; 'omega_l2' averages the squared norm over sign assignments
    (exact enumeration, or Monte Carlo when mc_samples > 0) of the
    fields the term actually uses.  The normalized value is
    a_j = |Duh_j| * j! / (t^j * prod_{i<j}(k+i)).
    """
    from .dynamics import HierarchyMode
    from .randomization import omega_l2_h_alpha

    norms = []
    for j in range(0, j_max + 1):
        if norm_stat == "pointwise":
            ev = DuhamelEvaluator(state0, mode, quad)
            norms.append(h_alpha_norm(ev.term(k, j, t), alpha))
        elif norm_stat == "omega_l2":
            if mode.variant == "independent":
                levels = list(range(k + 1, k + j + 1))

                def evaluator(fields, j=j):
                    md = HierarchyMode.independent(fields) if fields \
                        else HierarchyMode.deterministic()
                    return DuhamelEvaluator(state0, md, quad).term(k, j, t)

            elif mode.variant == "dependent":
                levels = [0] if j > 0 else []

                def evaluator(fields, j=j):
                    md = HierarchyMode.dependent(fields[0]) if fields \
                        else HierarchyMode.deterministic()
                    return DuhamelEvaluator(state0, md, quad).term(k, j, t)

            else:
                levels = []

                def evaluator(fields, j=j):
                    return DuhamelEvaluator(state0, mode, quad).term(k, j, t)

            method = "mc" if mc_samples else "exact"
            est = omega_l2_h_alpha(
                evaluator, state0.lattice, levels, alpha,
                method=method, mc_samples=mc_samples, seed=seed,
            )
            norms.append(est.value)
        else:
            raise ValueError(f"unknown norm_stat {norm_stat!r}")
    normalized = []
    for j, nj in enumerate(norms):
        scale = t**j / math.factorial(j) if t > 0 or j == 0 else 0.0
        growth = math.prod(range(k, k + j)) if j > 0 else 1.0
        normalized.append(nj / (scale * growth) if scale > 0 else np.nan)
    return np.array(norms), np.array(normalized)


def solution_time_modulus(state0, N, base_times, deltas, mode, quad=None,
                          alpha=1.0, xi=0.5):
    """Measured time-modulus ratios of the truncated solution.

    For each delta, returns the sup over base times of
    |Gamma_N(t + delta) - Gamma_N(t)| in the field-averaged xi-weighted
    norm, divided by sqrt(delta).  Averaging enumerates the mode's sign
    fields exactly (independent: all per-level fields jointly; dependent:
    the shared field; deterministic: no averaging).
    """
    from .dynamics import HierarchyMode
    from .randomization import enumerate_fields
    import itertools as it

    lat = state0.lattice
    if mode.variant == "independent":
        per_level = enumerate_fields(lat)
        levels = list(range(2, N + 1))
        modes = [
            HierarchyMode.independent(dict(zip(levels, combo)))
            for combo in it.product(per_level, repeat=len(levels))
        ]
    elif mode.variant == "dependent":
        modes = [HierarchyMode.dependent(f) for f in enumerate_fields(lat)]
    else:
        modes = [mode]

    base_times = np.asarray(base_times, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    times = np.concatenate([base_times] +
                           [base_times + d for d in deltas])
    nb = base_times.size
    # diff_sq[(di, ti)][k-1]: field-averaged squared level norms
    diff_sq = np.zeros((deltas.size, nb, N))
    for md in modes:
        ev = DuhamelEvaluator(state0, md, quad)
        for k in range(1, N + 1):
            sol = ev.solution_batch(N, k, times)
            for di in range(deltas.size):
                seg = sol[:, (di + 1) * nb:(di + 2) * nb] - sol[:, :nb]
                for ti in range(nb):
                    diff_sq[di, ti, k - 1] += h_alpha_norm(
                        ev._wrap(k, seg[:, ti]), alpha
                    ) ** 2
    out = {}
    for di, d in enumerate(deltas):
        sup = 0.0
        for ti in range(nb):
            norm = sum(
                xi**k * np.sqrt(diff_sq[di, ti, k - 1] / len(modes))
                for k in range(1, N + 1)
            )
            sup = max(sup, norm)
        out[float(d)] = sup / np.sqrt(d)
    return out


def cauchy_diagnostic(state0, Ns, T, mode, quad=None, alpha=1.0, xi=0.5,
                      grid_times=(0.0, 0.05, 0.1)):
    """Collision-weighted size of consecutive truncation increments.

    For each N, computes D(N): the sup over the grid of the xi-weighted
    sum over k of the averaged H^alpha norms of [B^(k+1)] applied to
    (Gamma_(N+1) - Gamma_N) at level k+1.  The increment identity
    Gamma_(N+1)^(m) - Gamma_N^(m) = Duh_(N+1-m) is used directly.
    Averaging is exact over the shared field for the dependent mode and
    pointwise otherwise.
    """
    from .dynamics import HierarchyMode
    from .randomization import enumerate_fields

    if mode.variant == "dependent":
        fields = enumerate_fields(state0.lattice)
        modes = [HierarchyMode.dependent(f) for f in fields]
    else:
        modes = [mode]
    for N in Ns:
        if N + 1 > state0.K_max:
            raise ValueError(f"need K_max >= {N + 1}")

    grid = np.asarray(grid_times, dtype=np.float64)
    # level_sq[(N, k)][ti] accumulates squared norms over the field choices
    level_sq = {}
    for md in modes:
        ev = DuhamelEvaluator(state0, md, quad)
        for N in Ns:
            for k in range(1, N + 1):
                inc = ev.term_batch(k + 1, N - k, grid)
                cols = ev._mat(k + 1) @ inc
                sq = np.array(
                    [h_alpha_norm(ev._wrap(k, cols[:, i]), alpha) ** 2
                     for i in range(grid.size)]
                )
                key = (N, k)
                level_sq[key] = level_sq.get(key, 0.0) + sq
    out = []
    for N in Ns:
        per_time = np.zeros(grid.size)
        for k in range(1, N + 1):
            per_time += xi**k * np.sqrt(level_sq[(N, k)] / len(modes))
        out.append(float(np.max(per_time)))
    return np.array(out)
