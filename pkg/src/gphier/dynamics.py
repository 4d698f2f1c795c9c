"""Free evolution, collision operators, hierarchy right-hand side, stepping.

Collision operators are realized as explicit index tables over the
lattice: each output coefficient is a sum over contracted frequency
pairs whose combined frequency stays inside the box.  The tables back
two interchangeable applications: a memory-lean gather (any size) and a
cached scipy.sparse matrix (small systems, used by the time-steppers).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor import DensityMatrix, HierarchyState, h_alpha_norm

__all__ = [
    "HierarchyMode",
    "Trajectory",
    "free_evolve",
    "collision",
    "full_collision",
    "collision_matrix",
    "full_collision_matrix",
    "hierarchy_rhs",
    "evolve_truncated",
    "continuity_defect",
    "phase_inequality_scan",
    "level_energy",
]

# above this dense-domain size, collision matrices are not materialized
MATRIX_DOMAIN_CAP = 2**21


@dataclass(frozen=True)
class HierarchyMode:
    """Randomization mode: deterministic, one shared field, or per-level fields.

    Levels are indexed by the order of the collision input, i.e. the
    field for level m randomizes the collision gamma^(m) -> gamma^(m-1).
    """

    variant: str
    field: object = None
    fields: object = None

    @classmethod
    def deterministic(cls):
        return cls("deterministic")

    @classmethod
    def dependent(cls, field):
        return cls("dependent", field=field)

    @classmethod
    def independent(cls, fields):
        return cls("independent", fields=dict(fields))

    def field_for_level(self, level):
        if self.variant == "deterministic":
            return None
        if self.variant == "dependent":
            return self.field
        try:
            return self.fields[level]
        except (KeyError, TypeError):
            raise ValueError(
                f"independent mode is missing a sign field for level {level}"
            ) from None


@dataclass
class Trajectory:
    """States sampled at grid times."""

    times: tuple
    states: list

    def state_at(self, t):
        for ti, st in zip(self.times, self.states):
            if abs(ti - t) < 1e-12:
                return st
        raise KeyError(f"time {t} not on the trajectory grid")


# --- free evolution ---------------------------------------------------------

_ENERGY_CACHE = {}


def level_energy(lattice, k):
    """Flat array of |xi_vec|^2 - |xi'_vec|^2 over the order-k index space."""
    key = (lattice.d, lattice.M, k)
    if key not in _ENERGY_CACHE:
        e = lattice.energies.astype(np.float64)
        F = lattice.size
        nd = 2 * k
        total = np.zeros((F,) * nd)
        for ax in range(nd):
            sign = 1.0 if ax < k else -1.0
            total += sign * e.reshape((1,) * ax + (F,) + (1,) * (nd - ax - 1))
        _ENERGY_CACHE[key] = total.reshape(-1)
    return _ENERGY_CACHE[key]


def free_evolve(gamma, t):
    """Multiply the coefficient at (xi; xi') by exp(-it(|xi|^2 - |xi'|^2)).

    The phase uses the total energy difference, so coefficients with
    |xi|^2 = |xi'|^2 are exactly unchanged.
    """
    lat = gamma.lattice
    if gamma.storage == "coo":
        e = lat.energies
        k = gamma.k
        tot = e[gamma.indices[:, :k]].sum(axis=1) - e[gamma.indices[:, k:]].sum(axis=1)
        vals = gamma.values * np.exp(-1j * t * tot)
        return DensityMatrix(lat, k, "coo", indices=gamma.indices.copy(), values=vals)
    energy = level_energy(lat, gamma.k).reshape(gamma.data.shape)
    return DensityMatrix(
        lat, gamma.k, "dense", data=gamma.data * np.exp(-1j * t * energy)
    )


# --- collision index tables -------------------------------------------------

_PAIR_CACHE = {}


def _pair_table(lattice):
    """All (g, p, q) with g - p + q in the box, as index arrays plus u."""
    key = (lattice.d, lattice.M)
    if key not in _PAIR_CACHE:
        F = lattice.size
        g, p, q = (x.ravel() for x in np.meshgrid(*[np.arange(F)] * 3, indexing="ij"))
        u, valid = lattice.combine_indices(g, p, q)
        table = (g[valid], u[valid], p[valid], q[valid])
        order = np.argsort(table[0], kind="stable")
        _PAIR_CACHE[key] = tuple(a[order] for a in table)
    return _PAIR_CACHE[key]


def _axis_roles(m, ell, n, sign):
    """Input/output axis bookkeeping for the (ell, n) collision at order m."""
    if not (1 <= ell < n <= m):
        raise ValueError(f"positions must satisfy 1 <= ell < n <= m, got "
                         f"ell={ell}, n={n}, m={m}")
    if sign == "+":
        ax_comb = ell - 1
        out_ax = ell - 1
    elif sign == "-":
        ax_comb = m + ell - 1
        out_ax = (m - 1) + (ell - 1)
    else:
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    ax_p = n - 1          # unprimed contracted slot
    ax_q = m + n - 1      # primed contracted slot
    rest_in = [a for a in range(2 * m) if a not in (ax_comb, ax_p, ax_q)]
    rest_out = [a for a in range(2 * (m - 1)) if a != out_ax]
    return ax_comb, ax_p, ax_q, out_ax, rest_in, rest_out


def _h_weights(field, g, u, a, b):
    if field is None:
        return np.ones(g.shape, dtype=np.float64)
    h = field.values.astype(np.float64)
    return h[g] * h[u] * h[a] * h[b]


def collision(gamma, ell, n, sign, field=None):
    """One collision operator: contract the pair at position n into slot ell.

    '+' substitutes the combined frequency on the unprimed side and sums
    over in-box contracted pairs with in-box combination; '-' mirrors on
    the primed side.  With a sign field, each summand carries the four
    factors h(slot) h(combined) h(pair unprimed) h(pair primed).
    """
    m = gamma.k
    if m < 2:
        raise ValueError("collision input must have order >= 2")
    ax_comb, ax_p, ax_q, out_ax, _, _ = _axis_roles(m, ell, n, sign)
    lat = gamma.lattice
    F = lat.size
    data = gamma.to_dense().data
    perm = np.moveaxis(data, (ax_comb, ax_p, ax_q), (0, 1, 2))
    gs, us, ps, qs = _pair_table(lat)
    out_shape = (F,) + perm.shape[3:]
    out = np.zeros(out_shape, dtype=np.complex128)
    for g in range(F):
        selm = gs == g
        if not np.any(selm):
            continue
        u, p, q = us[selm], ps[selm], qs[selm]
        if sign == "+":
            gathered = perm[u, p, q]
            w = _h_weights(field, np.full(u.shape, g), u, p, q)
        else:
            # unprimed contracted value is q, primed contracted is p
            gathered = perm[u, q, p]
            w = _h_weights(field, np.full(u.shape, g), u, q, p)
        out[g] = np.einsum("e,e...->...", w, gathered)
    out = np.moveaxis(out, 0, out_ax)
    return DensityMatrix(lat, m - 1, "dense", data=np.ascontiguousarray(out))


def full_collision(gamma, field=None):
    """Sum over j of the (j, m) plus-minus collision pairs (order m -> m-1)."""
    m = gamma.k
    if m < 2:
        raise ValueError("full collision needs order >= 2")
    lat = gamma.lattice
    if lat.size ** (2 * m) <= MATRIX_DOMAIN_CAP:
        mat = full_collision_matrix(lat, m, field)
        flat = mat @ gamma.to_dense().data.reshape(-1)
        return DensityMatrix(
            lat, m - 1, "dense", data=flat.reshape((lat.size,) * (2 * (m - 1)))
        )
    out = None
    for j in range(1, m):
        term = collision(gamma, j, m, "+", field) - collision(gamma, j, m, "-", field)
        out = term if out is None else out + term
    return out


_MATRIX_CACHE = {}
_MATRIX_CACHE_LIMIT = 128


def _cache_store(key, mat):
    if len(_MATRIX_CACHE) >= _MATRIX_CACHE_LIMIT:
        # drop the oldest entries; per-sample random fields would otherwise
        # accumulate matrices without bound
        for old in list(_MATRIX_CACHE)[: _MATRIX_CACHE_LIMIT // 4]:
            del _MATRIX_CACHE[old]
    _MATRIX_CACHE[key] = mat
    return mat


def collision_matrix(lattice, m, ell, n, sign, field=None):
    """The (ell, n) collision as a sparse matrix on flattened tensors."""
    F = lattice.size
    if F ** (2 * m) > MATRIX_DOMAIN_CAP:
        raise MemoryError(
            f"order-{m} collision matrix domain {F ** (2 * m)} exceeds cap; "
            "use collision() instead"
        )
    fkey = None if field is None else field.fingerprint()
    key = (lattice.d, lattice.M, m, ell, n, sign, fkey)
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    ax_comb, ax_p, ax_q, out_ax, rest_in, rest_out = _axis_roles(m, ell, n, sign)
    in_strides = F ** np.arange(2 * m - 1, -1, -1, dtype=np.int64)
    out_strides = F ** np.arange(2 * m - 3, -1, -1, dtype=np.int64)
    gs, us, ps, qs = _pair_table(lattice)
    if sign == "+":
        a_idx, b_idx = ps, qs
    else:
        a_idx, b_idx = qs, ps
    w = _h_weights(field, gs, us, a_idx, b_idx)
    base_in = us * in_strides[ax_comb] + a_idx * in_strides[ax_p] \
        + b_idx * in_strides[ax_q]
    base_out = gs * out_strides[out_ax]
    R = F ** (2 * m - 3)
    rest = np.arange(R, dtype=np.int64)
    rest_in_c = np.zeros(R, dtype=np.int64)
    rest_out_c = np.zeros(R, dtype=np.int64)
    tmp = rest.copy()
    for ain, aout in zip(reversed(rest_in), reversed(rest_out)):
        digit = tmp % F
        tmp //= F
        rest_in_c += digit * in_strides[ain]
        rest_out_c += digit * out_strides[aout]
    rows = (base_out[:, None] + rest_out_c[None, :]).reshape(-1)
    cols = (base_in[:, None] + rest_in_c[None, :]).reshape(-1)
    vals = np.repeat(w, R)
    mat = sp.coo_matrix(
        (vals, (rows, cols)), shape=(F ** (2 * (m - 1)), F ** (2 * m))
    ).tocsr()
    return _cache_store(key, mat)


def full_collision_matrix(lattice, m, field=None):
    """Matrix of the full collision operator at order m."""
    fkey = None if field is None else field.fingerprint()
    key = (lattice.d, lattice.M, m, "full", fkey)
    if key in _MATRIX_CACHE:
        return _MATRIX_CACHE[key]
    mat = None
    for j in range(1, m):
        term = collision_matrix(lattice, m, j, m, "+", field) \
            - collision_matrix(lattice, m, j, m, "-", field)
        mat = term if mat is None else mat + term
    return _cache_store(key, mat)


# --- hierarchy right-hand side and stepping ---------------------------------


def hierarchy_rhs(state, N, mode):
    """d/dt of the truncated hierarchy in coefficient form.

    Level k of the output is i (|xi'|^2 - |xi|^2) gamma^(k) minus
    i times the full (possibly randomized) collision of gamma^(k+1);
    levels above N count as zero.
    """
    lat = state.lattice
    out = {}
    for k in range(1, N + 1):
        gk = state.level(k)
        acc = None
        if gk is not None:
            disp = -level_energy(lat, k).reshape(gk.data.shape)
            acc = 1j * disp * gk.to_dense().data
        gk1 = state.level(k + 1) if k + 1 <= N else None
        if gk1 is not None:
            coll = full_collision(gk1, mode.field_for_level(k + 1))
            acc = -1j * coll.data if acc is None else acc - 1j * coll.data
        if acc is not None:
            out[k] = DensityMatrix(lat, k, "dense", data=acc)
    return HierarchyState(lat, max(N, state.K_max), out)


def _mode_matrices(lattice, N, mode):
    return {
        k: full_collision_matrix(lattice, k + 1, mode.field_for_level(k + 1))
        for k in range(1, N)
    }


def _check_finite(ys, t):
    for y in ys:
        if not np.all(np.isfinite(y)):
            raise RuntimeError(
                f"non-finite coefficient at t={t}; the truncated system is "
                "linear, so this indicates a step-size or data bug"
            )


def evolve_truncated(state0, N, T, dt=1e-3, mode=None, picture="auto",
                     grid_times=None):
    """RK4 trajectory of the truncated hierarchy.

    In the interaction picture (default for T >= 0.1 or M >= 4) the
    dispersion phases are applied exactly and only the collision term is
    stepped.  States are recorded at grid_times (default: 0 and T).
    """
    if mode is None:
        mode = HierarchyMode.deterministic()
    if dt <= 0:
        raise ValueError("dt must be positive")
    lat = state0.lattice
    if picture == "auto":
        picture = "interaction" if (T >= 0.1 or lat.M >= 4) else "plain"
    if grid_times is None:
        grid_times = (0.0, T)
    grid_times = tuple(float(t) for t in grid_times)
    if any(t < 0 or t > T + 1e-12 for t in grid_times):
        raise ValueError("grid times must lie in [0, T]")

    F = lat.size
    ys = []
    for k in range(1, N + 1):
        g = state0.level(k)
        ys.append(
            np.zeros(F ** (2 * k), dtype=np.complex128)
            if g is None
            else g.to_dense().data.reshape(-1).copy()
        )
    mats = _mode_matrices(lat, N, mode)
    energies = [level_energy(lat, k) for k in range(1, N + 1)]

    def record(t, ys_now, phases=None):
        levels = {}
        for k in range(1, N + 1):
            flat = ys_now[k - 1]
            if phases is not None:
                flat = phases[k - 1] * flat
            levels[k] = DensityMatrix(
                lat, k, "dense", data=flat.reshape((F,) * (2 * k)).copy()
            )
        return HierarchyState(lat, N, levels)

    states, times = [], []
    t = 0.0
    if picture == "plain":

        def rhs(tcur, y):
            out = []
            for k in range(1, N + 1):
                acc = 1j * (-energies[k - 1]) * y[k - 1]
                if k < N:
                    acc = acc - 1j * (mats[k] @ y[k])
                out.append(acc)
            return out

        for gt in grid_times:
            span = gt - t
            if span > 1e-15:
                nsteps = max(1, int(np.ceil(span / dt - 1e-9)))
                h = span / nsteps
                for _ in range(nsteps):
                    k1 = rhs(t, ys)
                    y2 = [y + 0.5 * h * d for y, d in zip(ys, k1)]
                    k2 = rhs(t + 0.5 * h, y2)
                    y3 = [y + 0.5 * h * d for y, d in zip(ys, k2)]
                    k3 = rhs(t + 0.5 * h, y3)
                    y4 = [y + h * d for y, d in zip(ys, k3)]
                    k4 = rhs(t + h, y4)
                    ys = [
                        y + (h / 6.0) * (a + 2 * b + 2 * c + d)
                        for y, a, b, c, d in zip(ys, k1, k2, k3, k4)
                    ]
                    t += h
                _check_finite(ys, t)
            t = gt
            times.append(t)
            states.append(record(t, ys))
        return Trajectory(tuple(times), states)

    # interaction picture: z_k = exp(+i t E_k) y_k, so z' has no stiff part.
    # The top level is constant (no collision feeds it), so its feed into
    # level N-1 collapses to a small matrix over distinct energy values.
    z_top = ys[N - 1]
    if N >= 2:
        top_vals, top_inv = np.unique(energies[N - 1], return_inverse=True)
        cols = sp.csr_matrix(
            (z_top, (np.arange(z_top.size), top_inv)),
            shape=(z_top.size, top_vals.size),
        )
        top_feed = np.asarray((mats[N - 1] @ cols).todense())
    zs = ys[: N - 1]  # dynamic levels 1..N-1

    def rhs_ip(phases, s, z):
        out = []
        for k in range(1, N):
            if k < N - 1:
                v = mats[k] @ (phases[k] * z[k])
            else:
                v = top_feed @ np.exp(-1j * s * top_vals)
            out.append(-1j * np.conj(phases[k - 1]) * v)
        return out

    for gt in grid_times:
        span = gt - t
        if span > 1e-15 and N >= 2:
            nsteps = max(1, int(np.ceil(span / dt - 1e-9)))
            h = span / nsteps
            half = [np.exp(-1j * (0.5 * h) * e) for e in energies[: N - 1]]
            full = [hf * hf for hf in half]
            for _ in range(nsteps):
                # base phase rebuilt from t each step: no multiplicative drift
                ph0 = [np.exp(-1j * t * e) for e in energies[: N - 1]]
                ph_half = [p * q for p, q in zip(ph0, half)]
                ph_full = [p * q for p, q in zip(ph0, full)]
                k1 = rhs_ip(ph0, t, zs)
                z2 = [z + 0.5 * h * d for z, d in zip(zs, k1)]
                k2 = rhs_ip(ph_half, t + 0.5 * h, z2)
                z3 = [z + 0.5 * h * d for z, d in zip(zs, k2)]
                k3 = rhs_ip(ph_half, t + 0.5 * h, z3)
                z4 = [z + h * d for z, d in zip(zs, k3)]
                k4 = rhs_ip(ph_full, t + h, z4)
                zs = [
                    z + (h / 6.0) * (a + 2 * b + 2 * c + d)
                    for z, a, b, c, d in zip(zs, k1, k2, k3, k4)
                ]
                t += h
            _check_finite(zs, t)
        t = gt
        times.append(t)
        phases = [np.exp(-1j * t * e) for e in energies]
        states.append(record(t, zs + [z_top], phases))
    return Trajectory(tuple(times), states)


# --- time-continuity defect (free flow) --------------------------------------


def modulus_exponent(beta, beta0):
    """Holder exponent of the free-flow time modulus between H^beta0 and H^beta."""
    if beta <= 0 or beta0 <= beta:
        raise ValueError("need beta0 > beta > 0")
    return min(1.0, (beta0 - beta) / 2.0)


def continuity_defect(sigma, t, delta, beta, beta0):
    """Both sides of the free-flow modulus bound; lhs <= rhs is guaranteed.

    lhs is the H^beta norm of the free-flow increment between t and
    t + delta; rhs is 2^(1-r) delta^r times the H^beta0 norm, with
    r = (beta0-beta)/2 capped at 1.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = modulus_exponent(beta, beta0)
    diff = free_evolve(sigma, t + delta) - free_evolve(sigma, t)
    lhs = h_alpha_norm(diff, beta)
    rhs = 2.0 ** (1.0 - r) * delta**r * h_alpha_norm(sigma, beta0)
    return lhs, rhs, r


def phase_inequality_scan(lattice, k, beta, beta0, delta):
    """Per-coefficient modulus bound, exhaustively over energy patterns.

    Every coefficient slot of an order-k tensor realizes some tuple of
    per-axis energies; the bound |exp(-i delta E) - 1| <=
    2^(1-r) delta^r W^r with W the product of squared brackets depends
    only on that tuple, so scanning distinct tuples covers all slots.
    Returns (number of violations, worst lhs/rhs ratio, slots covered).
    """
    r = modulus_exponent(beta, beta0)
    evals, counts = np.unique(lattice.energies, return_counts=True)
    nd = 2 * k
    grids = np.meshgrid(*[evals.astype(np.float64)] * nd, indexing="ij")
    cgrids = np.meshgrid(*[counts.astype(np.int64)] * nd, indexing="ij")
    E = sum(g if ax < k else -g for ax, g in enumerate(grids))
    W = np.prod([1.0 + g for g in grids], axis=0)
    lhs = np.abs(np.exp(-1j * delta * E) - 1.0)
    rhs = 2.0 ** (1.0 - r) * delta**r * W**r
    violations = int(np.sum(lhs > rhs * (1 + 1e-12)))
    ratio = float(np.max(lhs / rhs))
    covered = int(np.sum(np.prod(np.array(cgrids, dtype=np.float64), axis=0)))
    return violations, ratio, covered
