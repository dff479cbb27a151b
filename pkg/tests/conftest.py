"""Shared fixtures, instance generators and independent test oracles.

Oracles here deliberately take a different computational path than the
library code they check: exhaustive active-set enumeration for the
projection, support-set enumeration and simplex grid search for the hull
minimizer, and outcome enumeration for conditional expectations.
"""

import itertools
import math

import numpy as np

from valleyfill.core import Profile
from valleyfill.feasible import ConvexChargeSet, FinitePulseSet


# ---------------------------------------------------------------------------
# instance generators

def random_convex_set(rng, grid):
    caps = rng.uniform(0.5, 3.0, grid.slots)
    max_energy = grid.dt * caps.sum()
    energy = rng.uniform(0.1, 0.9) * max_energy
    return ConvexChargeSet(Profile(caps, grid), energy)


def random_pulse_set(rng, grid, m_max=6, signed=False):
    """Members are shifted copies of one random template: A1-A4 hold exactly."""
    length = int(rng.integers(1, max(2, grid.slots // 2)))
    template = rng.uniform(0.2, 2.0, length)
    if signed:
        template *= rng.choice([-1.0, 1.0], size=length)
    max_start = grid.slots - length
    m = int(rng.integers(1, min(m_max, max_start + 1) + 1))
    starts = sorted(rng.choice(max_start + 1, size=m, replace=False).tolist())
    members = np.zeros((m, grid.slots))
    for k, s in enumerate(starts):
        members[k, s:s + length] = template
    dt = grid.dt
    return FinitePulseSet(members, grid,
                          energy=dt * template.sum(),
                          sqnorm=dt * float(np.dot(template, template)),
                          rate_bound=float(np.max(np.abs(template))))


def random_base(rng, grid, lo=0.0, hi=2.0):
    return Profile(rng.uniform(lo, hi, grid.slots), grid)


# ---------------------------------------------------------------------------
# projection oracle: active-set enumeration over box-and-hyperplane sets

def projection_oracle(z, charge_set):
    """Exact projection by enumerating every {at 0, at cap, free} pattern."""
    grid = charge_set.grid
    caps = charge_set.caps.values
    zv = z.values
    dt = grid.dt
    S = grid.slots
    target = charge_set.energy
    best = None
    best_d2 = math.inf
    for pattern in itertools.product((0, 1, 2), repeat=S):
        x = np.empty(S)
        free = []
        fixed_energy = 0.0
        for t, state in enumerate(pattern):
            if state == 0:
                x[t] = 0.0
            elif state == 1:
                x[t] = caps[t]
                fixed_energy += dt * caps[t]
            else:
                free.append(t)
        if free:
            lam = (dt * sum(zv[t] for t in free) - (target - fixed_energy)) \
                / (dt * len(free))
            ok = True
            for t in free:
                xt = zv[t] - lam
                if xt < -1e-12 or xt > caps[t] + 1e-12:
                    ok = False
                    break
                x[t] = min(max(xt, 0.0), caps[t])
            if not ok:
                continue
        else:
            if abs(fixed_energy - target) > 1e-10 * max(1.0, abs(target)):
                continue
        d2 = dt * float(np.dot(x - zv, x - zv))
        if d2 < best_d2:
            best_d2 = d2
            best = x
    assert best is not None, "oracle found no feasible pattern"
    return Profile(best, grid), best_d2


# ---------------------------------------------------------------------------
# hull minimization oracles

def hull_q(z, h, x_prev, c_i, dt):
    diff = z - x_prev
    return dt * (2.0 * c_i * float(np.dot(h, z)) + float(np.dot(diff, diff)))


def hull_oracle_supports(h, x_prev, c_i, pulse_set):
    """Exact hull minimum via enumeration of member support subsets.

    For every support the equality-constrained least-squares system is
    solved directly; candidates with negative weights are discarded.  The
    optimal face always admits an affinely independent support, so the
    minimum is attained.
    """
    Y = pulse_set.members
    m = pulse_set.m
    dt = pulse_set.grid.dt
    hv, pv = h.values, x_prev.values
    p = pv - c_i * hv  # Q(z) = ||z - p||^2 + const
    best_q = math.inf
    best_z = None
    for r in range(1, m + 1):
        for subset in itertools.combinations(range(m), r):
            A = Y[list(subset)]
            G = dt * (A @ A.T)
            rhs = dt * (A @ p)
            n = len(subset)
            K = np.zeros((n + 1, n + 1))
            K[:n, :n] = G
            K[:n, n] = 1.0
            K[n, :n] = 1.0
            v = np.append(rhs, 1.0)
            theta, *_ = np.linalg.lstsq(K, v, rcond=None)
            theta = theta[:n]
            if np.any(theta < -1e-9):
                continue
            theta = np.clip(theta, 0.0, None)
            ssum = theta.sum()
            if ssum <= 0 or abs(ssum - 1.0) > 1e-6:
                continue
            theta = theta / ssum
            z = theta @ A
            q = hull_q(z, hv, pv, c_i, dt)
            if q < best_q:
                best_q = q
                best_z = z
    return best_z, best_q


def hull_oracle_grid(h, x_prev, c_i, pulse_set, step=1e-3):
    """Simplex grid search; only feasible for m <= 3 at this step."""
    Y = pulse_set.members
    m = pulse_set.m
    dt = pulse_set.grid.dt
    hv, pv = h.values, x_prev.values
    n = round(1.0 / step)
    best_q = math.inf
    if m == 1:
        return Y[0], hull_q(Y[0], hv, pv, c_i, dt)
    if m == 2:
        t = np.arange(n + 1) / n
        Z = np.outer(1 - t, Y[0]) + np.outer(t, Y[1])
        diffs = Z - pv
        q = dt * (2 * c_i * (Z @ hv) + np.einsum("ks,ks->k", diffs, diffs))
        k = int(np.argmin(q))
        return Z[k], float(q[k])
    assert m == 3
    for i in range(n + 1):
        a = i / n
        t = np.arange(n - i + 1) / n
        Z = a * Y[0] + np.outer(t, Y[1]) + np.outer(1 - a - t, Y[2])
        diffs = Z - pv
        q = dt * (2 * c_i * (Z @ hv) + np.einsum("ks,ks->k", diffs, diffs))
        k = int(np.argmin(q))
        if q[k] < best_q:
            best_q = float(q[k])
            best_z = Z[k]
    return best_z, best_q


# ---------------------------------------------------------------------------
# expectation oracle: full outcome enumeration

def expected_objective_enumeration(b, xs_prev, thetas, sets):
    """E[L_k | x^(k-1)] by enumerating every joint member selection."""
    dt = b.grid.dt
    total = 0.0
    ranges = [range(s.m) for s in sets]
    for choice in itertools.product(*ranges):
        prob = 1.0
        agg = b.values.copy()
        for i, k in enumerate(choice):
            prob *= float(thetas[i].weights[k])
            agg += sets[i].members[k]
        if prob > 0:
            total += prob * dt * float(np.dot(agg, agg))
    return total
