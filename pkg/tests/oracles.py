"""Independent reference computations used by the tests."""

import itertools
import math
from fractions import Fraction

import numpy as np


def stationary_weights_exact(lam: Fraction, alpha: int, kmax: int) -> list[float]:
    """Normalized ``lam**k / (k!)**alpha`` for ``k <= kmax`` in exact rational arithmetic."""
    w = [lam**k / Fraction(math.factorial(k)) ** alpha for k in range(kmax + 1)]
    z = sum(w)
    return [float(x / z) for x in w]


def expm_taylor(Q: np.ndarray, t: float) -> np.ndarray:
    """exp(tQ) by halving the interval until small, a long Taylor series, then repeated squaring."""
    A = Q * t
    halvings = 0
    while np.abs(A).sum(axis=1).max() > 0.05:
        A = A / 2.0
        halvings += 1
    term = np.eye(Q.shape[0])
    out = term.copy()
    for i in range(1, 30):
        term = term @ A / i
        out = out + term
    for _ in range(halvings):
        out = out @ out
    return out


def bisect_root(f, lo: float, hi: float, iters: int = 200) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generator_terms(occ, k, N, eps, theta, gamma, alpha):
    """Backward generator out of ``(occ, k)`` written out term by term.

    Returns ``{(kind, arg): (rate, successor_occ, successor_k)}`` for every
    term with a valid successor. Arithmetic is written in the same order
    as the simulator so the rates can be compared exactly.
    """
    n = len(occ) - 1
    m = round(eps * N)
    eps = m / N
    up = N * (theta / (eps * N**2))
    gamma_N = gamma * eps ** (alpha - 1.0) / N
    x0 = occ[0]
    occupied = sum(occ[1:])
    out = {}

    def succ(delta, dk):
        new = list(occ)
        for idx, d in delta.items():
            new[idx] += d
        return tuple(new), k + dk

    for j in range(2, n + 1):
        if occ[j]:
            pairs = j * (j - 1) // 2
            out[("WITHIN_COLONY_COAL", j)] = (occ[j] * pairs * 2.0 / (m - 1), *succ({j: -1, j - 1: 1}, 0))
    if x0 >= 2:
        out[("MAIN_COAL", 0)] = ((x0 * (x0 - 1) // 2) * 2.0 / (N - 1), *succ({0: -1}, 0))
    leave = eps / (1.0 + eps)
    stay = 1.0 / (1.0 + eps)
    for r in range(1, x0 + 1):
        out[("EXIT", r)] = (up * math.comb(x0, r) * math.pow(leave, r) * math.pow(stay, x0 - r), *succ({0: -r, r: 1}, 1))
    if k > 0:
        fuse = gamma_N * math.pow(float(k), alpha)
        for j in range(1, n + 1):
            if occ[j]:
                out[("ENTRY_NO_ANCESTOR_COAL", j)] = (fuse * (occ[j] / k) * (1.0 - x0 / N), *succ({j: -1, 0: 1}, -1))
                if x0 > 0:
                    out[("ENTRY_WITH_ANCESTOR_COAL", j)] = (fuse * (occ[j] / k) * (x0 / N), *succ({j: -1}, -1))
    out[("COLONY_BIRTH_SILENT", 0)] = (up * math.pow(stay, x0), *succ({}, 1))
    if k > occupied:
        out[("COLONY_DEATH_SILENT", 0)] = (gamma_N * math.pow(float(k), alpha) * (1.0 - occupied / k), *succ({}, -1))
    return out


def censored_q_by_hand(n, theta, gamma, alpha):
    """Censored-coalescent generator keyed by ``((r0, r1), (r0', r1'))``."""
    back = theta * (gamma / theta) ** (1.0 / alpha)
    q = {}
    for total in range(1, n + 1):
        for r0 in range(total + 1):
            r1 = total - r0
            s = (r0, r1)
            if r0 >= 1:
                q[s, (r0 - 1, r1 + 1)] = theta * r0
            if r1 >= 1:
                q[s, (r0 + 1, r1 - 1)] = back * r1
            if r0 >= 2:
                q[s, (r0 - 1, r1)] = r0 * (r0 - 1)
    return q


def kingman_rate_brute(l: int, q: float) -> float:
    """Sum over every inner/outer labelling of ``l`` lineages."""
    total = 0.0
    for labels in itertools.product((0, 1), repeat=l):
        inner = sum(labels)
        total += q**inner * (1.0 - q) ** (l - inner) * inner * (inner - 1)
    return total
