"""Definition-level reference constructions, written without the library.

Everything here uses plain loops, dense numpy and mpmath so that tests can
compare the library against an independent route.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np


def components_by_search(n, edges):
    """Connected components by depth-first search; list of sorted member lists."""
    nb = {i: set() for i in range(n)}
    for i, j in edges:
        nb[i].add(j)
        nb[j].add(i)
    seen, comps = set(), []
    for s in range(n):
        if s in seen:
            continue
        stack, comp = [s], []
        seen.add(s)
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in nb[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        comps.append(sorted(comp))
    return comps, nb


def icar_dense(n, edges):
    R = np.zeros((n, n))
    for i, j in edges:
        R[i, j] = R[j, i] = -1.0
    for i in range(n):
        R[i, i] = -R[i].sum()
    return R


def constrained_ginv_diag(block):
    """Diagonal of the generalized inverse of a Laplacian block under sum-to-zero.

    For a connected Laplacian the Moore-Penrose inverse equals the
    covariance of the field conditioned on a zero sum.
    """
    return np.diag(np.linalg.pinv(block, rcond=1e-12, hermitian=True))


def scaled_icar_dense(n, edges):
    """Scaled iCAR with unit singleton diagonals, plus per-component factors."""
    R = icar_dense(n, edges)
    comps, nb = components_by_search(n, edges)
    out = np.zeros((n, n))
    factors = []
    for comp in comps:
        if len(comp) == 1 and not nb[comp[0]]:
            out[comp[0], comp[0]] = 1.0
            continue
        idx = np.ix_(comp, comp)
        c = math.exp(np.mean(np.log(constrained_ginv_diag(R[idx]))))
        out[idx] = R[idx] * c
        factors.append(c)
    return out, factors, comps


def rw2_dense(T):
    D = np.zeros((T - 2, T))
    for r in range(T - 2):
        D[r, r], D[r, r + 1], D[r, r + 2] = 1.0, -2.0, 1.0
    return D.T @ D


def rw2_scaled_dense(T):
    R = rw2_dense(T)
    # constrained generalized inverse: pseudo-inverse, null space spanned by 1 and t
    g = np.diag(np.linalg.pinv(R, rcond=1e-10, hermitian=True))
    return R * math.exp(np.mean(np.log(g)))


def ar1_precision_dense(T, rho):
    t = np.arange(T)
    C = rho ** np.abs(t[:, None] - t[None, :])
    return np.linalg.inv(C)


def interaction_dense(kind, S, T, R_scaled, rho=None):
    if kind == "I":
        return np.eye(S * T)
    if kind == "II":
        return np.kron(ar1_precision_dense(T, rho), np.eye(S))
    if kind == "III":
        return np.kron(np.eye(T), R_scaled)
    return np.kron(ar1_precision_dense(T, rho), R_scaled)


def null_count(Q, tol=1e-10):
    ev = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    return int(np.sum(ev <= tol * max(np.abs(ev).max(), 1.0)))


def matern_bessel(d, sigma2, kappa, dps=30):
    """``sigma2 (kappa d) K_1(kappa d)`` in mpmath arithmetic."""
    if d == 0:
        return float(sigma2)
    with mpmath.workdps(dps):
        x = mpmath.mpf(kappa) * mpmath.mpf(d)
        return float(mpmath.mpf(sigma2) * x * mpmath.besselk(1, x))


def gaussian_posterior(M, y, Q_prior, noise_var, mu_prior=None):
    """Closed-form conjugate posterior of ``x ~ N(mu, Q^-1)``, ``y ~ N(Mx, noise_var I)``.

    Returns the posterior mean, posterior precision and ``log p(y)``.
    """
    n = Q_prior.shape[0]
    mu = np.zeros(n) if mu_prior is None else mu_prior
    P = Q_prior + M.T @ M / noise_var
    mean = np.linalg.solve(P, Q_prior @ mu + M.T @ y / noise_var)
    C = M @ np.linalg.inv(Q_prior) @ M.T + noise_var * np.eye(len(y))
    r = y - M @ mu
    _, logdet = np.linalg.slogdet(C)
    logml = -0.5 * (len(y) * math.log(2 * math.pi) + logdet + r @ np.linalg.solve(C, r))
    return mean, P, logml


def random_graph(rng, n, p_edge, n_singletons):
    """Random edge set on ``n`` areas with the last ``n_singletons`` isolated."""
    core = n - n_singletons
    edges = set()
    for i in range(core):
        for j in range(i + 1, core):
            if rng.uniform() < p_edge:
                edges.add((i, j))
    # every core area has a neighbour, so the only singletons are the requested ones
    for i in range(core):
        if core > 1 and not any(i in e for e in edges):
            j = (i + 1) % core
            edges.add((min(i, j), max(i, j)))
    return edges
