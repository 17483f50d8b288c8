"""Precision structures for the second-stage random effects.

All structures index space-time vectors with the area index running fastest
and time slowest: entry ``t * S + i`` holds area ``i`` at time ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .graph import ScaledIcar, constrained_marginal_variances, geometric_mean

KINDS = ("I", "II", "III", "IV")
PHI_MAX = 1.0 - 1e-6


class GmrfError(ValueError):
    pass


@dataclass(frozen=True)
class PrecisionSpec:
    Q: sp.csr_matrix
    rank_deficiency: int = 0
    constraints: np.ndarray | None = None
    scaled: bool = False

    def __post_init__(self):
        n = self.Q.shape[0]
        A = np.zeros((0, n)) if self.constraints is None else np.atleast_2d(np.asarray(self.constraints, float))
        if A.shape[1] != n:
            raise ValueError("constraint matrix width does not match Q")
        object.__setattr__(self, "constraints", A)

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    def dense(self) -> np.ndarray:
        return self.Q.toarray()


def iid_structure(n: int) -> PrecisionSpec:
    if n < 1:
        raise GmrfError("iid effect needs dimension >= 1")
    return PrecisionSpec(sp.identity(n, format="csr"))


def _second_difference(T: int) -> sp.csr_matrix:
    return sp.diags([np.ones(T - 2), -2 * np.ones(T - 2), np.ones(T - 2)], [0, 1, 2], shape=(T - 2, T)).tocsr()


def rw2_structure(T: int, scale: bool = True) -> PrecisionSpec:
    """RW2 structure ``D^T D`` with a sum-to-zero constraint.

    When ``scale`` is set the matrix is multiplied by the geometric mean of
    the generalized-inverse diagonal, which makes that geometric mean one.
    """
    if T < 3:
        raise GmrfError("RW2 needs at least 3 time points")
    D = _second_difference(T)
    R = (D.T @ D).tocsr()
    if scale:
        R = (R * geometric_mean(constrained_marginal_variances(R.toarray(), 2))).tocsr()
    return PrecisionSpec(R, 2, np.ones((1, T)), scale)


def ar1_precision(T: int, rho: float) -> PrecisionSpec:
    """Precision of a stationary AR1 with unit marginal variance."""
    if not abs(rho) < 1:
        raise GmrfError(f"AR1 correlation must satisfy |rho| < 1, got {rho}")
    if T < 1:
        raise GmrfError("AR1 needs T >= 1")
    diag = np.full(T, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    if T == 1:
        diag[:] = 1.0 - rho * rho
    off = np.full(T - 1, -rho)
    Q = sp.diags([off, diag, off], [-1, 0, 1], shape=(T, T)) / (1.0 - rho * rho)
    return PrecisionSpec(Q.tocsr())


@dataclass(frozen=True)
class Bym2Spec:
    """BYM2 effect over the augmented vector ``(psi, u)``; psi first."""

    n_areas: int
    scaled_icar: ScaledIcar

    def __post_init__(self):
        if self.scaled_icar.n != self.n_areas:
            raise ValueError("scaled iCAR dimension does not match n_areas")


def bym2_precision(spec: Bym2Spec, tau_psi: float, phi: float) -> PrecisionSpec:
    """Joint precision of ``(psi, u)``.

    ``psi | u ~ N(sqrt(phi / tau) u, (1 - phi) / tau I)`` and ``u`` carries the
    scaled iCAR structure, which gives
    ``psi = (sqrt(1 - phi) v + sqrt(phi) u) / sqrt(tau)`` with ``v`` iid N(0, 1).
    """
    if tau_psi <= 0:
        raise GmrfError("tau_psi must be positive")
    if not 0.0 <= phi <= PHI_MAX:
        raise GmrfError(f"phi must lie in [0, {PHI_MAX}], got {phi}")
    n = spec.n_areas
    eye = sp.identity(n, format="csr")
    a = tau_psi / (1.0 - phi)
    b = -np.sqrt(phi * tau_psi) / (1.0 - phi)
    c = phi / (1.0 - phi)
    Q = sp.bmat([[a * eye, b * eye], [b * eye, spec.scaled_icar.structure + c * eye]], format="csr")
    A_u = spec.scaled_icar.constraints
    A = np.hstack([np.zeros_like(A_u), A_u])
    return PrecisionSpec(Q, A_u.shape[0], A, True)


@dataclass(frozen=True)
class InteractionSpec:
    kind: str
    S: int
    T: int
    Q: PrecisionSpec
    rho: float | None = None

    @property
    def needs_rho(self) -> bool:
        return self.kind in ("II", "IV")


def _per_area_time_sums(S: int, T: int, areas) -> np.ndarray:
    rows = []
    for i in areas:
        a = np.zeros(S * T)
        a[i::S] = 1.0
        rows.append(a)
    return np.array(rows).reshape(-1, S * T)


def _per_time_component_sums(S: int, T: int, icar: ScaledIcar) -> np.ndarray:
    rows = []
    for t in range(T):
        for a in icar.constraints:
            r = np.zeros(S * T)
            r[t * S:(t + 1) * S] = a
            rows.append(r)
    return np.array(rows).reshape(-1, S * T)


def interaction_structure(kind: str, S: int, T: int, graph_icar: ScaledIcar | None = None,
                          rho: float | None = None) -> InteractionSpec:
    """Unit-precision structure for the space-time interaction of the given kind.

    Constraints: kind II sums over time per area; kind III sums over each
    non-singleton component per time; kind IV takes both sets and drops the
    per-area row of the first area of every non-singleton component, which
    is implied by the others.
    """
    if kind not in KINDS:
        raise GmrfError(f"unknown interaction kind {kind!r}")
    if kind in ("II", "IV") and rho is None:
        raise GmrfError(f"interaction kind {kind} needs rho")
    if kind in ("III", "IV"):
        if graph_icar is None:
            raise GmrfError(f"interaction kind {kind} needs the scaled iCAR of the graph")
        if graph_icar.n != S:
            raise GmrfError("graph size does not match S")
    if kind == "I":
        return InteractionSpec(kind, S, T, PrecisionSpec(sp.identity(S * T, format="csr")))
    if kind == "II":
        Qt = ar1_precision(T, rho).Q
        Q = sp.kron(Qt, sp.identity(S), format="csr")
        A = _per_area_time_sums(S, T, range(S))
        return InteractionSpec(kind, S, T, PrecisionSpec(Q, 0, A), rho)
    R = graph_icar.structure
    n_conn = graph_icar.constraints.shape[0]
    if kind == "III":
        Q = sp.kron(sp.identity(T), R, format="csr")
        A = _per_time_component_sums(S, T, graph_icar)
        return InteractionSpec(kind, S, T, PrecisionSpec(Q, T * n_conn, A, True))
    Qt = ar1_precision(T, rho).Q
    Q = sp.kron(Qt, R, format="csr")
    lab = graph_icar.labeling
    dropped = {lab.members[c][0] for c in lab.connected}
    keep_areas = [i for i in range(S) if i not in dropped]
    A = np.vstack([_per_time_component_sums(S, T, graph_icar), _per_area_time_sums(S, T, keep_areas)])
    return InteractionSpec(kind, S, T, PrecisionSpec(Q, T * n_conn, A, True), rho)


def _sampling_precision(Q: np.ndarray, A: np.ndarray) -> np.ndarray:
    # adding A^T A leaves the conditional law on {Ax = 0} unchanged and
    # makes intrinsic precisions invertible when A spans their null space
    return Q + A.T @ A if A.size else Q


def condition_by_kriging(x: np.ndarray, Q: PrecisionSpec | np.ndarray, A: np.ndarray | None = None) -> np.ndarray:
    """Correct ``x`` (vector or columns) so that ``A x = 0``.

    Returns ``x - Q^-1 A^T (A Q^-1 A^T)^-1 A x``.  The correction is computed
    with ``Q + A^T A``, which gives the same operator when ``Q`` is
    invertible and extends it to intrinsic ``Q``.
    """
    if isinstance(Q, PrecisionSpec):
        A = Q.constraints if A is None else A
        Q = Q.dense()
    A = np.zeros((0, Q.shape[0])) if A is None else np.atleast_2d(A)
    if A.shape[0] == 0:
        return np.array(x, dtype=float, copy=True)
    Qs = _sampling_precision(np.asarray(Q, float), A)
    try:
        cf = sla.cho_factor(Qs, lower=True)
    except np.linalg.LinAlgError as exc:
        raise GmrfError("precision not positive definite on the constrained subspace") from exc
    V = sla.cho_solve(cf, A.T)
    W = A @ V
    try:
        cw = sla.cho_factor(W, lower=True)
    except np.linalg.LinAlgError as exc:
        raise GmrfError("A Q^-1 A^T is singular") from exc
    x = np.asarray(x, dtype=float)
    return x - V @ sla.cho_solve(cw, A @ x)


def sample_gmrf(Q: PrecisionSpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``N(0, Q^-1)`` conditioned on the constraints of ``Q``.

    Returns one vector, or an array of shape ``(size, dim)``.
    """
    Qd = Q.dense()
    A = Q.constraints
    Qs = _sampling_precision(Qd, A)
    try:
        L = np.linalg.cholesky(Qs)
    except np.linalg.LinAlgError as exc:
        raise GmrfError("factorization failed: precision not positive definite after constraints") from exc
    d = np.diag(L)
    if d.min() ** 2 <= 1e-12 * d.max() ** 2:
        raise GmrfError("factorization failed: precision singular on the constrained subspace")
    m = 1 if size is None else size
    z = rng.standard_normal((Q.dim, m))
    x = sla.solve_triangular(L.T, z, lower=False)
    if A.shape[0]:
        V = sla.cho_solve((L, True), A.T)
        x = x - V @ np.linalg.solve(A @ V, A @ x)
    return x[:, 0] if size is None else x.T
