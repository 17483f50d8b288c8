"""Areal adjacency graphs and scaled intrinsic CAR structure matrices.

Graphs may be disconnected and may contain singletons (areas with no
neighbours).  Each connected, non-singleton component gets its own intrinsic
CAR block, scaled so that the geometric mean of its constrained marginal
variances is one; singletons get a unit diagonal (an iid standard Gaussian
with the shared precision).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

# relative eigenvalue cutoff used to judge extra rank deficiency of a block
RANK_TOL = 1e-10


class GraphParseError(ValueError):
    """Raised for malformed graph files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.message = message
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class AdjacencyGraph:
    n_areas: int
    edges: frozenset[tuple[int, int]]
    area_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_areas < 1:
            raise ValueError("graph needs at least one area")
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at area {i}")
            if not (0 <= i < self.n_areas and 0 <= j < self.n_areas):
                raise ValueError(f"edge ({i}, {j}) out of range")
            if i > j:
                raise ValueError("edges must be stored as (min, max) pairs")
        if not self.area_ids:
            object.__setattr__(self, "area_ids", tuple(str(i) for i in range(self.n_areas)))
        elif len(self.area_ids) != self.n_areas:
            raise ValueError("area_ids length does not match n_areas")

    @classmethod
    def from_edges(cls, n_areas, edges, area_ids=()):
        norm = set()
        for i, j in edges:
            i, j = int(i), int(j)
            norm.add((min(i, j), max(i, j)))
        return cls(n_areas, frozenset(norm), tuple(area_ids))

    def neighbours(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_areas)]
        for i, j in sorted(self.edges):
            nb[i].append(j)
            nb[j].append(i)
        return [sorted(v) for v in nb]

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_areas, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def adjacency(self) -> sp.csr_matrix:
        if not self.edges:
            return sp.csr_matrix((self.n_areas, self.n_areas), dtype=np.int64)
        e = np.array(sorted(self.edges), dtype=np.int64)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        data = np.ones(rows.size, dtype=np.int64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_areas, self.n_areas))


@dataclass(frozen=True)
class ComponentLabeling:
    """Connected-component partition of the areas.

    Components are numbered in order of their smallest member area.
    """

    component_id: np.ndarray
    members: tuple[tuple[int, ...], ...]
    singleton: tuple[bool, ...]

    @property
    def n_components(self) -> int:
        return len(self.members)

    @property
    def n_singletons(self) -> int:
        return sum(self.singleton)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(m) for m in self.members)

    @property
    def connected(self) -> list[int]:
        """Indices of the non-singleton components."""
        return [c for c, s in enumerate(self.singleton) if not s]


@dataclass(frozen=True)
class ScaledIcar:
    structure: sp.csr_matrix
    scale_factors: dict[int, float]
    constraints: np.ndarray
    singleton_rows: tuple[int, ...]
    labeling: ComponentLabeling = field(repr=False)

    @property
    def n(self) -> int:
        return self.structure.shape[0]

    @property
    def rank_deficiency(self) -> int:
        return len(self.scale_factors)


def parse_graph(text: str) -> AdjacencyGraph:
    """Parse the plain-text graph format.

    The first non-comment line holds the area count ``N``; each following
    line is ``<index> <k> <n1> ... <nk>`` with 0-based indices.  Neighbour
    lists must be mutually consistent.  Text after ``#`` is ignored.
    """
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            lines.append((lineno, content))
    if not lines:
        raise GraphParseError("empty graph file")
    lineno, head = lines[0]
    try:
        n = int(head)
    except ValueError:
        raise GraphParseError(f"expected area count, got {head!r}", lineno) from None
    if n < 1:
        raise GraphParseError("area count must be positive", lineno)
    body = lines[1:]
    if len(body) != n:
        where = body[-1][0] if body else lineno
        raise GraphParseError(f"expected {n} area lines, found {len(body)}", where)

    lists: dict[int, tuple[int, list[int]]] = {}
    for lineno, content in body:
        try:
            tokens = [int(t) for t in content.split()]
        except ValueError:
            raise GraphParseError(f"non-integer token in {content!r}", lineno) from None
        if len(tokens) < 2:
            raise GraphParseError("area line needs an index and a neighbour count", lineno)
        idx, k, nbs = tokens[0], tokens[1], tokens[2:]
        if not 0 <= idx < n:
            raise GraphParseError(f"area index {idx} out of range [0, {n})", lineno)
        if idx in lists:
            raise GraphParseError(f"area {idx} listed twice", lineno)
        if k != len(nbs):
            raise GraphParseError(f"area {idx} declares {k} neighbours but lists {len(nbs)}", lineno)
        for j in nbs:
            if not 0 <= j < n:
                raise GraphParseError(f"neighbour index {j} out of range [0, {n})", lineno)
            if j == idx:
                raise GraphParseError(f"area {idx} lists itself as a neighbour", lineno)
        if len(set(nbs)) != len(nbs):
            raise GraphParseError(f"area {idx} has duplicate neighbours", lineno)
        lists[idx] = (lineno, nbs)

    edges = set()
    for idx, (lineno, nbs) in sorted(lists.items()):
        for j in nbs:
            if idx not in lists[j][1]:
                raise GraphParseError(f"asymmetric neighbour listing: {idx} lists {j} but {j} does not list {idx}", lineno)
            edges.add((min(idx, j), max(idx, j)))
    return AdjacencyGraph(n, frozenset(edges))


def format_graph(g: AdjacencyGraph) -> str:
    """Inverse of :func:`parse_graph`."""
    out = [str(g.n_areas)]
    for i, nb in enumerate(g.neighbours()):
        out.append(" ".join(str(v) for v in [i, len(nb), *nb]))
    return "\n".join(out) + "\n"


def connected_components(g: AdjacencyGraph) -> ComponentLabeling:
    _, raw = _cc(g.adjacency(), directed=False)
    # relabel by smallest member so the numbering is canonical
    order: dict[int, int] = {}
    for area in range(g.n_areas):
        order.setdefault(int(raw[area]), len(order))
    labels = np.array([order[int(r)] for r in raw], dtype=np.int64)
    members = tuple(tuple(int(a) for a in np.flatnonzero(labels == c)) for c in range(len(order)))
    deg = g.degree()
    singleton = tuple(len(m) == 1 and deg[m[0]] == 0 for m in members)
    return ComponentLabeling(labels, members, singleton)


def icar_structure(g: AdjacencyGraph) -> sp.csr_matrix:
    """Graph Laplacian ``D - W``; singleton rows are all zero at this step."""
    w = g.adjacency()
    return (sp.diags(g.degree(), format="csr", dtype=np.int64) - w).astype(np.int64).tocsr()


def constrained_marginal_variances(block: np.ndarray, deficiency: int) -> np.ndarray:
    """Diagonal of the generalized inverse of a PSD block.

    The ``deficiency`` smallest eigenvalues are treated as the null space
    (structural count, not a threshold); the remaining spectrum must be
    strictly positive relative to ``RANK_TOL``.
    """
    evals, evecs = np.linalg.eigh(block)
    keep = evals[deficiency:]
    if keep.size == 0 or keep[0] <= RANK_TOL * max(abs(evals[-1]), 1.0):
        raise StructuralError(
            f"block is rank deficient beyond the expected deficiency of {deficiency}"
        )
    v = evecs[:, deficiency:]
    return np.einsum("ij,j,ij->i", v, 1.0 / keep, v)


def geometric_mean(x: np.ndarray) -> float:
    return float(np.exp(np.mean(np.log(x))))


def scale_icar(R: sp.spmatrix, c: ComponentLabeling) -> ScaledIcar:
    n = R.shape[0]
    R = sp.csr_matrix(R, dtype=np.float64)
    rows, cols, vals = [], [], []
    factors: dict[int, float] = {}
    constraints = []
    singles = []
    for comp, members in enumerate(c.members):
        idx = np.asarray(members)
        if c.singleton[comp]:
            singles.append(int(idx[0]))
            rows.append(idx[0])
            cols.append(idx[0])
            vals.append(1.0)
            continue
        block = R[idx][:, idx].toarray()
        sigma2_ref = geometric_mean(constrained_marginal_variances(block, 1))
        factors[comp] = sigma2_ref
        scaled = block * sigma2_ref
        bi, bj = np.nonzero(block)
        rows.extend(idx[bi])
        cols.extend(idx[bj])
        vals.extend(scaled[bi, bj])
        a = np.zeros(n)
        a[idx] = 1.0
        constraints.append(a)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A = np.array(constraints) if constraints else np.zeros((0, n))
    return ScaledIcar(S, factors, A, tuple(singles), c)


def scaled_icar_from_graph(g: AdjacencyGraph) -> ScaledIcar:
    return scale_icar(icar_structure(g), connected_components(g))
