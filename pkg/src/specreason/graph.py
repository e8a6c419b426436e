"""Graphs, Laplacian operators, and the graph Fourier transform.

Beliefs live on vertices; every spectral operation in the package is
anchored to one of the Laplacian variants built here. All matrices are
scipy CSR and are treated as immutable once constructed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

LAMBDA_SAFETY_MARGIN = 1.01
DENSE_CAP = 2048
_SIGN_TOL = 1e-12
_TIE_TOL = 1e-9

VARIANTS = ("combinatorial", "normalized", "signed")
GRAPH_KINDS = ("unsigned", "signed")


class EdgeListError(ValueError):
    """Malformed edge-list input. Carries the offending 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph with each edge stored once as (i, j, w), i < j."""

    node_count: int
    edges: tuple[tuple[int, int, float], ...]
    kind: str = "unsigned"

    def __post_init__(self):
        if not isinstance(self.node_count, int) or self.node_count < 1:
            raise ValueError("node_count must be a positive integer")
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        canonical = []
        seen = set()
        for edge in self.edges:
            i, j, w = int(edge[0]), int(edge[1]), float(edge[2])
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise ValueError(f"edge ({i}, {j}) out of range for {self.node_count} nodes")
            if i > j:
                i, j = j, i
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
            if not np.isfinite(w) or w == 0.0:
                raise ValueError(f"edge ({i}, {j}) has non-finite or zero weight")
            if self.kind == "unsigned" and w < 0.0:
                raise ValueError(f"negative weight on edge ({i}, {j}) in an unsigned graph")
            canonical.append((i, j, w))
        canonical.sort()
        object.__setattr__(self, "edges", tuple(canonical))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_array:
        """Full symmetric adjacency matrix."""
        n = self.node_count
        if not self.edges:
            return sp.csr_array((n, n))
        rows, cols, vals = [], [], []
        for i, j, w in self.edges:
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        return sp.csr_array((vals, (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class Laplacian:
    """A positive semidefinite graph operator of one of the supported variants."""

    matrix: sp.csr_array
    variant: str
    degree: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown Laplacian variant {self.variant!r}")
        object.__setattr__(self, "degree", _frozen_array(self.degree))

    @property
    def node_count(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ScaledLaplacian:
    """Laplacian rescaled to (2 / lambda_max) L - I, spectrum inside [-1, 1]."""

    matrix: sp.csr_array
    lambda_max: float

    @property
    def node_count(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SpectralBasis:
    """Dense eigendecomposition L = U diag(eigenvalues) U^T.

    Eigenvalues ascend; eigenvector columns follow the deterministic sign
    and tie-break convention applied by :func:`eigendecompose`.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    variant: str = "combinatorial"

    def __post_init__(self):
        vals = _frozen_array(self.eigenvalues)
        vecs = _frozen_array(self.eigenvectors)
        if vals.ndim != 1 or vecs.ndim != 2 or vecs.shape != (vals.size, vals.size):
            raise ValueError("eigenvalues and eigenvectors have inconsistent shapes")
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def node_count(self) -> int:
        return self.eigenvalues.size

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass(frozen=True)
class BeliefVector:
    """Real-valued beliefs, tagged with the domain they live in.

    domain is "vertex" for node space and "spectral" for graph Fourier
    coefficients. Values are finite and read-only.
    """

    values: np.ndarray
    domain: str = "vertex"

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 1:
            raise ValueError("belief values must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("belief values must be finite")
        if self.domain not in ("vertex", "spectral"):
            raise ValueError(f"unknown belief domain {self.domain!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size


def belief_values(x, expect_domain: str | None = None) -> np.ndarray:
    """Array view of a belief vector or raw array, checking the domain tag."""
    if isinstance(x, BeliefVector):
        if expect_domain is not None and x.domain != expect_domain:
            raise ValueError(f"expected a {expect_domain} belief vector, got {x.domain}")
        return x.values
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError("belief values must be one-dimensional")
    return arr


def _wrap_like(template, values: np.ndarray, domain: str = "vertex"):
    if isinstance(template, BeliefVector):
        return BeliefVector(values, domain=domain)
    return values


def load_graph(source, kind: str = "unsigned") -> Graph:
    """Parse the plain edge-list format.

    The first significant line is "N M"; the next M significant lines are
    "i j w" with zero-based endpoints. Blank lines and lines starting with
    '#' are skipped. ``source`` is a filesystem path or an iterable of
    lines. Errors report 1-based line numbers of the raw input.
    """
    if isinstance(source, (str, Path, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)

    significant: list[tuple[int, str]] = []
    for no, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        significant.append((no, stripped))

    if not significant:
        raise EdgeListError(len(lines) or 1, "missing header line")

    head_no, head = significant[0]
    parts = head.split()
    if len(parts) != 2:
        raise EdgeListError(head_no, f"header must be 'N M', got {head!r}")
    try:
        n, m = int(parts[0]), int(parts[1])
    except ValueError:
        raise EdgeListError(head_no, f"header must hold two integers, got {head!r}") from None
    if n < 1:
        raise EdgeListError(head_no, f"node count must be positive, got {n}")
    if m < 0:
        raise EdgeListError(head_no, f"edge count must be nonnegative, got {m}")

    body = significant[1:]
    if len(body) < m:
        raise EdgeListError(len(lines) or 1, f"expected {m} edge lines, found {len(body)}")
    if len(body) > m:
        raise EdgeListError(body[m][0], "trailing data after the declared edge count")

    edges = []
    seen = set()
    for no, line in body:
        fields = line.split()
        if len(fields) != 3:
            raise EdgeListError(no, f"edge line must be 'i j w', got {line!r}")
        try:
            i, j = int(fields[0]), int(fields[1])
            w = float(fields[2])
        except ValueError:
            raise EdgeListError(no, f"could not parse edge line {line!r}") from None
        if i == j:
            raise EdgeListError(no, f"self-loop at node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise EdgeListError(no, f"edge ({i}, {j}) out of range for {n} nodes")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise EdgeListError(no, f"duplicate edge {key}")
        seen.add(key)
        if not np.isfinite(w):
            raise EdgeListError(no, f"non-finite weight on edge {key}")
        if w < 0 and kind != "signed":
            raise EdgeListError(no, f"negative weight on edge {key} in an unsigned graph")
        edges.append((i, j, w))

    try:
        return Graph(node_count=n, edges=tuple(edges), kind=kind)
    except ValueError as exc:
        # anything the per-line checks above cannot see
        raise EdgeListError(head_no, str(exc)) from None


def build_laplacian(g: Graph, variant: str = "combinatorial") -> Laplacian:
    """Build one of the Laplacian variants for ``g``.

    combinatorial: D - A with d_i = sum_j A_ij.
    normalized:    I - D^{-1/2} A D^{-1/2}; rows of isolated nodes are zero.
    signed:        Dbar - A with dbar_i = sum_j |A_ij|, PSD for signed weights.

    The first two require nonnegative weights; signed accepts any sign.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown Laplacian variant {variant!r}")
    n = g.node_count
    adj = g.adjacency()
    has_negative = any(w < 0 for _, _, w in g.edges)
    if variant in ("combinatorial", "normalized") and has_negative:
        raise ValueError(f"{variant} Laplacian requires nonnegative weights; use 'signed'")

    if variant == "signed":
        degree = np.abs(adj).sum(axis=1)
        lap = sp.diags_array(degree, format="csr") - adj
    elif variant == "combinatorial":
        degree = adj.sum(axis=1)
        lap = sp.diags_array(degree, format="csr") - adj
    else:
        degree = adj.sum(axis=1)
        inv_sqrt = np.zeros(n)
        positive = degree > 0
        inv_sqrt[positive] = 1.0 / np.sqrt(degree[positive])
        scaling = sp.diags_array(inv_sqrt, format="csr")
        eye = sp.diags_array(np.where(positive, 1.0, 0.0), format="csr")
        lap = eye - scaling @ adj @ scaling

    return Laplacian(matrix=sp.csr_array(lap), variant=variant, degree=np.asarray(degree, dtype=float))


class LambdaMaxEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool
    degenerate: bool


def gershgorin_bound(lap: Laplacian) -> float:
    """Row-sum upper bound max_i (L_ii + sum_{j != i} |L_ij|) on the spectrum."""
    mat = sp.csr_array(lap.matrix)
    diag = mat.diagonal()
    off = np.abs(mat).sum(axis=1) - np.abs(diag)
    return float(np.max(diag + off)) if mat.shape[0] else 0.0


def estimate_lambda_max(lap: Laplacian, tol: float = 1e-8, max_iters: int = 500,
                        seed: int = 0) -> LambdaMaxEstimate:
    """Power-iteration estimate of the largest eigenvalue, with safety margin.

    Starts from a perturbed all-ones vector, stops when the Rayleigh
    quotient moves less than ``tol`` (relative), and inflates the result by
    LAMBDA_SAFETY_MARGIN. Falls back to the Gershgorin bound when the
    iteration fails to converge. A near-zero operator returns value 1.0
    with the degenerate flag set so downstream rescaling stays finite.
    """
    n = lap.node_count
    mat = lap.matrix
    rng = np.random.default_rng(seed)
    v = np.ones(n) + 0.01 * rng.standard_normal(n)
    norm = np.linalg.norm(v)
    v = v / norm
    rayleigh = 0.0
    for it in range(1, max_iters + 1):
        w = mat @ v
        candidate = float(v @ w)
        w_norm = np.linalg.norm(w)
        if w_norm <= _SIGN_TOL:
            # operator annihilates the iterate: spectrum is numerically zero
            return LambdaMaxEstimate(value=1.0, iterations=it, converged=True, degenerate=True)
        converged = it > 1 and abs(candidate - rayleigh) <= tol * max(1.0, abs(candidate))
        rayleigh = candidate
        v = w / w_norm
        if converged:
            value = rayleigh * LAMBDA_SAFETY_MARGIN
            if value <= _SIGN_TOL:
                return LambdaMaxEstimate(value=1.0, iterations=it, converged=True, degenerate=True)
            return LambdaMaxEstimate(value=value, iterations=it, converged=True, degenerate=False)
    bound = gershgorin_bound(lap)
    if bound <= _SIGN_TOL:
        return LambdaMaxEstimate(value=1.0, iterations=max_iters, converged=False, degenerate=True)
    return LambdaMaxEstimate(value=bound, iterations=max_iters, converged=False, degenerate=False)


def scale_laplacian(lap: Laplacian, lambda_max: float) -> ScaledLaplacian:
    """Map the spectrum into [-1, 1] via (2 / lambda_max) L - I."""
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive and finite, got {lambda_max}")
    n = lap.node_count
    scaled = (2.0 / lambda_max) * lap.matrix - sp.identity(n, format="csr")
    return ScaledLaplacian(matrix=sp.csr_array(scaled), lambda_max=float(lambda_max))


def _canonical_columns(eigenvalues: np.ndarray, eigenvectors: np.ndarray):
    """Apply the deterministic sign and tie-break convention in place.

    Each column's first entry larger than _SIGN_TOL in magnitude is made
    positive. Within groups of eigenvalues closer than _TIE_TOL, columns
    are ordered descending lexicographically.
    """
    n = eigenvalues.size
    for j in range(n):
        col = eigenvectors[:, j]
        nz = np.nonzero(np.abs(col) > _SIGN_TOL)[0]
        if nz.size and col[nz[0]] < 0:
            eigenvectors[:, j] = -col

    start = 0
    while start < n:
        end = start + 1
        while end < n and eigenvalues[end] - eigenvalues[start] <= _TIE_TOL * max(1.0, abs(eigenvalues[start])):
            end += 1
        if end - start > 1:
            block = [(tuple(-eigenvectors[:, j]), j) for j in range(start, end)]
            order = [j for _, j in sorted(block)]
            eigenvalues[start:end] = eigenvalues[order]
            eigenvectors[:, start:end] = eigenvectors[:, order]
        start = end
    return eigenvalues, eigenvectors


def eigendecompose(lap: Laplacian, cap: int = DENSE_CAP) -> SpectralBasis:
    """Dense symmetric eigendecomposition, refused above ``cap`` nodes."""
    n = lap.node_count
    if n > cap:
        raise ValueError(f"dense eigendecomposition refused for {n} > {cap} nodes")
    dense = lap.matrix.toarray()
    dense = 0.5 * (dense + dense.T)
    eigenvalues, eigenvectors = np.linalg.eigh(dense)
    eigenvalues, eigenvectors = _canonical_columns(eigenvalues, eigenvectors)
    return SpectralBasis(eigenvalues=eigenvalues, eigenvectors=eigenvectors, variant=lap.variant)


def gft(basis: SpectralBasis, x, direction: str = "forward"):
    """Graph Fourier transform U^T x (forward) or U x (inverse).

    Preserves the Euclidean norm since U is orthonormal. Domain tags on
    BeliefVector inputs are enforced and flipped on output.
    """
    if direction == "forward":
        values = belief_values(x, expect_domain="vertex")
        out_domain = "spectral"
    elif direction == "inverse":
        values = belief_values(x, expect_domain="spectral")
        out_domain = "vertex"
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    if direction == "forward":
        result = basis.eigenvectors.T @ values
    else:
        result = basis.eigenvectors @ values
    return _wrap_like(x, result, domain=out_domain)
