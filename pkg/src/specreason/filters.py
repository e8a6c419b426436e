"""Spectral responses and the operators that realize them.

A response is a scalar function of the Laplacian eigenvalue. Analytic
templates are exact closed forms; ChebyshevFilter is a truncated series
applied to sparse operators through the three-term recurrence without any
eigendecomposition. The dense functional-calculus path is kept as the
slow reference implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import chebyshev as npcheb
from numpy.polynomial import polynomial as nppoly

from .graph import (
    BeliefVector,
    Laplacian,
    ScaledLaplacian,
    SpectralBasis,
    _wrap_like,
    belief_values,
)

ANALYTIC_KINDS = ("diffusion", "highpass", "gaussian_bandpass", "identity", "polynomial")
_LAMBDA_MATCH_RTOL = 1e-9


class SolverError(RuntimeError):
    """Iterative solve failed to reach the requested residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class AnalyticResponse:
    """Closed-form spectral response, one of ANALYTIC_KINDS.

    diffusion(tau):             1 / (1 + tau * lam)
    highpass(beta):             lam / (lam + beta)
    gaussian_bandpass(c, w):    exp(-(lam - c)^2 / (2 w^2))
    identity():                 1
    polynomial(c0, c1, ...):    sum_k c_k lam^k
    """

    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ANALYTIC_KINDS:
            raise ValueError(f"unknown response kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if not all(np.isfinite(p) for p in params):
            raise ValueError("response parameters must be finite")
        if self.kind == "diffusion":
            if len(params) != 1 or params[0] <= 0:
                raise ValueError("diffusion takes a single positive tau")
        elif self.kind == "highpass":
            if len(params) != 1 or params[0] <= 0:
                raise ValueError("highpass takes a single positive beta")
        elif self.kind == "gaussian_bandpass":
            if len(params) != 2 or params[1] <= 0:
                raise ValueError("gaussian_bandpass takes (center, width) with width > 0")
        elif self.kind == "identity":
            if params:
                raise ValueError("identity takes no parameters")
        else:
            if not params:
                raise ValueError("polynomial needs at least one coefficient")
        object.__setattr__(self, "params", params)

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        if self.kind == "diffusion":
            out = 1.0 / (1.0 + self.params[0] * lam)
        elif self.kind == "highpass":
            out = lam / (lam + self.params[0])
        elif self.kind == "gaussian_bandpass":
            center, width = self.params
            out = np.exp(-((lam - center) ** 2) / (2.0 * width * width))
        elif self.kind == "identity":
            out = np.ones_like(lam)
        else:
            out = nppoly.polyval(lam, np.asarray(self.params))
        return out if out.ndim else float(out)


def diffusion(tau: float) -> AnalyticResponse:
    return AnalyticResponse("diffusion", (tau,))


def highpass(beta: float) -> AnalyticResponse:
    return AnalyticResponse("highpass", (beta,))


def gaussian_bandpass(center: float, width: float) -> AnalyticResponse:
    return AnalyticResponse("gaussian_bandpass", (center, width))


def identity() -> AnalyticResponse:
    return AnalyticResponse("identity", ())


def polynomial(*coeffs: float) -> AnalyticResponse:
    return AnalyticResponse("polynomial", tuple(coeffs))


def response_eval(response, points) -> np.ndarray:
    """Evaluate any response (analytic, fitted, or plain callable) on points."""
    return np.asarray(response(np.asarray(points, dtype=float)), dtype=float)


def _format_float(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class ChebyshevFilter:
    """Truncated Chebyshev series over the rescaled spectrum [-1, 1].

    theta holds K + 1 coefficients for T_0 .. T_K; lambda_max is the
    spectral bound the rescaling was built against and must match the
    operator the filter is applied to.
    """

    theta: np.ndarray
    lambda_max: float

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 1 or theta.size < 1:
            raise ValueError("theta must hold at least one coefficient")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if not np.isfinite(self.lambda_max) or self.lambda_max <= 0:
            raise ValueError(f"lambda_max must be positive, got {self.lambda_max}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "lambda_max", float(self.lambda_max))

    @property
    def order(self) -> int:
        return self.theta.size - 1

    def __call__(self, lam):
        scaled = 2.0 * np.asarray(lam, dtype=float) / self.lambda_max - 1.0
        out = npcheb.chebval(scaled, self.theta)
        return out if np.ndim(out) else float(out)

    def to_json(self) -> str:
        coeffs = ", ".join(_format_float(t) for t in self.theta)
        return ('{"lambda_max": %s, "theta": [%s]}'
                % (_format_float(self.lambda_max), coeffs))

    @classmethod
    def from_json(cls, text: str) -> "ChebyshevFilter":
        payload = json.loads(text)
        if not isinstance(payload, dict) or set(payload) != {"lambda_max", "theta"}:
            raise ValueError("filter JSON must hold exactly the keys lambda_max and theta")
        return cls(theta=np.asarray(payload["theta"], dtype=float),
                   lambda_max=float(payload["lambda_max"]))


def save_filter(f: ChebyshevFilter, path) -> None:
    Path(path).write_text(f.to_json() + "\n", encoding="utf-8")


def load_filter(path) -> ChebyshevFilter:
    return ChebyshevFilter.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RecurrenceTrace:
    """Chebyshev basis vectors b_0 .. b_K stacked as rows, kept for gradients."""

    basis_vectors: np.ndarray

    def __post_init__(self):
        arr = np.array(self.basis_vectors, dtype=float)
        if arr.ndim != 2:
            raise ValueError("trace must be a (K + 1, N) array")
        arr.setflags(write=False)
        object.__setattr__(self, "basis_vectors", arr)

    @property
    def order(self) -> int:
        return self.basis_vectors.shape[0] - 1


def fit_chebyshev(response, order: int, lambda_max: float,
                  quadrature_nodes: int | None = None) -> ChebyshevFilter:
    """Project a response onto T_0 .. T_order by Chebyshev-Gauss quadrature.

    Uses M = max(64, 4 (order + 1)) nodes unless overridden; M below
    order + 1 cannot resolve the requested degree and is rejected.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    nodes = quadrature_nodes if quadrature_nodes is not None else max(64, 4 * (order + 1))
    if nodes < order + 1:
        raise ValueError(f"{nodes} quadrature nodes cannot resolve order {order}")
    angles = np.pi * (np.arange(nodes) + 0.5) / nodes
    z = np.cos(angles)
    lam = lambda_max * (z + 1.0) / 2.0
    f = response_eval(response, lam)
    if not np.all(np.isfinite(f)):
        raise ValueError("response is not finite on the quadrature nodes")
    k = np.arange(order + 1)
    kernel = np.cos(np.outer(k, angles))
    theta = (2.0 / nodes) * (kernel @ f)
    theta[0] *= 0.5
    return ChebyshevFilter(theta=theta, lambda_max=float(lambda_max))


def fit_grid_error(f: ChebyshevFilter, response, lambda_max: float | None = None,
                   points: int = 1000) -> float:
    """Sup-norm fit error max |f - response| on a uniform eigenvalue grid."""
    top = f.lambda_max if lambda_max is None else float(lambda_max)
    grid = np.linspace(0.0, top, points)
    return float(np.max(np.abs(response_eval(f, grid) - response_eval(response, grid))))


def cheb_apply(f: ChebyshevFilter, lt: ScaledLaplacian, x, keep_trace: bool = False):
    """Apply the filter through the sparse three-term recurrence.

    b_0 = x, b_1 = Lt x, b_{k+1} = 2 Lt b_k - b_{k-1}; the output is
    sum_k theta_k b_k at O(K |E|) cost. With keep_trace the b_k are
    returned for gradient computation.
    """
    if abs(f.lambda_max - lt.lambda_max) > _LAMBDA_MATCH_RTOL * max(1.0, abs(f.lambda_max)):
        raise ValueError(
            f"filter lambda_max {f.lambda_max!r} does not match operator {lt.lambda_max!r}")
    values = belief_values(x, expect_domain="vertex")
    if values.size != lt.node_count:
        raise ValueError(f"belief length {values.size} does not match operator size {lt.node_count}")
    theta = f.theta
    mat = lt.matrix
    acc = theta[0] * values
    rows = [values]
    b_prev = values
    b_cur = None
    if f.order >= 1:
        b_cur = mat @ values
        acc = acc + theta[1] * b_cur
        rows.append(b_cur)
    for k in range(2, f.order + 1):
        b_next = 2.0 * (mat @ b_cur) - b_prev
        acc = acc + theta[k] * b_next
        rows.append(b_next)
        b_prev, b_cur = b_cur, b_next
    y = _wrap_like(x, acc)
    if keep_trace:
        return y, RecurrenceTrace(basis_vectors=np.array(rows))
    return y


def dense_filter_apply(basis: SpectralBasis, response, x):
    """Exact functional calculus U h(Lambda) U^T x. Reference path only."""
    values = belief_values(x, expect_domain="vertex")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    h = response_eval(response, basis.eigenvalues)
    coeffs = basis.eigenvectors.T @ values
    return _wrap_like(x, basis.eigenvectors @ (h * coeffs))


def rational_apply(tau: float, lap: Laplacian, x, tol: float = 1e-10,
                   max_iters: int | None = None):
    """Solve (I + tau L) y = x by conjugate gradient.

    The system matrix is symmetric positive definite for tau >= 0 on any
    PSD Laplacian, so plain CG applies. Stops when the residual drops
    below tol * ||x||; failure to converge raises SolverError carrying
    the final relative residual.
    """
    if not np.isfinite(tau) or tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    b = belief_values(x, expect_domain="vertex")
    n = lap.node_count
    if b.size != n:
        raise ValueError(f"belief length {b.size} does not match operator size {n}")
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return _wrap_like(x, np.zeros(n))
    if max_iters is None:
        max_iters = 10 * n
    mat = lap.matrix

    y = np.zeros(n)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    iterations = 0
    while np.sqrt(rs) > tol * norm_b and iterations < max_iters:
        ap = p + tau * (mat @ p)
        denom = float(p @ ap)
        if denom <= 0.0:
            raise SolverError("conjugate gradient lost positive definiteness",
                              residual=float(np.sqrt(rs) / norm_b), iterations=iterations)
        alpha = rs / denom
        y = y + alpha * p
        r = r - alpha * ap
        rs_next = float(r @ r)
        p = r + (rs_next / rs) * p
        rs = rs_next
        iterations += 1
    relative = float(np.sqrt(rs) / norm_b)
    if relative > tol:
        raise SolverError(
            f"conjugate gradient stalled at relative residual {relative:.3e} after {iterations} iterations",
            residual=relative, iterations=iterations)
    return _wrap_like(x, y)
