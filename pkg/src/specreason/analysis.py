"""Spectral diagnostics: band energy, uncertainty, robustness, transfer.

Everything here reads a belief vector through the eigenbasis and asks
where its energy sits, how stable the filtered output is, and how well a
signal carries over to another graph's spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from . import filters as ft
from .graph import Laplacian, SpectralBasis, _wrap_like, belief_values

CERT_SLACK = 1.05
_COVER_TOL = 1e-9


@dataclass(frozen=True)
class BandPartition:
    """Contiguous spectral bands cut at ``edges``: [e0, e1), ..., [e_{B-1}, e_B].

    Edges start at zero and increase strictly; the last band is closed so
    the top eigenvalue always lands somewhere.
    """

    edges: np.ndarray

    def __post_init__(self):
        edges = np.array(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("a partition needs at least two edges")
        if edges[0] != 0.0:
            raise ValueError(f"the first edge must be 0, got {edges[0]}")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("edges must increase strictly")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def n_bands(self) -> int:
        return self.edges.size - 1

    def band_of(self, lam) -> np.ndarray:
        """Band index for each eigenvalue; callers check coverage first."""
        lam = np.asarray(lam, dtype=float)
        idx = np.searchsorted(self.edges[1:-1], lam, side="right")
        return np.clip(idx, 0, self.n_bands - 1)

    def covers(self, eigenvalues) -> bool:
        lam = np.asarray(eigenvalues, dtype=float)
        tol = _COVER_TOL * max(1.0, float(self.edges[-1]))
        return bool(lam.size == 0
                    or (lam.min() >= self.edges[0] - tol and lam.max() <= self.edges[-1] + tol))


def default_three_band(lambda_max: float) -> BandPartition:
    """Equal thirds of [0, lambda_max]: low, mid, high."""
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    return BandPartition(edges=np.array([0.0, lambda_max / 3.0, 2.0 * lambda_max / 3.0, lambda_max]))


@dataclass(frozen=True)
class BandReport:
    """Per-band energies of one signal; fractions are zero when degenerate."""

    partition: BandPartition
    energies: np.ndarray
    fractions: np.ndarray
    degenerate: bool

    def __post_init__(self):
        for name in ("energies", "fractions"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def total_energy(self) -> float:
        return float(self.energies.sum())


def band_energy(basis: SpectralBasis, y, partition: BandPartition) -> BandReport:
    """Split ||y_hat||^2 across the partition's bands.

    Parseval makes the energies sum to ||y||^2. A zero signal yields the
    degenerate report with all-zero fractions.
    """
    values = belief_values(y, expect_domain="vertex")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    if not partition.covers(basis.eigenvalues):
        raise ValueError("partition does not cover the spectrum")
    yhat = basis.eigenvectors.T @ values
    bands = partition.band_of(basis.eigenvalues)
    energies = np.bincount(bands, weights=yhat ** 2, minlength=partition.n_bands)
    total = float(energies.sum())
    degenerate = total <= 0.0
    fractions = np.zeros_like(energies) if degenerate else energies / total
    return BandReport(partition=partition, energies=energies, fractions=fractions,
                      degenerate=degenerate)


def dirichlet_energy(lap: Laplacian, y) -> float:
    """Quadratic form y^T L y; tiny negative round-off is clamped to zero."""
    values = belief_values(y, expect_domain="vertex")
    if values.size != lap.node_count:
        raise ValueError(f"belief length {values.size} does not match operator size {lap.node_count}")
    value = float(values @ (lap.matrix @ values))
    if value < 0 and value > -1e-9 * max(1.0, float(values @ values)):
        return 0.0
    return value


def proof_band_agreement(pairs) -> float:
    """Mean allowed-band energy fraction over (report, allowed_bands) pairs.

    Degenerate reports are skipped; an empty remainder is an error since
    the agreement of nothing is undefined.
    """
    scores = []
    for report, allowed in pairs:
        allowed = sorted(set(int(b) for b in allowed))
        if any(b < 0 or b >= report.partition.n_bands for b in allowed):
            raise ValueError(f"allowed bands {allowed} outside the partition")
        if report.degenerate:
            continue
        scores.append(float(report.fractions[allowed].sum()))
    if not scores:
        raise ValueError("no non-degenerate reports to score")
    return float(np.mean(scores))


def theta_response_variance(theta_var, eigenvalues, lambda_max: float) -> np.ndarray:
    """Var[h(lam_i)] = sum_k var(theta_k) T_k(scaled lam_i)^2.

    Treats coefficient noise as independent across k, which is exact for
    a diagonal coefficient covariance.
    """
    var = np.asarray(theta_var, dtype=float)
    if var.ndim != 1 or var.size < 1:
        raise ValueError("theta_var must be a nonempty vector")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError("coefficient variances must be finite and nonnegative")
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    scaled = 2.0 * np.asarray(eigenvalues, dtype=float) / lambda_max - 1.0
    vander = npcheb.chebvander(scaled, var.size - 1)
    return (vander ** 2) @ var


@dataclass(frozen=True)
class SpectralCovariance:
    """Output covariance U diag(d) U^T stored by its spectral diagonal.

    ``variances`` holds the per-eigenvalue response variances Var[h(lam_i)];
    ``diagonal_spectral`` is those variances already weighted by the
    squared spectral coefficients of the input.
    """

    variances: np.ndarray
    diagonal_spectral: np.ndarray
    basis: SpectralBasis
    vertex_matrix: np.ndarray | None = None

    def __post_init__(self):
        for name in ("variances", "diagonal_spectral"):
            arr = np.array(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def total_variance(self) -> float:
        return float(self.diagonal_spectral.sum())

    def vertex_variances(self) -> np.ndarray:
        """Marginal per-node variances diag(U diag(d) U^T) without materializing."""
        return (self.basis.eigenvectors ** 2) @ self.diagonal_spectral


def spectral_covariance(basis: SpectralBasis, variances, x,
                        materialize: bool = False) -> SpectralCovariance:
    """Weight per-eigenvalue response variances by the input's spectrum.

    With independent per-mode noise the output covariance is
    U diag(Var[h(lam_i)] xhat_i^2) U^T; the spectral diagonal is always
    returned, the full vertex matrix only on request. Use
    theta_response_variance to derive the variances from coefficient
    noise.
    """
    var_h = np.asarray(variances, dtype=float)
    if var_h.ndim != 1 or np.any(var_h < 0) or not np.all(np.isfinite(var_h)):
        raise ValueError("variances must be a finite nonnegative vector")
    values = belief_values(x, expect_domain="vertex")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    if var_h.size != basis.node_count:
        raise ValueError(f"variance length {var_h.size} does not match basis size {basis.node_count}")
    xhat = basis.eigenvectors.T @ values
    diagonal = var_h * xhat ** 2
    matrix = None
    if materialize:
        matrix = basis.eigenvectors @ np.diag(diagonal) @ basis.eigenvectors.T
    return SpectralCovariance(variances=var_h, diagonal_spectral=diagonal,
                              basis=basis, vertex_matrix=matrix)


@dataclass(frozen=True)
class RobustnessCertificate:
    """Lipschitz bound on the filter as an operator: ||h(L)||_2 <= bound."""

    bound: float
    grid_points: int
    closed_form: bool


def robustness_certificate(response, lambda_max: float,
                           grid_points: int = 1001) -> RobustnessCertificate:
    """Certify sup |h| over [0, lambda_max], inflated by CERT_SLACK.

    Analytic kinds with a known extremum use the closed form; everything
    else falls back to a dense grid scan. The bound dominates
    ||h(L) x - h(L) x'|| / ||x - x'|| for any PSD operator whose spectrum
    the range covers.
    """
    if not np.isfinite(lambda_max) or lambda_max <= 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    if grid_points < 2:
        raise ValueError("certificate grid needs at least two points")
    closed = None
    if isinstance(response, ft.AnalyticResponse):
        if response.kind == "diffusion":
            closed = 1.0
        elif response.kind == "highpass":
            beta = response.params[0]
            closed = lambda_max / (lambda_max + beta)
        elif response.kind == "identity":
            closed = 1.0
        elif response.kind == "gaussian_bandpass":
            center, width = response.params
            if 0.0 <= center <= lambda_max:
                closed = 1.0
            else:
                dist = -center if center < 0 else center - lambda_max
                closed = float(np.exp(-(dist ** 2) / (2.0 * width * width)))
    if closed is not None:
        return RobustnessCertificate(bound=closed * CERT_SLACK, grid_points=0, closed_form=True)
    grid = np.linspace(0.0, lambda_max, grid_points)
    sup = float(np.max(np.abs(ft.response_eval(response, grid))))
    return RobustnessCertificate(bound=sup * CERT_SLACK, grid_points=grid_points, closed_form=False)


@dataclass(frozen=True)
class PerturbConfig:
    """Band-limited spectral noise: which band, how strong, which stream."""

    band: int = 2
    magnitude: float = 0.0
    seed: int = 0
    partition: BandPartition | None = None


def spectral_perturb(basis: SpectralBasis, x, band: int, magnitude: float,
                     partition: BandPartition | None = None, seed: int = 0):
    """Add seeded Gaussian noise confined to one spectral band.

    The injected component is rescaled so its total norm equals
    ``magnitude`` exactly; since the basis is orthonormal this is also
    ||perturbed - x||. Energy in every other band is untouched because
    the noise is exactly band-supported.
    """
    if magnitude < 0 or not np.isfinite(magnitude):
        raise ValueError(f"magnitude must be nonnegative, got {magnitude}")
    values = belief_values(x, expect_domain="vertex")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    part = partition if partition is not None else default_three_band(basis.lambda_max)
    if not 0 <= band < part.n_bands:
        raise ValueError(f"band {band} outside partition with {part.n_bands} bands")
    if not part.covers(basis.eigenvalues):
        raise ValueError("partition does not cover the spectrum")
    mask = part.band_of(basis.eigenvalues) == band
    if not np.any(mask):
        raise ValueError(f"band {band} contains no eigenvalues; nothing to perturb")
    if magnitude == 0.0:
        return _wrap_like(x, values.copy())
    rng = np.random.default_rng(seed)
    noise = np.where(mask, rng.standard_normal(values.size), 0.0)
    norm = float(np.linalg.norm(noise))
    while norm == 0.0:  # measure-zero, but keeps the scale exact
        noise = np.where(mask, rng.standard_normal(values.size), 0.0)
        norm = float(np.linalg.norm(noise))
    delta_hat = (magnitude / norm) * noise
    return _wrap_like(x, values + basis.eigenvectors @ delta_hat)


def spectral_edit(basis: SpectralBasis, x, edits, partition: BandPartition | None = None):
    """Multiply whole bands of x_hat by per-band gains.

    ``edits`` maps band index to gain, as a dict or (band, gain) pairs;
    listing a band twice is rejected rather than silently compounded.
    """
    values = belief_values(x, expect_domain="vertex")
    if values.size != basis.node_count:
        raise ValueError(f"belief length {values.size} does not match basis size {basis.node_count}")
    part = partition if partition is not None else default_three_band(basis.lambda_max)
    if not part.covers(basis.eigenvalues):
        raise ValueError("partition does not cover the spectrum")
    items = list(edits.items()) if isinstance(edits, dict) else [tuple(e) for e in edits]
    seen = set()
    gains = np.ones(basis.node_count)
    bands = part.band_of(basis.eigenvalues)
    for band, gain in items:
        band = int(band)
        if band in seen:
            raise ValueError(f"band {band} edited twice")
        seen.add(band)
        if not 0 <= band < part.n_bands:
            raise ValueError(f"band {band} outside partition with {part.n_bands} bands")
        if not np.isfinite(gain):
            raise ValueError(f"gain for band {band} must be finite")
        gains[bands == band] = float(gain)
    xhat = basis.eigenvectors.T @ values
    return _wrap_like(x, basis.eigenvectors @ (gains * xhat))


def cospectral_loss(a, b) -> float:
    """Squared distance between two spectral coefficient vectors."""
    va = belief_values(a, expect_domain="spectral")
    vb = belief_values(b, expect_domain="spectral")
    if va.size != vb.size:
        raise ValueError(f"spectral vectors differ in length: {va.size} vs {vb.size}")
    diff = va - vb
    return float(diff @ diff)


def cospectral_profile(eigenvalues, coeffs, points: int = 64) -> np.ndarray:
    """Resample spectral energy onto a fixed grid of relative eigenvalues.

    Each |coeff|^2 is accumulated at the grid point nearest lam /
    lam_max, which lets signals from graphs of different sizes be
    compared. A flat (zero) spectrum piles everything into bin zero.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    c = belief_values(coeffs, expect_domain="spectral")
    if lam.size != c.size:
        raise ValueError("eigenvalues and coefficients must align")
    if points < 2:
        raise ValueError("profile needs at least two points")
    profile = np.zeros(points)
    top = float(lam[-1]) if lam.size else 0.0
    if top <= 1e-12:
        profile[0] = float(c @ c)
        return profile
    idx = np.clip(np.rint(lam / top * (points - 1)).astype(int), 0, points - 1)
    np.add.at(profile, idx, c ** 2)
    return profile


def robustness_drop(model, instances, perturb: PerturbConfig, eval_config=None) -> float:
    """Accuracy drop, in percentage points, caused by a band perturbation.

    Both passes use the task evaluator with identical seeds so the only
    difference is the injected spectral noise.
    """
    from .taskgen import instance_accuracy  # deferred to keep imports acyclic

    clean, perturbed = [], []
    for inst in instances:
        clean.append(instance_accuracy(model, inst, eval_config))
        perturbed.append(instance_accuracy(model, inst, eval_config, perturb=perturb))
    if not clean:
        raise ValueError("no instances to score")
    return float((np.mean(clean) - np.mean(perturbed)) * 100.0)
