"""Gradient-based training of spectral filters and gated expert mixtures.

Coefficient gradients ride the Chebyshev recurrence trace; operator
gradients are exact reverse-mode through the same recurrence, reported in
the symmetric subspace. Penalties steer where output energy is allowed to
live, how the operator's spectrum should look, and how outputs should
transfer across graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import filters as ft
from .analysis import BandPartition, band_energy, default_three_band
from .graph import (
    Laplacian,
    ScaledLaplacian,
    SpectralBasis,
    belief_values,
    eigendecompose,
    estimate_lambda_max,
    scale_laplacian,
)

GATING_FEATURES = ("total_energy", "low_band_fraction", "mid_band_fraction",
                   "high_band_fraction", "node_count")


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the offending epoch."""

    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"loss diverged at epoch {epoch}")
        self.epoch = epoch


def grad_theta(dLdy, trace: ft.RecurrenceTrace) -> np.ndarray:
    """d loss / d theta_k = <d loss / d y, b_k> since y is linear in theta."""
    g = belief_values(dLdy)
    if g.size != trace.basis_vectors.shape[1]:
        raise ValueError("gradient length does not match the trace")
    return trace.basis_vectors @ g


def grad_scaled_laplacian(dLdy, theta, trace: ft.RecurrenceTrace,
                          lt: ScaledLaplacian) -> np.ndarray:
    """Exact reverse-mode gradient of the loss w.r.t. the scaled operator.

    Walks the recurrence b_k = 2 Lt b_{k-1} - b_{k-2} backwards, pushing
    adjoints down and accumulating outer products; the result is
    symmetrized because the operator is constrained symmetric.
    """
    g = belief_values(dLdy)
    theta = np.asarray(theta, dtype=float)
    b = trace.basis_vectors
    order = trace.order
    if theta.size != order + 1:
        raise ValueError("theta length does not match the trace")
    n = g.size
    if b.shape[1] != n:
        raise ValueError("gradient length does not match the trace")
    adj = [theta[k] * g for k in range(order + 1)]
    grad = np.zeros((n, n))
    mat = lt.matrix
    for k in range(order, 1, -1):
        grad += 2.0 * np.outer(adj[k], b[k - 1])
        adj[k - 1] = adj[k - 1] + 2.0 * (mat @ adj[k])
        adj[k - 2] = adj[k - 2] - adj[k]
    if order >= 1:
        grad += np.outer(adj[1], b[0])
    return 0.5 * (grad + grad.T)


def project_laplacian(matrix) -> np.ndarray:
    """Project a dense candidate onto valid combinatorial Laplacians.

    Symmetrizes, clamps off-diagonal entries to be nonpositive, and
    resets the diagonal so every row sums to zero. The result is
    diagonally dominant, hence PSD.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("candidate must be a square matrix")
    sym = 0.5 * (m + m.T)
    off = np.minimum(sym, 0.0)
    np.fill_diagonal(off, 0.0)
    result = off.copy()
    np.fill_diagonal(result, -off.sum(axis=1))
    return result


def rule_consistency_penalty(basis: SpectralBasis, target_spectrum) -> float:
    """Squared distance between the operator's spectrum and a target one."""
    target = np.asarray(target_spectrum, dtype=float)
    if target.shape != basis.eigenvalues.shape:
        raise ValueError("target spectrum length does not match the operator")
    diff = basis.eigenvalues - target
    return float(diff @ diff)


def proof_guided_penalty(basis: SpectralBasis, y, allowed_bands,
                         partition: BandPartition) -> float:
    """Fraction of output energy sitting in bands a proof disallows."""
    report = band_energy(basis, y, partition)
    if report.degenerate:
        return 0.0
    allowed = sorted(set(int(b) for b in allowed_bands))
    if any(b < 0 or b >= partition.n_bands for b in allowed):
        raise ValueError(f"allowed bands {allowed} outside the partition")
    return float(1.0 - report.fractions[allowed].sum())


def _proof_penalty_grad(basis: SpectralBasis, y: np.ndarray, allowed_bands,
                        partition: BandPartition) -> tuple[float, np.ndarray]:
    # penalty = (y^T P y) / (y^T y) with P projecting onto disallowed eigenvectors
    allowed = set(int(b) for b in allowed_bands)
    bands = partition.band_of(basis.eigenvalues)
    disallowed = np.array([b not in allowed for b in bands])
    yhat = basis.eigenvectors.T @ y
    total = float(yhat @ yhat)
    if total <= 0.0:
        return 0.0, np.zeros_like(y)
    bad = float((yhat[disallowed] ** 2).sum()) if disallowed.any() else 0.0
    penalty = bad / total
    proj = basis.eigenvectors @ (np.where(disallowed, yhat, 0.0))
    grad = (2.0 / total) * (proj - penalty * y)
    return penalty, grad


def gating_features(basis: SpectralBasis, x, partition: BandPartition | None = None) -> np.ndarray:
    """The five gating inputs: total energy, three band fractions, node count."""
    part = partition if partition is not None else default_three_band(basis.lambda_max)
    if part.n_bands != 3:
        raise ValueError("gating features are defined over a three-band partition")
    report = band_energy(basis, x, part)
    values = belief_values(x)
    return np.array([float(values @ values), report.fractions[0],
                     report.fractions[1], report.fractions[2],
                     float(basis.node_count)])


@dataclass(frozen=True)
class MoSEModel:
    """Mixture of spectral experts with a linear softmax gate.

    Every expert shares one lambda_max so a single recurrence trace
    serves them all; gating_weights has one row per expert over the
    GATING_FEATURES inputs.
    """

    experts: tuple[ft.ChebyshevFilter, ...]
    gating_weights: np.ndarray

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise ValueError("a mixture needs at least one expert")
        top = experts[0].lambda_max
        if any(abs(e.lambda_max - top) > 1e-9 * max(1.0, top) for e in experts):
            raise ValueError("experts must share a single lambda_max")
        weights = np.array(self.gating_weights, dtype=float)
        if weights.shape != (len(experts), len(GATING_FEATURES)):
            raise ValueError(
                f"gating weights must be ({len(experts)}, {len(GATING_FEATURES)}), got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("gating weights must be finite")
        weights.setflags(write=False)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "gating_weights", weights)

    @property
    def lambda_max(self) -> float:
        return self.experts[0].lambda_max

    @property
    def max_order(self) -> int:
        return max(e.order for e in self.experts)


def mose_gate(model: MoSEModel, features) -> np.ndarray:
    """Softmax gate alpha = softmax(W f); always a point on the simplex."""
    f = np.asarray(features, dtype=float)
    if f.shape != (len(GATING_FEATURES),):
        raise ValueError(f"features must have length {len(GATING_FEATURES)}")
    logits = model.gating_weights @ f
    logits = logits - logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def pooled_coefficients(model: MoSEModel, alpha) -> np.ndarray:
    """Gate-weighted coefficient pool: sum_b alpha_b theta_b, zero-padded."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (len(model.experts),):
        raise ValueError("alpha must hold one weight per expert")
    pooled = np.zeros(model.max_order + 1)
    for a, expert in zip(alpha, model.experts):
        pooled[: expert.theta.size] += a * expert.theta
    return pooled


def mose_apply(model: MoSEModel, lt: ScaledLaplacian, x, features):
    """Filter through the gate-pooled coefficients in one recurrence pass.

    Identical to summing alpha_b-weighted expert outputs because the
    output is linear in the coefficients.
    """
    alpha = mose_gate(model, features)
    pooled = ft.ChebyshevFilter(theta=pooled_coefficients(model, alpha),
                                lambda_max=model.lambda_max)
    return ft.cheb_apply(pooled, lt, x)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Epoch-indexed caps on the trainable coefficient order.

    stages are (start_epoch, max_order) pairs; the first stage starts at
    epoch zero and caps never decrease, so later masks contain earlier
    ones.
    """

    stages: tuple[tuple[int, int], ...]

    def __post_init__(self):
        stages = tuple((int(e), int(k)) for e, k in self.stages)
        if not stages:
            raise ValueError("schedule needs at least one stage")
        if stages[0][0] != 0:
            raise ValueError("the first stage must start at epoch 0")
        epochs = [e for e, _ in stages]
        orders = [k for _, k in stages]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("stage epochs must increase strictly")
        if any(k < 0 for k in orders):
            raise ValueError("stage orders must be nonnegative")
        if any(b < a for a, b in zip(orders, orders[1:])):
            raise ValueError("stage orders must not decrease")
        object.__setattr__(self, "stages", stages)

    def cap_at(self, epoch: int) -> int:
        cap = self.stages[0][1]
        for start, order in self.stages:
            if start <= epoch:
                cap = order
            else:
                break
        return cap


def curriculum_mask(schedule: CurriculumSchedule | None, epoch: int, order: int) -> np.ndarray:
    """Boolean mask over theta_0 .. theta_order; masked entries stay frozen."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    mask = np.ones(order + 1, dtype=bool)
    if schedule is None:
        return mask
    cap = schedule.cap_at(epoch)
    mask[np.arange(order + 1) > cap] = False
    return mask


@dataclass(frozen=True)
class AllocationConfig:
    """Difficulty thresholds mapped onto filter order and expert count."""

    min_order: int = 2
    max_order: int = 16
    max_experts: int = 4
    thresholds: tuple[float, ...] = (0.1, 0.3, 0.6)

    def __post_init__(self):
        if self.min_order < 0 or self.max_order < self.min_order:
            raise ValueError("need 0 <= min_order <= max_order")
        if self.max_experts < 1:
            raise ValueError("need at least one expert")
        thresholds = tuple(float(t) for t in self.thresholds)
        if not thresholds:
            raise ValueError("need at least one threshold")
        if any(t <= 0 or not np.isfinite(t) for t in thresholds):
            raise ValueError("thresholds must be positive and finite")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("thresholds must increase strictly")
        object.__setattr__(self, "thresholds", thresholds)


def allocation_difficulty(f: ft.ChebyshevFilter, lt: ScaledLaplacian, x,
                          probe_order: int | None = None) -> float:
    """Relative residual between a short preview and one twice as long.

    Signals that settle at low order score near zero; energy that only
    appears with more coefficients pushes the score up.
    """
    k1 = probe_order if probe_order is not None else min(2, f.order)
    if k1 < 0 or k1 > f.order:
        raise ValueError(f"probe order {k1} outside 0..{f.order}")
    k2 = min(2 * k1 if k1 > 0 else 1, f.order)
    short = ft.ChebyshevFilter(theta=f.theta[: k1 + 1], lambda_max=f.lambda_max)
    long = ft.ChebyshevFilter(theta=f.theta[: k2 + 1], lambda_max=f.lambda_max)
    y1 = belief_values(ft.cheb_apply(short, lt, belief_values(x)))
    y2 = belief_values(ft.cheb_apply(long, lt, belief_values(x)))
    denom = float(np.linalg.norm(y2))
    if denom <= 0.0:
        return 0.0
    return float(np.linalg.norm(y2 - y1) / denom)


def dynamic_allocate(difficulty: float, config: AllocationConfig | None = None) -> tuple[int, int]:
    """Map a difficulty score to (order, expert count), monotonically.

    Crossing each threshold moves both budgets a proportional step from
    their minimum toward their maximum.
    """
    cfg = config or AllocationConfig()
    if not np.isfinite(difficulty) or difficulty < 0:
        raise ValueError(f"difficulty must be nonnegative, got {difficulty}")
    crossed = int(np.searchsorted(np.asarray(cfg.thresholds), difficulty, side="right"))
    frac = crossed / len(cfg.thresholds)
    order = int(round(cfg.min_order + frac * (cfg.max_order - cfg.min_order)))
    experts = int(round(1 + frac * (cfg.max_experts - 1)))
    return order, experts


@dataclass(frozen=True)
class PenaltyWeights:
    proof: float = 0.0
    rule_consistency: float = 0.0
    transfer: float = 0.0


@dataclass(frozen=True)
class LossSpec:
    """What the data term measures and which penalties ride along.

    kind "mse" matches targets in vertex space; "logistic" scores soft
    predicate projections against binary labels.
    """

    kind: str = "mse"
    threshold: float = 0.0
    temperature: float = 1.0
    penalties: PenaltyWeights = field(default_factory=PenaltyWeights)

    def __post_init__(self):
        if self.kind not in ("mse", "logistic"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "logistic" and self.temperature <= 0:
            raise ValueError("logistic loss needs a positive temperature")


@dataclass(frozen=True)
class TrainExample:
    """One graph signal with either a regression target or binary labels."""

    x: np.ndarray
    target: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        if self.target is not None:
            t = np.array(self.target, dtype=float)
            if t.shape != x.shape:
                raise ValueError("target must match x in shape")
            t.setflags(write=False)
            object.__setattr__(self, "target", t)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=float)
            if lab.shape != x.shape:
                raise ValueError("labels must match x in shape")
            if np.any((lab != 0) & (lab != 1)):
                raise ValueError("labels must be binary")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)


@dataclass(frozen=True)
class PenaltyContext:
    """Shared structures the penalties read: basis, bands, targets."""

    basis: SpectralBasis | None = None
    partition: BandPartition | None = None
    allowed_bands: tuple[int, ...] = ()
    consistency_target: np.ndarray | None = None
    transfer_reference: np.ndarray | None = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    clip_norm: float | None = 10.0
    learn_laplacian: bool = False
    laplacian_lr: float = 0.01
    lambda_refresh_every: int = 10

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1:
            raise ValueError("need a nonnegative learning rate and at least one epoch")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")
        if self.learn_laplacian and self.laplacian_lr <= 0:
            raise ValueError("laplacian_lr must be positive when learning the operator")
        if self.lambda_refresh_every < 1:
            raise ValueError("lambda_refresh_every must be at least 1")


@dataclass(frozen=True)
class TrainResult:
    model: object
    history: tuple[tuple, ...]
    laplacian: Laplacian | None = None
    operator: ScaledLaplacian | None = None


HISTORY_COLUMNS = ("epoch", "total", "data_term", "proof_penalty",
                   "rule_consistency", "transfer")


def history_to_csv(history) -> str:
    """Render training history as CSV with full-precision floats."""
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        epoch = int(row[0])
        rest = ",".join(format(float(v), ".17g") for v in row[1:])
        lines.append(f"{epoch},{rest}")
    return "\n".join(lines) + "\n"


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _data_term(loss: LossSpec, y: np.ndarray, example: TrainExample) -> tuple[float, np.ndarray]:
    n = y.size
    if loss.kind == "mse":
        if example.target is None:
            raise ValueError("mse loss needs targets on every example")
        diff = y - example.target
        return float(diff @ diff) / n, (2.0 / n) * diff
    if example.labels is None:
        raise ValueError("logistic loss needs labels on every example")
    z = loss.temperature * (y - loss.threshold)
    p = np.clip(_sigmoid(z), 1e-12, 1.0 - 1e-12)
    lab = example.labels
    value = -float(np.mean(lab * np.log(p) + (1.0 - lab) * np.log(1.0 - p)))
    grad = (loss.temperature / n) * (p - lab)
    return value, grad


def _require(condition: bool, message: str):
    if not condition:
        raise ValueError(message)


def train(model, lt: ScaledLaplacian, data, loss: LossSpec,
          schedule: CurriculumSchedule | None = None,
          config: TrainConfig | None = None,
          context: PenaltyContext | None = None,
          laplacian: Laplacian | None = None,
          seed: int = 0) -> TrainResult:
    """Full-batch gradient descent on a filter or expert mixture.

    Records one history row per epoch before the update; penalty columns
    hold raw (unweighted) values while the total applies the configured
    weights. With learn_laplacian the dense operator is updated from the
    exact recurrence gradient, reprojected onto valid Laplacians, and its
    spectral bound re-estimated every lambda_refresh_every epochs.
    """
    cfg = config or TrainConfig()
    ctx = context or PenaltyContext()
    data = list(data)
    _require(bool(data), "training needs at least one example")
    pw = loss.penalties
    _require(pw.proof == 0 or (ctx.basis is not None and ctx.partition is not None
                               and len(ctx.allowed_bands) > 0),
             "proof penalty needs a basis, partition, and allowed bands")
    _require(pw.rule_consistency == 0 or ctx.consistency_target is not None,
             "rule consistency penalty needs a target spectrum")
    _require(pw.transfer == 0 or (ctx.basis is not None and ctx.transfer_reference is not None),
             "transfer penalty needs a basis and a spectral reference")
    needs_basis = pw.proof > 0 or pw.transfer > 0 or pw.rule_consistency > 0

    if isinstance(model, MoSEModel):
        _require(not cfg.learn_laplacian, "operator learning is not defined for mixtures")
        _require(ctx.basis is not None, "mixture training needs a basis for gating features")
        return _train_mose(model, lt, data, loss, schedule, cfg, ctx)

    if not isinstance(model, ft.ChebyshevFilter):
        raise TypeError(f"cannot train a {type(model).__name__}")
    if cfg.learn_laplacian:
        _require(laplacian is not None, "operator learning needs the unscaled Laplacian")

    theta = model.theta.copy()
    order = model.order
    lambda_max = lt.lambda_max
    lt_cur = lt
    lap_dense = laplacian.matrix.toarray() if cfg.learn_laplacian else None
    lap_cur = laplacian
    basis_cur = ctx.basis
    if needs_basis and cfg.learn_laplacian:
        basis_cur = eigendecompose(lap_cur)

    history = []
    for epoch in range(cfg.epochs):
        mask = curriculum_mask(schedule, epoch, order)
        f_cur = ft.ChebyshevFilter(theta=theta, lambda_max=lambda_max)
        g_theta = np.zeros(order + 1)
        g_lap = np.zeros_like(lap_dense) if cfg.learn_laplacian else None
        data_total = 0.0
        proof_total = 0.0
        transfer_total = 0.0
        for example in data:
            y, trace = ft.cheb_apply(f_cur, lt_cur, example.x, keep_trace=True)
            value, g_y = _data_term(loss, y, example)
            data_total += value
            if pw.proof > 0:
                pen, pen_grad = _proof_penalty_grad(basis_cur, y, ctx.allowed_bands, ctx.partition)
                proof_total += pen
                g_y = g_y + pw.proof * pen_grad
            if pw.transfer > 0:
                yhat = basis_cur.eigenvectors.T @ y
                diff = yhat - ctx.transfer_reference
                transfer_total += float(diff @ diff) / y.size
                g_y = g_y + pw.transfer * (2.0 / y.size) * (basis_cur.eigenvectors @ diff)
            g_theta += grad_theta(g_y, trace)
            if cfg.learn_laplacian:
                g_scaled = grad_scaled_laplacian(g_y, theta, trace, lt_cur)
                # lambda_max is held out of the chain rule on purpose
                g_lap += (2.0 / lambda_max) * g_scaled
        count = len(data)
        g_theta /= count
        data_total /= count
        proof_total /= count
        transfer_total /= count
        if cfg.learn_laplacian:
            g_lap /= count

        rc_total = 0.0
        if pw.rule_consistency > 0:
            rc_total = rule_consistency_penalty(basis_cur, ctx.consistency_target)
            if cfg.learn_laplacian:
                diff = basis_cur.eigenvalues - np.asarray(ctx.consistency_target, dtype=float)
                g_lap += pw.rule_consistency * 2.0 * (
                    basis_cur.eigenvectors @ np.diag(diff) @ basis_cur.eigenvectors.T)

        total = (data_total + pw.proof * proof_total
                 + pw.rule_consistency * rc_total + pw.transfer * transfer_total)
        if not np.isfinite(total):
            raise DivergenceError(epoch)
        history.append((epoch, total, data_total, proof_total, rc_total, transfer_total))

        g_theta = np.where(mask, g_theta, 0.0)
        if cfg.clip_norm is not None:
            norm = float(np.linalg.norm(g_theta))
            if norm > cfg.clip_norm:
                g_theta *= cfg.clip_norm / norm
        theta = theta - cfg.learning_rate * g_theta
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(epoch)

        if cfg.learn_laplacian:
            lap_dense = project_laplacian(lap_dense - cfg.laplacian_lr * g_lap)
            lap_cur = Laplacian(matrix=sp.csr_array(lap_dense), variant=lap_cur.variant,
                                degree=np.diag(lap_dense))
            if (epoch + 1) % cfg.lambda_refresh_every == 0:
                estimate = estimate_lambda_max(lap_cur, seed=seed)
                lambda_max = estimate.value
            lt_cur = scale_laplacian(lap_cur, lambda_max)
            if needs_basis:
                basis_cur = eigendecompose(lap_cur)

    trained = ft.ChebyshevFilter(theta=theta, lambda_max=lambda_max)
    return TrainResult(model=trained, history=tuple(history),
                       laplacian=lap_cur if cfg.learn_laplacian else laplacian,
                       operator=lt_cur)


def _train_mose(model: MoSEModel, lt: ScaledLaplacian, data, loss: LossSpec,
                schedule: CurriculumSchedule | None, cfg: TrainConfig,
                ctx: PenaltyContext) -> TrainResult:
    pw = loss.penalties
    thetas = [e.theta.copy() for e in model.experts]
    weights = model.gating_weights.copy()
    lambda_max = model.lambda_max
    part = ctx.partition if ctx.partition is not None else default_three_band(ctx.basis.lambda_max)
    features = [gating_features(ctx.basis, ex.x, part) for ex in data]
    probe = ft.ChebyshevFilter(theta=np.zeros(model.max_order + 1), lambda_max=lambda_max)

    history = []
    for epoch in range(cfg.epochs):
        g_thetas = [np.zeros_like(t) for t in thetas]
        g_weights = np.zeros_like(weights)
        data_total = proof_total = transfer_total = 0.0
        cur = MoSEModel(experts=tuple(ft.ChebyshevFilter(theta=t, lambda_max=lambda_max)
                                      for t in thetas), gating_weights=weights)
        for example, f_vec in zip(data, features):
            _, trace = ft.cheb_apply(probe, lt, example.x, keep_trace=True)
            basis_rows = trace.basis_vectors
            alpha = mose_gate(cur, f_vec)
            outs = [basis_rows[: t.size].T @ t for t in thetas]
            y = np.zeros(example.x.size)
            for a, out in zip(alpha, outs):
                y = y + a * out
            value, g_y = _data_term(loss, y, example)
            data_total += value
            if pw.proof > 0:
                pen, pen_grad = _proof_penalty_grad(ctx.basis, y, ctx.allowed_bands, part)
                proof_total += pen
                g_y = g_y + pw.proof * pen_grad
            if pw.transfer > 0:
                yhat = ctx.basis.eigenvectors.T @ y
                diff = yhat - ctx.transfer_reference
                transfer_total += float(diff @ diff) / y.size
                g_y = g_y + pw.transfer * (2.0 / y.size) * (ctx.basis.eigenvectors @ diff)
            for b, t in enumerate(thetas):
                g_thetas[b] += alpha[b] * (basis_rows[: t.size] @ g_y)
            d_alpha = np.array([float(g_y @ out) for out in outs])
            d_logits = alpha * (d_alpha - float(alpha @ d_alpha))
            g_weights += np.outer(d_logits, f_vec)
        count = len(data)
        data_total /= count
        proof_total /= count
        transfer_total /= count
        rc_total = (rule_consistency_penalty(ctx.basis, ctx.consistency_target)
                    if pw.rule_consistency > 0 else 0.0)
        total = (data_total + pw.proof * proof_total
                 + pw.rule_consistency * rc_total + pw.transfer * transfer_total)
        if not np.isfinite(total):
            raise DivergenceError(epoch)
        history.append((epoch, total, data_total, proof_total, rc_total, transfer_total))

        for b in range(len(thetas)):
            mask = curriculum_mask(schedule, epoch, thetas[b].size - 1)
            grad = np.where(mask, g_thetas[b] / count, 0.0)
            if cfg.clip_norm is not None:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.clip_norm:
                    grad *= cfg.clip_norm / norm
            thetas[b] = thetas[b] - cfg.learning_rate * grad
        g_weights /= count
        if cfg.clip_norm is not None:
            norm = float(np.linalg.norm(g_weights))
            if norm > cfg.clip_norm:
                g_weights *= cfg.clip_norm / norm
        weights = weights - cfg.learning_rate * g_weights
        if not all(np.all(np.isfinite(t)) for t in thetas) or not np.all(np.isfinite(weights)):
            raise DivergenceError(epoch)

    trained = MoSEModel(experts=tuple(ft.ChebyshevFilter(theta=t, lambda_max=lambda_max)
                                      for t in thetas), gating_weights=weights)
    return TrainResult(model=trained, history=tuple(history), laplacian=None, operator=lt)
