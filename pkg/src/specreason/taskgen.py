"""Synthetic reasoning tasks and the evaluator that scores models on them.

Three families: community recovery (low-band), spike-on-smooth
contradiction detection (high-band), and hop-propagation chains that
exercise the symbolic closure. Generation is fully seeded; identical
parameters reproduce identical instances.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.stats import rankdata

from . import filters as ft
from .analysis import (
    BandPartition,
    PerturbConfig,
    band_energy,
    default_three_band,
    proof_band_agreement,
    robustness_drop,
    spectral_perturb,
)
from .graph import (
    Graph,
    build_laplacian,
    eigendecompose,
    estimate_lambda_max,
    scale_laplacian,
)
from .rules import (
    HornClause,
    RuleBase,
    RuleSet,
    aggregate_rules,
    forward_chain,
    mixture_response,
)
from .training import MoSEModel, gating_features, pooled_coefficients, mose_gate

THREADS_ENV = "SNSR_THREADS"


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_gnp(n: int, p: float, seed=0) -> Graph:
    """Erdos-Renyi graph with unit weights, edges drawn on the upper triangle."""
    if n < 1:
        raise ValueError("need at least one node")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must be in [0, 1], got {p}")
    rng = _as_rng(seed)
    rows, cols = np.triu_indices(n, k=1)
    keep = rng.random(rows.size) < p
    edges = tuple((int(i), int(j), 1.0) for i, j in zip(rows[keep], cols[keep]))
    return Graph(node_count=n, edges=edges)


def random_gnm(n: int, m: int, seed=0) -> Graph:
    """Uniform graph with exactly m distinct unit-weight edges."""
    max_edges = n * (n - 1) // 2
    if not 0 <= m <= max_edges:
        raise ValueError(f"cannot place {m} edges on {n} nodes")
    rng = _as_rng(seed)
    chosen: dict = {}
    while len(chosen) < m:
        need = m - len(chosen)
        i = rng.integers(0, n, size=2 * need + 8)
        j = rng.integers(0, n, size=2 * need + 8)
        for a, b in zip(i, j):
            if a == b:
                continue
            key = (int(min(a, b)), int(max(a, b)))
            if key not in chosen:
                chosen[key] = True
                if len(chosen) == m:
                    break
    edges = tuple((i, j, 1.0) for i, j in sorted(chosen))
    return Graph(node_count=n, edges=edges)


def _connected_gnp(n: int, p: float, rng: np.random.Generator) -> Graph:
    for _ in range(10):
        g = random_gnp(n, p, rng)
        n_comp, _ = connected_components(g.adjacency(), directed=False)
        if n_comp == 1:
            return g
    raise RuntimeError("could not sample a connected graph in 10 tries")


@dataclass(frozen=True)
class TaskInstance:
    """One graph, its seed beliefs, ground truth, and optional symbolic layer."""

    graph: Graph
    beliefs: np.ndarray
    labels: np.ndarray
    allowed_bands: tuple[int, ...] = ()
    rulebase: RuleBase | None = None
    atom_map: tuple[str, ...] | None = None
    kind: str = ""
    seed: int = 0
    params: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        beliefs = np.array(self.beliefs, dtype=float)
        labels = np.array(self.labels, dtype=bool)
        if beliefs.shape != (self.graph.node_count,) or labels.shape != beliefs.shape:
            raise ValueError("beliefs and labels must cover every node exactly once")
        beliefs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "beliefs", beliefs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "allowed_bands", tuple(int(b) for b in self.allowed_bands))
        if self.atom_map is not None:
            atom_map = tuple(self.atom_map)
            if len(atom_map) != self.graph.node_count:
                raise ValueError("atom map must name every node")
            object.__setattr__(self, "atom_map", atom_map)
        if (self.rulebase is None) != (self.atom_map is None):
            raise ValueError("rulebase and atom map come together")


def gen_community_task(n: int = 200, communities: int = 2, intra_p: float = 0.08,
                       inter_p: float = 0.005, seed_fraction: float = 0.05,
                       noise: float = 0.1, seed: int = 0) -> TaskInstance:
    """Two-block stochastic block model with opposite-sign seed beliefs.

    The first half of the nodes is the positive community; each block
    seeds round(seed_fraction * n) of its nodes, capped at the block
    size. Sampling retries up to ten times for a connected graph.
    Low-pass smoothing of the seeds recovers the split, so the task
    declares the low band as its allowed region.
    """
    if communities != 2:
        raise ValueError("only two-community tasks are supported")
    if n < 4 or n % 2:
        raise ValueError("community tasks need an even n of at least 4")
    if not 0.0 < seed_fraction < 1.0:
        raise ValueError("seed_fraction must sit strictly between 0 and 1")
    if intra_p <= inter_p:
        raise ValueError("communities need intra_p > inter_p")
    rng = _as_rng(seed)
    half = n // 2
    rows, cols = np.triu_indices(n, k=1)
    same = (rows < half) == (cols < half)
    prob = np.where(same, intra_p, inter_p)
    g = None
    for _ in range(10):
        keep = rng.random(rows.size) < prob
        edges = tuple((int(i), int(j), 1.0) for i, j in zip(rows[keep], cols[keep]))
        candidate = Graph(node_count=n, edges=edges)
        n_comp, _ = connected_components(candidate.adjacency(), directed=False)
        if n_comp == 1:
            g = candidate
            break
    if g is None:
        raise RuntimeError("could not sample a connected community graph in 10 tries")

    per_side = min(half, max(1, int(round(seed_fraction * n))))
    seeds_a = rng.choice(half, size=per_side, replace=False)
    seeds_b = half + rng.choice(half, size=per_side, replace=False)
    x = noise * rng.standard_normal(n)
    x[seeds_a] += 1.0
    x[seeds_b] -= 1.0
    labels = np.arange(n) < half
    return TaskInstance(graph=g, beliefs=x, labels=labels, allowed_bands=(0,),
                        kind="community", seed=int(seed),
                        params=(("n", float(n)), ("intra_p", intra_p), ("inter_p", inter_p),
                                ("seed_fraction", seed_fraction), ("noise", noise)))


def gen_contradiction_task(n: int = 200, base_p: float = 0.05, planted: int = 10,
                           flip_magnitude: float = 3.0, seed: int = 0,
                           smooth_tau: float = 2.0) -> TaskInstance:
    """Smooth background with planted sign-flipped spikes; spikes are the positives.

    The background is a diffusion-smoothed random field normalized to
    unit peak, so its energy sits low in the spectrum. Each planted node
    gets a spike of size flip_magnitude pushed against the sign of the
    background there; the resulting near-deltas light up the high band,
    which the task declares as allowed. A zero flip_magnitude leaves the
    clean signal untouched and is flagged as degenerate.
    """
    if planted < 0 or planted >= n:
        raise ValueError("planted count must be in 0 .. n-1")
    if flip_magnitude < 0:
        raise ValueError("flip_magnitude cannot be negative")
    rng = _as_rng(seed)
    g = _connected_gnp(n, base_p, rng)
    lap = build_laplacian(g)
    background = ft.rational_apply(smooth_tau, lap, rng.standard_normal(n))
    peak = float(np.max(np.abs(background)))
    if peak > 0:
        background = background / peak
    chosen = rng.choice(n, size=planted, replace=False)
    if flip_magnitude == 0.0:
        warnings.warn("flip_magnitude is zero: spiked and clean signals coincide",
                      stacklevel=2)
    x = background.copy()
    against = np.where(background[chosen] >= 0, -1.0, 1.0)
    x[chosen] += flip_magnitude * against
    labels = np.zeros(n, dtype=bool)
    labels[chosen] = True
    return TaskInstance(graph=g, beliefs=x, labels=labels, allowed_bands=(2,),
                        kind="contradiction", seed=int(seed),
                        params=(("n", float(n)), ("base_p", base_p),
                                ("planted", float(planted)),
                                ("flip_magnitude", flip_magnitude),
                                ("smooth_tau", smooth_tau)))


def gen_chain_task(depth: int = 6, branching: int = 1, seed: int = 0) -> TaskInstance:
    """Hop-propagation task: a source fact at the root, clauses pushing it outward.

    branching 1 builds a path of depth+1 nodes; larger values build a
    complete branching-ary tree of the given depth. Every edge carries
    one clause propagating the parent's atom to the child, so ground
    truth is the full reachable set. Node identities are shuffled by the
    seed so the structure never aligns with index order by accident.
    """
    if depth < 1:
        raise ValueError("chain tasks need depth of at least 1")
    if branching < 1:
        raise ValueError("branching factor must be at least 1")
    rng = _as_rng(seed)
    if branching == 1:
        n = depth + 1
    else:
        n = (branching ** (depth + 1) - 1) // (branching - 1)
    perm = rng.permutation(n)
    # positional tree: parent of position k is (k-1)//branching
    edge_pairs = [(int(perm[(k - 1) // branching]), int(perm[k])) for k in range(1, n)]
    g = Graph(node_count=n, edges=tuple((i, j, 1.0) for i, j in edge_pairs))

    atoms = tuple(f"n{i}" for i in range(n))
    clauses = tuple(HornClause(body=frozenset({atoms[i]}), head=atoms[j])
                    for i, j in edge_pairs)
    rb = RuleBase(atoms=atoms, clauses=clauses)

    root = int(perm[0])
    x = np.zeros(n)
    x[root] = 1.0
    labels = np.ones(n, dtype=bool)
    return TaskInstance(graph=g, beliefs=x, labels=labels, allowed_bands=(0, 1),
                        rulebase=rb, atom_map=atoms, kind="chain", seed=int(seed),
                        params=(("depth", float(depth)), ("branching", float(branching))))


def save_task(instance: TaskInstance, path) -> None:
    payload = {
        "kind": instance.kind,
        "seed": instance.seed,
        "params": {k: v for k, v in instance.params},
        "graph": {"n": instance.graph.node_count,
                  "edges": [[i, j, w] for i, j, w in instance.graph.edges],
                  "kind": instance.graph.kind},
        "beliefs": [float(v) for v in instance.beliefs],
        "labels": [int(v) for v in instance.labels],
        "allowed_bands": list(instance.allowed_bands),
        "atoms": list(instance.atom_map) if instance.atom_map else None,
        "clauses": ([{"body": sorted(c.body), "head": c.head} for c in instance.rulebase.clauses]
                    if instance.rulebase else None),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_task(path) -> TaskInstance:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    graph = Graph(node_count=int(payload["graph"]["n"]),
                  edges=tuple((int(i), int(j), float(w)) for i, j, w in payload["graph"]["edges"]),
                  kind=payload["graph"].get("kind", "unsigned"))
    rulebase = None
    atom_map = None
    if payload.get("atoms"):
        atom_map = tuple(payload["atoms"])
        clauses = tuple(HornClause(body=frozenset(c["body"]), head=c["head"])
                        for c in payload["clauses"] or ())
        rulebase = RuleBase(atoms=atom_map, clauses=clauses)
    return TaskInstance(graph=graph,
                        beliefs=np.asarray(payload["beliefs"], dtype=float),
                        labels=np.asarray(payload["labels"], dtype=bool),
                        allowed_bands=tuple(payload.get("allowed_bands", ())),
                        rulebase=rulebase, atom_map=atom_map,
                        kind=payload.get("kind", ""), seed=int(payload.get("seed", 0)),
                        params=tuple((k, float(v)) for k, v in sorted(payload.get("params", {}).items())))


def ranking_auc(scores, labels) -> float:
    """Exact pairwise AUC with tie handling via midranks."""
    s = np.asarray(scores, dtype=float)
    lab = np.asarray(labels, dtype=bool)
    pos = int(lab.sum())
    neg = lab.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(s)
    return float((ranks[lab].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


@dataclass(frozen=True)
class EvalConfig:
    """How the evaluator reads beliefs off a model and scores them."""

    threshold: float = 0.0
    variant: str = "combinatorial"
    latency_runs: int = 3
    perturb: PerturbConfig | None = None
    partition: BandPartition | None = None
    threads: int | None = None


def resolve_threads(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def model_label(model) -> str:
    if isinstance(model, ft.AnalyticResponse):
        inner = ", ".join(format(p, "g") for p in model.params)
        return f"{model.kind}({inner})"
    if isinstance(model, ft.ChebyshevFilter):
        return f"chebyshev(order={model.order})"
    if isinstance(model, MoSEModel):
        return f"mose(experts={len(model.experts)})"
    if isinstance(model, RuleSet):
        return f"rules({len(model)})"
    return type(model).__name__


def _apply_model(model, basis, x, config: EvalConfig):
    if isinstance(model, ft.ChebyshevFilter):
        return ft.dense_filter_apply(basis, model, x)
    if isinstance(model, ft.AnalyticResponse):
        return ft.dense_filter_apply(basis, model, x)
    if isinstance(model, MoSEModel):
        features = gating_features(basis, x)
        alpha = mose_gate(model, features)
        pooled = ft.ChebyshevFilter(theta=pooled_coefficients(model, alpha),
                                    lambda_max=model.lambda_max)
        return ft.dense_filter_apply(basis, pooled, x)
    if isinstance(model, RuleSet):
        return ft.dense_filter_apply(basis, mixture_response(model), x)
    if callable(model):
        return model(basis, x)
    raise TypeError(f"cannot evaluate a {type(model).__name__}")


def _closure_f1(y: np.ndarray, inst: TaskInstance, threshold: float) -> float:
    facts = {inst.atom_map[i] for i in range(len(y)) if y[i] > threshold}
    closure = forward_chain(inst.rulebase, facts)
    truth = {inst.atom_map[i] for i in range(len(y)) if inst.labels[i]}
    if not closure and not truth:
        return 1.0
    overlap = len(closure & truth)
    if overlap == 0:
        return 0.0
    precision = overlap / len(closure)
    recall = overlap / len(truth)
    return 2.0 * precision * recall / (precision + recall)


def instance_accuracy(model, inst: TaskInstance, config: EvalConfig | None = None,
                      perturb: PerturbConfig | None = None) -> float:
    """Score one instance: label accuracy, or closure F1 when symbolic."""
    cfg = config or EvalConfig()
    basis = eigendecompose(build_laplacian(inst.graph, cfg.variant))
    x = inst.beliefs
    if perturb is not None and perturb.magnitude > 0:
        x = spectral_perturb(basis, x, perturb.band, perturb.magnitude,
                             perturb.partition, perturb.seed)
    y = np.asarray(_apply_model(model, basis, x, cfg), dtype=float)
    if inst.rulebase is not None:
        return _closure_f1(y, inst, cfg.threshold)
    return float(np.mean((y > cfg.threshold) == inst.labels))


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics for one model over one task set."""

    model: str
    instances: int
    accuracy: float
    latency_ms: float
    robustness_drop: float
    proof_band_agreement: float
    band_energies: tuple[float, ...]
    band_fractions: tuple[float, ...]

    def csv_header(self) -> str:
        bands = len(self.band_energies)
        cols = ["model", "instances", "accuracy", "latency_ms", "robustness_drop",
                "proof_band_agreement"]
        cols += [f"band{b}_energy" for b in range(bands)]
        cols += [f"band{b}_fraction" for b in range(bands)]
        return ",".join(cols)

    def csv_row(self) -> str:
        cells = [self.model, str(self.instances)]
        cells += [format(v, ".17g") for v in (self.accuracy, self.latency_ms,
                                              self.robustness_drop, self.proof_band_agreement)]
        cells += [format(v, ".17g") for v in self.band_energies]
        cells += [format(v, ".17g") for v in self.band_fractions]
        return ",".join(cells)


def evaluate(model, instances, config: EvalConfig | None = None) -> EvalReport:
    """Score a model over a task set: accuracy, latency, bands, robustness.

    Accuracy is the mean instance score. Latency is the median wall time
    of the model application alone, over latency_runs repeats per
    instance. Band columns attribute the output energy of every instance
    to the (shared-width) default three-band partition unless one is
    supplied.
    """
    cfg = config or EvalConfig()
    instances = list(instances)
    if not instances:
        raise ValueError("evaluation needs at least one instance")

    threads = resolve_threads(cfg.threads)

    def score(inst: TaskInstance) -> float:
        return instance_accuracy(model, inst, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, instances))
    else:
        scores = [score(inst) for inst in instances]
    accuracy = float(np.mean(scores))

    times = []
    reports = []
    agreement_pairs = []
    n_bands = cfg.partition.n_bands if cfg.partition is not None else 3
    energies = np.zeros(n_bands)
    for inst in instances:
        basis = eigendecompose(build_laplacian(inst.graph, cfg.variant))
        for _ in range(max(1, cfg.latency_runs)):
            start = time.perf_counter()
            y = _apply_model(model, basis, inst.beliefs, cfg)
            times.append(time.perf_counter() - start)
        part = cfg.partition if cfg.partition is not None else default_three_band(basis.lambda_max)
        report = band_energy(basis, np.asarray(y, dtype=float), part)
        reports.append(report)
        energies += report.energies
        if inst.allowed_bands:
            agreement_pairs.append((report, inst.allowed_bands))
    latency_ms = float(np.median(times) * 1000.0)
    total = float(energies.sum())
    fractions = energies / total if total > 0 else np.zeros_like(energies)

    if agreement_pairs and any(not r.degenerate for r, _ in agreement_pairs):
        agreement = proof_band_agreement(agreement_pairs)
    else:
        agreement = 1.0

    drop = 0.0
    if cfg.perturb is not None and cfg.perturb.magnitude > 0:
        drop = robustness_drop(model, instances, cfg.perturb, cfg)

    return EvalReport(model=model_label(model), instances=len(instances),
                      accuracy=accuracy, latency_ms=latency_ms,
                      robustness_drop=drop, proof_band_agreement=agreement,
                      band_energies=tuple(float(e) for e in energies),
                      band_fractions=tuple(float(f) for f in fractions))


def timing_sweep(kind: str = "edges", base_edges: int = 4000, base_order: int = 8,
                 doublings: int = 3, runs: int = 9, seed: int = 0) -> list[tuple[int, int, float]]:
    """Median sparse-apply time across doublings of edge count or order.

    Returns (order, edges, median_seconds) per point. The recurrence is
    O(order * edges), so either doubling should roughly double the time.
    """
    if kind not in ("edges", "order"):
        raise ValueError(f"kind must be 'edges' or 'order', got {kind!r}")
    if doublings < 1 or runs < 3:
        raise ValueError("need at least one doubling and three runs")
    rng = np.random.default_rng(seed)
    rows = []
    for step in range(doublings + 1):
        if kind == "edges":
            edges = base_edges * (2 ** step)
            order = base_order
        else:
            edges = base_edges
            order = base_order * (2 ** step)
        n = max(64, int(np.ceil(np.sqrt(4 * edges))))
        g = random_gnm(n, edges, np.random.default_rng(seed + step))
        lap = build_laplacian(g)
        estimate = estimate_lambda_max(lap)
        lt = scale_laplacian(lap, estimate.value)
        f = ft.fit_chebyshev(ft.diffusion(1.0), order, estimate.value)
        x = rng.standard_normal(n)
        ft.cheb_apply(f, lt, x)  # warm the caches before timing
        samples = []
        for _ in range(runs):
            start = time.perf_counter()
            ft.cheb_apply(f, lt, x)
            samples.append(time.perf_counter() - start)
        rows.append((order, edges, float(np.median(samples))))
    return rows
