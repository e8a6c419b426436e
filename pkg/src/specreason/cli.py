"""Command line front end.

Every subcommand reads plain-text inputs, writes its artifacts into
--out-dir with atomic replaces, and drops a manifest.json recording the
arguments and SHA-256 digests of the inputs. Outputs are byte-identical
across re-runs with the same inputs and seeds; wall-clock latency
columns are the one documented exception.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, filters as ft, graph as gr, rules as rl, taskgen as tg, training as tr


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: list) -> None:
    # out_dir stays out of the manifest so runs into different directories
    # compare byte-identical
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out_dir")}
    payload = {
        "command": command,
        "arguments": arguments,
        "inputs": {str(p): _sha256(p) for p in sorted(str(q) for q in inputs)},
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_beliefs(path) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise ValueError(f"{path}: line {no}: expected one float, got {line!r}") from None
    if not values:
        raise ValueError(f"{path}: no belief values found")
    return np.asarray(values, dtype=float)


def _beliefs_text(values: np.ndarray) -> str:
    return "\n".join(_fmt(v) for v in values) + "\n"


def _add_response_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--response", choices=ft.ANALYTIC_KINDS,
                        help="analytic response template")
    parser.add_argument("--tau", type=float, default=1.0, help="diffusion time scale")
    parser.add_argument("--beta", type=float, default=1.0, help="highpass knee")
    parser.add_argument("--center", type=float, default=1.0, help="bandpass center")
    parser.add_argument("--width", type=float, default=0.5, help="bandpass width")
    parser.add_argument("--coeffs", type=str, default="",
                        help="comma-separated polynomial coefficients")


def _response_from_args(args) -> ft.AnalyticResponse:
    kind = args.response
    if kind is None:
        raise ValueError("an analytic --response is required here")
    if kind == "diffusion":
        return ft.diffusion(args.tau)
    if kind == "highpass":
        return ft.highpass(args.beta)
    if kind == "gaussian_bandpass":
        return ft.gaussian_bandpass(args.center, args.width)
    if kind == "identity":
        return ft.identity()
    coeffs = [float(c) for c in args.coeffs.split(",") if c.strip()]
    return ft.polynomial(*coeffs)


def _load_model(args):
    if getattr(args, "model_filter", None):
        return ft.load_filter(args.model_filter), [args.model_filter]
    if getattr(args, "rules", None):
        return rl.load_templates(args.rules), [args.rules]
    return _response_from_args(args), []


def _load_operator(args):
    g = gr.load_graph(args.graph, kind=getattr(args, "graph_kind", "unsigned"))
    lap = gr.build_laplacian(g, variant=args.variant)
    estimate = gr.estimate_lambda_max(lap, seed=args.seed)
    return g, lap, estimate


def _partition_for(basis: gr.SpectralBasis, bands: int) -> analysis.BandPartition:
    if bands < 1:
        raise ValueError("need at least one band")
    top = basis.lambda_max if basis.lambda_max > 0 else 1.0
    return analysis.BandPartition(edges=np.linspace(0.0, top, bands + 1))


def cmd_fit(args) -> None:
    out = _out_dir(args)
    _, lap, estimate = _load_operator(args)
    response = _response_from_args(args)
    fitted = ft.fit_chebyshev(response, args.order, estimate.value,
                              quadrature_nodes=args.quad_nodes)
    error = ft.fit_grid_error(fitted, response)
    _atomic_write(out / "filter.json", fitted.to_json() + "\n")
    _write_manifest(out, "fit", args, [args.graph])
    print(f"fit order={args.order} lambda_max={_fmt(estimate.value)} grid_error={error:.3e}")


def cmd_infer(args) -> None:
    out = _out_dir(args)
    g, lap, estimate = _load_operator(args)
    f = ft.load_filter(args.filter)
    if abs(f.lambda_max - estimate.value) > 1e-6 * max(1.0, f.lambda_max):
        raise ValueError(
            f"filter lambda_max {f.lambda_max} does not match this graph's estimate "
            f"{estimate.value}; refit the filter on this graph")
    lt = gr.scale_laplacian(lap, f.lambda_max)
    y = ft.cheb_apply(f, lt, _read_beliefs(args.beliefs))
    predicates = rl.project_predicates(y, threshold=args.threshold, mode=args.mode,
                                       temperature=args.temperature)

    lines = ["node,belief,soft,hard"]
    for i, value in enumerate(y):
        soft = _fmt(predicates.soft[i]) if predicates.soft is not None else ""
        lines.append(f"{i},{_fmt(value)},{soft},{int(predicates.hard[i])}")
    _atomic_write(out / "predicates.csv", "\n".join(lines) + "\n")

    inputs = [args.graph, args.filter, args.beliefs]
    if args.rulebase:
        rb = rl.load_rulebase(args.rulebase)
        if len(rb.atoms) != g.node_count:
            raise ValueError(
                f"rulebase names {len(rb.atoms)} atoms but the graph has {g.node_count} nodes")
        facts = {rb.atoms[i] for i in range(g.node_count) if predicates.hard[i]}
        closure = rl.forward_chain(rb, facts)
        _atomic_write(out / "closure.txt", "\n".join(sorted(closure)) + "\n")
        inputs.append(args.rulebase)

    if g.node_count <= gr.DENSE_CAP:
        basis = gr.eigendecompose(lap)
        if basis.lambda_max > 0:
            report = analysis.band_energy(basis, np.asarray(y, dtype=float),
                                          analysis.default_three_band(basis.lambda_max))
            frac = ",".join(_fmt(v) for v in report.fractions)
            print(f"band_fractions={frac}")
    _write_manifest(out, "infer", args, inputs)
    print(f"infer nodes={g.node_count} facts={int(predicates.hard.sum())}")


def cmd_train(args) -> None:
    out = _out_dir(args)
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    order = int(config.get("order", 8))
    seed = int(config.get("seed", args.seed))
    examples = int(config.get("examples", 8))

    args.seed = seed
    _, lap, estimate = _load_operator(args)
    lt = gr.scale_laplacian(lap, estimate.value)

    teacher_spec = config.get("teacher", {"kind": "diffusion", "params": [1.0]})
    teacher_response = ft.AnalyticResponse(kind=teacher_spec["kind"],
                                           params=tuple(teacher_spec.get("params", ())))
    teacher = ft.fit_chebyshev(teacher_response, order, estimate.value)

    rng = np.random.default_rng(seed)
    data = []
    for _ in range(examples):
        x = rng.standard_normal(lap.node_count)
        data.append(tr.TrainExample(x=x, target=np.asarray(ft.cheb_apply(teacher, lt, x))))

    penalties = config.get("penalties", {})
    loss = tr.LossSpec(kind=config.get("loss", "mse"),
                       penalties=tr.PenaltyWeights(
                           proof=float(penalties.get("proof", 0.0)),
                           rule_consistency=float(penalties.get("rule_consistency", 0.0)),
                           transfer=float(penalties.get("transfer", 0.0))))
    schedule = None
    if config.get("curriculum"):
        schedule = tr.CurriculumSchedule(stages=tuple((int(e), int(k))
                                                      for e, k in config["curriculum"]))
    context = None
    if loss.penalties.proof > 0 or loss.penalties.transfer > 0:
        basis = gr.eigendecompose(lap)
        context = tr.PenaltyContext(
            basis=basis,
            partition=analysis.default_three_band(basis.lambda_max),
            allowed_bands=tuple(config.get("allowed_bands", (0,))),
            transfer_reference=np.zeros(lap.node_count))

    train_cfg = tr.TrainConfig(learning_rate=float(config.get("learning_rate", 0.05)),
                               epochs=int(config.get("epochs", 100)),
                               clip_norm=config.get("clip_norm", 10.0))
    student = ft.ChebyshevFilter(theta=np.zeros(order + 1), lambda_max=estimate.value)
    result = tr.train(student, lt, data, loss, schedule=schedule, config=train_cfg,
                      context=context, seed=seed)

    _atomic_write(out / "filter.json", result.model.to_json() + "\n")
    _atomic_write(out / "history.csv", tr.history_to_csv(result.history))
    _write_manifest(out, "train", args, [args.graph, args.config])
    first, last = result.history[0][1], result.history[-1][1]
    print(f"train epochs={len(result.history)} initial_loss={first:.6e} final_loss={last:.6e}")


def cmd_gen(args) -> None:
    out = _out_dir(args)
    if args.kind == "community":
        inst = tg.gen_community_task(n=args.n, intra_p=args.intra_p, inter_p=args.inter_p,
                                     seed_fraction=args.seed_fraction, noise=args.noise,
                                     seed=args.seed)
    elif args.kind == "contradiction":
        inst = tg.gen_contradiction_task(n=args.n, base_p=args.base_p, planted=args.planted,
                                         flip_magnitude=args.flip_magnitude, seed=args.seed)
    else:
        inst = tg.gen_chain_task(depth=args.depth, branching=args.branching, seed=args.seed)
    tg.save_task(inst, out / "task.json")
    if inst.rulebase is not None:
        rl.save_rulebase(inst.rulebase, out / "rules.json")
    _write_manifest(out, "gen", args, [])
    print(f"gen kind={args.kind} nodes={inst.graph.node_count} edges={inst.graph.edge_count}")


def cmd_eval(args) -> None:
    out = _out_dir(args)
    model, extra_inputs = _load_model(args)
    instances = [tg.load_task(p) for p in args.tasks]
    perturb = None
    if args.perturb_magnitude > 0:
        perturb = analysis.PerturbConfig(band=args.perturb_band,
                                         magnitude=args.perturb_magnitude,
                                         seed=args.perturb_seed)
    cfg = tg.EvalConfig(threshold=args.threshold, variant=args.variant,
                        latency_runs=args.latency_runs, perturb=perturb,
                        threads=args.threads)
    report = tg.evaluate(model, instances, cfg)
    _atomic_write(out / "eval.csv", report.csv_header() + "\n" + report.csv_row() + "\n")
    _write_manifest(out, "eval", args, list(args.tasks) + extra_inputs)
    print(f"eval model={report.model} accuracy={report.accuracy:.4f} "
          f"agreement={report.proof_band_agreement:.4f}")


def cmd_attribute(args) -> None:
    out = _out_dir(args)
    g, lap, _ = _load_operator(args)
    model, extra_inputs = _load_model(args)
    basis = gr.eigendecompose(lap)
    x = _read_beliefs(args.beliefs)
    y = np.asarray(ft.dense_filter_apply(basis, model if not isinstance(model, rl.RuleSet)
                                         else rl.mixture_response(model), x), dtype=float)
    partition = _partition_for(basis, args.bands)
    report = analysis.band_energy(basis, y, partition)
    response = model if not isinstance(model, rl.RuleSet) else rl.mixture_response(model)
    top = basis.lambda_max if basis.lambda_max > 0 else 1.0
    cert = analysis.robustness_certificate(response, top)

    # one row per instance: partition edges, then energies, fractions, bound
    header = ["instance"]
    header += [f"edge{b}" for b in range(partition.n_bands + 1)]
    header += [f"band{b}_energy" for b in range(partition.n_bands)]
    header += [f"band{b}_fraction" for b in range(partition.n_bands)]
    header.append("bound")
    cells = ["0"]
    cells += [_fmt(e) for e in partition.edges]
    cells += [_fmt(v) for v in report.energies]
    cells += [_fmt(v) for v in report.fractions]
    cells.append(_fmt(cert.bound))
    _atomic_write(out / "attribution.csv", ",".join(header) + "\n" + ",".join(cells) + "\n")
    _write_manifest(out, "attribute", args, [args.graph, args.beliefs] + extra_inputs)
    print(f"attribute bands={partition.n_bands} bound={_fmt(cert.bound)}")


def cmd_perturb(args) -> None:
    out = _out_dir(args)
    g, lap, _ = _load_operator(args)
    basis = gr.eigendecompose(lap)
    x = _read_beliefs(args.beliefs)
    partition = _partition_for(basis, args.bands)
    perturbed = analysis.spectral_perturb(basis, x, args.band, args.magnitude,
                                          partition=partition, seed=args.seed)
    before = analysis.band_energy(basis, x, partition)
    after = analysis.band_energy(basis, np.asarray(perturbed, dtype=float), partition)
    _atomic_write(out / "perturbed.txt", _beliefs_text(np.asarray(perturbed, dtype=float)))
    lines = ["band,clean_energy,perturbed_energy"]
    for b in range(partition.n_bands):
        lines.append(f"{b},{_fmt(before.energies[b])},{_fmt(after.energies[b])}")
    _atomic_write(out / "perturb.csv", "\n".join(lines) + "\n")
    _write_manifest(out, "perturb", args, [args.graph, args.beliefs])
    print(f"perturb band={args.band} magnitude={_fmt(args.magnitude)}")


def cmd_transfer(args) -> None:
    out = _out_dir(args)
    profiles = []
    for graph_path, belief_path in ((args.source_graph, args.source_beliefs),
                                    (args.target_graph, args.target_beliefs)):
        g = gr.load_graph(graph_path)
        lap = gr.build_laplacian(g, variant=args.variant)
        basis = gr.eigendecompose(lap)
        x = _read_beliefs(belief_path)
        xhat = np.asarray(gr.gft(basis, x), dtype=float)
        profiles.append(analysis.cospectral_profile(basis.eigenvalues, xhat, points=args.points))
    loss = analysis.cospectral_loss(profiles[0], profiles[1])
    lines = ["index,source,target"]
    for i, (a, b) in enumerate(zip(profiles[0], profiles[1])):
        lines.append(f"{i},{_fmt(a)},{_fmt(b)}")
    _atomic_write(out / "profiles.csv", "\n".join(lines) + "\n")
    _atomic_write(out / "transfer.csv",
                  "points,profile_loss\n" + f"{args.points},{_fmt(loss)}\n")
    _write_manifest(out, "transfer", args, [args.source_graph, args.source_beliefs,
                                            args.target_graph, args.target_beliefs])
    print(f"transfer points={args.points} loss={_fmt(loss)}")


def cmd_bench(args) -> None:
    out = _out_dir(args)
    rows = tg.timing_sweep(kind=args.sweep, base_edges=args.base_edges,
                           base_order=args.base_order, doublings=args.doublings,
                           runs=args.runs, seed=args.seed)
    lines = ["sweep,order,edges,median_seconds,ratio"]
    previous = None
    for order, edges, median in rows:
        ratio = "" if previous is None else _fmt(median / previous)
        lines.append(f"{args.sweep},{order},{edges},{_fmt(median)},{ratio}")
        previous = median
    _atomic_write(out / "bench.csv", "\n".join(lines) + "\n")
    _write_manifest(out, "bench", args, [])
    print(f"bench sweep={args.sweep} points={len(rows)}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specreason",
                                     description="Spectral belief filtering with symbolic closure")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, graph=True):
        if graph:
            p.add_argument("--graph", required=True, help="edge-list file")
            p.add_argument("--variant", default="combinatorial", choices=gr.VARIANTS)
            p.add_argument("--graph-kind", default="unsigned", choices=gr.GRAPH_KINDS)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", help="fit a Chebyshev filter to an analytic response")
    common(p)
    _add_response_args(p)
    p.add_argument("--order", type=int, default=16)
    p.add_argument("--quad-nodes", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="filter beliefs and project predicates")
    common(p)
    p.add_argument("--filter", required=True, help="filter JSON file")
    p.add_argument("--beliefs", required=True, help="belief vector file")
    p.add_argument("--rulebase", default=None, help="Horn rulebase JSON")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--mode", default="hard", choices=("hard", "soft"))
    p.add_argument("--temperature", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train a filter from a JSON config")
    common(p)
    p.add_argument("--config", required=True, help="training config JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen", help="generate a synthetic task instance")
    common(p, graph=False)
    p.add_argument("--kind", required=True, choices=("community", "contradiction", "chain"))
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--intra-p", type=float, default=0.08)
    p.add_argument("--inter-p", type=float, default=0.005)
    p.add_argument("--seed-fraction", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--planted", type=int, default=10)
    p.add_argument("--base-p", type=float, default=0.05)
    p.add_argument("--flip-magnitude", type=float, default=3.0)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--branching", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="score a model over generated tasks")
    common(p, graph=False)
    p.add_argument("--tasks", nargs="+", required=True, help="task JSON files")
    p.add_argument("--model-filter", default=None, help="filter JSON to evaluate")
    p.add_argument("--rules", default=None, help="rule template JSON to evaluate")
    _add_response_args(p)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--variant", default="combinatorial", choices=gr.VARIANTS)
    p.add_argument("--latency-runs", type=int, default=3)
    p.add_argument("--perturb-band", type=int, default=2)
    p.add_argument("--perturb-magnitude", type=float, default=0.0)
    p.add_argument("--perturb-seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attribute", help="band energy attribution and certificate")
    common(p)
    p.add_argument("--beliefs", required=True)
    p.add_argument("--model-filter", default=None)
    p.add_argument("--rules", default=None)
    _add_response_args(p)
    p.add_argument("--bands", type=int, default=3)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("perturb", help="inject band-limited spectral noise")
    common(p)
    p.add_argument("--beliefs", required=True)
    p.add_argument("--band", type=int, default=2)
    p.add_argument("--magnitude", type=float, default=0.1)
    p.add_argument("--bands", type=int, default=3)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("transfer", help="co-spectral profile comparison across graphs")
    common(p, graph=False)
    p.add_argument("--source-graph", required=True)
    p.add_argument("--source-beliefs", required=True)
    p.add_argument("--target-graph", required=True)
    p.add_argument("--target-beliefs", required=True)
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--variant", default="combinatorial", choices=gr.VARIANTS)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bench", help="timing sweep of the sparse recurrence")
    common(p, graph=False)
    p.add_argument("--sweep", default="edges", choices=("edges", "order"))
    p.add_argument("--base-edges", type=int, default=4000)
    p.add_argument("--base-order", type=int, default=8)
    p.add_argument("--doublings", type=int, default=3)
    p.add_argument("--runs", type=int, default=9)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, RuntimeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
