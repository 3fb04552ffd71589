"""Command-line pipeline: synth, ingest, build-graphs, train, score, trace, eval.

Every subcommand writes fixed file names under ``--out``. Exit status is 0
on success, 1 for bad input (with ``ERROR <code>: <message>`` on stderr)
and 2 for anything unexpected.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import _io, __version__
from .config import RunConfig
from .detector import (
    Centroid,
    score_windows,
    select_threshold,
    trace_root_cause,
    train,
    write_trace_csv,
)
from .errors import ConfigError, ShapeError, TraceGraphError
from .evaluation import (
    auc,
    classification_metrics,
    evaluate_test,
    fit_detector,
    make_corpus,
    prepare_graphs,
    read_labeled_scores,
    run_scaling_sweep,
    run_weight_decay_sweep,
    write_labeled_scores,
)
from .graphs import (
    assign_windows,
    attach_histories,
    build_graphs,
    graph_from_dict,
    graph_to_dict,
    standardize_features,
)
from .model import ModelParams
from .spans import build_trees, read_spans, write_rejects, write_spans
from .synth import (
    apply_scaling,
    generate_topology,
    generate_traces,
    inject_anomaly,
    topology_to_dict,
    write_events,
    write_labels,
)

SPANS = "spans.ndjson"
REJECTS = "rejects.ndjson"
LABELS = "labels.csv"
EVENTS = "events.csv"
TOPOLOGY = "topology.json"
GRAPHS = "graphs.json"
MODEL = "model.json"
TRACE_CSV = "train_trace.csv"
REPORT = "report.json"
SCORES = "scores.csv"
SWEEP = "sweep.csv"
SWEEP_SUMMARY = "sweep_summary.csv"


def _out(args, name):
    return os.path.join(args.out, name)


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# file documents


def _write_graphs_doc(path, graphs, window_length, stats, history_T):
    _io.write_json(
        path,
        {
            "window_length": int(window_length),
            "history_T": int(history_T),
            "feature_stats": stats.to_dict(),
            "graphs": [graph_to_dict(g) for g in graphs],
        },
    )


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise TraceGraphError(f"{path}: {what} is not valid JSON ({exc.msg})") from None


def _read_graphs_doc(path):
    doc = _read_json(path, "graphs file")
    try:
        graphs = [graph_from_dict(d) for d in doc["graphs"]]
        return graphs, doc
    except (KeyError, TypeError) as exc:
        raise TraceGraphError(f"{path}: malformed graphs document ({exc})") from None


def _read_model_doc(path, cfg):
    doc = _read_json(path, "model file")
    try:
        params = ModelParams.from_dict(doc["params"])
        centroid = Centroid(doc["centroid"])
        threshold = float(doc["threshold"])
    except (KeyError, TypeError) as exc:
        raise TraceGraphError(f"{path}: malformed model document ({exc})") from None
    # explicit model dims in the run config must agree with the file
    for key in ("hidden_dim", "gru_hidden", "gcn_layers"):
        wanted = cfg.get(f"model.{key}")
        have = getattr(params.config, key)
        if cfg.explicit(f"model.{key}") and wanted != have:
            raise ShapeError(f"model file has {key}={have}, config requests {key}={wanted}")
    if centroid.mu.shape[0] != params.config.embed_dim:
        raise ShapeError(
            f"centroid has dimension {centroid.mu.shape[0]}, model embeds to {params.config.embed_dim}"
        )
    return params, centroid, threshold


def _check_history(graphs, params):
    lengths = {g.history_length for g in graphs if g.edge_series}
    for T in lengths:
        if T != params.config.history_T:
            raise ShapeError(f"graphs carry edge histories of length {T}, model expects {params.config.history_T}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg):
    wcfg = cfg.window()
    topo = generate_topology(cfg.topology())
    n_windows = cfg.get("synth.n_windows")
    spans = generate_traces(topo, cfg.get("synth.rate"), n_windows, cfg.trace_seed(), wcfg.window_length)
    labels = []
    anomaly = cfg.anomaly()
    if anomaly is not None:
        bad = [w for w in anomaly.affected_windows if not 0 <= w < n_windows]
        if bad:
            raise ConfigError(f"anomaly.affected_windows {sorted(bad)} outside 0..{n_windows - 1}")
        spans, labels = inject_anomaly(spans, topo, anomaly, wcfg.window_length)
    events = []
    scaling = cfg.scaling()
    if scaling.frequency > 0:
        spans, events = apply_scaling(spans, topo, scaling, wcfg.window_length, (0, n_windows - 1))
    write_spans(_out(args, SPANS), spans)
    write_labels(_out(args, LABELS), labels)
    write_events(_out(args, EVENTS), events)
    _io.write_json(_out(args, TOPOLOGY), topology_to_dict(topo))
    _log(f"synth: {len(spans)} spans, {len(labels)} labels, {len(events)} scaling events")


def cmd_ingest(args, cfg):
    spans, rejects = read_spans(args.input)
    _, failures = build_trees(spans)
    write_spans(_out(args, SPANS), spans)
    write_rejects(_out(args, REJECTS), rejects)
    _log(f"ingest: {len(spans)} spans accepted, {len(rejects)} lines rejected, {len(failures)} malformed traces")
    for trace_id, err in failures[:5]:
        _log(f"  trace {trace_id}: {err}")


def cmd_build_graphs(args, cfg):
    wcfg = cfg.window()
    spans, rejects = read_spans(args.input)
    if rejects:
        _log(f"build-graphs: skipping {len(rejects)} malformed lines")
    trees, failures = build_trees(spans)
    if failures:
        _log(f"build-graphs: skipping {len(failures)} malformed traces")
    if not trees:
        raise TraceGraphError(f"{args.input}: no usable traces")
    raw = build_graphs(trees, wcfg)
    n_train = cfg.get("detect.n_train") or len(raw)
    _, stats = standardize_features(raw[:n_train])
    graphs, _ = standardize_features(raw, stats)
    graphs = attach_histories(graphs, wcfg.history_T)
    _write_graphs_doc(_out(args, GRAPHS), graphs, wcfg.window_length, stats, wcfg.history_T)
    _log(f"build-graphs: {len(graphs)} windows, stats fitted on the first {n_train}")


def cmd_train(args, cfg):
    graphs, doc = _read_graphs_doc(args.graphs)
    mcfg, tcfg = cfg.model(), cfg.train()
    n_train = cfg.get("detect.n_train") or len(graphs)
    train_graphs = graphs[:n_train]
    _check_history(train_graphs, ModelParams.init(mcfg))
    result = train(train_graphs, mcfg, tcfg)
    reports = score_windows(train_graphs, result.params, result.centroid, 0.0)
    threshold = select_threshold([v for r in reports for v in r.node_scores.values()], cfg.get("detect.threshold_q"))
    _io.write_json(
        _out(args, MODEL),
        {
            "params": result.params.to_dict(),
            "centroid": result.centroid.mu.tolist(),
            "threshold": threshold,
            "feature_stats": doc.get("feature_stats"),
            "window_length": doc.get("window_length"),
        },
    )
    write_trace_csv(_out(args, TRACE_CSV), result.trace)
    first, last = result.trace[0], result.trace[-1]
    _log(f"train: {tcfg.epochs} epochs, loss {first.loss:.6g} -> {last.loss:.6g}, threshold {threshold:.6g}")


def cmd_score(args, cfg):
    graphs, _ = _read_graphs_doc(args.graphs)
    params, centroid, threshold = _read_model_doc(args.model, cfg)
    if args.threshold is not None:
        threshold = args.threshold
    _check_history(graphs, params)
    if args.window is not None:
        graphs = [g for g in graphs if g.window_index == args.window]
        if not graphs:
            raise TraceGraphError(f"window {args.window} not in {args.graphs}")
    reports = score_windows(graphs, params, centroid, threshold)
    _io.write_json(_out(args, REPORT), {"threshold": threshold, "windows": [r.to_dict() for r in reports]})
    flagged = sum(len(r.flagged_nodes) for r in reports)
    _log(f"score: {len(reports)} windows, {flagged} flagged nodes")


def cmd_trace(args, cfg):
    graphs, doc = _read_graphs_doc(args.graphs)
    params, centroid, threshold = _read_model_doc(args.model, cfg)
    if args.threshold is not None:
        threshold = args.threshold
    _check_history(graphs, params)
    if not graphs:
        raise TraceGraphError(f"{args.graphs}: no windows")
    window = graphs[-1].window_index if args.window is None else args.window
    graph = next((g for g in graphs if g.window_index == window), None)
    if graph is None:
        raise TraceGraphError(f"window {window} not in {args.graphs}")
    window_length = doc.get("window_length") or cfg.get("window.window_length")
    spans, _ = read_spans(args.spans)
    trees, _ = build_trees(spans)
    trees = assign_windows(trees, window_length).get(window, [])
    report = trace_root_cause(graph, trees, params, centroid, threshold, cfg.get("detect.top_k"))
    _io.write_json(_out(args, REPORT), report.to_dict())
    top = report.ranked_paths[0] if report.ranked_paths else None
    _log(f"trace: window {window}, {len(report.ranked_paths)} paths" + (f", top {'>'.join(top[0].services)}" if top else ""))


def _metrics_doc(rows, threshold):
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    out = classification_metrics(scores, labels, threshold)
    out["auc"] = auc(scores, labels)
    out["threshold"] = threshold
    return out


def cmd_eval_auc(args, cfg):
    if args.scores is not None:
        rows = read_labeled_scores(args.scores)
        if not rows:
            raise TraceGraphError(f"{args.scores}: no rows")
        threshold = args.threshold
        if threshold is None:
            threshold = select_threshold([r.score for r in rows if not r.label] or [r.score for r in rows], cfg.get("detect.threshold_q"))
        doc = _metrics_doc(rows, threshold)
        _io.write_json(_out(args, REPORT), doc)
        _log(f"eval auc: auc {doc['auc']:.4f} f1 {doc['f1']:.4f}")
        return
    spec = cfg.benchmark()
    seeds = args.seeds or cfg.get("eval.seeds")
    per_seed, all_rows = [], []
    for seed in seeds:
        corpus = make_corpus(spec, seed)
        graphs, _ = prepare_graphs(spec, corpus.spans)
        fitted = fit_detector(spec, graphs, spec.train)
        metrics, rows = evaluate_test(spec, graphs, corpus.labels, fitted)
        metrics.update(seed=seed, threshold=fitted.threshold)
        per_seed.append(metrics)
        all_rows.extend(rows)
        _log(f"eval auc: seed {seed} auc {metrics['auc']:.4f} f1 {metrics['f1']:.4f}")
    write_labeled_scores(_out(args, SCORES), all_rows)
    mean = {k: float(np.mean([m[k] for m in per_seed])) for k in ("auc", "acc", "recall", "f1")}
    _io.write_json(_out(args, REPORT), {"seeds": per_seed, "mean": mean})
    _log(f"eval auc: mean auc {mean['auc']:.4f} f1 {mean['f1']:.4f}")


def _run_sweep(args, cfg, fn, grid_key):
    spec = cfg.benchmark()
    grid = args.grid or cfg.get(grid_key)
    seeds = args.seeds or cfg.get("eval.seeds")

    def progress(row):
        _log(f"{fn.__name__}: value {row['param_value']:g} seed {row['seed']} f1 {row['f1']:.4f} auc {row['auc']:.4f}")

    result = fn(spec, grid, seeds, progress=progress)
    result.write_csv(_out(args, SWEEP))
    result.write_summary_csv(_out(args, SWEEP_SUMMARY))


def cmd_eval_sweep_wd(args, cfg):
    _run_sweep(args, cfg, run_weight_decay_sweep, "eval.wd_grid")


def cmd_eval_sweep_scaling(args, cfg):
    _run_sweep(args, cfg, run_scaling_sweep, "eval.scaling_grid")


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", metavar="FILE", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key by dotted path, e.g. train.epochs=5 (repeatable)",
    )


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    # one stderr line, same shape as every other input error
    def error(self, message):
        _log(f"ERROR usage: {message} (see '{self.prog} --help')")
        sys.exit(1)


def build_parser():
    parser = _Parser(prog="tracegraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tracegraph {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic span corpus with labels")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate an NDJSON span file")
    _common(p)
    p.add_argument("--input", required=True, metavar="FILE", help="NDJSON spans")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-graphs", help="aggregate spans into standardised window graphs")
    _common(p)
    p.add_argument("--input", required=True, metavar="FILE", help="NDJSON spans")
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", help="fit the encoder and centroid on normal windows")
    _common(p)
    p.add_argument("--graphs", required=True, metavar="FILE", help="graphs.json from build-graphs")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("score", cmd_score, "score every node of every window"),
        ("trace", cmd_trace, "rank root-cause call paths for one window"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--graphs", required=True, metavar="FILE", help="graphs.json from build-graphs")
        p.add_argument("--model", required=True, metavar="FILE", help="model.json from train")
        p.add_argument("--window", type=int, metavar="W", help="window index (trace default: last)")
        p.add_argument("--threshold", type=float, help="override the stored alert threshold")
        if name == "trace":
            p.add_argument("--spans", required=True, metavar="FILE", help="NDJSON spans for the call paths")
        p.set_defaults(func=func)

    ev = sub.add_parser("eval", help="metrics and sensitivity sweeps")
    ev_sub = ev.add_subparsers(dest="eval_command", metavar="EVAL", parser_class=_Parser)
    ev_sub.required = True

    p = ev_sub.add_parser("auc", help="AUC/ACC/recall/F1 from a score file or the synthetic benchmark")
    _common(p)
    p.add_argument("--scores", metavar="FILE", help="CSV window_index,service,score,label; omit to run the benchmark")
    p.add_argument("--threshold", type=float, help="alert threshold for a score file")
    p.add_argument("--seeds", type=_ints, metavar="LIST", help="benchmark seeds, e.g. 0,1,2")
    p.set_defaults(func=cmd_eval_auc)

    for name, func, what in (
        ("sweep-wd", cmd_eval_sweep_wd, "weight decay values"),
        ("sweep-scaling", cmd_eval_sweep_scaling, "scaling frequencies (events per hour)"),
    ):
        p = ev_sub.add_parser(name, help=f"F1 across {what}")
        _common(p)
        p.add_argument("--grid", type=_floats, metavar="LIST", help=f"comma-separated {what}")
        p.add_argument("--seeds", type=_ints, metavar="LIST", help="comma-separated seeds")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        os.makedirs(args.out, exist_ok=True)
        args.func(args, cfg)
    except TraceGraphError as exc:
        _log(f"ERROR {exc.code}: {' '.join(str(exc).split())}")
        return 1
    except OSError as exc:
        _log(f"ERROR io: {exc.strerror or exc}: {exc.filename}")
        return 1
    except Exception as exc:  # noqa: BLE001
        _log(f"ERROR internal: {type(exc).__name__}: {' '.join(str(exc).split())}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
