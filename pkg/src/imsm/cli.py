"""Command-line entry points.

Every subcommand reads optional defaults from a JSON config (a section named
after the command, plus top-level ``seed``, ``threads`` and ``out``) and lets
command-line flags override them.  States, time steps and matrix indices are
1-based in every file written here.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical or
estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import causal, datagen, estimation, inference, io, metrics
from .errors import (
    ConfigError,
    DimensionError,
    EnumerationTooLargeError,
    EstimationError,
    InvariantError,
    ModelFormatError,
    MsmError,
    NonFiniteError,
    RankDeficiencyError,
    SchemaVersionError,
    SingularTransformError,
    StateIndexError,
)
from .io import dumps, fmt

log = logging.getLogger("imsm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (EstimationError, NonFiniteError, SingularTransformError, RankDeficiencyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    g = p.add_argument_group("global")
    g.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    g.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    g.add_argument("--threads", type=int, help="worker cap for batch inference")
    g.add_argument("--out", type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="imsm", description="Identifiable Markov switching models")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="synthetic ground truth and dataset")
    _add_common(p)
    p.add_argument("--K", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--kind", choices=["linear", "polynomial", "mlp", "lc_mlp"])
    p.add_argument("--activation", choices=["cosine", "softplus", "leaky_relu"])
    p.add_argument("--degree", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--interactions", type=int)
    p.add_argument("--p-stay", type=float, dest="p_stay")
    p.add_argument("--init-mean-scale", type=float, dest="init_mean_scale")
    p.add_argument("--init-cov-scale", type=float, dest="init_cov_scale")
    p.add_argument("--noise-scale", type=float, dest="noise_scale")
    p.add_argument("--gain", type=float)
    p.add_argument("--min-edge-weight", type=float, dest="min_edge_weight")
    p.add_argument("--emission-n", type=int, dest="emission_n", help="observation dimension of a Leaky ReLU emission")
    p.add_argument("--emission-hidden", type=int, dest="emission_hidden")

    p = sub.add_parser("fit", help="fit an MSM by (generalised) EM")
    _add_common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--K", type=int)
    p.add_argument("--kind", dest="transition_kind", choices=["linear", "polynomial", "mlp", "lc_mlp"])
    p.add_argument("--degree", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--activation", choices=["cosine", "softplus", "leaky_relu"])
    p.add_argument("--interactions", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--max-lr-decays", type=int, dest="max_lr_decays")
    p.add_argument("--patience", type=int)
    p.add_argument("--plateau-tol", type=float, dest="plateau_tol")
    p.add_argument("--restarts", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--cov-floor", type=float, dest="cov_floor")
    p.add_argument("--full-cov", action="store_const", const=False, dest="diagonal", help="full covariance M-steps")

    p = sub.add_parser("eval", help="compare a fitted model with a reference")
    _add_common(p)
    p.add_argument("--true", type=Path, dest="true_model")
    p.add_argument("--est", type=Path, dest="est_model")
    p.add_argument("--data", type=Path, help="labelled and/or held-out sequences")
    p.add_argument("--match", choices=["auto", "exhaustive", "greedy"])
    p.add_argument("--samples", type=int, help="Monte-Carlo sample count")

    p = sub.add_parser("segment", help="posteriors and MAP segmentation")
    _add_common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--no-xi", action="store_const", const=False, dest="xi", help="skip the pairwise posterior dump")

    p = sub.add_parser("graph", help="regime-dependent causal graphs")
    _add_common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--tau", type=float)
    p.add_argument("--true", type=Path, dest="true_model", help="reference model for edge F1")

    p = sub.add_parser("ingest", help="normalise an external CSV into a sequence file")
    _add_common(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--no-normalize", action="store_const", const=False, dest="normalize")

    p = sub.add_parser("resolve-affine", help="fit an affine map between matched latents")
    _add_common(p)
    p.add_argument("--pairs", type=Path, help="CSV rows [source | target]")
    p.add_argument("--model1", type=Path, help="model living in target coordinates")
    p.add_argument("--model2", type=Path, help="model living in source coordinates")
    p.add_argument("--samples", type=int)
    return parser


GLOBAL_KEYS = ("seed", "threads", "out")


def _merge(args) -> dict:
    """Defaults < config section < flags."""
    cfg = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update({k: doc[k] for k in GLOBAL_KEYS if k in doc})
        section = doc.get(args.command, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {args.command!r} must be an object")
        cfg.update(section)
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = v
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out", "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join(missing))


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _seed(cfg) -> int:
    s = int(cfg["seed"])
    if not 0 <= s < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return s


def _pick(cfg, cls, rename=None):
    names = set(cls.__dataclass_fields__)
    rename = rename or {}
    out = {}
    for k, v in cfg.items():
        k = rename.get(k, k)
        if k in names:
            out[k] = v
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _metric_row(name, value, sigma=None, detail=""):
    return [name, fmt(value), "" if sigma is None else fmt(sigma), detail]


def _perm_text(perm):
    return " ".join(str(int(p) + 1) for p in perm)


def cmd_generate(cfg) -> int:
    _require(cfg, "seed")
    opts = _pick(cfg, datagen.SynthSpec)
    opts["rng_seed"] = _seed(cfg)
    if cfg.get("emission_n") is not None:
        em = {"n": int(cfg["emission_n"])}
        if cfg.get("emission_hidden") is not None:
            em["hidden"] = int(cfg["emission_hidden"])
        opts["emission"] = em
    spec = datagen.SynthSpec(**opts)
    out = _out_dir(cfg)
    model = datagen.make_ground_truth(spec)
    data = datagen.make_dataset(model, spec)
    io.save_model(model, out / "truth.json")
    io.write_sequences(data, out / "data.csv")
    if spec.emission is not None:
        net = datagen.make_emission(spec.m, spec.emission, spec.seeds()[2])
        obs = datagen.emit_observations(data, net)
        io.write_sequences(obs, out / "observations.csv")
        (out / "emission.json").write_text(dumps(net.to_dict()) + "\n")
    s = data.labels
    rate = float(np.mean(s[:, 1:] != s[:, :-1])) if spec.T > 1 else 0.0
    print(f"K={spec.K} m={spec.m} T={spec.T} N={spec.N} switch_rate={rate:.4f}")
    return EXIT_OK


def _load_data(cfg, key="data") -> io.SequenceBatch:
    return io.read_sequences(_existing(cfg[key], "data file"))


def cmd_fit(cfg) -> int:
    _require(cfg, "seed", "data", "K")
    data = _load_data(cfg)
    opts = _pick(cfg, estimation.FitConfig, {"kind": "transition_kind", "lr": "learning_rate"})
    opts["rng_seed"] = _seed(cfg)
    opts.pop("m", None)
    config = estimation.FitConfig(**opts)
    report = estimation.fit(data, config)
    out = _out_dir(cfg)
    io.save_model(report.model, out / "model.json")
    _write_csv(
        out / "trace.csv",
        ["epoch", "mean_loglik", "lr"],
        [[e + 1, fmt(v), fmt(lr)] for e, (v, lr) in enumerate(zip(report.trace, report.lr_trace))],
    )
    meta = {
        "restart": report.restart + 1,
        "restart_scores": [float(v) for v in report.restart_scores],
        "epochs": report.epochs,
        "reason": report.reason,
        "events": report.events,
        "config": {k: v for k, v in vars(config).items() if k != "threads"},
    }
    (out / "fit_report.json").write_text(dumps(meta) + "\n")
    final = report.trace[-1] if report.trace else report.restart_scores[report.restart]
    print(f"restart={report.restart + 1} epochs={report.epochs} reason={report.reason} mean_loglik={final:.6f}")
    return EXIT_OK


def evaluate(true_model, est_model, data=None, match="auto", n_samples=metrics.MC_SAMPLES, threads=None):
    """Metric rows ``[metric, value, sigma, detail]`` as written by ``eval``."""
    if true_model.K != est_model.K:
        raise DimensionError(f"K mismatch: {true_model.K} vs {est_model.K}")
    res = metrics.model_error(true_model, est_model, mode=match, n_samples=n_samples)
    rows = [_metric_row("transition_l2", res.error, res.distances.std(), f"{res.method}:{_perm_text(res.permutation)}")]
    for i, d in enumerate(res.distances):
        rows.append(_metric_row(f"transition_l2_{i + 1}", d, None, f"est={res.permutation[i] + 1}"))
    if data is not None:
        post = inference.forward_backward(est_model, data.data, threads=threads)
        rows.append(_metric_row("heldout_mean_loglik", post.loglik.mean(), post.loglik.std(), f"B={data.B} T={data.T}"))
        if data.labels is not None:
            pred = inference.segment(post)
            f1, perm = metrics.segmentation_f1(data.labels, pred, est_model.K, mode=match)
            rows.append(_metric_row("segmentation_f1", f1, None, _perm_text(perm)))
    return rows


def cmd_eval(cfg) -> int:
    _require(cfg, "true_model", "est_model")
    true_model = io.load_model(_existing(cfg["true_model"], "model file"))
    est_model = io.load_model(_existing(cfg["est_model"], "model file"))
    data = _load_data(cfg) if cfg.get("data") else None
    rows = evaluate(
        true_model,
        est_model,
        data,
        match=cfg.get("match", "auto"),
        n_samples=int(cfg.get("samples", metrics.MC_SAMPLES)),
        threads=cfg.get("threads"),
    )
    out = _out_dir(cfg)
    _write_csv(out / "metrics.csv", ["metric", "value", "sigma", "detail"], rows)
    for r in rows:
        print(",".join(r))
    return EXIT_OK


def _month(date):
    parts = str(date).replace("/", "-").split("-")
    if len(parts) >= 2 and parts[1].isdigit():
        return int(parts[1])
    return None


def month_report(dates, gamma):
    """Rows ``[month, k, mean_gamma, count]`` averaging posteriors by calendar month."""
    months = np.array([_month(d) for d in np.ravel(dates)], dtype=object)
    g = np.asarray(gamma).reshape(-1, gamma.shape[-1])
    rows = []
    for mo in sorted({m for m in months if m is not None}):
        sel = months == mo
        for k in range(g.shape[1]):
            rows.append([mo, k + 1, fmt(g[sel, k].mean()), int(sel.sum())])
    return rows


def cmd_segment(cfg) -> int:
    _require(cfg, "model", "data")
    model = io.load_model(_existing(cfg["model"], "model file"))
    data = _load_data(cfg)
    post = inference.forward_backward(model, data.data, threads=cfg.get("threads"))
    states = inference.segment(post)
    out = _out_dir(cfg)
    io.write_posteriors(post, out / "gamma.csv", out / "xi.csv" if cfg.get("xi", True) else None)
    _write_csv(
        out / "segments.csv",
        ["seq_id", "t", "state"],
        [[b + 1, t + 1, int(states[b, t]) + 1] for b in range(data.B) for t in range(data.T)],
    )
    if data.dates is not None:
        _write_csv(out / "posterior_by_month.csv", ["month", "k", "mean_gamma", "count"], month_report(data.dates, post.gamma))
    if data.labels is not None:
        f1, perm = metrics.segmentation_f1(data.labels, states, model.K)
        print(f"segmentation_f1={f1:.6f} permutation={_perm_text(perm)}")
    print(f"mean_loglik={post.loglik.mean():.6f}")
    return EXIT_OK


def cmd_graph(cfg) -> int:
    _require(cfg, "model", "data")
    model = io.load_model(_existing(cfg["model"], "model file"))
    data = _load_data(cfg)
    tau = float(cfg.get("tau", causal.DEFAULT_TAU))
    post = inference.forward_backward(model, data.data, threads=cfg.get("threads"))
    graph = causal.regime_graphs(model, causal.classify_samples(model, data, post), tau)
    out = _out_dir(cfg)
    rows = []
    for k in range(model.K):
        for i in range(model.m):
            for j in range(model.m):
                rows.append([k + 1, i + 1, j + 1, fmt(graph.weights[k, i, j]), int(graph.adjacency[k, i, j])])
        (out / f"regime_{k + 1}.dot").write_text(causal.to_dot(graph, k))
    _write_csv(out / "graph.csv", ["regime", "i", "j", "weight", "edge"], rows)
    for k in range(model.K):
        flag = " (no samples)" if graph.counts[k] == 0 else ""
        print(f"regime {k + 1}: {int(graph.edge_counts()[k])} edges from {int(graph.counts[k])} samples{flag}")
    if cfg.get("true_model"):
        ref = io.load_model(_existing(cfg["true_model"], "model file"))
        f1, perm = causal.graph_f1(causal.true_masks(ref), graph)
        print(f"graph_f1={f1:.6f} permutation={_perm_text(perm)}")
    return EXIT_OK


def _parse_float(cell, row, col, path):
    try:
        v = float(cell)
    except ValueError:
        raise ModelFormatError(f"{path}:{row}:{col}", f"non-numeric cell {cell!r}") from None
    if not np.isfinite(v):
        raise ModelFormatError(f"{path}:{row}:{col}", f"non-finite cell {cell!r}")
    return v


def _is_number(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_table(path) -> io.SequenceBatch:
    """Read a sequence CSV, a ``date,v1..vm`` table or a headerless numeric table."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ModelFormatError(str(path), "empty file")
    head = [c.strip() for c in rows[0]]
    if head[:2] == ["seq_id", "t"]:
        return io.read_sequences(path)
    has_header = not all(_is_number(c) for c in head)
    body = rows[1:] if has_header else rows
    start = 2 if has_header else 1
    date_col = has_header and head[0].lower() == "date"
    first = 1 if date_col else 0
    width = len(head)
    values, dates = [], []
    for r, row in enumerate(body, start=start):
        if len(row) != width:
            raise ModelFormatError(f"{path}:{r}", f"expected {width} columns, got {len(row)}")
        values.append([_parse_float(c.strip(), r, j + 1, path) for j, c in enumerate(row[first:], start=first)])
        if date_col:
            dates.append(row[0].strip())
    if not values or width - first < 1:
        raise ModelFormatError(str(path), "no numeric data")
    data = np.array(values)[None]
    return io.SequenceBatch(data, None, np.array(dates, dtype=object)[None] if date_col else None)


def zscore(batch: io.SequenceBatch):
    """Per-column standardisation over all frames; returns ``(batch, mean, std)``."""
    x = batch.data.reshape(-1, batch.m)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    bad = [j + 1 for j in range(batch.m) if not std[j] > 0]
    if bad:
        raise ConfigError(f"column(s) {bad} have zero variance")
    return io.SequenceBatch((batch.data - mean) / std, batch.labels, batch.dates), mean, std


def cmd_ingest(cfg) -> int:
    _require(cfg, "input")
    batch = read_table(_existing(cfg["input"], "input file"))
    out = _out_dir(cfg)
    if cfg.get("normalize", True):
        batch, mean, std = zscore(batch)
        (out / "ingest_stats.json").write_text(dumps({"mean": mean, "std": std}) + "\n")
    io.write_sequences(batch, out / "sequences.csv")
    print(f"B={batch.B} T={batch.T} m={batch.m} dates={'yes' if batch.dates is not None else 'no'}")
    return EXIT_OK


def read_pairs(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    return np.array([[_parse_float(c, i + 1, j + 1, path) for j, c in enumerate(r)] for i, r in enumerate(rows)])


def cmd_resolve_affine(cfg) -> int:
    _require(cfg, "pairs")
    pairs = read_pairs(_existing(cfg["pairs"], "pairs file"))
    res = metrics.resolve_affine(pairs)
    out = _out_dir(cfg)
    doc = {"A": res.A, "b": res.b, "residual": res.residual}
    rows = [_metric_row("affine_residual", res.residual, None, f"N={len(pairs)}")]
    if cfg.get("model1") and cfg.get("model2"):
        m1 = io.load_model(_existing(cfg["model1"], "model file"))
        m2 = io.load_model(_existing(cfg["model2"], "model file"))
        if m1.K != m2.K:
            raise DimensionError(f"K mismatch: {m1.K} vs {m2.K}")
        n = int(cfg.get("samples", metrics.MC_SAMPLES))
        sigma, _ = metrics.resolve_sigma_affine(m1.trans_mean, m2.trans_mean, res.A, res.b, n_samples=n)
        err = metrics.transition_equiv_error(m1.trans_mean, m2.trans_mean, res.A, res.b, sigma, n_samples=n)
        doc["sigma"] = [int(s) + 1 for s in sigma]
        doc["equiv_error"] = err
        rows.append(_metric_row("transition_equiv_error", err, None, f"sigma={_perm_text(sigma)}"))
    (out / "affine.json").write_text(dumps(doc) + "\n")
    _write_csv(out / "affine_report.csv", ["metric", "value", "sigma", "detail"], rows)
    for r in rows:
        print(",".join(r))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "graph": cmd_graph,
    "ingest": cmd_ingest,
    "resolve-affine": cmd_resolve_affine,
}

USAGE_ERRORS = (
    UsageError,
    ConfigError,
    ModelFormatError,
    SchemaVersionError,
    DimensionError,
    StateIndexError,
    InvariantError,
    EnumerationTooLargeError,
)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = _merge(args)
        if cfg.get("threads") is not None:
            cfg["threads"] = int(cfg["threads"])
        return COMMANDS[args.command](cfg)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except MsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
