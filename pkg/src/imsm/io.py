"""File formats: model documents, sequence CSVs and posterior dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvariantError, ModelFormatError, MsmError, SchemaVersionError
from .model import MarkovChain, MsmModel
from .transitions import transition_from_dict

SCHEMA_VERSION = 1


def fmt(x) -> str:
    """Real number with 17 significant digits (round-trips every double)."""
    return format(float(x), ".17g")


def dumps(obj, indent=1, _level=0) -> str:
    """JSON text in which every float carries 17 significant digits.

    Arrays become nested lists in row-major order; innermost lists stay on
    one line.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            raise ValueError("cannot serialise non-finite value")
        return fmt(obj)
    if obj is None:
        return "null"
    return json.dumps(obj)


def model_to_dict(model: MsmModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "K": model.K,
        "m": model.m,
        "cov_floor": model.cov_floor,
        "diagonal": model.diagonal,
        "chain": {"pi": model.pi, "Q": model.Q},
        "initial": [{"mu": model.init_mean[k], "cov": model.init_cov[k]} for k in range(model.K)],
        "trans_noise": [{"cov": model.noise_cov[k]} for k in range(model.K)],
        "trans_mean": [f.to_dict() for f in model.trans_mean],
    }


def _array(d, key, path, shape=None):
    if key not in d:
        raise ModelFormatError(f"{path}.{key}" if path else key, "missing field")
    where = f"{path}.{key}" if path else key
    try:
        a = np.array(d[key], dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(where, "not a numeric array") from None
    if shape is not None and a.shape != shape:
        raise ModelFormatError(where, f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelFormatError(where, "non-finite entries")
    return a


def model_from_dict(d) -> MsmModel:
    if not isinstance(d, dict):
        raise ModelFormatError("<root>", "expected an object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(d.get("schema_version"))
    try:
        K, m = int(d["K"]), int(d["m"])
    except (KeyError, TypeError, ValueError):
        raise ModelFormatError("K/m", "missing or non-integer dimension") from None
    chain = d.get("chain")
    if not isinstance(chain, dict):
        raise ModelFormatError("chain", "missing section")
    pi = _array(chain, "pi", "chain", (K,))
    Q = _array(chain, "Q", "chain", (K, K))
    if abs(pi.sum() - 1.0) > 1e-12 or np.any(pi < 0):
        raise ModelFormatError("chain.pi", f"not a probability vector (sum {fmt(pi.sum())})")
    for l in range(K):
        if abs(Q[l].sum() - 1.0) > 1e-12 or np.any(Q[l] < 0):
            raise ModelFormatError(f"chain.Q[{l}]", f"row {l} is not stochastic (sum {fmt(Q[l].sum())})")
    for sec in ("initial", "trans_noise", "trans_mean"):
        if not isinstance(d.get(sec), list) or len(d[sec]) != K:
            raise ModelFormatError(sec, f"expected a list of {K} entries")
    mu = np.stack([_array(e, "mu", f"initial[{k}]", (m,)) for k, e in enumerate(d["initial"])])
    icov = np.stack([_array(e, "cov", f"initial[{k}]", (m, m)) for k, e in enumerate(d["initial"])])
    ncov = np.stack([_array(e, "cov", f"trans_noise[{k}]", (m, m)) for k, e in enumerate(d["trans_noise"])])
    trans = [transition_from_dict(e, f"trans_mean[{k}]") for k, e in enumerate(d["trans_mean"])]
    try:
        return MsmModel(
            chain=MarkovChain(pi, Q),
            init_mean=mu,
            init_cov=icov,
            trans_mean=tuple(trans),
            noise_cov=ncov,
            cov_floor=float(d.get("cov_floor", 1e-6)),
            diagonal=bool(d.get("diagonal", True)),
        )
    except MsmError as exc:
        raise ModelFormatError("<model>", str(exc)) from None


def save_model(model: MsmModel, path) -> None:
    Path(path).write_text(dumps(model_to_dict(model)) + "\n")


def load_model(path) -> MsmModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return model_from_dict(doc)


@dataclass
class SequenceBatch:
    """``B`` equal-length sequences of ``m``-dimensional reals.

    ``labels`` (0-based states) and ``dates`` are optional annotations carried
    alongside the data; neither is used for fitting.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    dates: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[1] < 1:
            raise DimensionError(f"sequence data must be (B, T, m), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvariantError("sequence data contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).reshape(self.data.shape[:2])
        if self.dates is not None:
            self.dates = np.asarray(self.dates, dtype=object).reshape(self.data.shape[:2])

    @property
    def B(self):
        return self.data.shape[0]

    @property
    def T(self):
        return self.data.shape[1]

    @property
    def m(self):
        return self.data.shape[2]

    def subset(self, idx):
        return SequenceBatch(
            self.data[idx],
            None if self.labels is None else self.labels[idx],
            None if self.dates is None else self.dates[idx],
        )


def write_sequences(batch: SequenceBatch, path) -> None:
    """CSV ``seq_id,t,z1..zm[,label][,date]``; ``t`` and labels are 1-based."""
    header = ["seq_id", "t"] + [f"z{j + 1}" for j in range(batch.m)]
    if batch.labels is not None:
        header.append("label")
    if batch.dates is not None:
        header.append("date")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b in range(batch.B):
            for t in range(batch.T):
                row = [b + 1, t + 1] + [fmt(v) for v in batch.data[b, t]]
                if batch.labels is not None:
                    row.append(int(batch.labels[b, t]) + 1)
                if batch.dates is not None:
                    row.append(batch.dates[b, t])
                w.writerow(row)


def read_sequences(path) -> SequenceBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ModelFormatError(str(path), "empty sequence file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["seq_id", "t"]:
        raise ModelFormatError(f"{path}:1", "header must start with seq_id,t")
    zcols = [i for i, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
    lcol = header.index("label") if "label" in header else None
    dcol = header.index("date") if "date" in header else None
    seqs: dict[int, list] = {}
    for r, row in enumerate(rows[1:], start=2):
        try:
            sid, t = int(row[0]), int(row[1])
            vals = [float(row[i]) for i in zcols]
            lab = int(row[lcol]) - 1 if lcol is not None else None
        except (ValueError, IndexError):
            raise ModelFormatError(f"{path}:{r}", "malformed row") from None
        date = row[dcol] if dcol is not None else None
        seqs.setdefault(sid, []).append((t, vals, lab, date))
    ids = sorted(seqs)
    lengths = {len(seqs[i]) for i in ids}
    if len(lengths) != 1:
        raise DimensionError("all sequences must have the same length")
    data, labels, dates = [], [], []
    for i in ids:
        steps = sorted(seqs[i], key=lambda x: x[0])
        data.append([s[1] for s in steps])
        labels.append([s[2] for s in steps])
        dates.append([s[3] for s in steps])
    return SequenceBatch(
        np.array(data, dtype=float),
        np.array(labels, dtype=int) if lcol is not None else None,
        np.array(dates, dtype=object) if dcol is not None else None,
    )


def write_posteriors(post, gamma_path, xi_path=None) -> None:
    """Dump ``seq_id,t,k,gamma`` and optionally ``seq_id,t,k,l,xi`` (1-based)."""
    gamma = post.gamma
    with open(gamma_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t", "k", "gamma"])
        B, T, K = gamma.shape
        for b in range(B):
            for t in range(T):
                for k in range(K):
                    w.writerow([b + 1, t + 1, k + 1, fmt(gamma[b, t, k])])
    if xi_path is None:
        return
    xi = post.xi
    with open(xi_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "t", "k", "l", "xi"])
        B, Tm1, K, _ = xi.shape
        for b in range(B):
            for t in range(Tm1):
                for k in range(K):
                    for l in range(K):
                        w.writerow([b + 1, t + 2, k + 1, l + 1, fmt(xi[b, t, k, l])])
