import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from imsm import cli
from imsm.causal import classify_samples, regime_graphs
from imsm.datagen import SynthSpec, cyclic_transition_matrix
from imsm.inference import forward_backward, segment
from imsm.io import SequenceBatch, load_model, read_sequences, save_model, write_sequences
from imsm.metrics import model_error, segmentation_f1
from imsm.model import MarkovChain, MsmModel
from imsm.transitions import AffineWrapped, Linear, random_transition


def run(*args):
    return cli.main([str(a) for a in args])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def generated(tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--seed", 3, "--K", 2, "--m", 2, "--N", 20, "--T", 30, "--kind", "linear", "--out", out) == 0
    return out


def test_generate_defaults_follow_protocol(tmp_path):
    assert run("generate", "--seed", 1, "--N", 5, "--T", 10, "--out", tmp_path) == 0
    model = load_model(tmp_path / "truth.json")
    spec = SynthSpec()
    assert model.K == spec.K and model.m == spec.m
    assert_allclose(model.Q, cyclic_transition_matrix(spec.K, 0.9), atol=1e-15)
    assert_allclose(model.pi, np.full(spec.K, 1 / spec.K), atol=1e-12)
    assert_allclose(model.noise_cov, np.tile(0.0025 * np.eye(2), (3, 1, 1)), atol=1e-15)
    assert_allclose(model.init_cov, np.tile(0.01 * np.eye(2), (3, 1, 1)), atol=1e-15)
    data = read_sequences(tmp_path / "data.csv")
    assert data.data.shape == (5, 10, 2) and data.labels is not None


def test_generate_single_state(tmp_path):
    assert run("generate", "--seed", 0, "--K", 1, "--N", 3, "--T", 8, "--out", tmp_path) == 0
    data = read_sequences(tmp_path / "data.csv")
    assert_array_equal(data.labels, 0)


def test_generate_byte_identical_and_seed_required(tmp_path, capsys):
    for d in ("a", "b"):
        assert run("generate", "--seed", 7, "--N", 4, "--T", 12, "--emission-n", 4, "--out", tmp_path / d) == 0
    for name in ("truth.json", "data.csv", "observations.csv", "emission.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("generate", "--seed", 8, "--N", 4, "--T", 12, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a/data.csv").read_bytes() != (tmp_path / "c/data.csv").read_bytes()
    assert run("generate", "--out", tmp_path / "d") == 1
    assert "seed" in capsys.readouterr().err


def test_fit_zero_epochs_returns_initialisation(generated, tmp_path):
    out = tmp_path / "fit"
    assert run("fit", "--seed", 0, "--data", generated / "data.csv", "--K", 2, "--max-epochs", 0, "--out", out) == 0
    from imsm.estimation import FitConfig, fit

    ref = fit(read_sequences(generated / "data.csv"), FitConfig(K=2, max_epochs=0, rng_seed=0)).model
    got = load_model(out / "model.json")
    assert_allclose(got.Q, ref.Q, rtol=1e-15)
    assert_allclose(got.trans_mean[0].W, ref.trans_mean[0].W, rtol=1e-15)
    assert read_rows(out / "trace.csv") == []
    report = json.loads((out / "fit_report.json").read_text())
    assert report["epochs"] == 0 and report["restart"] == 1


def test_fit_trace_has_one_row_per_epoch(generated, tmp_path):
    out = tmp_path / "fit"
    assert run("fit", "--seed", 0, "--data", generated / "data.csv", "--K", 2, "--max-epochs", 4, "--plateau-tol", -1, "--out", out) == 0
    rows = read_rows(out / "trace.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    assert json.loads((out / "fit_report.json").read_text())["epochs"] == 4


def test_config_file_and_flag_precedence(generated, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 0, "fit": {"K": 2, "max_epochs": 2, "plateau_tol": -1}}))
    assert run("fit", "--config", cfg, "--data", generated / "data.csv", "--out", tmp_path / "a") == 0
    assert len(read_rows(tmp_path / "a/trace.csv")) == 2
    assert run("fit", "--config", cfg, "--max-epochs", 3, "--data", generated / "data.csv", "--out", tmp_path / "b") == 0
    assert len(read_rows(tmp_path / "b/trace.csv")) == 3


def test_eval_self_and_library_agreement(generated, tmp_path):
    truth = generated / "truth.json"
    model = load_model(truth)
    data = read_sequences(generated / "data.csv")
    own = SequenceBatch(data.data, segment(forward_backward(model, data.data)))
    write_sequences(own, tmp_path / "own.csv")
    assert run("eval", "--true", truth, "--est", truth, "--data", tmp_path / "own.csv", "--samples", 2000, "--out", tmp_path) == 0
    rows = {r["metric"]: r for r in read_rows(tmp_path / "metrics.csv")}
    assert float(rows["transition_l2"]["value"]) == 0.0
    assert float(rows["segmentation_f1"]["value"]) == 1.0

    other = model.permute([1, 0])
    save_model(other, tmp_path / "other.json")
    assert run("eval", "--true", truth, "--est", tmp_path / "other.json", "--data", generated / "data.csv", "--samples", 2000, "--out", tmp_path / "o") == 0
    rows = {r["metric"]: r for r in read_rows(tmp_path / "o/metrics.csv")}
    data = read_sequences(generated / "data.csv")
    lib = model_error(model, other, n_samples=2000)
    assert float(rows["transition_l2"]["value"]) == lib.error
    assert rows["transition_l2"]["detail"] == "exhaustive:2 1"
    pred = segment(forward_backward(other, data.data))
    f1, _ = segmentation_f1(data.labels, pred, 2)
    assert float(rows["segmentation_f1"]["value"]) == f1
    assert float(rows["heldout_mean_loglik"]["value"]) == forward_backward(model, data.data).loglik.mean()


def test_eval_k_mismatch_is_usage_error(generated, tmp_path):
    assert run("generate", "--seed", 1, "--K", 3, "--N", 2, "--T", 5, "--out", tmp_path / "k3") == 0
    assert run("eval", "--true", generated / "truth.json", "--est", tmp_path / "k3/truth.json", "--out", tmp_path) == 1


def test_segment_outputs(generated, tmp_path):
    assert run("segment", "--model", generated / "truth.json", "--data", generated / "data.csv", "--out", tmp_path) == 0
    model = load_model(generated / "truth.json")
    data = read_sequences(generated / "data.csv")
    states = segment(forward_backward(model, data.data))
    rows = read_rows(tmp_path / "segments.csv")
    assert len(rows) == 20 * 30
    assert_array_equal([int(r["state"]) - 1 for r in rows], states.ravel())
    assert (tmp_path / "xi.csv").exists() and not (tmp_path / "posterior_by_month.csv").exists()
    assert run("segment", "--model", generated / "truth.json", "--data", generated / "data.csv", "--no-xi", "--out", tmp_path / "n") == 0
    assert not (tmp_path / "n/xi.csv").exists()


def test_month_report_averages():
    dates = np.array(["2000-01", "2000-02", "2001-01"], dtype=object)
    gamma = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
    rows = cli.month_report(dates, gamma)
    assert rows[0][:2] == [1, 1] and float(rows[0][2]) == 0.5 and rows[0][3] == 2
    assert rows[2][:2] == [2, 1] and float(rows[2][2]) == 0.5 and rows[2][3] == 1


def linear_model(W):
    K, m = len(W), W[0].shape[0]
    return MsmModel(
        chain=MarkovChain(np.full(K, 1 / K), np.full((K, K), 1 / K)),
        init_mean=np.zeros((K, m)),
        init_cov=np.tile(np.eye(m), (K, 1, 1)),
        trans_mean=tuple(Linear(w, np.zeros(m)) for w in W),
        noise_cov=np.tile(0.1 * np.eye(m), (K, 1, 1)),
    )


def test_graph_linear_weights_and_tau_sweep(tmp_path, rng):
    W = [np.array([[0.5, 0.0, 0.2], [0.0, -0.04, 0.0], [0.3, 0.0, 0.06]]), np.array([[0.0, 0.9, 0.0], [0.1, 0.0, 0.0], [0.0, 0.0, 0.7]])]
    model = linear_model(W)
    save_model(model, tmp_path / "m.json")
    write_sequences(SequenceBatch(rng.standard_normal((4, 25, 3))), tmp_path / "d.csv")
    counts = []
    for tau in (0.0, 0.05, 0.1, 0.4, 1.0):
        out = tmp_path / f"g{tau}"
        assert run("graph", "--model", tmp_path / "m.json", "--data", tmp_path / "d.csv", "--tau", tau, "--out", out) == 0
        rows = read_rows(out / "graph.csv")
        weights = np.array([float(r["weight"]) for r in rows]).reshape(2, 3, 3)
        assert_allclose(weights, np.abs(W), rtol=1e-12)
        counts.append(sum(int(r["edge"]) for r in rows))
        assert (out / "regime_2.dot").exists()
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == 8 and counts[1] == 7 and counts[-1] == 0


def test_graph_matches_library(generated, tmp_path):
    assert run("graph", "--model", generated / "truth.json", "--data", generated / "data.csv", "--true", generated / "truth.json", "--out", tmp_path) == 0
    model = load_model(generated / "truth.json")
    data = read_sequences(generated / "data.csv")
    g = regime_graphs(model, classify_samples(model, data))
    rows = read_rows(tmp_path / "graph.csv")
    assert_array_equal(np.array([float(r["weight"]) for r in rows]).reshape(g.weights.shape), g.weights)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)


def test_ingest_date_table(tmp_path, rng):
    x = rng.standard_normal((30, 2)) * [2.0, 5.0] + [10.0, -3.0]
    write_table(tmp_path / "raw.csv", ["date", "a", "b"], [[f"2000-{i % 12 + 1:02d}", *map(float, r)] for i, r in enumerate(x)])
    assert run("ingest", "--input", tmp_path / "raw.csv", "--out", tmp_path / "o") == 0
    batch = read_sequences(tmp_path / "o/sequences.csv")
    assert batch.data.shape == (1, 30, 2)
    assert_allclose(batch.data[0], (x - x.mean(0)) / x.std(0), atol=1e-12)
    assert batch.dates[0, 3] == "2000-04"
    stats = json.loads((tmp_path / "o/ingest_stats.json").read_text())
    assert_allclose(stats["mean"], x.mean(0), rtol=1e-15)


def test_ingest_is_idempotent(tmp_path, rng):
    write_table(tmp_path / "raw.csv", None, rng.standard_normal((40, 3)) * 4 + 1)
    assert run("ingest", "--input", tmp_path / "raw.csv", "--out", tmp_path / "a") == 0
    assert run("ingest", "--input", tmp_path / "a/sequences.csv", "--out", tmp_path / "b") == 0
    a = read_sequences(tmp_path / "a/sequences.csv").data
    b = read_sequences(tmp_path / "b/sequences.csv").data
    assert np.abs(a - b).max() <= 1e-12


def test_ingest_sequence_file_multi_sequence(generated, tmp_path):
    assert run("ingest", "--input", generated / "data.csv", "--no-normalize", "--out", tmp_path) == 0
    assert_array_equal(read_sequences(tmp_path / "sequences.csv").data, read_sequences(generated / "data.csv").data)


def test_ingest_errors(tmp_path, capsys):
    write_table(tmp_path / "const.csv", ["date", "a", "b"], [["2000-01", 1.0, 3.0], ["2000-02", 2.0, 3.0]])
    assert run("ingest", "--input", tmp_path / "const.csv", "--out", tmp_path / "o") == 1
    assert "[2]" in capsys.readouterr().err
    write_table(tmp_path / "bad.csv", ["date", "a"], [["2000-01", 1.0], ["2000-02", "oops"]])
    assert run("ingest", "--input", tmp_path / "bad.csv", "--out", tmp_path / "o") == 1
    assert "bad.csv:3:2" in capsys.readouterr().err
    assert run("ingest", "--input", tmp_path / "missing.csv", "--out", tmp_path / "o") == 1


def test_resolve_affine_constructed_pair(tmp_path, rng):
    m, K = 2, 2
    A = rng.standard_normal((m, m)) + 2 * np.eye(m)
    b = rng.standard_normal(m)
    Ainv = np.linalg.inv(A)
    f1 = [random_transition("mlp", m, s) for s in range(K)]
    f2 = [AffineWrapped(f1[1], Ainv, -Ainv @ b), AffineWrapped(f1[0], Ainv, -Ainv @ b)]

    def wrap(fns):
        return MsmModel(
            chain=MarkovChain(np.full(K, 0.5), np.full((K, K), 0.5)),
            init_mean=np.zeros((K, m)),
            init_cov=np.tile(np.eye(m), (K, 1, 1)),
            trans_mean=tuple(fns),
            noise_cov=np.tile(0.1 * np.eye(m), (K, 1, 1)),
        )

    save_model(wrap(f1), tmp_path / "m1.json")
    save_model(wrap(f2), tmp_path / "m2.json")
    src = rng.uniform(-1, 1, (30, m))
    write_table(tmp_path / "pairs.csv", ["s1", "s2", "t1", "t2"], np.hstack([src, src @ A.T + b]).tolist())
    args = ["resolve-affine", "--pairs", tmp_path / "pairs.csv", "--model1", tmp_path / "m1.json", "--model2", tmp_path / "m2.json"]
    assert run(*args, "--samples", 5000, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "affine.json").read_text())
    assert_allclose(doc["A"], A, atol=1e-8)
    assert_allclose(doc["b"], b, atol=1e-8)
    assert doc["sigma"] == [2, 1]
    assert doc["equiv_error"] < 1e-6


def test_resolve_affine_rank_deficient_exit_code(tmp_path):
    write_table(tmp_path / "pairs.csv", None, [[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
    assert run("resolve-affine", "--pairs", tmp_path / "pairs.csv", "--out", tmp_path) == 2


def test_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 1
    assert run("frobnicate") == 1
    assert run("fit", "--seed", 0, "--K", 2, "--data", tmp_path / "nope.csv", "--out", tmp_path) == 1
    assert run("generate", "--seed", 0, "--K", 0, "--out", tmp_path) == 1
    (tmp_path / "cfg.json").write_text("{not json")
    assert run("generate", "--config", tmp_path / "cfg.json", "--out", tmp_path) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_eval_auto_match_method(tmp_path):
    for K in (5, 6):
        out = tmp_path / f"k{K}"
        assert run("generate", "--seed", 2, "--K", K, "--kind", "linear", "--N", 2, "--T", 5, "--out", out) == 0
        assert run("eval", "--true", out / "truth.json", "--est", out / "truth.json", "--samples", 500, "--out", out) == 0
        rows = {r["metric"]: r for r in read_rows(out / "metrics.csv")}
        assert rows["transition_l2"]["detail"].split(":")[0] == ("exhaustive" if K == 5 else "greedy")
        assert float(rows["transition_l2"]["value"]) == 0.0
