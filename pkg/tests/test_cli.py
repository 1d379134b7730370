import json
import os

import numpy as np
import pytest

from mixtopic.cli import default_threads, main
from mixtopic.corpus import parse_corpus, parse_meta
from mixtopic.errors import ValidationError
from mixtopic.estimates import read_mixtures, read_table
from mixtopic.evaluation import read_metric_csv
from mixtopic.inference import read_trace
from mixtopic.modelio import load_model
from mixtopic.mortality import read_scores

from conftest import planted_labels

FAST = ["--iters", "3", "--min-iters", "0", "--burnin", "1", "--threads", "1"]


def _sim(tmp_path, name="sim", **over):
    cfg = dict(D=40, K=2, W=[6, 4], V=[2, 3], seed=1)
    cfg.update(over)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    prefix = str(tmp_path / name)
    assert main(["simulate", "--config", str(path), "--out-prefix", prefix]) == 0
    return prefix


@pytest.fixture
def sim(tmp_path):
    return _sim(tmp_path)


@pytest.fixture
def model(tmp_path, sim):
    out = str(tmp_path / "model")
    assert main(["train", "--meta", sim + ".meta", "--data", sim + ".data", "-K", "2", "--out", out] + FAST) == 0
    return out


def _manifest(prefix):
    with open(prefix + ".manifest.json") as fh:
        return json.load(fh)


# --- exit codes -------------------------------------------------------------------


def test_missing_required_flag(tmp_path, sim, capsys):
    assert main(["train", "--meta", sim + ".meta", "-K", "2", "--out", str(tmp_path / "m")]) == 2


def test_zero_topics(tmp_path, sim):
    assert main(["train", "--meta", sim + ".meta", "--data", sim + ".data", "-K", "0",
                 "--out", str(tmp_path / "m")]) == 2


def test_bad_input_file_cleans_outputs(tmp_path, sim):
    bad = tmp_path / "bad.data"
    bad.write_text("1 1 99 1 1\n")
    out = tmp_path / "m"
    assert main(["train", "--meta", sim + ".meta", "--data", str(bad), "-K", "2", "--out", str(out)] + FAST) == 2
    assert not out.exists() and not (tmp_path / "m.manifest.json").exists()


def test_missing_file_is_runtime_error(tmp_path, sim):
    assert main(["train", "--meta", sim + ".meta", "--data", str(tmp_path / "nope"), "-K", "2",
                 "--out", str(tmp_path / "m")] + FAST) == 1


def test_corrupt_model(tmp_path, sim):
    (tmp_path / "junk").write_text("junk\n")
    assert main(["infer", "--model", str(tmp_path / "junk"), "--data", sim + ".data",
                 "--out", str(tmp_path / "t.csv")]) == 2


# --- train / simulate / infer ---------------------------------------------------


def test_train_outputs_and_manifest(tmp_path, sim, model):
    m = load_model(model)
    assert m.schema.hash == parse_meta(sim + ".meta").hash
    assert len(read_trace(model + ".trace.csv")) == 3
    doc = _manifest(model)
    assert doc["subcommand"] == "train" and doc["schema_hash"] == m.schema.hash
    assert doc["seed"] == 0 and model in doc["outputs"] and doc["flags"]["topics"] == 2
    for key in ("version", "wall_time", "argv", "inputs"):
        assert key in doc


def test_train_plot_and_resume(tmp_path, sim, model):
    out = str(tmp_path / "more")
    assert main(["train", "--meta", sim + ".meta", "--data", sim + ".data", "-K", "2", "--out", out,
                 "--resume", model, "--plot"] + FAST) == 0
    assert load_model(out).iteration == 6
    assert os.path.getsize(out + ".trace.png") > 0


def test_simulate_empty(tmp_path):
    prefix = _sim(tmp_path, "empty", D=0)
    schema = parse_meta(prefix + ".meta")
    assert parse_corpus(prefix + ".data", schema).D == 0


def test_infer_unknown_features_warns(tmp_path, sim, model):
    data = tmp_path / "odd.data"
    data.write_text(open(sim + ".data").read() + "1 1 99 1 1\n1 9 1 1 1\n")
    out = str(tmp_path / "theta.csv")
    assert main(["infer", "--model", model, "--data", str(data), "--out", out, "--threads", "1"]) == 0
    doc = _manifest(out)
    assert doc["dropped_rows"] == 2 and doc["warnings"]
    ids, theta = read_mixtures(out)
    assert theta.shape == (40, 2) and np.allclose(theta.sum(axis=1), 1)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("MIXTOPIC_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("MIXTOPIC_THREADS", "zero")
    with pytest.raises(ValidationError):
        default_threads()


# --- evaluate -----------------------------------------------------------------


def test_k_sweep_nine_rows(tmp_path, sim):
    out = str(tmp_path / "sweep")
    ks = "10,25,40,50,60,75,100,125,150"
    assert main(["evaluate", "--meta", sim + ".meta", "--data", sim + ".data", "--topics", ks,
                 "--folds", "2", "--out", out, "--plot"] + FAST) == 0
    header, rows = read_table(out + ".summary.csv")
    assert header == ["config", "mean", "stderr", "folds"] and len(rows) == 9
    assert len(read_metric_csv(out + ".metrics.csv").rows) == 18
    assert os.path.getsize(out + ".ksweep.png") > 0


def test_missing_lab_curves(tmp_path, sim):
    out = str(tmp_path / "nmar")
    assert main(["evaluate", "--meta", sim + ".meta", "--data", sim + ".data", "--topics", "2",
                 "--truth", sim + ".truth", "--checkpoint-every", "1", "--folds", "2", "--out", out,
                 "--plot"] + FAST) == 0
    header, rows = read_table(out + ".curves.csv")
    assert header == ["config", "fold", "iteration", "metric"] and len(rows) == 2 * 3
    assert _manifest(out)["flags"]["combiner"] == "conditional"
    assert os.path.exists(out + ".curves.png")


def test_evaluate_existing_model(tmp_path, sim, model):
    out = str(tmp_path / "ho")
    assert main(["evaluate", "--model", model, "--data", sim + ".data", "--out", out, "--threads", "1"]) == 0
    header, rows = read_table(out + ".heldout.csv")
    assert header == ["patient_id", "loglik", "included"] and len(rows) == 40


def test_evaluate_needs_topics(tmp_path, sim):
    assert main(["evaluate", "--data", sim + ".data", "--out", str(tmp_path / "x")]) == 2


# --- predict / topics ---------------------------------------------------------------


def test_predict_and_topics(tmp_path):
    prefix = _sim(tmp_path, "big", D=120, K=3, W=[20], V=[2, 2], alpha=0.5, seed=4)
    theta = np.load(prefix + ".params.npz")["theta"]
    labels = planted_labels(theta)
    lab_path = tmp_path / "labels.csv"
    lab_path.write_text("patient_id,label\n" + "".join(f"{j + 1},{l}\n" for j, l in enumerate(labels)))
    model = str(tmp_path / "m")
    assert main(["train", "--meta", prefix + ".meta", "--data", prefix + ".data", "-K", "3",
                 "--out", model, "--iters", "30", "--threads", "1"]) == 0
    out = str(tmp_path / "pred")
    assert main(["predict", "--model", model, "--data", prefix + ".data", "--labels", str(lab_path),
                 "--test-data", prefix + ".data", "--test-labels", str(lab_path), "--out", out,
                 "--plot", "--threads", "1"]) == 0
    ids, scores, lab = read_scores(out + ".scores.csv")
    assert list(ids) == list(range(1, 121)) and np.array_equal(lab, labels)
    assert read_table(out + ".coef.csv")[0] == ["topic", "weight"]
    assert read_table(out + ".roc.csv")[0] == ["fpr", "tpr"]
    doc = _manifest(out)
    assert 0 <= doc["auroc"] <= 1 and "prospective_auroc" in doc
    for suffix in (".rocpr.png", ".prospective.rocpr.png", ".top_topics.csv", ".prospective.scores.csv"):
        assert os.path.exists(out + suffix)
    theta_csv = str(tmp_path / "theta.csv")
    assert main(["infer", "--model", model, "--data", prefix + ".data", "--out", theta_csv, "--threads", "1"]) == 0
    out2 = str(tmp_path / "pred2")
    assert main(["predict", "--model", model, "--embeddings", theta_csv, "--labels", str(lab_path),
                 "--out", out2, "--reg", "0.001"]) == 0
    topics = str(tmp_path / "topics")
    assert main(["topics", "--model", model, "--top-n", "5", "--out", topics, "--plot"]) == 0
    header, rows = read_table(topics + ".features.csv")
    assert header == ["topic", "type_id", "feature_id", "weight"] and len(rows) == 3 * 5
    assert read_table(topics + ".labs.csv")[0] == ["topic", "lab_id", "score"]
    assert os.path.exists(topics + ".labs.png")


def test_predict_label_mismatch(tmp_path, sim, model):
    lab_path = tmp_path / "labels.csv"
    lab_path.write_text("patient_id,label\n1,0\n2,1\n")
    assert main(["predict", "--model", model, "--data", sim + ".data", "--labels", str(lab_path),
                 "--out", str(tmp_path / "p")]) == 2


# --- reproducibility ------------------------------------------------------------


def test_replay_is_bit_exact(tmp_path, sim, model):
    before = {p: open(p, "rb").read() for p in (model, model + ".trace.csv")}
    for p in before:
        os.remove(p)
    assert main(["replay", model + ".manifest.json"]) == 0
    for p, data in before.items():
        assert open(p, "rb").read() == data


def test_replay_without_argv(tmp_path):
    (tmp_path / "x.json").write_text("{}")
    assert main(["replay", str(tmp_path / "x.json")]) == 2
