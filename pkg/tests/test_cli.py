import json

import numpy as np
import pytest

from viewreid import ScalingMatrix, VabppConfig, evaluate, pairwise_euclidean, vabpp_pipeline
from viewreid.cli import main
from viewreid.io import read_delta, read_distances, read_embeddings, write_delta, write_embeddings

from conftest import make_set

SMALL_SYNTH = ["--num-views", "2", "--num-ids", "6", "--num-test-ids", "3", "--images-per-id-per-view", "3",
               "--dim", "8", "--inflation", "1.5", "--seed", "3"]


def parse(out):
    return dict(line.split("=", 1) for line in out.strip().splitlines() if "=" in line)


@pytest.fixture
def dumps(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), *SMALL_SYNTH]) == 0
    return tmp_path


def test_synth_writes_three_splits(dumps, capsys):
    for name in ("train", "query", "gallery"):
        assert (dumps / f"{name}.json").exists()
    assert len(read_embeddings(dumps / "query.json")) == 3 * 2


def test_compute_delta_and_apply(dumps, capsys):
    delta_path = dumps / "d.delta"
    assert main(["compute-delta", "--train", str(dumps / "train.json"), "--out", str(delta_path),
                 "--binary", "--dataset", "toy"]) == 0
    delta = read_delta(delta_path)
    assert np.all(np.diag(delta.delta) == 1.0)
    assert "1.0000" in delta_path.read_text().splitlines()[-1]
    assert (dumps / "d.delta.centers.csv").exists()

    out = dumps / "scaled.json"
    assert main(["apply", "--query", str(dumps / "query.json"), "--gallery", str(dumps / "gallery.json"),
                 "--delta", str(delta_path), "--gamma", "2", "--out", str(out),
                 "--ranking", str(dumps / "rank.csv")]) == 0
    q, g = read_embeddings(dumps / "query.json"), read_embeddings(dumps / "gallery.json")
    expected = vabpp_pipeline(q, g, delta, VabppConfig(gamma=2.0))
    np.testing.assert_array_equal(read_distances(out).values, expected.values)


def test_apply_identity_gamma_one_is_raw(dumps):
    write_delta(dumps / "id.delta", ScalingMatrix.identity(2))
    out = dumps / "raw.json"
    assert main(["apply", "--query", str(dumps / "query.json"), "--gallery", str(dumps / "gallery.json"),
                 "--delta", str(dumps / "id.delta"), "--gamma", "1", "--out", str(out)]) == 0
    q, g = read_embeddings(dumps / "query.json"), read_embeddings(dumps / "gallery.json")
    np.testing.assert_array_equal(read_distances(out).values, pairwise_euclidean(q, g).values)


def test_apply_bundled_vehicleid_factor(tmp_path):
    q = make_set([[1.0, 0.0]], [0], [0], num_views=2)
    g = make_set([[0.6, 0.8], [0.0, 1.0]], [0, 1], [0, 1], num_views=2, image_ids=[5, 6])
    write_embeddings(tmp_path / "q.json", q)
    write_embeddings(tmp_path / "g.json", g)
    assert main(["apply", "--query", str(tmp_path / "q.json"), "--gallery", str(tmp_path / "g.json"),
                 "--bundled", "vehicleid", "--gamma", "1", "--out", str(tmp_path / "d.json")]) == 0
    raw = pairwise_euclidean(read_embeddings(tmp_path / "q.json"), read_embeddings(tmp_path / "g.json")).values
    np.testing.assert_allclose(read_distances(tmp_path / "d.json").values, raw * [[1.0, 0.4597]], atol=1e-15)


def test_eval_prints_metrics(dumps, capsys):
    capsys.readouterr()
    assert main(["eval", "--query", str(dumps / "query.json"), "--gallery", str(dumps / "gallery.json")]) == 0
    metrics = parse(capsys.readouterr().out)
    q, g = read_embeddings(dumps / "query.json"), read_embeddings(dumps / "gallery.json")
    report = evaluate(pairwise_euclidean(q.normalize(), g.normalize()))
    assert float(metrics["mAP"]) == pytest.approx(report.map, abs=1e-6)
    assert {"CMC@1", "CMC@5", "num_valid_queries"} <= metrics.keys()


def test_eval_from_distance_dump(dumps, capsys):
    main(["apply", "--query", str(dumps / "query.json"), "--gallery", str(dumps / "gallery.json"),
          "--bundled", "vehicleid", "--out", str(dumps / "d.json")])
    capsys.readouterr()
    assert main(["eval", "--distances", str(dumps / "d.json")]) == 0
    assert 0.0 <= float(parse(capsys.readouterr().out)["mAP"]) <= 1.0


def test_curve_train_mode(dumps, capsys):
    out = dumps / "curve.csv"
    assert main(["curve", "--query", str(dumps / "train.json"), "--train-mode", "--alpha", "2",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rank,value" and len(lines) > 2


def test_grad_check_pass_and_corrupt(capsys):
    assert main(["grad-check", "--loss", "gsupcon", "--seed", "1"]) == 0
    report = parse(capsys.readouterr().out)
    assert report["result"] == "pass" and float(report["max_rel_error"]) < 1e-4
    assert main(["grad-check", "--loss", "lsupcon", "--seed", "1", "--corrupt"]) == 1
    assert parse(capsys.readouterr().out)["result"] == "fail"


def test_train_toy_trace(tmp_path, capsys):
    trace = tmp_path / "trace.csv"
    assert main(["train-toy", "--num-views", "2", "--num-ids", "4", "--num-test-ids", "1",
                 "--images-per-id-per-view", "2", "--dim", "8", "--steps", "20", "--full-batch",
                 "--trace", str(trace), "--out", str(tmp_path / "trained.json")]) == 0
    out = parse(capsys.readouterr().out)
    assert int(out["steps"]) == 20 and "max_positive_gap" in out
    assert len(trace.read_text().splitlines()) == 21
    assert len(read_embeddings(tmp_path / "trained.json")) == 16


def test_show_delta(capsys):
    assert main(["show-delta", "vehicleid"]) == 0
    assert "1.0000,0.4597" in capsys.readouterr().out


def test_malformed_manifest_exit_code(dumps, capsys):
    path = dumps / "train.json"
    manifest = json.loads(path.read_text())
    manifest["dim"] = "sixteen"
    path.write_text(json.dumps(manifest))
    assert main(["compute-delta", "--train", str(path), "--out", str(dumps / "d.delta")]) == 2
    assert "dim" in capsys.readouterr().err


def test_missing_diagonal_exit_code(tmp_path, capsys):
    s = make_set([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]], [0, 0, 1], [0, 0, 1], camera_ids=[0, 1, 0], num_views=2)
    write_embeddings(tmp_path / "t.json", s)
    assert main(["compute-delta", "--train", str(tmp_path / "t.json"), "--out", str(tmp_path / "d.delta")]) == 3


def test_view_range_exit_code(tmp_path, capsys):
    q = make_set([[1.0, 0.0]], [0], [2], num_views=3)
    g = make_set([[0.0, 1.0]], [0], [0], num_views=3, image_ids=[9])
    write_embeddings(tmp_path / "q.json", q)
    write_embeddings(tmp_path / "g.json", g)
    assert main(["apply", "--query", str(tmp_path / "q.json"), "--gallery", str(tmp_path / "g.json"),
                 "--bundled", "vehicleid"]) == 4


def test_no_valid_queries_exit_code(tmp_path, capsys):
    q = make_set([[1.0, 0.0]], [0])
    g = make_set([[0.0, 1.0]], [1], image_ids=[9])
    write_embeddings(tmp_path / "q.json", q)
    write_embeddings(tmp_path / "g.json", g)
    assert main(["eval", "--query", str(tmp_path / "q.json"), "--gallery", str(tmp_path / "g.json")]) == 1
