import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cleverscore.cli import main
from cleverscore.experiment import ManifestError, RunManifest, derive_seed, rows_from_csv
from cleverscore.fixtures import STANDARD_RECIPES, Dataset, build_fixture
from cleverscore.net import Activation, DenseLayer, Network, predict

FAST = ["--nb", "20", "--ns", "64"]


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    for name in ("blobs-relu16", "blobs-linear", "digits-relu64"):
        build_fixture(STANDARD_RECIPES[name], root)
    return root


def model_args(fx, name):
    return ["--model", str(fx / f"{name}.json"), "--data", str(fx / f"{name}.test.csv")]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_score_row_count_and_outputs(fx, tmp_path):
    out = tmp_path / "s"
    rc = main(["score", *model_args(fx, "blobs-relu16"), "--out", str(out), "--instances", "10", *FAST])
    assert rc == 0
    rows = read_csv(out / "results.csv")
    assert len(rows) == 60
    assert {r["target_kind"] for r in rows} == {"top2", "random", "least"}
    assert {r["p"] for r in rows} == {"2", "inf"}
    doc = json.loads((out / "results.json").read_text())
    assert len(doc["rows"]) == 60 and doc["manifest_hash"]
    assert (out / "plot_data.tsv").read_text().startswith("x\tseries\ty\n")
    assert (out / "scores.png").stat().st_size > 0


def test_rerun_is_byte_identical_across_workers(fx, tmp_path):
    outs = []
    for k, workers in enumerate((1, 2, 1)):
        out = tmp_path / f"r{k}"
        assert main(["score", *model_args(fx, "digits-relu64"), "--out", str(out), "--instances", "3",
                     "--workers", str(workers), "--no-plots", *FAST]) == 0
        outs.append((out / "results.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_manifest_defaults_and_overrides(fx, tmp_path):
    m = RunManifest.from_dict({"model": "m.json", "data": "d.csv"})
    assert (m.sampling.n_batches, m.sampling.n_per_batch, m.ball_radius) == (500, 1024, 5.0)
    path = tmp_path / "m.yaml"
    path.write_text(f"model: {fx / 'blobs-relu16.json'}\ndata: {fx / 'blobs-relu16.test.csv'}\n"
                    f"instances: 2\ntargets: [top2]\np: [2]\nsampling: {{n_batches: 10, n_per_batch: 32}}\n")
    out = tmp_path / "o"
    assert main(["score", "--manifest", str(path), "--out", str(out), "--no-plots"]) == 0
    assert len(read_csv(out / "results.csv")) == 2


@pytest.mark.parametrize("bad", [
    {"model": "m.json", "unknown_key": 1},
    {"p": [3]},
    {"targets": ["sideways"]},
    {"sampling": {"n_batches": 1}},
    {"workers": 0},
])
def test_bad_manifest_fields(bad):
    with pytest.raises(ManifestError):
        RunManifest.from_dict(bad)


def test_input_errors_exit_2(fx, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "layers": [\n  {"weights": [[1.0]] "bias": [0]}\n ]\n}')
    assert main(["score", "--model", str(bad), "--data", str(fx / "blobs-relu16.test.csv")]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["score", "--model", str(fx / "digits-relu64.json"),
                 "--data", str(fx / "blobs-relu16.test.csv")]) == 2
    assert main(["score", "--model", str(tmp_path / "missing.json"),
                 "--data", str(fx / "blobs-relu16.test.csv")]) == 2
    assert main(["score", "--manifest", str(tmp_path / "missing.yaml")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    assert main(["score", "--manifest", str(broken)]) == 2
    assert main(["oracle", *model_args(fx, "digits-relu64")]) == 2
    assert main(["build-fixtures", "--out", str(tmp_path), "--recipes", "nope"]) == 2


def test_numeric_failure_exit_3_still_writes(tmp_path):
    net = Network((DenseLayer([[1e200, 1e200]], [0.0], Activation("softplus")),
                   DenseLayer([[1e200], [-1e200]], [1.0, 0.0])))
    net.save(tmp_path / "huge.json")
    (tmp_path / "d.csv").write_text("x0,x1,label\n-1.0,-1.0,0\n")
    out = tmp_path / "o"
    rc = main(["score", "--model", str(tmp_path / "huge.json"), "--data", str(tmp_path / "d.csv"),
               "--out", str(out), "--instances", "1", "--targets", "top2", "--no-plots", *FAST])
    assert rc == 3
    rows = read_csv(out / "results.csv")
    assert rows and all("numeric-failure" in r["warnings"] for r in rows)


def test_compare_report(fx, tmp_path):
    out = tmp_path / "c"
    rc = main(["compare", *model_args(fx, "digits-relu64"), "--out", str(out), "--instances", "4", *FAST])
    assert rc == 0
    summary = json.loads((out / "comparison.json").read_text())
    assert 0.0 <= summary["fraction_valid"] <= 1.0
    for group in summary["groups"]:
        if group["mean_attack_distortion"] is not None:
            assert group["mean_clever_on_successes"] <= group["mean_attack_distortion"]
    rows = read_csv(out / "results.csv")
    assert all(r["slope_value"] for r in rows)
    for r in rows:
        dist = r["ifgsm_distortion"] if r["p"] == "inf" else r["l2_attack_distortion"]
        flagged = "slope-exceeds-attack" in r["warnings"]
        assert flagged == (bool(dist) and float(r["slope_value"]) > float(dist))
    assert list(out.glob("compare_*.png"))
    # the digits provenance turns the [0, 1] attack box on
    doc = json.loads((out / "results.json").read_text())
    assert doc["manifest"]["attack"]["input_box"] == [0.0, 1.0]


def test_compare_with_oracle_on_small_relu(tmp_path):
    rng = np.random.default_rng(0)
    net = Network((DenseLayer(rng.normal(size=(6, 2)), rng.normal(size=6), Activation("relu")),
                   DenseLayer(rng.normal(size=(3, 6)), np.zeros(3))))
    net.save(tmp_path / "small.json")
    x = rng.normal(size=(20, 2))
    Dataset(x, predict(net, x), num_classes=3).to_csv(tmp_path / "d.csv")
    out = tmp_path / "o"
    assert main(["compare", "--model", str(tmp_path / "small.json"), "--data", str(tmp_path / "d.csv"),
                 "--out", str(out), "--instances", "3", "--radius", "1", "--no-plots", *FAST]) == 0
    rows = read_csv(out / "results.csv")
    assert all(r["oracle_value"] for r in rows if r["p"] in ("2", "inf"))


def test_sweep_columns_and_timing(fx, tmp_path):
    out = tmp_path / "w"
    assert main(["sweep-samples", *model_args(fx, "blobs-relu16"), "--out", str(out), "--instances", "2",
                 "--ns", "64", "--nb-list", "5,10,40"]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [k for k in rows[0] if k.startswith("score_nb")] == ["score_nb5", "score_nb10", "score_nb40"]
    timing = read_csv(out / "sweep_timing.csv")
    seconds = [float(t["seconds"]) for t in timing]
    assert seconds == sorted(seconds)
    assert (out / "sweep.png").exists()


def test_sweep_matches_score(fx, tmp_path):
    args = [*model_args(fx, "digits-relu64"), "--instances", "2", "--ns", "64"]
    assert main(["sweep-samples", *args, "--out", str(tmp_path / "w"), "--nb-list", "8,16", "--no-plots"]) == 0
    assert main(["score", *args, "--out", str(tmp_path / "s"), "--nb", "16", "--no-plots"]) == 0
    sweep = read_csv(tmp_path / "w" / "sweep.csv")
    score = read_csv(tmp_path / "s" / "results.csv")
    assert [float(r["score_nb16"]) for r in sweep] == [float(r["clever_value"]) for r in score]


def test_fit_diagnostics(fx, tmp_path):
    out = tmp_path / "f"
    assert main(["fit-diagnostics", *model_args(fx, "digits-relu64"), "--out", str(out),
                 "--instances", "2", "--nb", "30", "--ns", "64"]) == 0
    doc = json.loads((out / "fit_diagnostics.json").read_text())
    assert 0.0 <= doc["percentage"] <= 100.0
    assert (out / "fit_histograms.tsv").exists() and (out / "fit_histograms.png").exists()
    out = tmp_path / "lin"
    assert main(["fit-diagnostics", *model_args(fx, "blobs-linear"), "--out", str(out),
                 "--instances", "2", "--nb", "10", "--ns", "16", "--no-plots"]) == 0
    doc = json.loads((out / "fit_diagnostics.json").read_text())
    assert doc["cells"] == 0 and doc["degenerate"] == 12 and doc["percentage"] is None


def test_attack_and_oracle_commands(fx, tmp_path):
    assert main(["attack", *model_args(fx, "blobs-relu16"), "--out", str(tmp_path), "--instances", "2",
                 "--targets", "top2"]) == 0
    rows = read_csv(tmp_path / "attacks.csv")
    assert len(rows) == 4 and {r["method"] for r in rows} == {"ifgsm", "margin_l2"}
    assert main(["oracle", *model_args(fx, "blobs-relu16"), "--out", str(tmp_path), "--instances", "2",
                 "--targets", "top2", "--radius", "1", "--n-dense", "20000"]) == 0
    rows = read_csv(tmp_path / "oracle.csv")
    assert len(rows) == 4
    for r in rows:
        assert float(r["dense_lipschitz"]) <= float(r["exact_lipschitz"]) * (1 + 1e-12)


def test_build_fixtures_command(tmp_path, capsys):
    assert main(["build-fixtures", "--out", str(tmp_path), "--recipes", "blobs-linear"]) == 0
    assert (tmp_path / "blobs-linear.json").exists()
    assert "blobs-linear" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cleverscore", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-samples" in res.stdout


def test_derive_seed_stable():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert 0 <= derive_seed(5, 3) < 2**63


def test_rows_from_csv_roundtrip(fx, tmp_path):
    main(["score", *model_args(fx, "blobs-linear"), "--out", str(tmp_path), "--instances", "1",
          "--targets", "top2", "--no-plots", *FAST])
    rows = rows_from_csv((tmp_path / "results.csv").read_text())
    assert len(rows) == 2 and rows[0]["degenerate"] is True


def test_json_mirrors_csv(fx, tmp_path):
    main(["compare", *model_args(fx, "blobs-relu16"), "--out", str(tmp_path), "--instances", "2",
          "--no-plots", *FAST])
    csv_rows = rows_from_csv((tmp_path / "results.csv").read_text())
    doc = json.loads((tmp_path / "results.json").read_text())
    assert list(csv_rows[0]) == doc["columns"]
    for a, b in zip(csv_rows, doc["rows"]):
        for column in doc["columns"]:
            x, y = a[column], b[column]
            if isinstance(x, float) and x != x:
                assert y == "nan"
            else:
                assert x == y, column
