import csv
import json
import time
from pathlib import Path

import pytest

from sspiwo.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from sspiwo.data import SyntheticSpec, generate_synthetic
from sspiwo.experiments import load_manifest
from sspiwo.objectives import ObjectiveSpec
from sspiwo.tabular import fixture_path
from sspiwo.training import TrainConfig, cross_split_evaluate, model_factory_for

TINY_DATA = dict(vocab_size=24, topic_size=4, min_len=3, max_len=6, n_labeled=40, n_unlabeled=20, n_test=10,
                 n_bayes=50)
TINY_TRAIN = dict(max_epochs=1, batch_size=8, k=2, anneal_steps=5)


def _manifest(path, out="out", flavors=("vae",), rates=(1.0,), extra=""):
    data = "\n".join(f"{k} = {v}" for k, v in TINY_DATA.items())
    train = "\n".join(f"{k} = {v}" for k, v in TINY_TRAIN.items())
    path.write_text(f'seed = 3\nout = "{out}"\nflavors = {json.dumps(list(flavors))}\nrates = {list(rates)}\n'
                    f'sweep_alpha = false\nalpha = 10.0\n{extra}\n[dataset]\nsynthetic = "syn-a"\n{data}\n'
                    f"[train]\n{train}\n")
    return path


def _corrupt_fixture(tmp_path):
    lines = fixture_path().read_text().splitlines()
    i = lines.index("table prior_z 2")
    lines[i + 1] = "0.7 0.4"
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join(lines) + "\n")
    return bad


def test_verify_identities_passes(capsys, tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "identities", "--models", "10", "--out", str(report)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    body = json.loads(report.read_text())
    assert body["passed"] and all(c["value"] < 1e-10 for c in body["checks"])


def test_corrupted_fixture_exits_one_naming_invariant(capsys, tmp_path):
    assert main(["verify", "identities", "--fixture", str(_corrupt_fixture(tmp_path))]) == EXIT_FAIL
    assert "row-sum" in capsys.readouterr().err


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["verify", "nonsense"]) == EXIT_USAGE
    assert main(["run", "--manifest", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text('flavors = ["vae"]\nrates = [1.0]\ncolour = 1\n[dataset]\nsynthetic = "syn-a"\n')
    assert main(["run", "--manifest", str(bad)]) == EXIT_USAGE
    assert "colour" in capsys.readouterr().err
    bad.write_text('flavors = ["vae"]\nrates = [1.5]\n[dataset]\nsynthetic = "syn-a"\n')
    assert main(["run", "--manifest", str(bad)]) == EXIT_USAGE
    assert main(["bounds", "--x", "9", "--out", str(tmp_path)]) == EXIT_USAGE


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK


def test_bounds_and_plot(tmp_path, capsys):
    assert main(["bounds", "--out", str(tmp_path), "--k", "1,2,3,4"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bounds.csv")))
    assert [int(r["k"]) for r in rows] == [1, 2, 3, 4]
    for r in rows:
        v = {k: float(x) for k, x in r.items()}
        assert v["elbo"] <= v["iwae"] + 1e-10 and v["iwae"] <= v["log_px"] + 1e-10
        assert v["piwo"] <= v["limit_y"] + 1e-10 and v["ipiwo"] <= v["limit_z"] + 1e-10
    assert main(["plot", str(tmp_path)]) == EXIT_OK
    svg = tmp_path / "bounds_vs_k.svg"
    first = svg.read_bytes()
    assert first.startswith(b"<?xml") and b"<svg" in first
    assert main(["plot", str(tmp_path)]) == EXIT_OK
    assert svg.read_bytes() == first


def test_plot_errors(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["plot", str(empty)]) == EXIT_USAGE
    (tmp_path / "results.csv").write_text("flavor,rate,split,test_accuracy\nvae,1,0,0.5\n")
    assert main(["plot", str(tmp_path)]) == EXIT_USAGE
    assert "'status'" in capsys.readouterr().err
    assert main(["plot", str(tmp_path / "nope")]) == EXIT_USAGE


def test_single_cell_run_matches_cross_split_evaluate(tmp_path, capsys):
    m = _manifest(tmp_path / "m.toml")
    assert main(["run", "--manifest", str(m)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "out" / "results.csv")))
    assert len(rows) == 5 and all(r["status"] == "ok" for r in rows)
    ds = generate_synthetic(SyntheticSpec(**TINY_DATA))
    cfg = TrainConfig(seed=3, **TINY_TRAIN)
    ref = cross_split_evaluate(model_factory_for(ds), ds, ObjectiveSpec("vae", k=2, alpha=10.0), cfg, sweep=False)
    assert [float(r["test_accuracy"]) for r in rows] == pytest.approx(ref.accuracies, abs=1e-6)
    table = (tmp_path / "out" / "results.txt").read_text()
    assert ref.formatted() + "*" in table
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["cells"][0]["mean"] == pytest.approx(ref.mean)


def test_run_is_byte_reproducible_and_plots(tmp_path, capsys):
    m = _manifest(tmp_path / "m.toml", flavors=("none", "piwo"), rates=(0.5, 1.0))
    outs = []
    for name in ("a", "b"):
        assert main(["run", "--manifest", str(m), "--out", str(tmp_path / name)]) == EXIT_OK
        assert main(["plot", str(tmp_path / name)]) == EXIT_OK
        outs.append({f: (tmp_path / name / f).read_bytes()
                     for f in ("results.csv", "results.txt", "accuracy_vs_rate.svg", "anneal_trace.svg")})
    assert outs[0] == outs[1]
    table = outs[0]["results.txt"].decode()
    assert "None" in table and "PIWO" in table and "50%" in table
    # exactly one best semi-supervised mark per rate column
    assert table.count("*") == 2 + table.count("* =")


def test_flag_beats_environment_beats_manifest(tmp_path, monkeypatch, capsys):
    m = _manifest(tmp_path / "m.toml", out="from_manifest")
    monkeypatch.setenv("SSPIWO_OUT", str(tmp_path / "from_env"))
    assert main(["run", "--manifest", str(m)]) == EXIT_OK
    assert (tmp_path / "from_env" / "results.csv").exists()
    assert main(["run", "--manifest", str(m), "--out", str(tmp_path / "from_flag")]) == EXIT_OK
    assert (tmp_path / "from_flag" / "results.csv").exists()
    assert not (tmp_path / "from_manifest").exists()
    monkeypatch.setenv("SSPIWO_SEED", "notanint")
    assert main(["run", "--manifest", str(m)]) == EXIT_USAGE


def test_failed_cell_is_recorded_and_run_continues(tmp_path, capsys):
    m = _manifest(tmp_path / "m.toml", flavors=("vae",), rates=(0.01, 1.0))
    assert main(["run", "--manifest", str(m)]) == EXIT_FAIL
    rows = list(csv.DictReader(open(tmp_path / "out" / "results.csv")))
    status = {r["rate"]: r["status"] for r in rows}
    assert status["0.01"].startswith("error: DataError")
    assert status["1"] == "ok"
    assert "failed" in (tmp_path / "out" / "results.txt").read_text()


@pytest.mark.slow
def test_verify_all_within_budget(tmp_path, capsys):
    start = time.perf_counter()
    code = main(["verify", "all", "--out", str(tmp_path / "report.json")])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK
    assert elapsed < 300, f"verify all took {elapsed:.0f} s"


def test_shipped_manifest_parses():
    m = load_manifest(Path(__file__).parents[1] / "manifests" / "syn-a.toml")
    assert m.flavors == ["none", "vae", "piwo", "ipiwo", "iwae"]
    assert m.train.alpha_grid == (1.0, 10.0, 100.0, 1000.0) and m.train.anneal_steps == 300
