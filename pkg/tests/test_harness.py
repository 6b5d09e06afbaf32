import copy
import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from lcfl.errors import ComparabilityError, ConfigError, ParameterError
from lcfl.harness import cli, runner
from lcfl.harness.config import DEFAULT_VERIFY, load_config, load_profile, parse_document, parse_verify

TINY = {
    "name": "tiny",
    "federation": {"num_clients": 6, "generator": "label-shard",
                   "params": {"num_classes": 4, "classes_per_client": 2, "m_per_client": 20,
                              "base": "synthetic-blobs", "input_dim": 3, "pool_per_class": 100}},
    "model": {"kind": "softmax", "input_dim": 3, "num_classes": 4},
    "algorithms": ["lcfl", "ifca", "fedavg", "local"],
    "lcfl": {"metric": "loss-gap", "clusterer": {"method": "k-medoids", "k": 2}},
    "ifca": {"k": 2},
    "fed": {"participation_rate": 0.5, "global_iterations": 3,
            "train": {"init_lr": 0.05, "batch_size": 5, "local_epochs": 1, "local_iterations": 2}},
    "seeds": [0, 1, 2, 3, 4],
}


def tiny(tmp_path, **over):
    doc = copy.deepcopy(TINY)
    doc.update(over)
    return parse_document(doc, output_dir=str(tmp_path / "out"))


def read(path):
    return (path).read_bytes()


# --------------------------------------------------------------------------- config

def test_profiles_parse():
    for name in ("rotmnist-mini", "femnist-mini", "linear-k2"):
        cfgs = load_config(profile=name)
        assert cfgs and all(c.seeds == [0, 1, 2, 3, 4] for c in cfgs)
    rot = {c.algorithm: c for c in load_config(profile="rotmnist-mini")}
    assert rot["lcfl"].federation.num_clients == 40 and rot["lcfl"].clustering.k == 4
    assert rot["ifca"].ifca_k == 4 and rot["ifca"].clustering is None


@pytest.mark.parametrize("mutate, key", [
    (lambda d: d.pop("seeds"), "seeds"),
    (lambda d: d.update(seeds=[]), "seeds"),
    (lambda d: d.update(seeds=[1, -2]), "seeds[1]"),
    (lambda d: d.update(algorithms=["lcfl", "svm"]), "algorithms[1]"),
    (lambda d: d["lcfl"].update(metric="cosine"), "lcfl.metric"),
    (lambda d: d["lcfl"].update(metric="loss-exchange"), "lcfl.metric"),
    (lambda d: d["lcfl"]["clusterer"].update(method="kmeans"), "lcfl.clusterer.method"),
    (lambda d: d["lcfl"]["clusterer"].pop("k"), "lcfl.clusterer.k"),
    (lambda d: d["fed"]["train"].update(momentum=0.9), "fed.train.momentum"),
    (lambda d: d["fed"]["train"].update(init_lr=-1), "fed.train"),
    (lambda d: d["fed"].update(participation_rate=0.0), "fed"),
    (lambda d: d["federation"].update(num_clients="many"), "federation.num_clients"),
    (lambda d: d["model"].update(kind="svm"), "model"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d.pop("ifca"), "ifca"),
])
def test_config_errors_name_the_key(mutate, key):
    doc = copy.deepcopy(TINY)
    mutate(doc)
    with pytest.raises(ConfigError) as ei:
        parse_document(doc)
    assert ei.value.key == key


def test_single_algorithm_sections():
    doc = copy.deepcopy(TINY)
    doc.pop("algorithms")
    doc["algorithm"] = "fedavg"
    with pytest.raises(ConfigError) as ei:
        parse_document(doc)
    assert ei.value.key == "lcfl"
    doc.pop("lcfl")
    doc.pop("ifca")
    (cfg,) = parse_document(doc, output_dir="x")
    assert cfg.output_dir == "x"


def test_debug_metric_behind_flag():
    doc = copy.deepcopy(TINY)
    doc["lcfl"]["metric"] = "loss-exchange"
    doc["debug"] = {"allow_loss_exchange_metric": True}
    assert parse_document(doc)[0].clustering.metric == "loss-exchange"


def test_manifest_echoes_defaults(tmp_path):
    cfg = tiny(tmp_path)[0]
    r = cfg.resolved()
    assert r["fed"]["train"]["lr_decay"] == 0.99  # default filled in
    assert r["fed"]["weighted_accuracy"] is False
    assert r["lcfl"]["restarts"] == 5 and r["data"]["test_fraction"] == 0.2


def test_verify_config_validation():
    with pytest.raises(ConfigError) as ei:
        parse_verify({"theorem1": {"delta": 0}})
    assert ei.value.key == "theorem1.delta"
    with pytest.raises(ConfigError):
        parse_verify({"theorem1": {"nope": 1}})
    assert parse_verify(None) == DEFAULT_VERIFY


# --------------------------------------------------------------------------- run

def test_run_artifacts_and_determinism(tmp_path):
    cfgs = tiny(tmp_path)
    runner.run(cfgs)
    out = tmp_path / "out"
    for alg in ("lcfl", "ifca", "fedavg", "local"):
        d = out / alg
        for s in range(5):
            assert (d / f"raw_seed{s}.csv").exists() and (d / f".done_seed{s}").exists()
        assert (d / "manifest.json").exists()
        rows = list(csv.DictReader(open(d / "summary.csv", newline="", encoding="utf-8")))
        assert list(rows[0]) == ["iteration", "algorithm", "acc_mean", "acc_std"]
        assert len(rows) == 3
        # the summary std is over exactly the 5 per-seed values
        vals = [float(list(csv.DictReader(open(d / f"raw_seed{s}.csv")))[-1]["accuracy_mean_over_clients"])
                for s in range(5)]
        assert float(rows[-1]["acc_mean"]) == pytest.approx(np.mean(vals))
        assert float(rows[-1]["acc_std"]) == pytest.approx(np.std(vals))
    snap = {p: read(p) for p in out.rglob("*") if p.is_file()}
    assert b"\r\n" not in snap[out / "lcfl" / "summary.csv"]
    # full recompute of the same config gives identical bytes
    runner.run(tiny(tmp_path), resume=False)
    for p, b in snap.items():
        assert read(p) == b


def test_threaded_run_matches_serial(tmp_path):
    a = parse_document(copy.deepcopy(TINY), output_dir=str(tmp_path / "a"))[:1]
    b = parse_document(copy.deepcopy(TINY), output_dir=str(tmp_path / "b"))[:1]
    runner.run(a, threads=1)
    runner.run(b, threads=3)
    for s in range(5):
        assert read(tmp_path / "a/lcfl" / f"raw_seed{s}.csv") == read(tmp_path / "b/lcfl" / f"raw_seed{s}.csv")


def test_single_seed_std_zero(tmp_path):
    cfg = parse_document(copy.deepcopy(TINY), output_dir=str(tmp_path), seeds=[3])[2]
    runner.run([cfg])
    rows = list(csv.DictReader(open(tmp_path / "fedavg" / "summary.csv")))
    assert all(float(r["acc_std"]) == 0.0 for r in rows)


def test_resume_skips_completed_seeds(tmp_path):
    cfg = parse_document(copy.deepcopy(TINY), output_dir=str(tmp_path), seeds=[0, 1])[2]
    runner.run([cfg])
    raw0 = tmp_path / "fedavg" / "raw_seed0.csv"
    stamp = raw0.stat().st_mtime_ns
    (tmp_path / "fedavg" / ".done_seed1").unlink()
    (tmp_path / "fedavg" / "raw_seed1.csv").write_text("partial")
    runner.run([cfg])
    assert (tmp_path / "fedavg" / ".done_seed1").exists()
    assert (tmp_path / "fedavg" / "raw_seed1.csv").read_text().startswith("iteration,")
    assert raw0.stat().st_mtime_ns == stamp  # completed seed was not recomputed


def test_lcfl_extra_artifacts(tmp_path):
    runner.run(tiny(tmp_path)[:1])
    d = tmp_path / "out" / "lcfl"
    assert (d / "assignment_seed0.csv").read_text().startswith("client_id,cluster_id,is_noise\n")
    assert "ari" in json.loads((d / "run_seed0.json").read_text())["metadata"]


# --------------------------------------------------------------------------- compare

def test_compare_table(tmp_path):
    cfgs = tiny(tmp_path)
    table = runner.compare(cfgs, [1, 3], output=str(tmp_path / "cmp.csv"))
    lines = table.splitlines()
    assert lines[0] == "iteration,lcfl,ifca,fedavg,local"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "3"]
    assert "±" in lines[1]
    assert (tmp_path / "cmp.csv").read_text(encoding="utf-8") == table
    single = runner.compare(cfgs[:1], [3])
    assert single.splitlines()[0] == "iteration,lcfl"


def test_compare_duplicate_labels(tmp_path):
    cfgs = tiny(tmp_path)
    twin = copy.deepcopy(cfgs[0])
    twin.name = "twin"
    twin.output_dir = str(tmp_path / "twin")
    header = runner.compare([cfgs[0], twin], [1]).splitlines()[0]
    assert header == f"iteration,lcfl@{cfgs[0].name},lcfl@twin"


def test_compare_errors(tmp_path):
    cfgs = tiny(tmp_path)
    with pytest.raises(ParameterError):
        runner.compare(cfgs, [4])
    other = copy.deepcopy(TINY)
    other["federation"]["num_clients"] = 8
    with pytest.raises(ComparabilityError):
        runner.compare([cfgs[0], parse_document(other)[1]], [1])


# --------------------------------------------------------------------------- verify, gen-data, inspect

def test_verify_small_config(tmp_path):
    vcfg = parse_verify({"theorem1": {"trials": 50, "rademacher_sets": 2, "rademacher_sigma": 8},
                         "sandwich": {"instances": 10}, "discrepancy": {"pairs": 2}}, str(tmp_path))
    lines = []
    assert runner.verify(vcfg, echo=lines.append) == 0
    assert [ln.split()[0] for ln in lines] == ["PASS"] * 3
    rep = json.loads((tmp_path / "theorem1.json").read_text())
    assert rep["threshold"] == pytest.approx(0.6561) and "frequency" in rep
    assert json.loads((tmp_path / "sandwich.json").read_text())["passed"] == 10


def test_gen_data_and_inspect(tmp_path):
    cfg = tiny(tmp_path)[0]
    out = runner.gen_data(cfg, 0, tmp_path / "data")
    meta = json.loads((out / "federation.json").read_text())
    assert len(meta["clients"]) == 6
    z = np.load(out / "client_0000.npz")
    assert z["train_x"].shape == (16, 3) and z["test_x"].shape == (4, 3)
    text = runner.inspect_matrix(cfg, 0, digits=3)
    assert text.startswith("# loss-gap distances, 6 clients, seed 0")
    assert len(text.splitlines()) == 8


# --------------------------------------------------------------------------- CLI

def test_cli_run_and_errors(tmp_path, capsys):
    doc = copy.deepcopy(TINY)
    doc["algorithms"] = ["fedavg"]
    doc.pop("lcfl")
    doc.pop("ifca")
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert cli.main(["run", "--config", str(path), "--seed-override", "0,1", "--output-dir", str(tmp_path / "o"),
                     "--threads", "2"]) == 0
    # a one-element algorithm list writes straight into the output directory
    assert (tmp_path / "o" / "raw_seed1.csv").exists()
    assert not (tmp_path / "o" / "raw_seed2.csv").exists()
    doc["fed"]["global_iterations"] = "ten"
    path.write_text(yaml.safe_dump(doc))
    assert cli.main(["run", "--config", str(path)]) == 2
    assert "fed.global_iterations" in capsys.readouterr().err


def test_cli_verify_bad_delta(tmp_path, capsys):
    path = tmp_path / "v.yaml"
    path.write_text("theorem1:\n  delta: 0\n")
    assert cli.main(["verify", "--config", str(path)]) == 2
    assert "theorem1.delta" in capsys.readouterr().err


def test_cli_threads_env(monkeypatch):
    monkeypatch.setenv("LCFL_THREADS", "3")
    assert runner.default_threads() == 3
    monkeypatch.setenv("LCFL_THREADS", "zero")
    with pytest.raises(ParameterError):
        runner.default_threads()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lcfl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("run", "compare", "verify", "gen-data", "inspect-matrix"):
        assert cmd in res.stdout


def test_cli_inspect_matrix(capsys):
    assert cli.main(["inspect-matrix", "--profile", "linear-k2", "--digits", "2"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# loss-gap distances, 20 clients")


def test_example_config_parses():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(root / "example.yaml")
    (k10,) = load_config(root / "rotmnist-mini-k10.yaml")
    (prof,) = [c for c in load_config(profile="rotmnist-mini") if c.algorithm == "lcfl"]
    assert k10.comparable_key() == prof.comparable_key()
