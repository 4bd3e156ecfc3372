import csv
import json
import time

import numpy as np
import pytest

import rmflow.cli as cli
from rmflow.cli import main
from rmflow.data import ingest_csv
from rmflow.errors import NonFinite
from rmflow.evaluate import read_report_csv
from rmflow.geometry import Sphere
from rmflow.train import LOG_FIELDS

RING = {"name": "ring", "manifold": "sphere:3", "generator": "sphere_ring", "n": 600}


def write_cfg(path, **over):
    cfg = {"dataset": dict(RING), "net": {"hidden_dim": 16, "num_layers": 2, "time_embed_dim": 4},
           "train": {"batch_size": 100, "epochs": 2, "log_wallclock": False}}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_cfg(d / "c.json")
    assert main(["-q", "train", "--config", str(cfg), "--out", str(d / "out")]) == 0
    return d / "out"


def read_rows(path):
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]


# -- train ------------------------------------------------------------------------


def test_train_outputs(run):
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert resolved["train"]["base_lr"] == 5e-4 and resolved["train"]["weight_decay"] == 0.01
    assert resolved["train"]["p_eq"] == 0.75
    assert resolved["train"]["total_steps"] == 2 * resolved["train"]["iterations_per_epoch"]
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_0001.rmf", "epoch_0002.rmf"]
    assert (run / "final.rmf").read_bytes() == (run / "checkpoints" / "epoch_0002.rmf").read_bytes()
    with open(run / "train_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_FIELDS
    assert len(rows) - 1 == resolved["train"]["total_steps"]


def test_rerun_and_resolved_config_are_bit_identical(run, tmp_path):
    assert main(["-q", "train", "--config", str(run / "config.resolved.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final.rmf").read_bytes() == (run / "final.rmf").read_bytes()
    assert (tmp_path / "train_log.csv").read_bytes() == (run / "train_log.csv").read_bytes()


def test_seed_flag_changes_run(run, tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    assert (tmp_path / "o" / "final.rmf").read_bytes() != (run / "final.rmf").read_bytes()
    assert json.loads((tmp_path / "o" / "config.resolved.json").read_text())["train"]["seed"] == 7


def test_track_val_keeps_best(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", train={"epochs": 1})
    assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--track-val"]) == 0
    assert (tmp_path / "o" / "best.rmf").is_file()


def test_one_epoch_ring_budget(tmp_path):
    cfg = {"dataset": {"name": "ring", "manifold": "sphere:3", "generator": "sphere_ring", "n": 10_000},
           "net": {"hidden_dim": 128}, "train": {"batch_size": 256, "epochs": 1}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    t0 = time.perf_counter()
    assert main(["-q", "train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0
    assert time.perf_counter() - t0 < 60.0


# -- sample -----------------------------------------------------------------------


def test_sample_rows_norms_and_header(run, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["-q", "sample", str(run / "final.rmf"), "--n", "37", "--seed", "3", "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    assert text[0] == "# manifold=sphere:3 K=1 seed=3 omega=0.0"
    x = ingest_csv(out, Sphere(3), "ambient", tol=1.0)
    assert len(read_rows(out)) == 37
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-6)


def test_steps_one_equals_default(run, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["-q", "sample", str(run / "final.rmf"), "--n", "20", "--out", str(a)])
    main(["-q", "sample", str(run / "final.rmf"), "--n", "20", "--steps", "1", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    main(["-q", "sample", str(run / "final.rmf"), "--n", "20", "--steps", "3", "--out", str(c)])
    assert read_rows(c) != read_rows(a)


def test_sample_latlon_layout(run, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["-q", "sample", str(run / "final.rmf"), "--n", "10", "--out", str(a)])
    main(["-q", "sample", str(run / "final.rmf"), "--n", "10", "--out", str(b), "--layout", "latlon_degrees"])
    xa = ingest_csv(a, Sphere(3), "ambient")
    xb = ingest_csv(b, Sphere(3), "latlon_degrees")
    np.testing.assert_allclose(xa, xb, atol=1e-12)


def test_conditional_sample_has_label_column(tmp_path):
    comps = [{"mu": [1, 0, 0], "kappa": 20.0}, {"mu": [-1, 0, 0], "kappa": 20.0}]
    cfg = write_cfg(tmp_path / "c.json", objective={"name": "cfg", "p_drop": 0.1},
                    dataset={"name": "mix", "manifold": "sphere:3", "generator": "sphere_vmf_mixture",
                             "n": 400, "params": {"components": comps}},
                    net={"num_classes": 2}, train={"epochs": 1})
    assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "s.csv"
    assert main(["-q", "sample", str(tmp_path / "o" / "final.rmf"), "--n", "8", "--label", "1",
                 "--omega", "1.5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 8 and all(r.split(",")[-1] == "1" for r in rows)
    assert "omega=1.5" in out.read_text().splitlines()[0]


# -- eval -------------------------------------------------------------------------


def test_eval_rows_and_aggregate(run, tmp_path, capsys):
    out = tmp_path / "e.csv"
    assert main(["-q", "eval", str(run / "final.rmf"), "--n", "60", "--out", str(out)]) == 0
    rows = read_report_csv(out)
    per_seed = [r for r in rows if r["seed"] != "mean"]
    agg = [r for r in rows if r["seed"] == "mean"]
    assert [r["seed"] for r in per_seed] == ["0", "1", "2", "3", "4"] and len(agg) == 1
    vals = [float(r["mmd"]) for r in per_seed]
    assert abs(float(agg[0]["mmd"]) - sum(vals) / 5) <= 1e-12
    assert abs(float(agg[0]["std"]) - float(np.std(vals))) <= 1e-12
    assert "K=1,mean=" in capsys.readouterr().out


def test_eval_with_explicit_data(run, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["-q", "eval", str(run / "final.rmf"), "--data", str(run / "test.csv"), "--n", "30",
                 "--steps", "2", "--seed", "1", "--out", str(out)]) == 0
    rows = read_report_csv(out)
    assert [(r["K"], r["seed"]) for r in rows] == [("2", "1"), ("2", "mean")]


# -- diag -------------------------------------------------------------------------


def write_log(path, cosines):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for i, c in enumerate(cosines):
            w.writerow([i, 0, 1e-3, 1.0, 0.5, 1.5, c, 0, 0.0])


def test_diag_fraction_matches_recount(tmp_path, capsys):
    cos = np.random.default_rng(0).uniform(-1, 1, 100)
    write_log(tmp_path / "log.csv", [repr(float(c)) for c in cos])
    assert main(["-q", "diag", str(tmp_path / "log.csv"), "--out", str(tmp_path / "d.csv")]) == 0
    recount = sum(1 for c in cos if c < 0) / 100
    assert f"fraction_negative={recount:.6f}" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert len(rows) == 100 and float(rows[-1]["running_average"]) == pytest.approx(cos.mean(), abs=1e-12)


def test_diag_not_applicable_for_single_loss(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", objective="rfm", train={"epochs": 1})
    assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert main(["-q", "diag", str(tmp_path / "o" / "train_log.csv")]) == 0
    assert "not applicable" in capsys.readouterr().out
    assert not (tmp_path / "o" / "grad_cosine.csv").exists()


def test_diag_empty_log(tmp_path, capsys):
    (tmp_path / "log.csv").write_text(",".join(LOG_FIELDS) + "\n")
    assert main(["diag", str(tmp_path / "log.csv")]) == 4
    assert "empty" in capsys.readouterr().err
    assert main(["diag", str(tmp_path / "missing.csv")]) == 4


# -- gen-data ---------------------------------------------------------------------


def test_gen_data(tmp_path):
    (tmp_path / "d.json").write_text(json.dumps(RING))
    assert main(["-q", "gen-data", "--config", str(tmp_path / "d.json"), "--out", str(tmp_path / "o"),
                 "--n", "200", "--layout", "latlon_degrees"]) == 0
    sizes = [len(ingest_csv(tmp_path / "o" / f"{p}.csv", Sphere(3), "latlon_degrees"))
             for p in ("train", "val", "test")]
    assert sizes == [160, 20, 20]


# -- exit codes -------------------------------------------------------------------


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dataset": {\n  "name": "x",\n  oops\n}')
    assert main(["train", "--config", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "c.json", train={"batch_size": 0})
    assert main(["train", "--config", str(cfg)]) == 2
    cfg = write_cfg(tmp_path / "c2.json", objective="nope")
    assert main(["train", "--config", str(cfg)]) == 2


def test_io_errors_exit_4(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 4
    assert main(["sample", str(tmp_path / "none.rmf")]) == 4
    (tmp_path / "junk.rmf").write_bytes(b"nope")
    assert main(["sample", str(tmp_path / "junk.rmf")]) == 4


def test_numeric_failure_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFinite("parameters became non-finite")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(write_cfg(tmp_path / "c.json"))]) == 3


def test_mismatched_config_and_flags(run, tmp_path):
    other = write_cfg(tmp_path / "c.json", net={"hidden_dim": 32})
    assert main(["sample", str(run / "final.rmf"), "--config", str(other)]) == 2
    assert main(["sample", str(run / "final.rmf"), "--omega", "1.0", "--out", str(tmp_path / "s.csv")]) == 2
    assert main(["sample", str(run / "final.rmf"), "--steps", "0", "--out", str(tmp_path / "s.csv")]) == 2


def test_thread_cap_env(run, tmp_path, monkeypatch):
    monkeypatch.setenv("RMF_THREADS", "1")
    assert main(["-q", "sample", str(run / "final.rmf"), "--n", "5", "--out", str(tmp_path / "s.csv")]) == 0
    monkeypatch.setenv("RMF_THREADS", "zero")
    assert main(["sample", str(run / "final.rmf")]) == 2
