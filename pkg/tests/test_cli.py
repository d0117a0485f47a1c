import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mlimpute.benchmark import SimulationConfig, apply_mcar_mask, generate_multilevel_data
from mlimpute.cli import load_dataset, main
from mlimpute.errors import ParseError, SchemaMismatch

SCHEMA = [{"name": "hospital", "group": True},
          {"name": "age", "kind": "quantitative"},
          {"name": "score", "kind": "quantitative"},
          {"name": "grade", "kind": "categorical", "categories": ["1", "2"]}]


def _write(tmp_path, text, schema=SCHEMA, name="data.csv"):
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    (tmp_path / name).write_text(text)
    return str(tmp_path / name), str(tmp_path / "schema.json")


def _sim_csv(path, ds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        qn = [c.name for c in ds.quantitative_columns]
        cn = [c.name for c in ds.categorical_columns]
        w.writerow(["group"] + qn + cn)
        labels = ds.labels()
        for i in range(ds.n):
            q = ["NA" if np.isnan(v) else repr(float(v)) for v in ds.quantitative[i]]
            c = ["NA" if v is None else v for v in labels[i]]
            w.writerow([ds.groups.labels[ds.groups.assignment[i]]] + q + c)


def _sim_schema(path, ds):
    cols = [{"name": "group", "group": True}]
    cols += [{"name": c.name, "kind": "quantitative"} for c in ds.quantitative_columns]
    cols += [{"name": c.name, "kind": "categorical", "categories": list(c.categories)}
             for c in ds.categorical_columns]
    path.write_text(json.dumps({"columns": cols}))


def test_toy_csv_one_na(tmp_path):
    csv_path, schema = _write(tmp_path, "hospital,age,score,grade\nA,1,2.5,1\nB,NA,3,2\nA,4,1,2\n")
    ds = load_dataset(csv_path, schema)
    assert (~ds.mask).sum() == 1 and not ds.mask[1, 0]
    assert ds.groups.K == 2


def test_numeric_token_in_categorical_is_a_label(tmp_path):
    csv_path, schema = _write(tmp_path, "hospital,age,score,grade\nA,1,2,2\nA,2,3,1\n")
    ds = load_dataset(csv_path, schema)
    assert ds.categorical[:, 0].tolist() == [1, 0]
    assert ds.quantitative.shape == (2, 2)


def test_new_group_label_is_a_new_group(tmp_path):
    csv_path, schema = _write(tmp_path, "hospital,age,score,grade\nA,1,2,2\nZ9,2,3,1\nA,0,0,1\n")
    ds = load_dataset(csv_path, schema)
    assert ds.groups.K == 2 and ds.groups.sizes.tolist() == [2, 1]


def test_parse_errors(tmp_path):
    csv_path, schema = _write(tmp_path, "hospital,age,score,grade\nA,1,x,2\n")
    with pytest.raises(ParseError) as exc:
        load_dataset(csv_path, schema)
    assert exc.value.line == 2 and exc.value.column == "score"
    csv_path, schema = _write(tmp_path, "hospital,age,score,grade\nA,1,2,3\n")
    with pytest.raises(ParseError):
        load_dataset(csv_path, schema)
    csv_path, schema = _write(tmp_path, "hospital,age,grade\nA,1,2\n")
    with pytest.raises(SchemaMismatch):
        load_dataset(csv_path, schema)


def test_impute_complete_file_is_byte_identical(tmp_path, capsys):
    text = "hospital,age,score,grade\nA,1.50,2,1\nA,3,1e0,2\nB,2,7,1\nB,5,0.25,2\nA,4,3,1\n"
    csv_path, schema = _write(tmp_path, text)
    out = tmp_path / "out.csv"
    assert main(["impute", "--input", csv_path, "--schema", schema, "--output", str(out),
                 "--qb", "0", "--qw", "1"]) == 0
    assert out.read_bytes() == text.encode()
    side = json.loads((tmp_path / "out.csv.json").read_text())
    assert side["iterations"] == 1 and side["fuzzy_memberships"] == []


def _sim_files(tmp_path, p_c=2, seed=0):
    cfg = SimulationConfig(K=3, n_k=15, p_q=4, p_c=p_c, q_between=1, q_within=2, seed=seed)
    ds, _ = generate_multilevel_data(cfg)
    ds = apply_mcar_mask(ds, 0.15, seed)
    _sim_csv(tmp_path / "sim.csv", ds)
    _sim_schema(tmp_path / "sim.schema.json", ds)
    return str(tmp_path / "sim.csv"), str(tmp_path / "sim.schema.json"), ds


def test_impute_deterministic_and_sidecar(tmp_path):
    csv_path, schema, ds = _sim_files(tmp_path)
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}.csv"
        assert main(["impute", "--input", csv_path, "--schema", schema, "--output", str(out),
                     "--method", "mlfamd", "--qb", "1", "--qw", "2", "--seed", "3"]) == 0
        outs.append((out.read_bytes(), (tmp_path / f"out{k}.csv.json").read_bytes()))
    assert outs[0] == outs[1]
    back = load_dataset(str(tmp_path / "out0.csv"), schema)
    assert back.is_complete
    side = json.loads(outs[0][1])
    assert side["ranks"] == {"qb": 1, "qw": 2}
    n_missing_cat = int((ds.categorical < 0).sum())
    assert len(side["fuzzy_memberships"]) == n_missing_cat
    for f in side["fuzzy_memberships"]:
        assert abs(sum(f["memberships"].values()) - 1) <= 1e-8


@pytest.mark.parametrize("method", ["global", "separate", "mean"])
def test_impute_baselines(tmp_path, method):
    csv_path, schema, _ = _sim_files(tmp_path)
    out = tmp_path / "out.csv"
    assert main(["impute", "--input", csv_path, "--schema", schema, "--output", str(out),
                 "--method", method, "--qw", "2"]) == 0
    assert load_dataset(str(out), schema).is_complete


def test_error_json_and_exit_code(tmp_path, capsys):
    csv_path, schema, _ = _sim_files(tmp_path)
    code = main(["impute", "--input", csv_path, "--schema", schema, "--output",
                 str(tmp_path / "o.csv"), "--method", "mlpca"])
    err = json.loads(capsys.readouterr().err)
    assert code == 2 and err["error"] == "schema_mismatch"
    assert main(["impute", "--input", csv_path]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "invalid_config"
    assert main(["impute", "--input", str(tmp_path / "nope.csv"), "--schema", schema,
                 "--output", str(tmp_path / "o.csv")]) == 1


def test_cv_command(tmp_path, capsys):
    csv_path, schema, _ = _sim_files(tmp_path, p_c=0)
    out = tmp_path / "cv.csv"
    assert main(["cv", "--input", csv_path, "--schema", schema, "--output", str(out),
                 "--qb-grid", "0,1", "--qw-grid", "1,2", "--repeats", "2"]) == 0
    choice = json.loads(capsys.readouterr().out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["qb", "qw", "mean_score", "repeat_0", "repeat_1"]
    assert len(rows) == 5
    best = min(rows[1:], key=lambda r: float(r[2]))
    assert float(best[2]) <= min(float(r[2]) for r in rows[1:]) + 1e-8
    assert (choice["qb"], choice["qw"]) in {(int(r[0]), int(r[1])) for r in rows[1:]}


def test_simulate_command(tmp_path):
    cfg = {"simulation": {"K": 3, "n_k": 10, "p_q": 5, "q_between": 1, "q_within": 1},
           "methods": ["mlpca", "global", "mean"], "replications": 2,
           "ranks": {"qb": 1, "qw": 1, "global": 2}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "rep"
    assert main(["simulate", "--config", str(tmp_path / "cfg.json"),
                 "--output-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert len(rows) == 6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["wall_seconds"] > 0
    assert all(summary["methods"][m]["mean_seconds"] >= 0 for m in cfg["methods"])


def test_run_master_with_tcp_workers(tmp_path):
    csv_path, schema, ds = _sim_files(tmp_path, p_c=0)
    rows = list(csv.reader(open(csv_path)))
    header, body = rows[0], rows[1:]
    site_files = []
    for k, label in enumerate(ds.groups.labels):
        p = tmp_path / f"site{k}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(r for r in body if r[0] == label)
        site_files.append(p)
    ref = tmp_path / "central.csv"
    assert main(["impute", "--input", csv_path, "--schema", schema, "--output", str(ref),
                 "--method", "mlpca", "--qb", "1", "--qw", "2"]) == 0

    cmd = [sys.executable, "-m", "mlimpute.cli"]
    master = subprocess.Popen(cmd + ["run-master", "--workers", "3", "--method", "mlpca",
                                     "--qb", "1", "--qw", "2", "--timeout", "60",
                                     "--output", str(tmp_path / "run.json")],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    address = json.loads(master.stdout.readline())["listening"]
    workers = [subprocess.Popen(cmd + ["serve-worker", "--data", str(f), "--schema", schema,
                                       "--master", address, "--site-id", str(k),
                                       "--output", str(tmp_path / f"done{k}.csv")],
                                stderr=subprocess.PIPE, text=True)
               for k, f in enumerate(site_files)]
    for w in workers:
        assert w.wait(120) == 0, w.stderr.read()
    assert master.wait(120) == 0, master.stderr.read()
    summary = json.loads((tmp_path / "run.json").read_text())
    assert summary["sites"] == ["0", "1", "2"]

    central = np.array([[float(x) for x in r[1:]] for r in list(csv.reader(ref.open()))[1:]])
    parts = [np.array([[float(x) for x in r[1:]]
                       for r in list(csv.reader((tmp_path / f"done{k}.csv").open()))[1:]])
             for k in range(3)]
    assert np.abs(np.vstack(parts) - central).max() <= 1e-8
