"""Command line interface: config loading, exit codes, end-to-end chain."""

import json
import os

import numpy as np
import pytest

from diskturn.cli import ENV_SCHEMA, load_config_bundle, main
from diskturn.model import EnvSpec, InputError


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


# ---------------------------------------------------------------------------
# config bundles
# ---------------------------------------------------------------------------


def test_load_config_bundle_none():
    assert load_config_bundle(None) == {}


def test_load_config_bundle_bare_env(tmp_path):
    doc = dict(EnvSpec().to_json(), schema=ENV_SCHEMA)
    bundle = load_config_bundle(write_json(tmp_path / "env.json", doc))
    assert set(bundle) == {"spec"}
    assert bundle["spec"]["schema"] == ENV_SCHEMA


def test_load_config_bundle_sections(tmp_path):
    doc = {"sim": {"seed": 3}, "train": {"epochs": 7}}
    bundle = load_config_bundle(write_json(tmp_path / "b.json", doc))
    assert bundle == doc


def test_load_config_bundle_rejects_unknown(tmp_path):
    path = write_json(tmp_path / "b.json", {"simulator": {}})
    with pytest.raises(InputError):
        load_config_bundle(path)


def test_shipped_env_config_loads():
    root = os.path.join(os.path.dirname(__file__), "..", "envs", "disk3.json")
    bundle = load_config_bundle(root)
    spec = EnvSpec.from_json(bundle["spec"])
    assert spec.n_f == 3


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_exit_code_on_missing_data_dir(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_exit_code_value_method_without_ensembles(tmp_path, capsys):
    rc = main(
        ["eval", "--method", "avo", "--trials", "1", "--out", str(tmp_path)]
    )
    assert rc == 2
    assert "--ensembles" in capsys.readouterr().err


def test_exit_code_report_bad_schema(tmp_path, capsys):
    raw = write_json(tmp_path / "r.json", {"schema": "other"})
    rc = main(["report", "--raw", raw, "--out", str(tmp_path / "o")])
    assert rc == 2


def test_gradcheck_exit_zero(tmp_path, capsys):
    rc = main(
        ["gradcheck", "--instances", "2", "--out", str(tmp_path)]
    )
    assert rc == 0
    assert os.path.exists(tmp_path / "gradcheck.json")
    lines = capsys.readouterr().out.strip().split("\n")
    assert sum("[ok]" in ln for ln in lines) == 9


# ---------------------------------------------------------------------------
# collect -> train -> eval -> compare -> report chain on a tiny budget
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def chain_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    data = root / "data"
    rc = main(
        ["collect", "--samples", "2", "--seed", "5", "--out", str(data)]
    )
    assert rc == 0
    models = root / "models"
    rc = main(
        [
            "train",
            "--data",
            str(data),
            "--out",
            str(models),
            "--members",
            "2",
            "--hidden",
            "4",
            "--epochs",
            "3",
            "--batch",
            "2",
        ]
    )
    assert rc == 0
    return root


def test_collect_outputs(chain_dir):
    data = chain_dir / "data"
    names = sorted(os.listdir(data))
    assert "manifest.json" in names
    assert any(n.startswith("dataset_") for n in names)
    with open(data / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["n_samples"] == 2
    assert manifest["base_seed"] == 5


def test_train_outputs(chain_dir):
    models = chain_dir / "models"
    names = sorted(os.listdir(models))
    assert "ensemble_100.json" in names and "ensemble_111.json" in names
    assert "loss_100.csv" in names and "loss_111.csv" in names
    header = open(models / "loss_111.csv").readline().strip()
    assert header == "epoch,train_mse,val_mse"


def test_eval_and_report_chain(chain_dir, capsys):
    out = chain_dir / "eval"
    rc = main(
        [
            "eval",
            "--method",
            "to",
            "--budget",
            "low",
            "--trials",
            "1",
            "--seed",
            "4",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "to/low" in text and "median_angle=" in text
    for name in ("summary.json", "trials.csv", "boxplot.csv", "results.json"):
        assert os.path.exists(out / name)

    re_out = chain_dir / "reemit"
    rc = main(["report", "--raw", str(out / "results.json"), "--out", str(re_out)])
    assert rc == 0
    with open(out / "results.json", "rb") as f1, open(
        re_out / "results.json", "rb"
    ) as f2:
        assert f1.read() == f2.read()


def test_compare_paired_methods(chain_dir, capsys):
    out = chain_dir / "cmp"
    rc = main(
        [
            "compare",
            "--methods",
            "to,avo",
            "--budgets",
            "low",
            "--trials",
            "1",
            "--seed",
            "4",
            "--ensembles",
            str(chain_dir / "models"),
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "to/low" in text and "avo/low" in text
    with open(out / "results.json") as fh:
        report = json.load(fh)
    assert [e["method"] for e in report["entries"]] == ["to", "avo"]
    h0 = report["entries"][0]["trials"][0]["s0_hash"]
    h1 = report["entries"][1]["trials"][0]["s0_hash"]
    assert h0 == h1  # paired start state
    assert report["entries"][0]["alpha"] == 0.0
    assert report["entries"][1]["alpha"] == pytest.approx(1.0)
