"""Tests for the asianexp command line."""

import json
from pathlib import Path

import pytest

from asianexp_cli import EXIT_CONFIG, EXIT_OK, dumps_record, greek_name, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PRICE_ARGS = [
    "price", "--model", "bs-asian", "--sigma", "0.3", "--payoff", "fixed-call",
    "--strike", "1", "--s0", "1", "--a0", "0", "--T", "0.25", "--N", "2",
]


def test_missing_strike_is_a_config_error(capsys):
    code = main(["price", "--model", "bs-asian", "--sigma", "0.3", "--payoff", "fixed-call", "--T", "0.25"])
    assert code == EXIT_CONFIG
    assert "strike" in capsys.readouterr().err


def test_missing_maturity_is_a_config_error():
    assert main(["price", "--model", "bs-asian", "--sigma", "0.3", "--strike", "1"]) == EXIT_CONFIG


def test_price_json_record(capsys):
    assert main(PRICE_ARGS) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    for key in ("model", "payoff", "t", "T", "x", "N", "values", "greeks", "slopes", "pass"):
        assert key in record
    assert record["slopes"] is None
    assert record["pass"] is True
    assert len(record["values"]) == 3
    assert record["cumulative"][-1] == pytest.approx(sum(record["values"]))
    assert set(record["greeks"]) == {"delta", "gamma", "D01"}
    assert record["error_order"] == 3.0


def test_price_csv_header(capsys):
    assert main(PRICE_ARGS + ["--format", "csv"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "order,value,cumulative"
    assert len(lines) == 4


def test_reruns_are_byte_identical(capsys):
    main(PRICE_ARGS)
    first = capsys.readouterr().out
    main(PRICE_ARGS)
    assert capsys.readouterr().out == first


def test_output_directory_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ASIANEXP_OUTPUT_DIR", str(tmp_path))
    assert main(PRICE_ARGS + ["--output", "price.json"]) == EXIT_OK
    assert capsys.readouterr().out == ""
    assert json.loads((tmp_path / "price.json").read_text())["N"] == 2


def test_config_file_with_overrides(capsys):
    assert main(["price", "--config", str(CONFIGS / "bs_asian_fixed.yaml"), "--N", "1"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["N"] == 1
    assert record["model"] == "bs-asian"
    assert record["x"] == [1.0, 0.0]


def test_custom_model_config(capsys):
    assert main(["price", "--config", str(CONFIGS / "custom_drift.yaml")]) == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)["values"]) == 4


def test_self_consistency_run(tmp_path, monkeypatch):
    monkeypatch.setenv("ASIANEXP_OUTPUT_DIR", str(tmp_path))
    code = main(["converge", "--config", str(CONFIGS / "bs_asian_converge.yaml"), "--self-consistency"])
    assert code == EXIT_OK
    header = (tmp_path / "bs_asian_converge.csv").read_text().splitlines()[0]
    assert header == "theta,t,T,N,U_N,U_N+1,difference,vanishing"


def test_unknown_suite():
    assert main(["verify", "bogus"]) == EXIT_CONFIG


def test_geometry_suite_passes(capsys):
    assert main(["verify", "geometry"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().err


def test_unknown_model():
    assert main(["price", "--model", "heston", "--T", "1"]) == EXIT_CONFIG


def test_dumps_record_formats_floats():
    text = dumps_record({"a": 0.1, "b": float("nan"), "c": [1, 2.5], "d": {}})
    assert json.loads(text) == {"a": 0.1, "b": None, "c": [1, 2.5], "d": {}}
    assert "0.10000000000000001" in text


def test_greek_names():
    assert greek_name((1, 0)) == "delta"
    assert greek_name((2, 0)) == "gamma"
    assert greek_name((0, 1)) == "D01"
