"""Tests for experiment configuration."""

import argparse

import pytest
import yaml

from asianexp_config import ExperimentConfig, apply_overrides, load_config
from asianexp_errors import ConfigError


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "missing.yaml")
    assert info.value.field == "config"
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_from_mapping_reads_sections(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({
        "model": {"id": "bs-asian", "sigma": 0.2},
        "payoff": {"id": "fixed-put", "strike": 0.9},
        "state": {"T": 0.5, "x": [1.1, 0.2]},
        "mc": {"paths": 1000, "seed": 3, "antithetic": True, "min_steps": 400},
        "N": 3,
        "workers": 2,
    }))
    cfg = ExperimentConfig.from_mapping(load_config(path)).validate("price")
    assert (cfg.model, cfg.sigma, cfg.payoff, cfg.strike) == ("bs-asian", 0.2, "fixed-put", 0.9)
    assert cfg.state_vector() == [1.1, 0.2]
    assert cfg.mc.paths == 1000 and cfg.mc.antithetic
    assert cfg.mc.min_steps == 400 and cfg.mc.steps(0.01) == 400
    assert cfg.N == 3 and cfg.workers == 2


@pytest.mark.parametrize(
    "maturities",
    [[0.25, 0.125, 0.0625], [0.25, -0.125, 0.0625, 0.03125], [0.25, 0.0625, 0.125, 0.03125], [0.25, 0.25, 0.125, 0.0625]],
)
def test_invalid_maturity_grid(maturities):
    cfg = ExperimentConfig.from_mapping({
        "model": {"id": "bs-asian", "sigma": 0.3},
        "payoff": {"id": "fixed-call", "strike": 1.0},
        "converge": {"maturities": maturities},
    })
    with pytest.raises(ConfigError) as info:
        cfg.validate("converge")
    assert info.value.field == "converge.maturities"


def test_increasing_grid_is_allowed():
    cfg = ExperimentConfig.from_mapping({
        "model": {"id": "bs-asian", "sigma": 0.3},
        "payoff": {"id": "fixed-call", "strike": 1.0},
        "converge": {"maturities": [0.03125, 0.0625, 0.125, 0.25]},
    })
    assert cfg.validate("converge") is cfg


@pytest.mark.parametrize(
    "data, field",
    [
        ({"model": {"id": "bs-asian"}, "payoff": {"strike": 1}, "state": {"T": 1}}, "sigma"),
        ({"model": {"id": "bs-asian", "sigma": 0.3}, "state": {"T": 1}}, "strike"),
        ({"model": {"id": "bs-asian", "sigma": 0.3}, "payoff": {"strike": 1}, "state": {"T": 1}, "N": 7}, "N"),
        ({"model": {"id": "bs-asian", "sigma": 0.3}, "payoff": {"strike": 1}, "state": {"T": 1, "x": [1.0]}}, "state.x"),
        ({"model": {"id": "bs-asian", "sigma": 0.3}, "payoff": {"strike": 1}, "state": {"T": 1}, "base": "mid"}, "base"),
    ],
)
def test_validation_fields(data, field):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping(data).validate("price")
    assert info.value.field == field


def test_overrides_replace_state_coordinates():
    args = argparse.Namespace(model=None, sigma=0.4, s0=1.3, a0=None, N=1, base=None, workers=None, antithetic=True)
    data = apply_overrides({"state": {"x": [1.0, 0.5]}, "model": "bs-asian"}, args)
    assert data["state"]["x"] == [1.3, 0.5]
    assert data["model"] == {"id": "bs-asian", "sigma": 0.4}
    assert data["N"] == 1
    assert data["mc"]["antithetic"] is True


def test_output_path(monkeypatch, tmp_path):
    cfg = ExperimentConfig(output="out.csv")
    monkeypatch.delenv("ASIANEXP_OUTPUT_DIR", raising=False)
    assert cfg.output_path() == "out.csv"
    monkeypatch.setenv("ASIANEXP_OUTPUT_DIR", str(tmp_path / "runs"))
    assert cfg.output_path() == str(tmp_path / "runs" / "out.csv")
    assert ExperimentConfig(output="sub/out.csv").output_path() == "sub/out.csv"


def test_custom_model_with_params():
    cfg = ExperimentConfig.from_mapping({
        "model": {"id": "custom", "params": {"s": 0.2}, "diffusion": {"a11": "s**2*x1**2"}, "drift": {"a1": "0.05"}},
    })
    model = cfg.build_model()
    assert model.drift_vector(0.0, [[1.0, 0.0]]).tolist() == [[0.05]]
    assert model.diffusion_matrix(0.0, [2.0, 0.0])[0, 0] == pytest.approx(0.16)
