# tests/test_cli.py
import json
from pathlib import Path

import pytest

from cli import main
from mixlab.errors import ConfigError
from utils.config import apply_overrides, load_config, parse_config
from utils.data_loader import load_report

PURE_NOISE = {"system": {"name": "pure_noise"}, "noise": {"name": "iid_uniform"}}
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _certify_toml(out, noise="iid_uniform"):
    return f"""
command = "certify"
seed = 3
output_dir = "{out.as_posix()}"

[system]
name = "pure_noise"

[noise]
name = "{noise}"

[certify]
radius = 0.5
pairs = 3
check_points = 3
mc_n = 2000
"""


# ---------------- configuration ---------------- #
def test_unknown_key_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config({"command": "simulate", "seed": 1, "colour": "red", **PURE_NOISE})


def test_unknown_catalog_entries_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config({"command": "simulate", "seed": 1, "system": {"name": "lorenz"}, "noise": {"name": "iid_uniform"}})
    with pytest.raises(ConfigError):
        parse_config({"command": "certify", "seed": 1, "system": {"name": "pure_noise"},
                      "noise": {"name": "ar2_truncgauss", "kind": "stationary"}})


def test_config_round_trips_through_json():
    config = parse_config({"command": "mixing", "seed": 12, "ensemble": {"n": 500}, **PURE_NOISE})
    assert parse_config(config.model_dump(mode="json")) == config
    assert config.ensemble.law_k == 2
    assert config.mixing.segment_m == 0


def test_overrides_are_revalidated():
    config = parse_config({"command": "simulate", "seed": 1, **PURE_NOISE})
    moved = apply_overrides(config, seed=9, output_dir="elsewhere", threads=4)
    assert (moved.seed, moved.output_dir, moved.ensemble.threads) == (9, "elsewhere", 4)
    with pytest.raises(ConfigError):
        apply_overrides(config, threads=0)
    with pytest.raises(ConfigError):
        apply_overrides(config, seed=-1)


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "command = \n"))


def test_bad_config_exits_with_three(tmp_path):
    assert main(["--config", str(tmp_path / "nope.toml")]) == 3
    path = _write(tmp_path, 'command = "simulate"\nseed = 1\n[system]\nname = "pure_noise"\n')
    assert main(["--config", str(path)]) == 3


# ---------------- runs ---------------- #
def test_certify_pure_noise_succeeds(tmp_path):
    out = tmp_path / "out"
    assert main(["--config", str(_write(tmp_path, _certify_toml(out)))]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verdicts"] == {"recurrence": True, "minorization": True, "coupling": True}
    assert {f["path"] for f in manifest["files"]} == {"minorizing_measure.csv", "certificates.csv"}
    assert all(len(f["sha256"]) == 64 for f in manifest["files"])
    table = load_report(out / "certificates.csv", required=("certificate", "quantity", "value"))
    assert set(table["certificate"]) == {"recurrence", "minorization", "coupling"}


def test_certify_drifting_noise_fails_with_two(tmp_path):
    out = tmp_path / "drift"
    assert main(["--config", str(_write(tmp_path, _certify_toml(out, noise="drift_away")))]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verdicts"]["recurrence"] is False
    assert manifest["verdicts"]["minorization"] is False
    assert "coupling" not in manifest["verdicts"]
    assert "EmptyMinorization" in manifest["notes"]["minorization_error"]


def test_shipped_drift_away_config_fails_with_two(tmp_path):
    out = tmp_path / "drift_away"
    assert main(["--config", str(CONFIGS / "certify_drift_away.toml"), "--out", str(out)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["verdicts"] == {"minorization": False, "recurrence": False}
    assert "BudgetExceeded" in manifest["notes"]["recurrence_error"]


def test_simulate_output_does_not_depend_on_threads(tmp_path):
    path = _write(tmp_path, """
command = "simulate"
seed = 21

[system]
name = "kicked_linear_1d"

[noise]
name = "ar1_truncgauss"

[ensemble]
n = 300
horizon = 5
block_size = 64
""")
    runs = {}
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert main(["--config", str(path), "--out", str(out), "--threads", str(threads)]) == 0
        runs[threads] = {name: (out / name).read_bytes() for name in ("simulate_summary.csv", "sample_paths.csv")}
    assert runs[1] == runs[3]
    frame = load_report(tmp_path / "t1" / "sample_paths.csv", required=("path", "k"))
    assert list(frame.columns) == ["path", "k", "v0", "xi0"]
    assert len(frame) == 16 * 6
    assert b"\r\n" not in runs[1]["simulate_summary.csv"]


def test_report_with_missing_columns_is_rejected(tmp_path):
    path = _write(tmp_path, "k,tv\n1,0.5\n", name="decay.csv")
    assert list(load_report(path, required=("k",))["tv"]) == [0.5]
    with pytest.raises(ValueError, match="band_hi"):
        load_report(path, required=("k", "band_hi"))


def test_seed_flag_changes_the_run(tmp_path):
    path = _write(tmp_path, _certify_toml(tmp_path / "a"))
    config = apply_overrides(load_config(path), seed=4)
    assert config.seed == 4
    assert config.command == "certify"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    config = load_config(path)
    assert parse_config(config.model_dump(mode="json")) == config
