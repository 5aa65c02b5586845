import json

import pytest

from plepi_iss.config import Settings
from plepi_iss.main import build_parser, main
from plepi_iss.services.codebook_service import codebook_service
from plepi_iss.services.plepi_service import plepi_service
from tests.conftest import NOISELESS_SIM, write_config


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--version"])
    assert exc.value.code == 0
    assert "PLePI-ISS" in capsys.readouterr().out


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["serve"])
    assert exc.value.code == 2


def test_codebook_command(tmp_path, capsys):
    output = tmp_path / "designs" / "codebook.csv"
    code = main([
        "codebook", "--output", str(output), "--targeted", "20", "--trick", "2",
        "--cycles", "6", "--seed", "1",
    ])
    assert code == 0
    codebook = codebook_service.load_codebook(output)
    assert len(codebook.targeted) == 20
    assert len(codebook.trick) == 2
    assert codebook_service.min_distance(codebook.select(include_trick=False)) >= 3
    assert "20 targeted, 2 trick" in capsys.readouterr().out


def test_infeasible_codebook_exits_with_config_code(tmp_path, capsys):
    code = main([
        "codebook", "--output", str(tmp_path / "cb.csv"), "--targeted", "3", "--trick", "0",
        "--cycles", "2", "--min-dist", "3",
    ])
    assert code == 2
    assert "error[2]" in capsys.readouterr().err


def test_missing_codebook_names_path(tmp_path, capsys):
    config = write_config(tmp_path / "run.toml", {"codebook_path": "absent.csv", "out_dir": "run"})
    code = main(["simulate", "--config", str(config)])
    assert code == 2
    err = capsys.readouterr().err
    assert "error[2]" in err
    assert "absent.csv" in err


def test_missing_config_file(tmp_path, capsys):
    code = main(["simulate", "--config", str(tmp_path / "nope.toml")])
    assert code == 2
    assert "nope.toml" in capsys.readouterr().err


def test_overlapping_split(tmp_path, codebook_file, capsys):
    config = write_config(tmp_path / "run.toml", {
        "codebook_path": "codebook.csv",
        "split": {"labeled": [0], "unlabeled": [0, 1], "test": [2]},
    })
    assert main(["simulate", "--config", str(config)]) == 2
    assert "重叠" in capsys.readouterr().err


def test_missing_artifact_exits_with_data_code(noiseless_config, capsys):
    assert main(["train", "--config", str(noiseless_config)]) == 3
    assert "error[3]" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path, codebook_file):
    sim = dict(NOISELESS_SIM, n_fields=1, cells_per_field=10)
    config = write_config(tmp_path / "run.toml", {
        "seed": 3,
        "codebook_path": "codebook.csv",
        "sim": sim,
        "split": {"labeled": [0], "unlabeled": [], "test": []},
    })
    assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    first = tree_bytes(tmp_path / "a")
    assert sorted(k for k in first if k.endswith(".bin")) == [f"tiles/f000_r{r:02d}.bin" for r in range(4)]
    assert first == tree_bytes(tmp_path / "b")


def test_pipeline_noiseless(noiseless_config, tmp_path, capsys):
    out = tmp_path / "cli_run"
    assert main(["pipeline", "--config", str(noiseless_config), "--out", str(out)]) == 0
    metrics = json.loads((out / "report" / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["r2"] == pytest.approx(1.0)
    assert metrics["fdr_trick_cell"] == 0.0
    assert capsys.readouterr().out


def test_pipeline_same_seed_same_report(noiseless_config, tmp_path):
    for name in ("first", "second"):
        assert main(["pipeline", "--config", str(noiseless_config), "--out", str(tmp_path / name)]) == 0
    first = (tmp_path / "first" / "report" / "metrics.json").read_bytes()
    second = (tmp_path / "second" / "report" / "metrics.json").read_bytes()
    assert first == second
    assert tree_bytes(tmp_path / "first" / "pseudo_labels") == tree_bytes(tmp_path / "second" / "pseudo_labels")


def test_thread_count_does_not_change_outputs(tmp_path, codebook_file):
    config = write_config(tmp_path / "run.toml", {
        "seed": 8,
        "codebook_path": "codebook.csv",
        "quality": "lq",
        "flip_rate": 0.2,
        "sim": {
            "n_fields": 3, "n_cycles": 4, "tile_width": 64, "tile_height": 64,
            "cells_per_field": 12, "spots_per_cell_min": 1, "spots_per_cell_max": 3,
        },
        "train": {"burnin_epochs": 5, "rounds": 2},
        "split": {"labeled": [0], "unlabeled": [1], "test": [2]},
    })
    for threads in (1, 8):
        out = str(tmp_path / f"threads_{threads}")
        assert main(["pipeline", "--config", str(config), "--threads", str(threads), "--out", out]) == 0
    single, many = tmp_path / "threads_1", tmp_path / "threads_8"
    assert (single / "report" / "metrics.json").read_bytes() == (many / "report" / "metrics.json").read_bytes()
    assert (single / "teacher.json").read_bytes() == (many / "teacher.json").read_bytes()
    assert tree_bytes(single / "pseudo_labels") == tree_bytes(many / "pseudo_labels")
    assert tree_bytes(single / "tiles") == tree_bytes(many / "tiles")


def test_rounds_flag_overrides_config(noiseless_config, tmp_path):
    out = tmp_path / "zero"
    assert main(["pipeline", "--config", str(noiseless_config), "--rounds", "0", "--out", str(out)]) == 0
    history = plepi_service.read_history(out / "history.jsonl")
    assert [r.round for r in history] == [0]
    assert (out / "teacher.json").read_bytes() == (out / "burnin.json").read_bytes()


def test_stages_rerun_individually(noiseless_config, tmp_path):
    out = str(tmp_path / "staged")
    for stage in ("simulate", "annotate", "burnin", "train", "decode", "call-cells", "evaluate", "report"):
        assert main([stage, "--config", str(noiseless_config), "--out", out]) == 0, stage
    assert (tmp_path / "staged" / "report" / "metrics.json").exists()


def test_log_config_file_handler(tmp_path):
    config = Settings(LOG_FILE=str(tmp_path / "run.log"), DEBUG=True).get_log_config()
    assert set(config["handlers"]) == {"console", "file"}
    assert config["root"]["level"] == "DEBUG"
    assert config["handlers"]["console"]["stream"] == "ext://sys.stderr"


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("PLEPI_DEFAULT_THREADS", "3")
    monkeypatch.setenv("PLEPI_OUTPUT_DIR", "runs/env")
    settings = Settings()
    assert settings.DEFAULT_THREADS == 3
    assert settings.OUTPUT_DIR == "runs/env"
