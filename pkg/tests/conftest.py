from pathlib import Path

import numpy as np
import pytest

from plepi_iss.models.models import BarcodeKind, CodebookEntry, SimConfig
from plepi_iss.services.codebook_service import Codebook, codebook_service


def make_codebook(targeted, trick=()):
    entries = [CodebookEntry(barcode=b, name=f"g{i}", kind=BarcodeKind.TARGETED) for i, b in enumerate(targeted)]
    entries += [CodebookEntry(barcode=b, name=f"t{i}", kind=BarcodeKind.TRICK) for i, b in enumerate(trick)]
    return Codebook(entries)


@pytest.fixture
def small_codebook() -> Codebook:
    """4 循环、12 条目标 + 2 条诱饵"""
    base = codebook_service.design_codebook(n_targeted=12, n_cycles=4, min_dist=2, seed=3)
    tricks = codebook_service.generate_trick_barcodes(base, count=2, min_dist=1, seed=3)
    return codebook_service.with_tricks(base, tricks)


@pytest.fixture
def noiseless_sim() -> SimConfig:
    return SimConfig.noiseless(
        n_fields=3,
        n_cycles=4,
        tile_width=48,
        tile_height=48,
        cells_per_field=6,
        spots_per_cell_min=1,
        spots_per_cell_max=3,
        min_spot_spacing=6.0,
        spot_sigma=1.2,
        seed=11,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def codebook_file(tmp_path: Path, small_codebook: Codebook) -> Path:
    return codebook_service.save_codebook(small_codebook, tmp_path / "codebook.csv")


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, (str, Path)):
        return f'"{Path(value).as_posix() if isinstance(value, Path) else value}"'
    return repr(value)


def write_config(path: Path, settings: dict) -> Path:
    """把两层字典写成 TOML 配置文件"""
    lines = [f"{k} = {_toml_value(v)}" for k, v in settings.items() if not isinstance(v, dict)]
    for section, values in settings.items():
        if isinstance(values, dict):
            lines.append(f"\n[{section}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


NOISELESS_SIM = {
    "n_fields": 3,
    "n_cycles": 4,
    "tile_width": 48,
    "tile_height": 48,
    "cells_per_field": 6,
    "spots_per_cell_min": 1,
    "spots_per_cell_max": 3,
    "min_spot_spacing": 6.0,
    "spot_sigma": 1.2,
    "crosstalk": [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
    "phasing": 0.0,
    "channel_gain": [1.0, 1.0, 1.0, 1.0],
    "background_level": 0.0,
    "sensor_noise_sd": 0.0,
    "jitter_sd": 0.0,
    "amplitude_cv": 0.0,
    "subpixel": False,
}


@pytest.fixture
def noiseless_config(tmp_path: Path, codebook_file: Path) -> Path:
    """三视野无噪声运行：0 有标注，1 无标注，2 测试"""
    return write_config(tmp_path / "run.toml", {
        "seed": 11,
        "codebook_path": "codebook.csv",
        "out_dir": "run",
        "quality": "lq",
        "flip_rate": 0.0,
        "sim": NOISELESS_SIM,
        "train": {"burnin_epochs": 200, "learning_rate": 0.5, "rounds": 1},
        "split": {"labeled": [0], "unlabeled": [1], "test": [2]},
    })
