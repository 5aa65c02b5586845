import json
import random
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from plepi_iss.models.models import (
    CellCall,
    CellRecord,
    FusedLabels,
    GroundTruthWell,
    MetricsReport,
    PseudoSource,
    RoundRecord,
    SpotCall,
    SpotRecord,
    TrackSet,
)
from plepi_iss.services.evaluation_service import SCATTER_GID, evaluation_service
from plepi_iss.utils.exceptions import UndefinedMetric
from tests.conftest import make_codebook

SVG_USE = "{http://www.w3.org/2000/svg}use"


def two_cell_well():
    return GroundTruthWell(
        n_fields=1, n_cycles=4, width=32, height=16,
        cells=[
            CellRecord(cell_id=0, field=0, x=6.0, y=8.0, barcode="ACGT", n_spots=2),
            CellRecord(cell_id=1, field=0, x=26.0, y=8.0, barcode="TTTT", n_spots=1),
        ],
        spots=[
            SpotRecord(spot_id=0, cell_id=0, field=0, x=4.0, y=8.0, barcode="ACGT"),
            SpotRecord(spot_id=1, cell_id=0, field=0, x=8.0, y=6.0, barcode="ACGT"),
            SpotRecord(spot_id=2, cell_id=1, field=0, x=27.0, y=9.0, barcode="TTTT"),
        ],
    )


def spot_call(spot_id, x, y, barcode, score, field=0):
    source = PseudoSource.ABSTAINED if barcode is None else PseudoSource.CODEBOOK_FUSED
    return SpotCall(spot_id=spot_id, field=field, track_id=spot_id, x=x, y=y, barcode=barcode, score=score, source=source)


def test_cell_takes_highest_scoring_barcode():
    calls = [
        spot_call(0, 4.0, 8.0, "AAAA", 0.9),
        spot_call(1, 8.0, 6.0, "ACGT", 0.95),
        spot_call(2, 27.0, 9.0, None, 0.0),
    ]
    cells = evaluation_service.call_cells(calls, two_cell_well())
    assert [(c.cell_id, c.barcode, c.n_spots) for c in cells] == [(0, "ACGT", 2), (1, None, 0)]
    assert cells[0].score == 0.95


def test_single_spot_cell():
    cells = evaluation_service.call_cells([spot_call(0, 26.0, 8.0, "ACGTACGTA", 0.9)], two_cell_well())
    assert cells[1].barcode == "ACGTACGTA"
    assert cells[0].barcode is None


def test_cell_calls_independent_of_spot_order():
    calls = [spot_call(i, 2.0 + i, 8.0, b, s) for i, (b, s) in enumerate(
        [("AAAA", 0.5), ("CCCC", 0.8), ("GGGG", 0.8), ("TTTT", 0.1)]
    )]
    expected = evaluation_service.call_cells(calls, two_cell_well())
    assert expected[0].barcode == "CCCC"
    shuffled = calls[:]
    random.Random(3).shuffle(shuffled)
    assert evaluation_service.call_cells(shuffled, two_cell_well()) == expected


def test_min_cell_score_leaves_cells_unassigned():
    calls = [spot_call(0, 4.0, 8.0, "AAAA", 0.3)]
    cells = evaluation_service.call_cells(calls, two_cell_well(), min_cell_score=0.5)
    assert all(c.barcode is None for c in cells)


def test_cell_recovery_rate():
    calls = [CellCall(cell_id=i, field=0, barcode="ACGT" if i < 62 else None) for i in range(100)]
    assert evaluation_service.cell_recovery_rate(calls, 100) == pytest.approx(0.62)
    assert evaluation_service.cell_recovery_rate(calls[:62], 62) == 1.0
    assert evaluation_service.cell_recovery_rate(calls[62:], 38) == 0.0
    with pytest.raises(UndefinedMetric):
        evaluation_service.cell_recovery_rate([], 0)


def test_abundance_r2():
    ref = {"a": 10, "b": 20, "c": 30}
    assert evaluation_service.abundance_r2(ref, ref) == 1.0
    assert evaluation_service.abundance_r2({}, ref) < 0
    called = {"a": 12, "b": 18, "c": 33}
    y = np.array([10.0, 20.0, 30.0])
    f = np.array([12.0, 18.0, 33.0])
    expected = 1 - np.sum((y - f) ** 2) / np.sum((y - y.mean()) ** 2)
    assert evaluation_service.abundance_r2(called, ref) == pytest.approx(expected)
    assert evaluation_service.abundance_r2(called, ref) == pytest.approx(0.915)
    reordered = {"c": 33, "a": 12, "b": 18}
    assert evaluation_service.abundance_r2(reordered, dict(reversed(list(ref.items())))) == pytest.approx(expected)


def test_abundance_r2_uses_universe():
    ref = {"a": 10, "b": 20}
    assert evaluation_service.abundance_r2({"a": 10, "b": 20, "x": 99}, ref, universe=["a", "b"]) == 1.0
    assert evaluation_service.abundance_r2({"a": 10}, {"a": 10, "b": 0}, universe=["a", "b", "c"]) == 1.0


def test_abundance_r2_undefined():
    with pytest.raises(UndefinedMetric):
        evaluation_service.abundance_r2({"a": 1}, {"a": 5, "b": 5})
    with pytest.raises(UndefinedMetric):
        evaluation_service.abundance_r2({"a": 1}, {})


def test_ppv_fdr_rates():
    cb = make_codebook(["AAAA", "CCCC"], ["GGGG"])
    rates = evaluation_service.ppv_fdr(["AAAA"] * 5 + ["CCCC"] * 3 + ["GGGG", "TTTT", None], cb)
    assert (rates.ppv, rates.fdr_trick, rates.fdr_other) == (0.8, 0.1, 0.1)
    assert rates.ppv + rates.fdr_trick + rates.fdr_other == pytest.approx(1.0, abs=1e-12)
    all_targeted = evaluation_service.ppv_fdr(["AAAA", "CCCC"], cb)
    assert (all_targeted.ppv, all_targeted.fdr_trick, all_targeted.fdr_other) == (1.0, 0.0, 0.0)
    with pytest.raises(UndefinedMetric):
        evaluation_service.ppv_fdr([None, None], cb)


def test_trick_ratio_fdr():
    cb = make_codebook(["AAAA", "CCCC", "GGGG"], ["TTTT"])
    rates = evaluation_service.ppv_fdr(["AAAA", "TTTT"], cb)
    assert evaluation_service.trick_ratio_fdr(rates, cb) == pytest.approx(0.5 / 0.25)
    with pytest.raises(UndefinedMetric):
        evaluation_service.trick_ratio_fdr(rates, make_codebook(["AAAA"]))


def test_spot_calls_skip_background_tracks():
    tracks = TrackSet(
        field=2,
        x=np.array([1.0, 5.0, 9.0]),
        y=np.array([1.0, 5.0, 9.0]),
        intensity=np.zeros((3, 2, 4)),
        objectness=np.ones((3, 2)),
        interpolated=np.zeros((3, 2), dtype=bool),
        members=np.array([2, 2, 2]),
        foreground=np.array([True, False, True]),
    )
    fused = FusedLabels(
        letters=np.array([[0, 1], [2, 2], [3, -1]]),
        score=np.array([0.8, 0.7, 0.0]),
        source=np.array(["codebook-fused", "codebook-fused", "abstained"], dtype=object),
        labeled=np.array([[True, True], [True, True], [True, False]]),
    )
    calls = evaluation_service.spot_calls_from_tracks(fused, tracks, first_id=10)
    assert [(c.spot_id, c.track_id, c.barcode) for c in calls] == [(10, 0, "AC"), (11, 2, None)]
    assert all(c.field == 2 for c in calls)


def test_spot_accuracy():
    well = two_cell_well()
    calls = [
        spot_call(0, 4.2, 8.0, "ACGT", 0.9),
        spot_call(1, 8.0, 6.0, "ACGA", 0.8),
        spot_call(2, 27.0, 9.0, None, 0.0),
    ]
    exact, letters = evaluation_service.spot_accuracy(calls, well, [0], radius=1.0)
    assert exact == pytest.approx(1 / 3)
    assert letters == pytest.approx(7 / 8)


def test_report_for_perfect_calls():
    well = two_cell_well()
    cb = make_codebook(["ACGT", "TTTT", "CCCC"], ["GGGG"])
    spots = [spot_call(s.spot_id, s.x, s.y, s.barcode, 0.9) for s in well.spots]
    cells = evaluation_service.call_cells(spots, well)
    report = evaluation_service.build_report(spots, cells, well, cb, [0])
    assert report.cell_recovery_rate == 1.0
    assert report.ppv_cell == 1.0 and report.fdr_trick_cell == 0.0 and report.fdr_other_cell == 0.0
    assert report.spot_accuracy == 1.0
    assert report.r2_spot == 1.0
    assert report.r2 == 1.0
    assert report.fdr_trick_ratio_spot == 0.0
    assert [r.barcode for r in report.counts] == ["ACGT", "TTTT", "CCCC", "GGGG"]


def test_recovery_counts_only_cells_with_spots():
    well = two_cell_well()
    well.cells.append(CellRecord(cell_id=2, field=0, x=16.0, y=2.0, barcode="CCCC", n_spots=0))
    cb = make_codebook(["ACGT", "TTTT", "CCCC"])
    spots = [spot_call(s.spot_id, s.x, s.y, s.barcode, 0.9) for s in well.spots]
    cells = evaluation_service.call_cells(spots, well)
    assert len(cells) == 3
    report = evaluation_service.build_report(spots, cells, well, cb, [0])
    assert report.n_cells == 3
    assert report.cell_recovery_rate == 1.0


def test_empty_run_report_marks_undefined(tmp_path):
    well = GroundTruthWell(n_fields=1, n_cycles=4, width=16, height=16)
    cb = make_codebook(["ACGT", "TTTT"])
    report = evaluation_service.build_report([], [], well, cb, [0])
    for name in ("r2", "cell_recovery_rate", "ppv_cell", "ppv_spot", "spot_accuracy"):
        assert name in report.undefined
        assert getattr(report, name) is None
    paths = evaluation_service.emit_report(report, tmp_path / "report")
    assert json.loads(paths["json"].read_text())["schema_version"] == "1.0"
    assert evaluation_service.read_report(paths["json"]) == report
    assert "undefined" in paths["table"].read_text()


def test_scatter_has_one_point_per_targeted_barcode(tmp_path):
    codes = ["AAAA", "CCCC", "GGGG", "TTTT", "ACGT"]
    cb = make_codebook(codes, ["CATG"])
    report = MetricsReport(counts=evaluation_service.count_rows(
        {"AAAA": 3, "CCCC": 1}, {}, {"AAAA": 2, "GGGG": 4}, {}, cb,
    ))
    path = evaluation_service.plot_abundance(report, tmp_path / "scatter.svg")
    root = ET.parse(path).getroot()
    groups = [el for el in root.iter() if el.get("id") == SCATTER_GID]
    assert len(groups) == 1
    assert len(list(groups[0].iter(SVG_USE))) == len(codes)


def test_history_curve_only_with_accuracy(tmp_path):
    assert evaluation_service.plot_history([RoundRecord(round=0)], tmp_path / "a.svg") is None
    history = [RoundRecord(round=0, heldout_accuracy=0.7), RoundRecord(round=1, heldout_accuracy=0.8)]
    assert evaluation_service.plot_history(history, tmp_path / "b.svg").exists()


def test_call_files(tmp_path):
    well = two_cell_well()
    spots = [spot_call(0, 4.0, 8.0, "ACGT", 0.9), spot_call(1, 27.0, 9.0, None, 0.0)]
    cells = evaluation_service.call_cells(spots, well)
    evaluation_service.write_spot_calls(spots, tmp_path / "spots.csv")
    evaluation_service.write_cell_calls(cells, tmp_path / "cells.csv")
    assert evaluation_service.read_spot_calls(tmp_path / "spots.csv") == spots
    assert evaluation_service.read_cell_calls(tmp_path / "cells.csv") == cells
