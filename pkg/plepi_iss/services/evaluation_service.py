import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from scipy.spatial import cKDTree

from plepi_iss.models.models import (
    ALPHABET,
    CellCall,
    CountRow,
    FusedLabels,
    GroundTruthWell,
    MetricsReport,
    PseudoSource,
    RateTriple,
    RoundRecord,
    SpotCall,
    TrackSet,
)
from plepi_iss.services.codebook_service import Codebook
from plepi_iss.services.simulation_service import pixel_of, simulation_service
from plepi_iss.utils.exceptions import MissingArtifact, UndefinedMetric
from plepi_iss.utils.helpers import ensure_dir

logger = logging.getLogger(__name__)

SPOT_CALL_COLUMNS = ["spot_id", "field", "track_id", "x", "y", "barcode", "score", "source"]
CELL_CALL_COLUMNS = ["cell_id", "field", "barcode", "score", "n_spots"]
SCATTER_GID = "abundance-points"


class EvaluationService:
    """
    细胞识别与评估服务类

    斑点识别 → 细胞分配，以及 R²、细胞回收率、PPV / FDR 等指标和报告输出。
    """

    # ------------------------------------------------------------------
    # 斑点与细胞识别
    # ------------------------------------------------------------------

    @staticmethod
    def spot_calls_from_tracks(fused: FusedLabels, tracks: TrackSet, first_id: int = 0) -> List[SpotCall]:
        """前景轨迹的解码结果 → 斑点识别；含未标注循环的轨迹视为弃权"""
        calls = []
        for t in np.nonzero(tracks.foreground)[0]:
            letters = fused.letters[t]
            complete = bool(np.all(letters >= 0)) and fused.source[t] != PseudoSource.ABSTAINED.value
            calls.append(SpotCall(
                spot_id=first_id + len(calls),
                field=tracks.field,
                track_id=int(t),
                x=float(tracks.x[t]),
                y=float(tracks.y[t]),
                barcode="".join(ALPHABET[int(v)] for v in letters) if complete else None,
                score=float(fused.score[t]) if complete else 0.0,
                source=PseudoSource(fused.source[t]),
            ))
        return calls

    @staticmethod
    def call_cells(
        spot_calls: Sequence[SpotCall],
        well: GroundTruthWell,
        fields: Optional[Sequence[int]] = None,
        min_cell_score: Optional[float] = None,
    ) -> List[CellCall]:
        """
        每个细胞分配其内部得分最高的非弃权斑点的条形码

        并列时取 spot_id 较小者；不在任何细胞内的斑点被丢弃。

        Returns:
            List[CellCall]: 所选视野内每个细胞一条记录，按 cell_id 排序
        """
        fields = sorted({c.field for c in well.cells}) if fields is None else sorted(set(fields))
        labels = {f: simulation_service.cell_labels(well, f) for f in fields}
        rows = []
        for call in spot_calls:
            if call.field not in labels or call.barcode is None:
                continue
            if min_cell_score is not None and call.score < min_cell_score:
                continue
            image = labels[call.field]
            col = min(max(pixel_of(call.x), 0), image.shape[1] - 1)
            row = min(max(pixel_of(call.y), 0), image.shape[0] - 1)
            cell_id = int(image[row, col])
            if cell_id >= 0:
                rows.append((cell_id, call.spot_id, call.barcode, call.score))

        frame = pd.DataFrame(rows, columns=["cell_id", "spot_id", "barcode", "score"])
        support = frame.groupby("cell_id").size().to_dict()
        best = (
            frame.sort_values(["cell_id", "score", "spot_id"], ascending=[True, False, True], kind="mergesort")
            .drop_duplicates("cell_id", keep="first")
            .set_index("cell_id")
        )
        calls = []
        for cell in well.cells_in(fields):
            if cell.cell_id in best.index:
                hit = best.loc[cell.cell_id]
                calls.append(CellCall(
                    cell_id=cell.cell_id,
                    field=cell.field,
                    barcode=str(hit["barcode"]),
                    score=float(hit["score"]),
                    n_spots=int(support[cell.cell_id]),
                ))
            else:
                calls.append(CellCall(cell_id=cell.cell_id, field=cell.field))
        return sorted(calls, key=lambda c: c.cell_id)

    # ------------------------------------------------------------------
    # 指标
    # ------------------------------------------------------------------

    @staticmethod
    def cell_recovery_rate(calls: Sequence[CellCall], total_cells: int) -> float:
        if total_cells <= 0:
            raise UndefinedMetric("细胞总数为 0，细胞回收率无定义")
        return sum(1 for c in calls if c.barcode is not None) / total_cells

    @staticmethod
    def abundance_r2(
        called: Mapping[str, float],
        reference: Mapping[str, float],
        universe: Optional[Sequence[str]] = None,
    ) -> float:
        """
        调用计数相对参考计数的决定系数 1 − SS_res/SS_tot

        Args:
            universe: 参与计算的条形码（通常为目标条形码）；None 时取两者键的并集

        Raises:
            UndefinedMetric: 参考总数为 0 或参考无方差
        """
        keys = sorted(set(called) | set(reference)) if universe is None else list(universe)
        ref = np.array([float(reference.get(k, 0)) for k in keys])
        got = np.array([float(called.get(k, 0)) for k in keys])
        if ref.sum() <= 0:
            raise UndefinedMetric("参考丰度总数为 0，R² 无定义")
        ss_tot = float(np.sum((ref - ref.mean()) ** 2))
        if ss_tot == 0:
            raise UndefinedMetric("参考丰度无方差，R² 无定义")
        ss_res = float(np.sum((got - ref) ** 2))
        return 1.0 - ss_res / ss_tot

    @staticmethod
    def frequencies(counts: Mapping[str, float]) -> Dict[str, float]:
        total = float(sum(counts.values()))
        if total <= 0:
            raise UndefinedMetric("计数总数为 0，频率无定义")
        return {k: v / total for k, v in counts.items()}

    @staticmethod
    def ppv_fdr(barcodes: Sequence[Optional[str]], codebook: Codebook) -> RateTriple:
        """
        已分配识别中的目标 / 诱饵 / 其他计数

        Raises:
            UndefinedMetric: 没有已分配的识别
        """
        targeted = set(codebook.targeted)
        trick = set(codebook.trick)
        assigned = [b for b in barcodes if b is not None]
        if not assigned:
            raise UndefinedMetric("没有已分配的识别，PPV/FDR 无定义")
        n_targeted = sum(1 for b in assigned if b in targeted)
        n_trick = sum(1 for b in assigned if b in trick)
        return RateTriple(n_targeted=n_targeted, n_trick=n_trick, n_other=len(assigned) - n_targeted - n_trick)

    @staticmethod
    def trick_ratio_fdr(rates: RateTriple, codebook: Codebook) -> float:
        """诱饵识别率除以编码本中诱饵条形码占比"""
        if not codebook.trick:
            raise UndefinedMetric("编码本中没有诱饵条形码，比例 FDR 无定义")
        return rates.fdr_trick / (len(codebook.trick) / len(codebook))

    @staticmethod
    def match_calls(
        spot_calls: Sequence[SpotCall],
        well: GroundTruthWell,
        fields: Sequence[int],
        radius: float,
    ) -> Dict[int, SpotCall]:
        """真值斑点 → 半径内最近的识别（按识别得分降序一一配对）"""
        matched: Dict[int, SpotCall] = {}
        for f in fields:
            truth = well.spots_in([f])
            calls = [c for c in spot_calls if c.field == f]
            if not truth or not calls:
                continue
            tree = cKDTree(np.array([[s.x, s.y] for s in truth]))
            order = sorted(calls, key=lambda c: (-c.score, c.spot_id))
            dist, nearest = tree.query(np.array([[c.x, c.y] for c in order]), k=1)
            for call, d, j in zip(order, dist, nearest):
                spot_id = truth[int(j)].spot_id
                if d <= radius and spot_id not in matched:
                    matched[spot_id] = call
        return matched

    def spot_accuracy(
        self,
        spot_calls: Sequence[SpotCall],
        well: GroundTruthWell,
        fields: Sequence[int],
        radius: float,
    ) -> Tuple[float, float]:
        """
        斑点级准确率

        Returns:
            Tuple[float, float]: (真值斑点中被精确识别的比例, 已配对识别的逐字母准确率)
        """
        truth = {s.spot_id: s for s in well.spots_in(list(fields))}
        if not truth:
            raise UndefinedMetric("测试视野内没有真值斑点")
        matched = self.match_calls(spot_calls, well, fields, radius)
        exact = sum(1 for sid, c in matched.items() if c.barcode == truth[sid].barcode)
        letters_total = letters_ok = 0
        for sid, c in matched.items():
            if c.barcode is None:
                continue
            letters_total += len(c.barcode)
            letters_ok += sum(a == b for a, b in zip(c.barcode, truth[sid].barcode))
        letter_acc = letters_ok / letters_total if letters_total else 0.0
        return exact / len(truth), letter_acc

    def build_report(
        self,
        spot_calls: Sequence[SpotCall],
        cell_calls: Sequence[CellCall],
        well: GroundTruthWell,
        codebook: Codebook,
        fields: Sequence[int],
        match_radius: float = 2.0,
    ) -> MetricsReport:
        """计算全部指标；无定义的指标置为 None 并记录名称"""
        report = MetricsReport(
            n_cells=len(cell_calls),
            n_assigned_cells=sum(1 for c in cell_calls if c.barcode is not None),
            n_spot_calls=len(spot_calls),
        )
        targeted = codebook.targeted
        ref_cells = simulation_service.reference_abundance(well, "cell", fields)
        ref_spots = simulation_service.reference_abundance(well, "spot", fields)
        called_cells = pd.Series([c.barcode for c in cell_calls if c.barcode is not None], dtype=object).value_counts().to_dict()
        called_spots = pd.Series([c.barcode for c in spot_calls if c.barcode is not None], dtype=object).value_counts().to_dict()

        def attempt(name: str, fn):
            try:
                return fn()
            except UndefinedMetric as e:
                logger.warning(f"指标 {name} 无定义: {e}")
                report.undefined.append(name)
                return None

        report.r2 = attempt("r2", lambda: self.abundance_r2(called_cells, ref_cells, targeted))
        report.r2_frequency = attempt(
            "r2_frequency",
            lambda: self.abundance_r2(self.frequencies(called_cells), self.frequencies(ref_cells), targeted),
        )
        report.r2_spot = attempt("r2_spot", lambda: self.abundance_r2(called_spots, ref_spots, targeted))
        # 回收率只统计含斑点的细胞，与参考丰度的细胞口径一致
        field_set = set(fields)
        spotted = {c.cell_id for c in well.cells if c.n_spots > 0 and c.field in field_set}
        report.cell_recovery_rate = attempt("cell_recovery_rate", lambda: self.cell_recovery_rate(
            [c for c in cell_calls if c.cell_id in spotted], len(spotted)
        ))

        for level, barcodes in (("cell", [c.barcode for c in cell_calls]), ("spot", [c.barcode for c in spot_calls])):
            rates = attempt(f"ppv_{level}", lambda: self.ppv_fdr(barcodes, codebook))
            if rates is None:
                report.undefined.extend([f"fdr_trick_{level}", f"fdr_other_{level}", f"fdr_trick_ratio_{level}"])
                continue
            setattr(report, f"ppv_{level}", rates.ppv)
            setattr(report, f"fdr_trick_{level}", rates.fdr_trick)
            setattr(report, f"fdr_other_{level}", rates.fdr_other)
            setattr(report, f"fdr_trick_ratio_{level}", attempt(
                f"fdr_trick_ratio_{level}", lambda: self.trick_ratio_fdr(rates, codebook)
            ))

        accuracy = attempt("spot_accuracy", lambda: self.spot_accuracy(spot_calls, well, fields, match_radius))
        if accuracy is None:
            report.undefined.append("letter_accuracy")
        else:
            report.spot_accuracy, report.letter_accuracy = accuracy

        report.counts = self.count_rows(called_cells, called_spots, ref_cells, ref_spots, codebook)
        return report

    @staticmethod
    def count_rows(
        called_cells: Mapping[str, int],
        called_spots: Mapping[str, int],
        ref_cells: Mapping[str, int],
        ref_spots: Mapping[str, int],
        codebook: Codebook,
    ) -> List[CountRow]:
        """目标与诱饵条形码逐行计数，其余识别结果追加在后"""
        extra = sorted((set(called_cells) | set(called_spots)) - set(codebook.barcodes))
        ref_total = sum(ref_cells.values())
        called_total = sum(called_cells.values())
        rows = []
        for barcode in list(codebook.barcodes) + extra:
            kind = codebook.kind_of(barcode)
            rows.append(CountRow(
                barcode=barcode,
                kind=kind.value if kind is not None else "other",
                reference_cells=int(ref_cells.get(barcode, 0)),
                called_cells=int(called_cells.get(barcode, 0)),
                reference_spots=int(ref_spots.get(barcode, 0)),
                called_spots=int(called_spots.get(barcode, 0)),
                reference_frequency=ref_cells.get(barcode, 0) / ref_total if ref_total else 0.0,
                called_frequency=called_cells.get(barcode, 0) / called_total if called_total else 0.0,
            ))
        return rows

    # ------------------------------------------------------------------
    # 报告输出
    # ------------------------------------------------------------------

    @staticmethod
    def render_table(report: MetricsReport) -> str:
        """人类可读的指标表"""
        names = [
            "r2", "r2_frequency", "r2_spot", "cell_recovery_rate",
            "ppv_cell", "fdr_trick_cell", "fdr_other_cell", "fdr_trick_ratio_cell",
            "ppv_spot", "fdr_trick_spot", "fdr_other_spot", "fdr_trick_ratio_spot",
            "spot_accuracy", "letter_accuracy",
        ]
        values = []
        for name in names:
            v = getattr(report, name)
            values.append("undefined" if v is None else f"{v:.4f}")
        frame = pd.DataFrame({"metric": names, "value": values})
        header = f"cells={report.n_cells} assigned={report.n_assigned_cells} spot_calls={report.n_spot_calls}\n"
        return header + frame.to_string(index=False) + "\n"

    @staticmethod
    def plot_abundance(report: MetricsReport, path: Union[str, Path]) -> Path:
        """目标条形码的参考 vs 调用细胞计数散点图，每个目标条形码一个点"""
        rows = [r for r in report.counts if r.kind == "targeted"]
        fig = Figure(figsize=(4.5, 4.5))
        ax = fig.add_subplot()
        ref = [r.reference_cells for r in rows]
        got = [r.called_cells for r in rows]
        ax.plot(ref, got, linestyle="none", marker="o", markersize=3, alpha=0.7, gid=SCATTER_GID)
        top = max(ref + got + [1])
        ax.plot([0, top], [0, top], color="grey", linewidth=0.8)
        ax.set_xlabel("reference cells")
        ax.set_ylabel("called cells")
        title = "R² undefined" if report.r2 is None else f"R² = {report.r2:.3f}"
        ax.set_title(title)
        fig.tight_layout()
        p = Path(path)
        fig.savefig(p, format="svg", metadata={"Date": None})
        return p

    @staticmethod
    def plot_history(history: Sequence[RoundRecord], path: Union[str, Path]) -> Optional[Path]:
        """逐轮留出准确率曲线；没有准确率记录时不输出"""
        points = [(r.round, r.heldout_accuracy) for r in history if r.heldout_accuracy is not None]
        if not points:
            return None
        fig = Figure(figsize=(4.5, 3.0))
        ax = fig.add_subplot()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
        ax.set_xlabel("round")
        ax.set_ylabel("held-out letter accuracy")
        fig.tight_layout()
        p = Path(path)
        fig.savefig(p, format="svg", metadata={"Date": None})
        return p

    def emit_report(
        self,
        report: MetricsReport,
        out_dir: Union[str, Path],
        history: Optional[Sequence[RoundRecord]] = None,
        plots: bool = True,
    ) -> Dict[str, Path]:
        """写出 metrics.json、metrics.txt、counts.csv 以及可选的 SVG 图"""
        d = ensure_dir(out_dir)
        paths = {
            "json": d / "metrics.json",
            "table": d / "metrics.txt",
            "counts": d / "counts.csv",
        }
        paths["json"].write_text(report.model_dump_json(indent=2), encoding="utf-8")
        paths["table"].write_text(self.render_table(report), encoding="utf-8")
        frame = pd.DataFrame([r.model_dump() for r in report.counts], columns=list(CountRow.model_fields))
        frame.to_csv(paths["counts"], index=False, lineterminator="\n", float_format="%.9g")
        if plots:
            paths["scatter"] = self.plot_abundance(report, d / "abundance_scatter.svg")
            if history:
                curve = self.plot_history(history, d / "accuracy_curve.svg")
                if curve is not None:
                    paths["curve"] = curve
        logger.info(f"报告已写出: {paths['json']}")
        return paths

    @staticmethod
    def read_report(path: Union[str, Path]) -> MetricsReport:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"报告不存在: {p}")
        return MetricsReport.model_validate(json.loads(p.read_text(encoding="utf-8")))

    # ------------------------------------------------------------------
    # 识别结果读写
    # ------------------------------------------------------------------

    @staticmethod
    def write_spot_calls(calls: Sequence[SpotCall], path: Union[str, Path]) -> Path:
        frame = pd.DataFrame([c.model_dump(mode="json") for c in calls], columns=SPOT_CALL_COLUMNS)
        p = Path(path)
        frame.to_csv(p, index=False, lineterminator="\n", float_format="%.9g")
        return p

    @staticmethod
    def read_spot_calls(path: Union[str, Path]) -> List[SpotCall]:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"斑点识别文件不存在: {p}")
        frame = pd.read_csv(p, dtype={"barcode": str, "source": str}, keep_default_na=False)
        return [
            SpotCall(
                spot_id=int(r.spot_id),
                field=int(r.field),
                track_id=int(r.track_id),
                x=float(r.x),
                y=float(r.y),
                barcode=r.barcode or None,
                score=float(r.score),
                source=PseudoSource(r.source),
            )
            for r in frame.itertuples(index=False)
        ]

    @staticmethod
    def write_cell_calls(calls: Sequence[CellCall], path: Union[str, Path]) -> Path:
        frame = pd.DataFrame([c.model_dump() for c in calls], columns=CELL_CALL_COLUMNS)
        p = Path(path)
        frame.to_csv(p, index=False, lineterminator="\n", float_format="%.9g")
        return p

    @staticmethod
    def read_cell_calls(path: Union[str, Path]) -> List[CellCall]:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"细胞识别文件不存在: {p}")
        frame = pd.read_csv(p, dtype={"barcode": str}, keep_default_na=False)
        return [
            CellCall(
                cell_id=int(r.cell_id),
                field=int(r.field),
                barcode=r.barcode or None,
                score=float(r.score),
                n_spots=int(r.n_spots),
            )
            for r in frame.itertuples(index=False)
        ]


# 创建服务实例
evaluation_service = EvaluationService()
