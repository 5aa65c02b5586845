import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from pydantic_settings import TomlConfigSettingsSource
from scipy.spatial import cKDTree

from plepi_iss.models.models import (
    BaseCallerModel,
    DetectionSet,
    GroundTruthWell,
    MetricsReport,
    RunConfig,
    Tile,
    TrackSet,
)
from plepi_iss.services.annotation_service import annotation_service
from plepi_iss.services.basecaller_service import basecaller_service
from plepi_iss.services.codebook_service import Codebook, codebook_service, encode_barcode
from plepi_iss.services.evaluation_service import evaluation_service
from plepi_iss.services.plepi_service import plepi_service
from plepi_iss.services.simulation_service import simulation_service
from plepi_iss.utils.exceptions import ConfigError, MissingArtifact
from plepi_iss.utils.helpers import ensure_dir

logger = logging.getLogger(__name__)

ABLATION_STRATEGIES = ("baseline", "location", "full")
ABLATION_QUALITIES = ("lq", "hq")
ABLATION_METRICS = [
    "r2", "cell_recovery_rate", "ppv_cell", "fdr_trick_cell", "fdr_other_cell",
    "spot_accuracy", "letter_accuracy",
]


class RunPaths:
    """
    一次运行的产物路径

    模拟产物、标注与 burn-in 产物、训练及下游产物可以位于不同目录，
    以便消融实验共享同一孔板与同一标注。
    """

    def __init__(
        self,
        out_dir: Union[str, Path],
        sim_dir: Optional[Union[str, Path]] = None,
        annotate_dir: Optional[Union[str, Path]] = None,
    ):
        self.out_dir = Path(out_dir)
        self.sim_dir = Path(sim_dir) if sim_dir is not None else self.out_dir
        self.annotate_dir = Path(annotate_dir) if annotate_dir is not None else self.out_dir

    @property
    def well(self) -> Path:
        return self.sim_dir / "well.json"

    @property
    def tiles(self) -> Path:
        return self.sim_dir / "tiles"

    @property
    def reference(self) -> Path:
        return self.sim_dir / "reference_abundance.csv"

    @property
    def reference_cells(self) -> Path:
        return self.sim_dir / "reference_abundance_cells.csv"

    @property
    def detections(self) -> Path:
        return self.annotate_dir / "detections.csv"

    @property
    def labels(self) -> Path:
        return self.annotate_dir / "labels.csv"

    @property
    def burnin(self) -> Path:
        return self.annotate_dir / "burnin.json"

    @property
    def teacher(self) -> Path:
        return self.out_dir / "teacher.json"

    @property
    def student(self) -> Path:
        return self.out_dir / "student.json"

    @property
    def history(self) -> Path:
        return self.out_dir / "history.jsonl"

    @property
    def pseudo_dir(self) -> Path:
        return self.out_dir / "pseudo_labels"

    @property
    def spot_calls(self) -> Path:
        return self.out_dir / "spot_calls.csv"

    @property
    def cell_calls(self) -> Path:
        return self.out_dir / "cell_calls.csv"

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"

    @property
    def metrics(self) -> Path:
        return self.report_dir / "metrics.json"


class PipelineService:
    """
    端到端流程服务类

    每个阶段读取前序产物、写出本阶段产物，可单独重跑。
    """

    # ------------------------------------------------------------------
    # 配置
    # ------------------------------------------------------------------

    @staticmethod
    def load_config(
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> RunConfig:
        """
        加载运行配置

        优先级：命令行覆盖 > TOML 文件 > 环境变量 > 默认值。
        TOML 中的相对 codebook_path / out_dir 以配置文件所在目录为基准。

        Raises:
            ConfigError: 配置文件不存在或校验失败
        """
        data: Dict[str, Any] = {}
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"配置文件不存在: {path}")
            data = dict(TomlConfigSettingsSource(RunConfig, toml_file=path)())
            for key in ("codebook_path", "out_dir"):
                if key in data and not Path(data[key]).is_absolute():
                    data[key] = str(path.parent / data[key])
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key == "rounds":
                train = dict(data.get("train", {}))
                train["rounds"] = value
                data["train"] = train
            else:
                data[key] = value
        try:
            return RunConfig(**data)
        except ValidationError as e:
            raise ConfigError(f"配置校验失败: {e}")

    @staticmethod
    def load_codebook(cfg: RunConfig) -> Codebook:
        path = Path(cfg.codebook_path)
        if not path.is_file():
            raise ConfigError(f"编码本文件不存在: {path}")
        return codebook_service.load_codebook(path)

    @staticmethod
    def paths(cfg: RunConfig) -> RunPaths:
        return RunPaths(cfg.out_dir)

    # ------------------------------------------------------------------
    # 阶段
    # ------------------------------------------------------------------

    def design(
        self,
        path: Union[str, Path],
        n_targeted: int,
        n_cycles: int,
        n_trick: int,
        min_dist: int = 3,
        trick_min_dist: int = 4,
        seed: int = 0,
    ) -> Codebook:
        """设计基准编码本（目标 + 诱饵）并写出"""
        codebook = codebook_service.design_codebook(n_targeted, n_cycles, min_dist, seed)
        if n_trick > 0:
            tricks = codebook_service.generate_trick_barcodes(codebook, n_trick, trick_min_dist, seed)
            codebook = codebook_service.with_tricks(codebook, tricks)
        ensure_dir(Path(path).parent)
        codebook_service.save_codebook(codebook, path)
        logger.info(f"编码本已写出: {path} ({codebook!r})")
        return codebook

    def simulate(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> GroundTruthWell:
        paths = paths or self.paths(cfg)
        codebook = self.load_codebook(cfg)
        well = simulation_service.simulate_well(cfg.sim, codebook)
        tiles = simulation_service.render_tiles(well, cfg.sim, n_jobs=cfg.threads)
        ensure_dir(paths.sim_dir)
        simulation_service.write_well(well, paths.well)
        simulation_service.write_tiles(tiles, paths.tiles)
        paths.reference.write_text(simulation_service.export_reference_abundance(well, "spot"), encoding="utf-8")
        paths.reference_cells.write_text(simulation_service.export_reference_abundance(well, "cell"), encoding="utf-8")
        return well

    def lq_threshold(self, cfg: RunConfig) -> float:
        if cfg.annotate.lq_threshold is not None:
            return cfg.annotate.lq_threshold
        return annotation_service.default_lq_threshold(cfg.sim)

    def detection_threshold(self, cfg: RunConfig) -> float:
        """轨迹前景阈值：默认与检测阈值一致"""
        if cfg.plepi.objectness_threshold is not None:
            return cfg.plepi.objectness_threshold
        return self.lq_threshold(cfg) if cfg.quality == "lq" else cfg.annotate.hq.threshold

    def annotate(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> DetectionSet:
        """全部视野标注；有标注视野的字母在 LQ 下按 flip_rate 随机翻转"""
        paths = paths or self.paths(cfg)
        well = simulation_service.read_well(paths.well)
        tiles = simulation_service.read_tiles(paths.tiles)
        dets = annotation_service.annotate_well(
            tiles, cfg.quality, well.n_cycles, self.lq_threshold(cfg), cfg.annotate.hq, n_jobs=cfg.threads
        )
        labeled = dets.subset(np.isin(dets.field, cfg.split.labeled))
        if cfg.quality == "lq" and cfg.flip_rate > 0:
            labeled = annotation_service.corrupt_labels(labeled, cfg.flip_rate, cfg.seed)
        score = annotation_service.score_detections(labeled, well, cfg.evaluate.match_radius)
        logger.info(
            f"有标注视野标签: {len(labeled)} 个检测, 字母错误率 {score.error_rate:.3f}, 召回 {score.recall:.3f}"
        )
        ensure_dir(paths.annotate_dir)
        annotation_service.write_detections(dets, paths.detections)
        annotation_service.write_detections(labeled, paths.labels)
        return dets

    def background_for(self, cfg: RunConfig) -> float:
        """LQ 强度为原始值，需扣除背景；HQ 强度已归一化"""
        return cfg.sim.background_level if cfg.quality == "lq" else 0.0

    def burnin(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> BaseCallerModel:
        paths = paths or self.paths(cfg)
        labels = annotation_service.read_detections(paths.labels)
        if len(labels) == 0:
            raise ConfigError("有标注集合为空，无法 burn-in")
        spec = basecaller_service.fit_feature_spec(labels.intensity, self.background_for(cfg))
        x = basecaller_service.featurize(labels.intensity, spec)
        model, _ = plepi_service.burn_in(x, labels.letter, cfg.train, basecaller_service.init_model(spec))
        ensure_dir(paths.annotate_dir)
        basecaller_service.save_checkpoint(model, paths.burnin)
        return model

    def field_tracks(
        self,
        cfg: RunConfig,
        dets: DetectionSet,
        tiles: Sequence[Tile],
        fields: Sequence[int],
        n_cycles: int,
    ) -> Dict[int, TrackSet]:
        """为指定视野构建轨迹（缺失循环用同一质量的图像读数填补）"""
        threshold = self.detection_threshold(cfg)
        result = {}
        for f in fields:
            field_tiles = [t for t in tiles if t.field == f]
            if cfg.quality == "hq":
                stack = annotation_service.normalized_stack(field_tiles, cfg.annotate.hq, n_cycles)
            else:
                stack = annotation_service.raw_stack(field_tiles, n_cycles)
            field_dets = dets.subset(dets.field == f)
            result[f] = plepi_service.build_tracks(
                field_dets, n_cycles, cfg.plepi.match_radius, threshold, cfg.plepi.min_track_members, stack
            )
            logger.debug(f"视野 {f}: {len(result[f])} 条轨迹, 前景 {int(result[f].foreground.sum())}")
        return result

    @staticmethod
    def track_truth(tracks: TrackSet, well: GroundTruthWell, radius: float) -> np.ndarray:
        """轨迹对应的真值字母 (n, N_r)，无匹配为 -1"""
        truth = np.full((len(tracks), well.n_cycles), -1, dtype=np.int64)
        spots = well.spots_in([tracks.field])
        if not spots or not len(tracks):
            return truth
        dist, nearest = cKDTree(np.array([[s.x, s.y] for s in spots])).query(
            np.column_stack([tracks.x, tracks.y]), k=1
        )
        for t, (d, j) in enumerate(zip(dist, nearest)):
            if d <= radius:
                truth[t] = encode_barcode(spots[int(j)].barcode)
        return truth

    def heldout_evaluator(
        self,
        well: GroundTruthWell,
        tracks: Dict[int, TrackSet],
        radius: float,
    ) -> Callable[[BaseCallerModel], float]:
        """无标注视野前景轨迹上的逐字母准确率（真值只用于监测）"""
        truths = {f: self.track_truth(t, well, radius) for f, t in tracks.items()}

        def evaluate(model: BaseCallerModel) -> float:
            correct = total = 0
            for f, t in tracks.items():
                keep = t.foreground & (truths[f][:, 0] >= 0)
                if not keep.any():
                    continue
                predicted = plepi_service.track_probs(model, t).argmax(axis=-1)[keep]
                correct += int(np.sum(predicted == truths[f][keep]))
                total += predicted.size
            return correct / total if total else 0.0

        return evaluate

    def train(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> BaseCallerModel:
        paths = paths or self.paths(cfg)
        if not paths.burnin.exists():
            raise MissingArtifact(f"burn-in 检查点不存在: {paths.burnin}")
        codebook = self.load_codebook(cfg)
        well = simulation_service.read_well(paths.well)
        burnin = basecaller_service.load_checkpoint(paths.burnin)
        labels = annotation_service.read_detections(paths.labels)
        dets = annotation_service.read_detections(paths.detections)
        tiles = simulation_service.read_tiles(paths.tiles, fields=cfg.split.unlabeled)
        tracks = self.field_tracks(cfg, dets, tiles, cfg.split.unlabeled, well.n_cycles)

        teacher, student, history = plepi_service.self_train(
            burnin,
            burnin,
            basecaller_service.featurize(labels.intensity, burnin.feature_spec),
            labels.letter,
            tracks,
            cfg.train,
            cfg.plepi,
            codebook,
            quality=cfg.quality,
            skip_burnin=True,
            evaluator=self.heldout_evaluator(well, tracks, cfg.evaluate.match_radius),
            dump_dir=paths.pseudo_dir,
            n_jobs=cfg.threads,
        )
        ensure_dir(paths.out_dir)
        basecaller_service.save_checkpoint(teacher, paths.teacher)
        basecaller_service.save_checkpoint(student, paths.student)
        plepi_service.write_history(history, paths.history)
        return teacher

    def decode(self, cfg: RunConfig, paths: Optional[RunPaths] = None):
        """测试视野解码为斑点识别"""
        paths = paths or self.paths(cfg)
        codebook = self.load_codebook(cfg)
        well = simulation_service.read_well(paths.well)
        teacher = basecaller_service.load_checkpoint(paths.teacher)
        dets = annotation_service.read_detections(paths.detections)
        tiles = simulation_service.read_tiles(paths.tiles, fields=cfg.split.test)
        tracks = self.field_tracks(cfg, dets, tiles, cfg.split.test, well.n_cycles)
        tau_c = cfg.plepi.resolved_tau_c(cfg.quality)
        calls = []
        for f in sorted(tracks):
            fused = plepi_service.decode_tracks(teacher, tracks[f], codebook, cfg.decode.mode, cfg.plepi, tau_c)
            calls.extend(evaluation_service.spot_calls_from_tracks(fused, tracks[f], first_id=len(calls)))
        ensure_dir(paths.out_dir)
        evaluation_service.write_spot_calls(calls, paths.spot_calls)
        logger.info(f"测试视野解码: {len(calls)} 个斑点识别")
        return calls

    def call_cells(self, cfg: RunConfig, paths: Optional[RunPaths] = None):
        paths = paths or self.paths(cfg)
        well = simulation_service.read_well(paths.well)
        spot_calls = evaluation_service.read_spot_calls(paths.spot_calls)
        cells = evaluation_service.call_cells(spot_calls, well, cfg.split.test, cfg.evaluate.min_cell_score)
        evaluation_service.write_cell_calls(cells, paths.cell_calls)
        return cells

    def evaluate(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> MetricsReport:
        paths = paths or self.paths(cfg)
        codebook = self.load_codebook(cfg)
        well = simulation_service.read_well(paths.well)
        spot_calls = evaluation_service.read_spot_calls(paths.spot_calls)
        cell_calls = evaluation_service.read_cell_calls(paths.cell_calls)
        report = evaluation_service.build_report(
            spot_calls, cell_calls, well, codebook, cfg.split.test, cfg.evaluate.match_radius
        )
        ensure_dir(paths.report_dir)
        paths.metrics.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        return report

    def report(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> MetricsReport:
        paths = paths or self.paths(cfg)
        report = evaluation_service.read_report(paths.metrics)
        history = plepi_service.read_history(paths.history)
        evaluation_service.emit_report(report, paths.report_dir, history, cfg.evaluate.plots)
        return report

    def pipeline(self, cfg: RunConfig, paths: Optional[RunPaths] = None) -> MetricsReport:
        """simulate → annotate → burnin → train → decode → call-cells → evaluate → report"""
        paths = paths or self.paths(cfg)
        if not paths.well.exists():
            self.simulate(cfg, paths)
        self.annotate(cfg, paths)
        self.burnin(cfg, paths)
        self.train(cfg, paths)
        self.decode(cfg, paths)
        self.call_cells(cfg, paths)
        self.evaluate(cfg, paths)
        return self.report(cfg, paths)

    # ------------------------------------------------------------------
    # 消融
    # ------------------------------------------------------------------

    @staticmethod
    def variant_config(cfg: RunConfig, quality: str, strategy: str) -> RunConfig:
        """baseline：只做 burn-in；location：共识轨迹 + 教师 argmax；full：编码本融合"""
        train = cfg.train.model_copy(update={"rounds": 0}) if strategy == "baseline" else cfg.train
        plepi = cfg.plepi.model_copy(update={"fusion_mode": "location" if strategy == "location" else "codebook"})
        return cfg.model_copy(update={
            "quality": quality,
            "train": train,
            "plepi": plepi,
            "out_dir": Path(cfg.out_dir) / quality / strategy,
        })

    def ablate(self, cfg: RunConfig) -> pd.DataFrame:
        """
        3 × 2 消融：{baseline, location, full} × {lq, hq}，共享同一孔板

        Returns:
            pd.DataFrame: 长表，每个 (quality, strategy) 一行
        """
        root = ensure_dir(cfg.out_dir)
        shared = RunPaths(root / "sim", sim_dir=root / "sim")
        self.simulate(cfg, shared)

        rows = []
        for quality in ABLATION_QUALITIES:
            quality_dir = root / quality
            annotate_paths = RunPaths(quality_dir, sim_dir=shared.sim_dir, annotate_dir=quality_dir)
            base = self.variant_config(cfg, quality, "full")
            self.annotate(base, annotate_paths)
            self.burnin(base, annotate_paths)
            for strategy in ABLATION_STRATEGIES:
                variant = self.variant_config(cfg, quality, strategy)
                paths = RunPaths(variant.out_dir, sim_dir=shared.sim_dir, annotate_dir=quality_dir)
                logger.info(f"消融: quality={quality} strategy={strategy}")
                self.train(variant, paths)
                self.decode(variant, paths)
                self.call_cells(variant, paths)
                self.evaluate(variant, paths)
                report = self.report(variant, paths)
                history = plepi_service.read_history(paths.history)
                row = {"quality": quality, "strategy": strategy}
                row.update({name: getattr(report, name) for name in ABLATION_METRICS})
                row["heldout_accuracy"] = history[-1].heldout_accuracy if history else None
                rows.append(row)

        table = pd.DataFrame(rows, columns=["quality", "strategy"] + ABLATION_METRICS + ["heldout_accuracy"])
        table.to_csv(root / "ablation.csv", index=False, lineterminator="\n", float_format="%.6g")
        (root / "ablation.txt").write_text(self.render_ablation(table), encoding="utf-8")
        return table

    @staticmethod
    def render_ablation(table: pd.DataFrame) -> str:
        """策略为行、质量 × 指标为列的宽表"""
        values = ["r2", "cell_recovery_rate", "letter_accuracy"]
        numeric = table.astype({name: float for name in values})
        wide = numeric.pivot(index="strategy", columns="quality", values=values)
        wide = wide.reindex([s for s in ABLATION_STRATEGIES if s in wide.index])
        return wide.to_string(float_format=lambda v: f"{v:.4f}", na_rep="undefined") + "\n"


# 创建服务实例
pipeline_service = PipelineService()
