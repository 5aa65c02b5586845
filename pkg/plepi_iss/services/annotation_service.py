import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import ndimage
from scipy.spatial import cKDTree

from plepi_iss.models.models import (
    ALPHABET,
    N_LETTERS,
    DetectionScore,
    DetectionSet,
    GroundTruthWell,
    HQParams,
    SimConfig,
    Tile,
)
from plepi_iss.services.codebook_service import encode_barcode
from plepi_iss.utils.exceptions import ConfigError, DataError, IncompleteField, MissingArtifact
from plepi_iss.utils.helpers import substream_rng

logger = logging.getLogger(__name__)

DETECTION_COLUMNS = ["field", "cycle", "x", "y", "iA", "iC", "iG", "iT", "objectness", "letter"]
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
_LETTER_INDEX = {letter: i for i, letter in enumerate(ALPHABET)}


def local_maxima(projection: np.ndarray, threshold: float) -> np.ndarray:
    """
    8 邻域局部极大值

    平台（相邻等值极大）只保留行列字典序最小的像素。

    Returns:
        np.ndarray: (n, 2) 的 (row, col)，按行优先排序
    """
    neighborhood_max = ndimage.maximum_filter(projection, size=3, mode="constant", cval=-np.inf)
    candidates = (projection >= neighborhood_max) & (projection > threshold)
    labels, n = ndimage.label(candidates, structure=_EIGHT_CONNECTED)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    rows, cols = np.nonzero(labels)
    _, first = np.unique(labels[rows, cols], return_index=True)
    keep = np.sort(first)
    return np.column_stack([rows[keep], cols[keep]]).astype(np.int64)


class AnnotationService:
    """
    噪声标注服务类

    LQ：单图块阈值化；HQ：逐通道百分位归一化 + 跨循环最大投影定位 + 逐循环读数。
    """

    @staticmethod
    def default_lq_threshold(sim: SimConfig) -> float:
        """默认 LQ 阈值 = 背景 + 5 倍噪声标准差"""
        threshold = sim.background_level + 5.0 * sim.sensor_noise_sd
        if threshold <= 0:
            # 无背景无噪声时退化为峰值的固定比例
            threshold = 0.05 * sim.spot_amplitude
        return threshold

    def detect_spots_lq(self, tile: Tile, threshold: float) -> DetectionSet:
        """
        低质量（阈值化）斑点检测

        Args:
            tile: 单个图块
            threshold: 通道最大投影的强度阈值

        Returns:
            DetectionSet: 每个局部极大一个检测，objectness 为投影值
        """
        if threshold <= 0:
            raise ConfigError(f"LQ 阈值必须为正数: {threshold}")
        pixels = np.asarray(tile.pixels, dtype=np.float64)
        projection = pixels.max(axis=2)
        peaks = local_maxima(projection, threshold)
        rows, cols = peaks[:, 0], peaks[:, 1]
        intensity = pixels[rows, cols, :]
        n = len(peaks)
        return DetectionSet(
            field=np.full(n, tile.field, dtype=np.int64),
            cycle=np.full(n, tile.cycle, dtype=np.int64),
            x=cols.astype(np.float64),
            y=rows.astype(np.float64),
            intensity=intensity,
            objectness=projection[rows, cols],
            letter=np.argmax(intensity, axis=1).astype(np.int64) if n else np.zeros(0, dtype=np.int64),
        )

    @staticmethod
    def _ordered_cycles(tiles: Sequence[Tile], n_cycles: int) -> List[Tile]:
        by_cycle: Dict[int, Tile] = {t.cycle: t for t in tiles}
        missing = [r for r in range(n_cycles) if r not in by_cycle]
        if missing:
            field = tiles[0].field if tiles else "?"
            raise IncompleteField(f"视野 {field} 缺少循环 {missing}")
        fields = {t.field for t in tiles}
        if len(fields) > 1:
            raise DataError(f"HQ 检测需要单个视野的图块，实际包含视野 {sorted(fields)}")
        return [by_cycle[r] for r in range(n_cycles)]

    @staticmethod
    def normalize_tile(pixels: np.ndarray, params: HQParams) -> np.ndarray:
        """
        逐通道百分位归一化

        每个通道减去中位数后除以 (百分位值 − 中位数)，使该百分位映射到 1。
        尺度下限为最亮通道尺度 / max_gain_ratio，防止空通道放大噪声。
        """
        flat = np.asarray(pixels, dtype=np.float64).reshape(-1, pixels.shape[2])
        median = np.median(flat, axis=0)
        upper = np.percentile(flat, params.percentile, axis=0)
        scale = upper - median
        floor = scale.max() / params.max_gain_ratio
        scale = np.maximum(scale, floor)
        scale[scale <= 0] = 1.0
        return np.clip(pixels - median, 0.0, None) / scale

    def normalized_stack(self, tiles: Sequence[Tile], params: HQParams, n_cycles: int) -> np.ndarray:
        """一个视野全部循环的归一化图像，形状 (N_r, H, W, C)"""
        ordered = self._ordered_cycles(tiles, n_cycles)
        return np.stack([self.normalize_tile(t.pixels, params) for t in ordered])

    def raw_stack(self, tiles: Sequence[Tile], n_cycles: int) -> np.ndarray:
        ordered = self._ordered_cycles(tiles, n_cycles)
        return np.stack([np.asarray(t.pixels, dtype=np.float64) for t in ordered])

    def detect_spots_hq(self, tiles: Sequence[Tile], params: HQParams, n_cycles: int) -> DetectionSet:
        """
        高质量（专家流程）斑点检测

        Args:
            tiles: 一个视野的全部 N_r 个图块
            params: 归一化与阈值参数
            n_cycles: 循环数 N_r

        Returns:
            DetectionSet: 共享位置上每循环一个检测；强度为归一化后的值

        Raises:
            IncompleteField: 缺少某个循环
        """
        stack = self.normalized_stack(tiles, params, n_cycles)
        field = tiles[0].field
        per_cycle = stack.max(axis=3)
        projection = per_cycle.max(axis=0)
        peaks = local_maxima(projection, params.threshold)
        rows, cols = peaks[:, 0], peaks[:, 1]
        n = len(peaks)
        objectness = np.median(per_cycle[:, rows, cols], axis=0) if n else np.zeros(0)

        parts = []
        for r in range(n_cycles):
            intensity = stack[r, rows, cols, :]
            parts.append(DetectionSet(
                field=np.full(n, field, dtype=np.int64),
                cycle=np.full(n, r, dtype=np.int64),
                x=cols.astype(np.float64),
                y=rows.astype(np.float64),
                intensity=intensity,
                objectness=objectness.copy(),
                letter=np.argmax(intensity, axis=1).astype(np.int64) if n else np.zeros(0, dtype=np.int64),
            ))
        return DetectionSet.concat(parts)

    def annotate_field(
        self,
        tiles: Sequence[Tile],
        quality: str,
        n_cycles: int,
        lq_threshold: float,
        hq: HQParams,
    ) -> DetectionSet:
        """按质量等级标注一个视野"""
        if quality == "lq":
            ordered = self._ordered_cycles(tiles, n_cycles)
            return DetectionSet.concat([self.detect_spots_lq(t, lq_threshold) for t in ordered])
        if quality == "hq":
            return self.detect_spots_hq(tiles, hq, n_cycles)
        raise ConfigError(f"未知的标注质量: {quality}")

    def annotate_well(
        self,
        tiles: Sequence[Tile],
        quality: str,
        n_cycles: int,
        lq_threshold: float,
        hq: HQParams,
        n_jobs: int = 1,
    ) -> DetectionSet:
        """按视野并行标注，结果按视野顺序合并"""
        by_field: Dict[int, List[Tile]] = {}
        for t in tiles:
            by_field.setdefault(t.field, []).append(t)
        fields = sorted(by_field)
        parts = Parallel(n_jobs=n_jobs)(
            delayed(self.annotate_field)(by_field[f], quality, n_cycles, lq_threshold, hq)
            for f in fields
        )
        result = DetectionSet.concat(parts)
        logger.info(f"{quality.upper()} 标注: {len(fields)} 个视野, {len(result)} 个检测")
        return result

    @staticmethod
    def corrupt_labels(dets: DetectionSet, flip_rate: float, seed: int) -> DetectionSet:
        """
        以 flip_rate 概率把每个字母独立替换为另一个随机字母

        Raises:
            ConfigError: flip_rate 不在 [0, 1]
        """
        if not 0.0 <= flip_rate <= 1.0:
            raise ConfigError(f"flip_rate 必须在 [0, 1] 内: {flip_rate}")
        rng = substream_rng(seed, "corrupt")
        n = len(dets)
        flip = rng.random(n) < flip_rate
        shift = rng.integers(1, N_LETTERS, size=n)
        letters = np.where(flip, (dets.letter + shift) % N_LETTERS, dets.letter)
        fields = {name: getattr(dets, name) for name in DetectionSet.model_fields}
        fields["letter"] = letters.astype(np.int64)
        logger.debug(f"翻转 {int(flip.sum())}/{n} 个标签")
        return DetectionSet(**fields)

    @staticmethod
    def score_detections(dets: DetectionSet, well: GroundTruthWell, radius: float = 2.0) -> DetectionScore:
        """
        检测结果相对真值的字母错误率与召回

        每个 (视野, 循环) 内检测按 objectness 降序与半径内最近的未匹配真值斑点一一配对。
        """
        truth_by_field: Dict[int, list] = {}
        for s in well.spots:
            truth_by_field.setdefault(s.field, []).append(s)
        fields_seen = sorted({int(f) for f in dets.field})
        n_truth = sum(len(truth_by_field.get(f, [])) for f in fields_seen) * well.n_cycles

        matched = errors = 0
        for f in fields_seen:
            spots = truth_by_field.get(f, [])
            if not spots:
                continue
            tree = cKDTree(np.array([[s.x, s.y] for s in spots]))
            codes = np.stack([encode_barcode(s.barcode) for s in spots])
            for r in range(well.n_cycles):
                idx = np.nonzero((dets.field == f) & (dets.cycle == r))[0]
                if len(idx) == 0:
                    continue
                idx = idx[np.argsort(-dets.objectness[idx], kind="stable")]
                taken = np.zeros(len(spots), dtype=bool)
                dist, nearest = tree.query(np.column_stack([dets.x[idx], dets.y[idx]]), k=1)
                for i, d, j in zip(idx, dist, nearest):
                    if d > radius or taken[j]:
                        continue
                    taken[j] = True
                    matched += 1
                    errors += int(dets.letter[i] != codes[j, r])
        return DetectionScore(
            n_detections=len(dets),
            n_matched=matched,
            n_letter_errors=errors,
            n_truth=n_truth,
        )

    @staticmethod
    def readout(stack: np.ndarray, x: float, y: float) -> np.ndarray:
        """在 (x, y) 最近像素处读取各循环强度，返回 (N_r, C)"""
        height, width = stack.shape[1], stack.shape[2]
        col = min(max(int(np.floor(x + 0.5)), 0), width - 1)
        row = min(max(int(np.floor(y + 0.5)), 0), height - 1)
        return stack[:, row, col, :]

    @staticmethod
    def pseudo_boxes(dets: DetectionSet, diameter: float) -> np.ndarray:
        """以检测点为中心的固定尺寸伪框 (x0, y0, x1, y1)"""
        half = diameter / 2.0
        return np.column_stack([dets.x - half, dets.y - half, dets.x + half, dets.y + half])

    # ------------------------------------------------------------------
    # 文件读写
    # ------------------------------------------------------------------

    @staticmethod
    def detections_to_frame(dets: DetectionSet) -> pd.DataFrame:
        frame = pd.DataFrame({
            "field": dets.field,
            "cycle": dets.cycle,
            "x": dets.x,
            "y": dets.y,
        })
        for c, letter in enumerate(ALPHABET):
            frame[f"i{letter}"] = dets.intensity[:, c] if len(dets) else np.zeros(0)
        frame["objectness"] = dets.objectness
        frame["letter"] = [ALPHABET[int(v)] for v in dets.letter]
        return frame[DETECTION_COLUMNS]

    def write_detections(self, dets: DetectionSet, path: Union[str, Path]) -> Path:
        p = Path(path)
        self.detections_to_frame(dets).to_csv(p, index=False, lineterminator="\n", float_format="%.9g")
        return p

    @staticmethod
    def read_detections(path: Union[str, Path]) -> DetectionSet:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"检测文件不存在: {p}")
        frame = pd.read_csv(p, dtype={"letter": str})
        if list(frame.columns) != DETECTION_COLUMNS:
            raise DataError(f"检测文件表头错误: {list(frame.columns)}")
        unknown = set(frame["letter"]) - set(ALPHABET)
        if unknown:
            raise DataError(f"检测文件包含未知字母: {sorted(unknown)}")
        return DetectionSet(
            field=frame["field"].to_numpy(dtype=np.int64),
            cycle=frame["cycle"].to_numpy(dtype=np.int64),
            x=frame["x"].to_numpy(dtype=np.float64),
            y=frame["y"].to_numpy(dtype=np.float64),
            intensity=frame[["iA", "iC", "iG", "iT"]].to_numpy(dtype=np.float64).reshape(-1, N_LETTERS),
            objectness=frame["objectness"].to_numpy(dtype=np.float64),
            letter=frame["letter"].map(_LETTER_INDEX).to_numpy(dtype=np.int64),
        )


# 创建服务实例
annotation_service = AnnotationService()
