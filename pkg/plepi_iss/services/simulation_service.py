import io
import json
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial import cKDTree

from plepi_iss.models.models import N_LETTERS, CellRecord, GroundTruthWell, SimConfig, SpotRecord, Tile
from plepi_iss.services.codebook_service import Codebook, encode_barcode
from plepi_iss.utils.exceptions import ConfigError, DataError, MissingArtifact
from plepi_iss.utils.helpers import ensure_dir, substream_rng, tile_stem

logger = logging.getLogger(__name__)

# 高斯斑点截断半径（以 sigma 计）
BLOB_TRUNCATE = 4.0
# 亚像素偏移上限，保证四舍五入后仍落在放置的像素内
SUBPIXEL_OFFSET = 0.4
MAX_PLACEMENT_TRIES = 64


def pixel_of(v: Union[float, np.ndarray]) -> Union[int, np.ndarray]:
    """连续坐标对应的像素索引（四舍五入）"""
    r = np.floor(np.asarray(v, dtype=float) + 0.5).astype(np.int64)
    return int(r) if r.ndim == 0 else r


def cell_label_image(
    centroids: np.ndarray,
    width: int,
    height: int,
    cell_radius: Optional[float] = None,
) -> np.ndarray:
    """
    质心最近邻划分（Voronoi）得到的细胞标签图

    Args:
        centroids: (n, 2) 的 (x, y) 质心
        width, height: 图块尺寸
        cell_radius: 若给出，距质心超过该半径的像素为背景

    Returns:
        np.ndarray: (H, W) 局部细胞序号，背景为 -1
    """
    labels = np.full((height, width), -1, dtype=np.int64)
    if len(centroids) == 0:
        return labels
    ys, xs = np.mgrid[0:height, 0:width]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    dist, idx = cKDTree(centroids).query(grid, k=1)
    idx = idx.astype(np.int64)
    if cell_radius is not None:
        idx[dist > cell_radius] = -1
    return idx.reshape(height, width)


class SimulationService:
    """
    合成数据服务类

    生成带精确真值的合成 ISS 孔板，并按噪声模型渲染每个视野每个循环的四通道图块。
    """

    @staticmethod
    def _check_config(cfg: SimConfig, codebook: Codebook) -> None:
        if codebook.n_cycles != cfg.n_cycles:
            raise ConfigError(f"编码本长度 {codebook.n_cycles} 与 n_cycles={cfg.n_cycles} 不一致")
        if not codebook.targeted:
            raise ConfigError("编码本中没有目标条形码")
        inner_w = cfg.tile_width - 2 * cfg.border_margin
        inner_h = cfg.tile_height - 2 * cfg.border_margin
        if inner_w <= 0 or inner_h <= 0:
            raise ConfigError("border_margin 过大，图块内没有可用区域")
        if cfg.cells_per_field > inner_w * inner_h:
            raise ConfigError(
                f"cells_per_field={cfg.cells_per_field} 对 {cfg.tile_width}x{cfg.tile_height} 图块不可行"
            )

    def simulate_well(self, cfg: SimConfig, codebook: Codebook) -> GroundTruthWell:
        """
        生成合成孔板真值

        每个细胞只携带一种条形码；斑点条形码按丰度分布抽取，诱饵条形码从不放置。

        Args:
            cfg: 合成配置
            codebook: 编码本

        Returns:
            GroundTruthWell: 细胞、斑点、真实丰度

        Raises:
            ConfigError: 配置与编码本不一致或细胞数不可行
        """
        self._check_config(cfg, codebook)
        rng = substream_rng(cfg.seed, "sim")
        targeted = codebook.targeted
        if cfg.abundance_concentration is None:
            probs = np.full(len(targeted), 1.0 / len(targeted))
        else:
            probs = rng.dirichlet(np.full(len(targeted), cfg.abundance_concentration))

        m = cfg.border_margin
        cells: List[CellRecord] = []
        spots: List[SpotRecord] = []
        skipped = 0
        for f in range(cfg.n_fields):
            centroids = np.column_stack([
                rng.uniform(m, cfg.tile_width - 1 - m, cfg.cells_per_field),
                rng.uniform(m, cfg.tile_height - 1 - m, cfg.cells_per_field),
            ])
            labels = cell_label_image(centroids, cfg.tile_width, cfg.tile_height, cfg.cell_radius)
            inner = np.zeros_like(labels, dtype=bool)
            inner[m:cfg.tile_height - m, m:cfg.tile_width - m] = True
            flat = np.where(inner, labels, -1).ravel()
            order = np.argsort(flat, kind="stable")
            bounds = np.searchsorted(flat[order], np.arange(cfg.cells_per_field + 1))
            cell_pixels = [order[bounds[k]:bounds[k + 1]] for k in range(cfg.cells_per_field)]
            placed = _SpacingIndex(cfg.min_spot_spacing)

            barcodes = [targeted[int(rng.choice(len(targeted), p=probs))] for _ in range(cfg.cells_per_field)]
            n_spots = rng.integers(cfg.spots_per_cell_min, cfg.spots_per_cell_max + 1, size=cfg.cells_per_field)
            positions: List[List[Tuple[float, float]]] = [[] for _ in range(cfg.cells_per_field)]

            # 先放每个细胞的最少斑点数，小细胞优先；放不下即配置不可行
            by_size = np.argsort([len(p) for p in cell_pixels], kind="stable")
            for local in by_size:
                for _ in range(cfg.spots_per_cell_min):
                    pos = self._place_spot(cell_pixels[local], cfg, rng, placed, exhaustive=True)
                    if pos is None:
                        raise ConfigError(
                            f"视野 {f} 的细胞 {local} ({len(cell_pixels[local])} 像素) 无法放下 "
                            f"spots_per_cell_min={cfg.spots_per_cell_min} 个斑点；"
                            f"请减小 min_spot_spacing 或 cells_per_field"
                        )
                    placed.add(pos)
                    positions[local].append(pos)

            for local in range(cfg.cells_per_field):
                for _ in range(int(n_spots[local]) - cfg.spots_per_cell_min):
                    pos = self._place_spot(cell_pixels[local], cfg, rng, placed)
                    if pos is None:
                        skipped += 1
                        continue
                    placed.add(pos)
                    positions[local].append(pos)

            for local in range(cfg.cells_per_field):
                cell_id = len(cells)
                for x, y in positions[local]:
                    amplitude = cfg.spot_amplitude
                    if cfg.amplitude_cv > 0:
                        s2 = math.log1p(cfg.amplitude_cv ** 2)
                        amplitude *= float(rng.lognormal(-0.5 * s2, math.sqrt(s2)))
                    spots.append(SpotRecord(
                        spot_id=len(spots),
                        cell_id=cell_id,
                        field=f,
                        x=x,
                        y=y,
                        barcode=barcodes[local],
                        amplitude=amplitude,
                    ))
                cells.append(CellRecord(
                    cell_id=cell_id,
                    field=f,
                    x=float(centroids[local, 0]),
                    y=float(centroids[local, 1]),
                    barcode=barcodes[local],
                    n_spots=len(positions[local]),
                ))

        if skipped:
            logger.warning(f"{skipped} 个超出最少数的斑点因间距约束无法放置，已跳过")
        counts = Counter(s.barcode for s in spots)
        abundance = {b: counts[b] for b in targeted if counts[b]}
        logger.info(f"合成孔板: {cfg.n_fields} 个视野, {len(cells)} 个细胞, {len(spots)} 个斑点")
        return GroundTruthWell(
            n_fields=cfg.n_fields,
            n_cycles=cfg.n_cycles,
            width=cfg.tile_width,
            height=cfg.tile_height,
            cell_radius=cfg.cell_radius,
            cells=cells,
            spots=spots,
            true_abundance=abundance,
        )

    @staticmethod
    def _place_spot(
        pixels: np.ndarray,
        cfg: SimConfig,
        rng: np.random.Generator,
        placed: "_SpacingIndex",
        exhaustive: bool = False,
    ) -> Optional[Tuple[float, float]]:
        """在细胞像素中随机选一个满足间距的位置；exhaustive 时遍历全部像素"""
        if len(pixels) == 0:
            return None
        tries = len(pixels) if exhaustive else min(len(pixels), MAX_PLACEMENT_TRIES)
        picks = rng.choice(len(pixels), size=tries, replace=False)
        for k in picks:
            row, col = divmod(int(pixels[k]), cfg.tile_width)
            x, y = float(col), float(row)
            if cfg.subpixel:
                dx, dy = rng.uniform(-SUBPIXEL_OFFSET, SUBPIXEL_OFFSET, size=2)
                x, y = x + float(dx), y + float(dy)
            if placed.is_free((x, y)):
                return x, y
        return None

    def cell_labels(self, well: GroundTruthWell, field: int) -> np.ndarray:
        """重建某视野的细胞标签图（值为全局 cell_id，背景为 -1）"""
        cells = [c for c in well.cells if c.field == field]
        if not cells:
            return np.full((well.height, well.width), -1, dtype=np.int64)
        centroids = np.array([[c.x, c.y] for c in cells])
        local = cell_label_image(centroids, well.width, well.height, well.cell_radius)
        ids = np.array([c.cell_id for c in cells], dtype=np.int64)
        return np.where(local >= 0, ids[np.clip(local, 0, None)], -1)

    @staticmethod
    def signal_vector(cfg: SimConfig, letters: np.ndarray, cycle: int) -> np.ndarray:
        """
        某循环的理想通道信号（单位峰值）

        gain ⊙ (crosstalk · ((1−phasing)·onehot(l_r) + phasing·onehot(l_{r−1})))，
        第 0 循环的前一字母视为零向量。
        """
        mix = np.zeros(N_LETTERS)
        mix[letters[cycle]] += 1.0 - cfg.phasing
        if cycle > 0:
            mix[letters[cycle - 1]] += cfg.phasing
        return np.asarray(cfg.channel_gain) * (np.asarray(cfg.crosstalk) @ mix)

    def render_tile(self, well: GroundTruthWell, cfg: SimConfig, field: int, cycle: int) -> Tile:
        """渲染单个 (视野, 循环) 图块；随机流由主种子按 (视野, 循环) 拆分"""
        rng = substream_rng(cfg.seed, "render", field, cycle)
        H, W = well.height, well.width
        image = np.zeros((H, W, N_LETTERS), dtype=np.float64)
        spots = [s for s in well.spots if s.field == field]
        jitter = (
            rng.normal(0.0, cfg.jitter_sd, size=(len(spots), 2))
            if cfg.jitter_sd > 0 else np.zeros((len(spots), 2))
        )
        radius = int(math.ceil(BLOB_TRUNCATE * cfg.spot_sigma))
        two_s2 = 2.0 * cfg.spot_sigma ** 2
        for spot, (jx, jy) in zip(spots, jitter):
            vec = spot.amplitude * self.signal_vector(cfg, encode_barcode(spot.barcode), cycle)
            cx, cy = spot.x + jx, spot.y + jy
            x0, x1 = max(0, int(math.floor(cx)) - radius), min(W, int(math.floor(cx)) + radius + 2)
            y0, y1 = max(0, int(math.floor(cy)) - radius), min(H, int(math.floor(cy)) + radius + 2)
            if x0 >= x1 or y0 >= y1:
                continue
            gx = np.exp(-((np.arange(x0, x1) - cx) ** 2) / two_s2)
            gy = np.exp(-((np.arange(y0, y1) - cy) ** 2) / two_s2)
            image[y0:y1, x0:x1, :] += np.outer(gy, gx)[:, :, None] * vec

        image += cfg.background_level
        if cfg.sensor_noise_sd > 0:
            image += rng.normal(0.0, cfg.sensor_noise_sd, size=image.shape)
        np.clip(image, 0.0, None, out=image)
        return Tile(field=field, cycle=cycle, pixels=image.astype(np.float32))

    def render_tiles(
        self,
        well: GroundTruthWell,
        cfg: SimConfig,
        fields: Optional[Sequence[int]] = None,
        n_jobs: int = 1,
    ) -> List[Tile]:
        """
        渲染 N_f × N_r 个图块，按 (视野, 循环) 排序

        并行与串行结果逐位一致。
        """
        fields = list(range(well.n_fields)) if fields is None else list(fields)
        jobs = [(f, r) for f in fields for r in range(well.n_cycles)]
        logger.info(f"渲染 {len(jobs)} 个图块 (n_jobs={n_jobs})")
        return Parallel(n_jobs=n_jobs)(delayed(self.render_tile)(well, cfg, f, r) for f, r in jobs)

    @staticmethod
    def reference_abundance(
        well: GroundTruthWell,
        level: str = "spot",
        fields: Optional[Sequence[int]] = None,
    ) -> Dict[str, int]:
        """
        参考丰度（替代 NGS）

        Args:
            level: "spot" 为斑点计数；"cell" 为携带至少一个斑点的细胞计数
            fields: 仅统计这些视野；None 为全部
        """
        wanted = None if fields is None else set(fields)
        if level == "spot":
            items = [s.barcode for s in well.spots if wanted is None or s.field in wanted]
        elif level == "cell":
            items = [c.barcode for c in well.cells if c.n_spots > 0 and (wanted is None or c.field in wanted)]
        else:
            raise ConfigError(f"未知的丰度级别: {level}")
        counts = Counter(items)
        return dict(sorted(counts.items()))

    def export_reference_abundance(
        self,
        well: GroundTruthWell,
        level: str = "spot",
        fields: Optional[Sequence[int]] = None,
    ) -> str:
        """导出 barcode,count 的 CSV 文本"""
        counts = self.reference_abundance(well, level, fields)
        frame = pd.DataFrame(list(counts.items()), columns=["barcode", "count"])
        return frame.to_csv(index=False, lineterminator="\n")

    @staticmethod
    def parse_abundance(text: str) -> Dict[str, int]:
        """解析 barcode,count 的 CSV 文本"""
        frame = pd.read_csv(io.StringIO(text), dtype={"barcode": str, "count": np.int64})
        return {str(b): int(c) for b, c in zip(frame["barcode"], frame["count"])}

    # ------------------------------------------------------------------
    # 文件读写
    # ------------------------------------------------------------------

    @staticmethod
    def write_well(well: GroundTruthWell, path: Union[str, Path]) -> Path:
        p = Path(path)
        p.write_text(well.model_dump_json(indent=2), encoding="utf-8")
        return p

    @staticmethod
    def read_well(path: Union[str, Path]) -> GroundTruthWell:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"孔板清单不存在: {p}")
        return GroundTruthWell.model_validate_json(p.read_text(encoding="utf-8"))

    @staticmethod
    def write_tiles(tiles: Sequence[Tile], directory: Union[str, Path]) -> Path:
        """每个图块写一个小端 float32 行优先二进制文件，附 JSON 描述"""
        d = ensure_dir(directory)
        for tile in tiles:
            stem = tile_stem(tile.field, tile.cycle)
            tile.pixels.astype("<f4").tofile(d / f"{stem}.bin")
            meta = {
                "W": tile.width,
                "H": tile.height,
                "C": int(tile.pixels.shape[2]),
                "f": tile.field,
                "r": tile.cycle,
            }
            (d / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        return d

    @staticmethod
    def read_tiles(directory: Union[str, Path], fields: Optional[Sequence[int]] = None) -> List[Tile]:
        d = Path(directory)
        if not d.is_dir():
            raise MissingArtifact(f"图块目录不存在: {d}")
        wanted = None if fields is None else set(fields)
        tiles = []
        for meta_path in sorted(d.glob("f*_r*.json")):
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if wanted is not None and meta["f"] not in wanted:
                continue
            raw = np.fromfile(meta_path.with_suffix(".bin"), dtype="<f4")
            expected = meta["H"] * meta["W"] * meta["C"]
            if raw.size != expected:
                raise DataError(f"图块 {meta_path.stem} 大小 {raw.size} 与描述 {expected} 不符")
            tiles.append(Tile(field=meta["f"], cycle=meta["r"], pixels=raw.reshape(meta["H"], meta["W"], meta["C"])))
        return tiles


class _SpacingIndex:
    """最小间距检查的空间哈希"""

    def __init__(self, spacing: float):
        self.spacing = spacing
        self.buckets: Dict[Tuple[int, int], List[Tuple[float, float]]] = {}

    def _key(self, pos: Tuple[float, float]) -> Tuple[int, int]:
        return int(math.floor(pos[0] / self.spacing)), int(math.floor(pos[1] / self.spacing))

    def is_free(self, pos: Tuple[float, float]) -> bool:
        if self.spacing <= 0:
            return True
        kx, ky = self._key(pos)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for qx, qy in self.buckets.get((kx + dx, ky + dy), ()):
                    if (qx - pos[0]) ** 2 + (qy - pos[1]) ** 2 < self.spacing ** 2:
                        return False
        return True

    def add(self, pos: Tuple[float, float]) -> None:
        if self.spacing <= 0:
            return
        self.buckets.setdefault(self._key(pos), []).append(pos)


# 创建服务实例
simulation_service = SimulationService()
