from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# 碱基字母表，顺序即通道顺序 (A, C, G, T)
ALPHABET = "ACGT"
N_LETTERS = len(ALPHABET)
# 特征维数：4 个扣除背景的通道强度 + 4 个 L2 归一化强度 + 1 个对数总强度
FEATURE_DIM = 9


class BarcodeKind(str, Enum):
    """编码本条目类型"""
    TARGETED = "targeted"
    TRICK = "trick"


class CodebookEntry(BaseModel):
    """编码本条目"""
    model_config = ConfigDict(frozen=True)

    barcode: str
    name: str
    kind: BarcodeKind = BarcodeKind.TARGETED


# ---------------------------------------------------------------------------
# 合成数据
# ---------------------------------------------------------------------------

def _default_crosstalk() -> List[List[float]]:
    # M[i][j]: 通道 i 对染料 j 的响应；A/C 与 G/T 两两串扰
    # G 染料在 T 通道的响应乘以增益后略高于 G 通道本身，LQ 原始 argmax 把多数 G 读成 T
    return [
        [1.0, 0.25, 0.0, 0.0],
        [0.2, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.3],
        [0.0, 0.0, 0.53, 1.0],
    ]


class SimConfig(BaseModel):
    """合成 ISS 孔板配置"""
    model_config = ConfigDict(extra="forbid")

    n_fields: int = Field(4, ge=1)
    n_cycles: int = Field(9, ge=1)
    tile_width: int = Field(128, ge=8)
    tile_height: int = Field(128, ge=8)
    n_channels: int = 4
    cells_per_field: int = Field(40, ge=1)
    spots_per_cell_min: int = Field(0, ge=0)
    spots_per_cell_max: int = Field(4, ge=0)
    cell_radius: Optional[float] = Field(None, gt=0)
    min_spot_spacing: float = Field(5.0, ge=0)
    border_margin: int = Field(4, ge=0)
    subpixel: bool = True
    spot_sigma: float = Field(1.5, gt=0)
    spot_amplitude: float = Field(100.0, gt=0)
    amplitude_cv: float = Field(0.3, ge=0)
    crosstalk: List[List[float]] = Field(default_factory=_default_crosstalk)
    phasing: float = Field(0.15, ge=0, lt=1)
    channel_gain: List[float] = Field(default_factory=lambda: [1.6, 1.0, 0.6, 1.2])
    background_level: float = Field(10.0, ge=0)
    sensor_noise_sd: float = Field(3.0, ge=0)
    jitter_sd: float = Field(0.25, ge=0)
    abundance_concentration: Optional[float] = Field(1.0, gt=0)
    seed: int = 0

    @field_validator("n_channels")
    @classmethod
    def _four_channels(cls, v: int) -> int:
        if v != N_LETTERS:
            raise ValueError(f"n_channels 必须为 {N_LETTERS}")
        return v

    @field_validator("crosstalk")
    @classmethod
    def _valid_crosstalk(cls, v: List[List[float]]) -> List[List[float]]:
        m = np.asarray(v, dtype=float)
        if m.shape != (N_LETTERS, N_LETTERS):
            raise ValueError("crosstalk 必须是 4x4 矩阵")
        if np.any(m < 0) or np.any(np.diag(m) <= 0):
            raise ValueError("crosstalk 元素必须非负且对角线严格为正")
        return v

    @field_validator("channel_gain")
    @classmethod
    def _valid_gain(cls, v: List[float]) -> List[float]:
        if len(v) != N_LETTERS or any(g <= 0 for g in v):
            raise ValueError("channel_gain 必须是 4 个正数")
        return v

    @model_validator(mode="after")
    def _spot_range(self) -> "SimConfig":
        if self.spots_per_cell_min > self.spots_per_cell_max:
            raise ValueError("spots_per_cell_min 不能大于 spots_per_cell_max")
        return self

    @classmethod
    def noiseless(cls, **overrides) -> "SimConfig":
        """无噪声预设：单位串扰、无相位残留、单位增益、零背景与零噪声"""
        base = dict(
            crosstalk=np.eye(N_LETTERS).tolist(),
            phasing=0.0,
            channel_gain=[1.0] * N_LETTERS,
            background_level=0.0,
            sensor_noise_sd=0.0,
            jitter_sd=0.0,
            amplitude_cv=0.0,
            subpixel=False,
        )
        base.update(overrides)
        return cls(**base)


class CellRecord(BaseModel):
    """细胞：掩膜由同一视野内质心的最近邻划分（可选半径裁剪）重建"""
    cell_id: int
    field: int
    x: float
    y: float
    barcode: str
    n_spots: int = 0


class SpotRecord(BaseModel):
    """真实条形码斑点"""
    spot_id: int
    cell_id: int
    field: int
    x: float
    y: float
    barcode: str
    amplitude: float = 1.0


class GroundTruthWell(BaseModel):
    """合成孔板真值（替代 NGS 参考）"""
    n_fields: int
    n_cycles: int
    width: int
    height: int
    cell_radius: Optional[float] = None
    cells: List[CellRecord] = Field(default_factory=list)
    spots: List[SpotRecord] = Field(default_factory=list)
    true_abundance: Dict[str, int] = Field(default_factory=dict)

    def spots_in(self, fields: Optional[List[int]] = None) -> List[SpotRecord]:
        if fields is None:
            return list(self.spots)
        wanted = set(fields)
        return [s for s in self.spots if s.field in wanted]

    def cells_in(self, fields: Optional[List[int]] = None) -> List[CellRecord]:
        if fields is None:
            return list(self.cells)
        wanted = set(fields)
        return [c for c in self.cells if c.field in wanted]


class Tile(BaseModel):
    """单个视野单个循环的多通道图像，形状 (H, W, C)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    field: int
    cycle: int
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


# ---------------------------------------------------------------------------
# 噪声标注
# ---------------------------------------------------------------------------

class Detection(BaseModel):
    """单个斑点检测（点标注）"""
    field: int
    cycle: int
    x: float
    y: float
    intensity: List[float]
    objectness: float
    letter: str


class DetectionSet(BaseModel):
    """
    检测结果的列式存储

    所有数组长度一致；letter 为字母表索引 (0..3)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    field: np.ndarray
    cycle: np.ndarray
    x: np.ndarray
    y: np.ndarray
    intensity: np.ndarray
    objectness: np.ndarray
    letter: np.ndarray

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(
            field=np.zeros(0, dtype=np.int64),
            cycle=np.zeros(0, dtype=np.int64),
            x=np.zeros(0),
            y=np.zeros(0),
            intensity=np.zeros((0, N_LETTERS)),
            objectness=np.zeros(0),
            letter=np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: List["DetectionSet"]) -> "DetectionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(**{
            name: np.concatenate([getattr(p, name) for p in parts])
            for name in cls.model_fields
        })

    def subset(self, mask: np.ndarray) -> "DetectionSet":
        return DetectionSet(**{name: getattr(self, name)[mask] for name in type(self).model_fields})

    def to_records(self) -> List[Detection]:
        return [
            Detection(
                field=int(self.field[i]),
                cycle=int(self.cycle[i]),
                x=float(self.x[i]),
                y=float(self.y[i]),
                intensity=[float(v) for v in self.intensity[i]],
                objectness=float(self.objectness[i]),
                letter=ALPHABET[int(self.letter[i])],
            )
            for i in range(len(self))
        ]


class DetectionScore(BaseModel):
    """检测结果相对真值的统计"""
    n_detections: int = 0
    n_matched: int = 0
    n_letter_errors: int = 0
    n_truth: int = 0

    @property
    def error_rate(self) -> float:
        return self.n_letter_errors / self.n_matched if self.n_matched else 0.0

    @property
    def recall(self) -> float:
        return self.n_matched / self.n_truth if self.n_truth else 0.0


class HQParams(BaseModel):
    """专家流程（HQ）参数"""
    model_config = ConfigDict(extra="forbid")

    percentile: float = Field(99.9, gt=0, le=100)
    threshold: float = Field(0.25, gt=0)
    max_gain_ratio: float = Field(20.0, gt=1)


class AnnotateConfig(BaseModel):
    """噪声标注阶段配置"""
    model_config = ConfigDict(extra="forbid")

    lq_threshold: Optional[float] = Field(None, gt=0)
    hq: HQParams = Field(default_factory=HQParams)
    box_diameter: float = Field(6.0, gt=0)


# ---------------------------------------------------------------------------
# 碱基识别模型
# ---------------------------------------------------------------------------

class FeatureSpec(BaseModel):
    """特征构造参数，随检查点一起保存"""
    background_level: float = 0.0
    intensity_scale: float = Field(1.0, gt=0)
    version: str = "v1"


class BaseCallerModel(BaseModel):
    """多项逻辑回归碱基识别器：weights 形状 (4, D+1)，最后一列为偏置"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray
    temperature: float = Field(1.0, gt=0)
    feature_spec: FeatureSpec = Field(default_factory=FeatureSpec)

    @field_validator("weights", mode="before")
    @classmethod
    def _finite_weights(cls, v) -> np.ndarray:
        v = np.array(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != N_LETTERS:
            raise ValueError(f"weights 形状必须为 (4, D+1)，实际 {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("weights 包含非有限值")
        return v

    @field_serializer("weights")
    def _weights_rows(self, v: np.ndarray) -> List[List[float]]:
        return v.tolist()

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[1] - 1)


class AugmentConfig(BaseModel):
    """强增强参数"""
    model_config = ConfigDict(extra="forbid")

    jitter: float = Field(0.2, ge=0, lt=1)
    noise_sd: float = Field(0.02, ge=0)


class TrainConfig(BaseModel):
    """训练配置"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.1, ge=0)
    lambda_u: float = Field(1.0, ge=0)
    ema_decay: float = Field(0.99, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    burnin_epochs: int = Field(20, ge=0)
    rounds: int = Field(5, ge=0)
    epochs_per_round: int = Field(1, ge=1)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    seed: int = 0


# ---------------------------------------------------------------------------
# PLePI 伪标签
# ---------------------------------------------------------------------------

class PLePIConfig(BaseModel):
    """伪标签配置；tau_c 为 None 时按标注质量取默认值"""
    model_config = ConfigDict(extra="forbid")

    tau_c: Optional[float] = Field(None, ge=0, le=1)
    tau_m: float = Field(0.5, ge=0, le=1)
    top_n: int = Field(4, ge=1, le=N_LETTERS)
    objectness_threshold: Optional[float] = Field(None, ge=0)
    match_radius: float = Field(2.0, gt=0)
    min_track_members: int = Field(1, ge=1)
    fusion_mode: Literal["codebook", "location"] = "codebook"
    dump_pseudo_labels: bool = True

    @model_validator(mode="after")
    def _ordered_thresholds(self) -> "PLePIConfig":
        if self.tau_c is not None and self.tau_m > self.tau_c:
            raise ValueError("tau_m 不能大于 tau_c")
        return self

    def resolved_tau_c(self, quality: str) -> float:
        """LQ 老化的教师校准差，取 tau_c = 1（全部进入中等集合）"""
        if self.tau_c is not None:
            return self.tau_c
        return 1.0 if quality == "lq" else 0.9


class ConfidencePartition(BaseModel):
    """每个循环的置信划分"""
    confident: List[Tuple[int, str, float]] = Field(default_factory=list)
    mediocre: List[int] = Field(default_factory=list)
    discarded: List[int] = Field(default_factory=list)


class PseudoSource(str, Enum):
    """伪条形码来源"""
    ALL_CONFIDENT = "all-confident"
    CODEBOOK_FUSED = "codebook-fused"
    CONSENSUS_ARGMAX = "consensus-argmax"
    ABSTAINED = "abstained"


class PseudoBarcode(BaseModel):
    """一条轨迹的伪条形码；letters 中 None 表示弃权"""
    track_id: int = 0
    field: int = 0
    letters: List[Optional[str]]
    score: float
    source: PseudoSource
    labeled_cycles: List[int] = Field(default_factory=list)

    @property
    def barcode(self) -> Optional[str]:
        if any(letter is None for letter in self.letters):
            return None
        return "".join(self.letters)


class SpotTrack(BaseModel):
    """跨循环的斑点轨迹（单条记录视图）"""
    field: int
    x: float
    y: float
    intensity: List[List[float]]
    objectness: List[float]
    interpolated: List[bool]
    members: int
    foreground: bool
    probs: Optional[List[List[float]]] = None


class TrackSet(BaseModel):
    """
    一个视野内所有轨迹的列式存储

    intensity: (n, N_r, 4)；objectness / interpolated: (n, N_r)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    field: int
    x: np.ndarray
    y: np.ndarray
    intensity: np.ndarray
    objectness: np.ndarray
    interpolated: np.ndarray
    members: np.ndarray
    foreground: np.ndarray

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def n_cycles(self) -> int:
        return int(self.intensity.shape[1])

    def to_records(self) -> List[SpotTrack]:
        return [
            SpotTrack(
                field=self.field,
                x=float(self.x[i]),
                y=float(self.y[i]),
                intensity=self.intensity[i].tolist(),
                objectness=self.objectness[i].tolist(),
                interpolated=[bool(v) for v in self.interpolated[i]],
                members=int(self.members[i]),
                foreground=bool(self.foreground[i]),
            )
            for i in range(len(self))
        ]


class FusedLabels(BaseModel):
    """
    批量融合结果的列式存储

    letters: (n, N_r)，-1 表示该循环无标签；labeled: (n, N_r) 参与伪标签的循环；
    source: (n,) PseudoSource 值
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    letters: np.ndarray
    score: np.ndarray
    source: np.ndarray
    labeled: np.ndarray

    def __len__(self) -> int:
        return int(self.score.shape[0])

    @classmethod
    def concat(cls, parts: List["FusedLabels"], n_cycles: int) -> "FusedLabels":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(
                letters=np.zeros((0, n_cycles), dtype=np.int64),
                score=np.zeros(0),
                source=np.zeros(0, dtype=object),
                labeled=np.zeros((0, n_cycles), dtype=bool),
            )
        return cls(**{name: np.concatenate([getattr(p, name) for p in parts]) for name in cls.model_fields})

    def to_pseudo_barcodes(self, field: int = 0) -> List[PseudoBarcode]:
        return [
            PseudoBarcode(
                track_id=i,
                field=field,
                letters=[ALPHABET[v] if v >= 0 else None for v in self.letters[i]],
                score=float(self.score[i]),
                source=PseudoSource(self.source[i]),
                labeled_cycles=[int(c) for c in np.nonzero(self.labeled[i])[0]],
            )
            for i in range(len(self))
        ]


class RoundRecord(BaseModel):
    """自训练历史中的一轮"""
    round: int
    n_tracks: int = 0
    n_pseudo_labels: int = 0
    n_confident: int = 0
    n_fused: int = 0
    n_abstained: int = 0
    abstention_rate: float = 0.0
    loss: Optional[float] = None
    heldout_accuracy: Optional[float] = None


# ---------------------------------------------------------------------------
# 细胞识别与评估
# ---------------------------------------------------------------------------

class SpotCall(BaseModel):
    """测试视野上的斑点级条形码识别"""
    spot_id: int
    field: int
    track_id: int
    x: float
    y: float
    barcode: Optional[str]
    score: float
    source: PseudoSource


class CellCall(BaseModel):
    """细胞级条形码分配"""
    cell_id: int
    field: int
    barcode: Optional[str] = None
    score: float = 0.0
    n_spots: int = 0


class RateTriple(BaseModel):
    """PPV / FDR_trick / FDR_other 及其计数"""
    n_targeted: int
    n_trick: int
    n_other: int

    @property
    def n_assigned(self) -> int:
        return self.n_targeted + self.n_trick + self.n_other

    @property
    def ppv(self) -> float:
        return self.n_targeted / self.n_assigned

    @property
    def fdr_trick(self) -> float:
        return self.n_trick / self.n_assigned

    @property
    def fdr_other(self) -> float:
        return self.n_other / self.n_assigned


class CountRow(BaseModel):
    """计数表的一行"""
    barcode: str
    kind: str
    reference_cells: int = 0
    called_cells: int = 0
    reference_spots: int = 0
    called_spots: int = 0
    reference_frequency: float = 0.0
    called_frequency: float = 0.0


class MetricsReport(BaseModel):
    """评估报告；无定义的指标为 None 并记录在 undefined 中"""
    schema_version: str = "1.0"
    r2: Optional[float] = None
    r2_frequency: Optional[float] = None
    r2_spot: Optional[float] = None
    cell_recovery_rate: Optional[float] = None
    ppv_cell: Optional[float] = None
    ppv_spot: Optional[float] = None
    fdr_trick_cell: Optional[float] = None
    fdr_trick_spot: Optional[float] = None
    fdr_other_cell: Optional[float] = None
    fdr_other_spot: Optional[float] = None
    fdr_trick_ratio_cell: Optional[float] = None
    fdr_trick_ratio_spot: Optional[float] = None
    spot_accuracy: Optional[float] = None
    letter_accuracy: Optional[float] = None
    n_cells: int = 0
    n_assigned_cells: int = 0
    n_spot_calls: int = 0
    undefined: List[str] = Field(default_factory=list)
    counts: List[CountRow] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# 运行配置
# ---------------------------------------------------------------------------

class SplitConfig(BaseModel):
    """视野划分：有标注 / 无标注 / 测试，三者互不相交"""
    model_config = ConfigDict(extra="forbid")

    labeled: List[int] = Field(default_factory=lambda: [0])
    unlabeled: List[int] = Field(default_factory=lambda: [1, 2])
    test: List[int] = Field(default_factory=lambda: [3])

    @model_validator(mode="after")
    def _disjoint(self) -> "SplitConfig":
        groups = {"labeled": set(self.labeled), "unlabeled": set(self.unlabeled), "test": set(self.test)}
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = groups[a] & groups[b]
                if overlap:
                    raise ValueError(f"视野划分 {a} 与 {b} 重叠: {sorted(overlap)}")
        if not self.labeled:
            raise ValueError("有标注视野集合不能为空")
        return self


class DecodeConfig(BaseModel):
    """测试集解码方式"""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["argmax", "codebook"] = "argmax"


class EvaluateConfig(BaseModel):
    """评估配置"""
    model_config = ConfigDict(extra="forbid")

    min_cell_score: Optional[float] = Field(None, ge=0)
    match_radius: float = Field(2.0, gt=0)
    plots: bool = True


class RunConfig(BaseSettings):
    """
    一次实验的完整配置

    来源优先级：命令行参数 > TOML 配置文件 > 环境变量（PLEPI_RUN_ 前缀）> 默认值
    """
    model_config = SettingsConfigDict(
        env_prefix="PLEPI_RUN_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    seed: int = 0
    threads: int = Field(1, ge=1)
    codebook_path: Path = Path("codebook.csv")
    out_dir: Path = Path("runs/default")
    quality: Literal["lq", "hq"] = "lq"
    flip_rate: float = Field(0.2, ge=0, le=1)
    sim: SimConfig = Field(default_factory=SimConfig)
    annotate: AnnotateConfig = Field(default_factory=AnnotateConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    plepi: PLePIConfig = Field(default_factory=PLePIConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)

    @model_validator(mode="after")
    def _propagate_seed(self) -> "RunConfig":
        # 主种子下发到各子模块
        self.sim = self.sim.model_copy(update={"seed": self.seed})
        self.train = self.train.model_copy(update={"seed": self.seed})
        used = set(self.split.labeled) | set(self.split.unlabeled) | set(self.split.test)
        out_of_range = sorted(f for f in used if f < 0 or f >= self.sim.n_fields)
        if out_of_range:
            raise ValueError(f"视野编号超出范围 [0, {self.sim.n_fields}): {out_of_range}")
        return self
