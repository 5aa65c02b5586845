import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial import cKDTree

from plepi_iss.models.models import (
    ALPHABET,
    N_LETTERS,
    BaseCallerModel,
    ConfidencePartition,
    DetectionSet,
    FusedLabels,
    PLePIConfig,
    PseudoBarcode,
    PseudoSource,
    RoundRecord,
    TrackSet,
    TrainConfig,
)
from plepi_iss.services.annotation_service import annotation_service
from plepi_iss.services.basecaller_service import basecaller_service
from plepi_iss.services.codebook_service import Codebook
from plepi_iss.utils.exceptions import ConfigError, DataError
from plepi_iss.utils.helpers import ensure_dir, substream_rng

logger = logging.getLogger(__name__)

PSEUDO_LABEL_COLUMNS = ["field", "track", "cycle", "letter", "source", "score"]
# 每块 (轨迹 × 编码本条目 × 循环) 的元素上限
FUSION_CHUNK_ELEMENTS = 4_000_000


class PseudoLabelSet:
    """一个视野一轮的伪标签样本与统计"""

    def __init__(self, field: int, features: np.ndarray, letters: np.ndarray, fused: FusedLabels, foreground: np.ndarray):
        self.field = field
        self.features = features
        self.letters = letters
        self.fused = fused
        self.foreground = foreground

    def __len__(self) -> int:
        return int(self.letters.shape[0])

    def count(self, source: PseudoSource) -> int:
        return int(np.sum(self.fused.source[self.foreground] == source.value))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for t in np.nonzero(self.foreground)[0]:
            for c in np.nonzero(self.fused.labeled[t])[0]:
                rows.append((
                    self.field,
                    int(t),
                    int(c),
                    ALPHABET[int(self.fused.letters[t, c])],
                    self.fused.source[t],
                    float(self.fused.score[t]),
                ))
        return pd.DataFrame(rows, columns=PSEUDO_LABEL_COLUMNS)


class PLePIService:
    """
    PLePI 核心服务类

    位置共识轨迹、置信划分、编码本融合与教师-学生自训练循环。
    """

    # ------------------------------------------------------------------
    # 轨迹
    # ------------------------------------------------------------------

    @staticmethod
    def build_tracks(
        dets: DetectionSet,
        n_cycles: int,
        radius: float,
        objectness_threshold: float,
        min_members: int = 1,
        stack: Optional[np.ndarray] = None,
    ) -> TrackSet:
        """
        跨循环贪心聚合一个视野的检测

        每个循环内检测按 objectness 降序，分配给半径内、本循环尚无成员、距离最近的轨迹
        （以循环开始时的运行质心计算）；无可分配轨迹则新建。缺失循环用图像读数填补并标记。

        Args:
            dets: 单个视野的检测
            n_cycles: 循环数 N_r
            radius: 匹配半径（像素）
            objectness_threshold: 前景阈值，作用于成员 objectness 中位数
            min_members: 前景轨迹的最少成员数
            stack: (N_r, H, W, C) 读数图像；None 时插值槽强度为 0

        Returns:
            TrackSet: 列式轨迹集合
        """
        fields = np.unique(dets.field)
        if len(fields) > 1:
            raise DataError(f"build_tracks 需要单个视野的检测，实际包含 {fields.tolist()}")
        field = int(fields[0]) if len(fields) else 0

        sum_x: List[float] = []
        sum_y: List[float] = []
        count: List[int] = []
        slots: List[Dict[int, int]] = []
        for r in range(n_cycles):
            idx = np.nonzero(dets.cycle == r)[0]
            if len(idx) == 0:
                continue
            idx = idx[np.argsort(-dets.objectness[idx], kind="stable")]
            n_existing = len(count)
            tree = None
            if n_existing:
                centroids = np.column_stack([
                    np.asarray(sum_x) / np.asarray(count),
                    np.asarray(sum_y) / np.asarray(count),
                ])
                tree = cKDTree(centroids)
            for i in idx:
                x, y = float(dets.x[i]), float(dets.y[i])
                target = -1
                if tree is not None:
                    near = tree.query_ball_point([x, y], r=radius)
                    free = [t for t in near if r not in slots[t]]
                    if free:
                        d = [(tree.data[t, 0] - x) ** 2 + (tree.data[t, 1] - y) ** 2 for t in free]
                        target = free[int(np.argmin(d))]
                if target < 0:
                    target = len(count)
                    sum_x.append(0.0)
                    sum_y.append(0.0)
                    count.append(0)
                    slots.append({})
                sum_x[target] += x
                sum_y[target] += y
                count[target] += 1
                slots[target][r] = int(i)

        n = len(count)
        xs = np.asarray(sum_x, dtype=np.float64) / np.maximum(np.asarray(count, dtype=np.float64), 1)
        ys = np.asarray(sum_y, dtype=np.float64) / np.maximum(np.asarray(count, dtype=np.float64), 1)
        intensity = np.zeros((n, n_cycles, N_LETTERS))
        objectness = np.zeros((n, n_cycles))
        interpolated = np.ones((n, n_cycles), dtype=bool)
        foreground = np.zeros(n, dtype=bool)
        for t in range(n):
            for r, i in slots[t].items():
                intensity[t, r] = dets.intensity[i]
                objectness[t, r] = dets.objectness[i]
                interpolated[t, r] = False
            missing = np.nonzero(interpolated[t])[0]
            if len(missing) and stack is not None:
                intensity[t, missing] = annotation_service.readout(stack, xs[t], ys[t])[missing]
            member_scores = objectness[t, ~interpolated[t]]
            foreground[t] = count[t] >= min_members and float(np.median(member_scores)) >= objectness_threshold

        return TrackSet(
            field=field,
            x=xs,
            y=ys,
            intensity=intensity,
            objectness=objectness,
            interpolated=interpolated,
            members=np.asarray(count, dtype=np.int64),
            foreground=foreground,
        )

    @staticmethod
    def track_probs(model: BaseCallerModel, tracks: TrackSet) -> np.ndarray:
        """教师对轨迹每个循环的类别概率，形状 (n, N_r, 4)"""
        n, n_r = len(tracks), tracks.n_cycles
        if n == 0:
            return np.zeros((0, n_r, N_LETTERS))
        features = basecaller_service.featurize(tracks.intensity.reshape(-1, N_LETTERS), model.feature_spec)
        return basecaller_service.predict_probs(model, features).reshape(n, n_r, N_LETTERS)

    # ------------------------------------------------------------------
    # 置信划分与融合
    # ------------------------------------------------------------------

    @staticmethod
    def partition_masks(
        probs: np.ndarray,
        tau_c: float,
        tau_m: float,
        interpolated: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        批量置信划分

        Returns:
            Tuple[np.ndarray, np.ndarray]: (confident, mediocre) 布尔掩码，其余为 discarded；
            插值循环总是 mediocre，交由编码本约束
        """
        if tau_m > tau_c:
            raise ConfigError(f"tau_m={tau_m} 不能大于 tau_c={tau_c}")
        max_p = probs.max(axis=-1)
        confident = max_p > tau_c
        mediocre = ~confident & (max_p >= tau_m)
        if interpolated is not None:
            confident &= ~interpolated
            mediocre |= interpolated
        return confident, mediocre

    def partition_confidence(
        self,
        probs: np.ndarray,
        tau_c: float,
        tau_m: float,
        interpolated: Optional[np.ndarray] = None,
    ) -> ConfidencePartition:
        """单条轨迹 (N_r, 4) 的置信划分"""
        probs = np.asarray(probs, dtype=np.float64)
        confident, mediocre = self.partition_masks(probs, tau_c, tau_m, interpolated)
        letters = probs.argmax(axis=-1)
        return ConfidencePartition(
            confident=[(int(c), ALPHABET[int(letters[c])], float(probs[c, letters[c]])) for c in np.nonzero(confident)[0]],
            mediocre=[int(c) for c in np.nonzero(mediocre)[0]],
            discarded=[int(c) for c in np.nonzero(~confident & ~mediocre)[0]],
        )

    @staticmethod
    def track_sequence_probability(probs: np.ndarray) -> float:
        """Π_r max P(r)，按循环顺序连乘"""
        score = 1.0
        for p in np.asarray(probs, dtype=np.float64).max(axis=-1):
            score *= float(p)
        return score

    @staticmethod
    def _fuse_chunk(
        probs: np.ndarray,
        confident: np.ndarray,
        mediocre: np.ndarray,
        codes: np.ndarray,
        top_n: int,
        mode: str,
    ) -> FusedLabels:
        n, n_r, _ = probs.shape
        argmax = probs.argmax(axis=-1)
        used = confident | mediocre
        all_confident = confident.all(axis=1)
        nothing_used = ~used.any(axis=1)

        letters = np.where(confident, argmax, -1)
        score = np.zeros(n)
        source = np.full(n, PseudoSource.ABSTAINED.value, dtype=object)
        labeled = confident.copy()

        if mode == "location":
            resolved = ~all_confident & ~nothing_used
            letters = np.where(used, argmax, -1)
            labeled = used.copy()
            product = np.ones(n)
            for c in range(n_r):
                product = product * np.where(used[:, c], probs[:, c].max(axis=-1), 1.0)
            score = np.where(nothing_used, 0.0, product)
            source[resolved] = PseudoSource.CONSENSUS_ARGMAX.value
        elif len(codes):
            ranked = np.argsort(-probs, axis=-1, kind="stable")[..., :top_n]
            in_top = np.zeros(probs.shape, dtype=bool)
            np.put_along_axis(in_top, ranked, True, axis=-1)
            allowed = np.where(mediocre[..., None], in_top, True)
            allowed = np.where(confident[..., None], np.arange(N_LETTERS) == argmax[..., None], allowed)

            cols = np.arange(n_r)[None, :]
            gathered = probs[:, cols, codes]
            compatible = allowed[:, cols, codes].all(axis=-1)
            candidate_score = np.ones(gathered.shape[:2])
            for c in range(n_r):
                candidate_score = candidate_score * np.where(used[:, c, None], gathered[:, :, c], 1.0)
            candidate_score = np.where(compatible, candidate_score, -1.0)
            best = candidate_score.argmax(axis=1)
            fused = compatible.any(axis=1) & ~all_confident & ~nothing_used
            letters = np.where(fused[:, None], codes[best], letters)
            score = np.where(fused, candidate_score[np.arange(n), best], score)
            labeled = np.where(fused[:, None], used, labeled)
            source[fused] = PseudoSource.CODEBOOK_FUSED.value

        # 全部循环置信时保持原字母
        if all_confident.any():
            product = np.ones(n)
            for c in range(n_r):
                product = product * probs[:, c].max(axis=-1)
            letters = np.where(all_confident[:, None], argmax, letters)
            score = np.where(all_confident, product, score)
            labeled = np.where(all_confident[:, None], True, labeled)
            source[all_confident] = PseudoSource.ALL_CONFIDENT.value

        abstained = source == PseudoSource.ABSTAINED.value
        score = np.where(abstained, 0.0, score)
        return FusedLabels(letters=letters.astype(np.int64), score=score, source=source, labeled=labeled)

    def fuse_masks(
        self,
        probs: np.ndarray,
        confident: np.ndarray,
        mediocre: np.ndarray,
        codebook: Codebook,
        top_n: int,
        mode: str = "codebook",
        n_jobs: int = 1,
    ) -> FusedLabels:
        """按块批量融合；并行与串行结果一致"""
        probs = np.asarray(probs, dtype=np.float64)
        n, n_r = probs.shape[0], probs.shape[1]
        if len(codebook) and codebook.n_cycles != n_r:
            raise DataError(f"编码本长度 {codebook.n_cycles} 与循环数 {n_r} 不一致")
        codes = codebook.array.astype(np.int64)
        chunk = max(1, FUSION_CHUNK_ELEMENTS // max(1, len(codes) * n_r))
        bounds = [(s, min(n, s + chunk)) for s in range(0, n, chunk)]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(self._fuse_chunk)(probs[a:b], confident[a:b], mediocre[a:b], codes, top_n, mode)
            for a, b in bounds
        )
        return FusedLabels.concat(parts, n_r)

    def fuse_codebook(
        self,
        partition: ConfidencePartition,
        probs: np.ndarray,
        codebook: Codebook,
        top_n: int,
    ) -> PseudoBarcode:
        """
        单条轨迹的编码本融合

        候选 = 与全部置信字母一致、且每个中等循环的字母属于该循环教师 top_n 的编码本条目；
        选择中等 ∪ 置信循环上概率连乘最大者（并列取编码本中靠前者）。
        """
        probs = np.asarray(probs, dtype=np.float64)
        n_r = probs.shape[0]
        confident = np.zeros((1, n_r), dtype=bool)
        mediocre = np.zeros((1, n_r), dtype=bool)
        for c, _, _ in partition.confident:
            confident[0, c] = True
        mediocre[0, partition.mediocre] = True
        fused = self.fuse_masks(probs[None], confident, mediocre, codebook, top_n)
        return fused.to_pseudo_barcodes()[0]

    def fuse_tracks(
        self,
        probs: np.ndarray,
        interpolated: np.ndarray,
        codebook: Codebook,
        cfg: PLePIConfig,
        tau_c: float,
        n_jobs: int = 1,
    ) -> FusedLabels:
        """划分 + 融合（按 cfg.fusion_mode）"""
        confident, mediocre = self.partition_masks(probs, tau_c, cfg.tau_m, interpolated)
        return self.fuse_masks(probs, confident, mediocre, codebook, cfg.top_n, cfg.fusion_mode, n_jobs)

    def decode_tracks(
        self,
        model: BaseCallerModel,
        tracks: TrackSet,
        codebook: Codebook,
        mode: str,
        cfg: PLePIConfig,
        tau_c: float,
    ) -> FusedLabels:
        """
        测试视野解码

        argmax：逐循环教师 argmax，score = Π max P_T；codebook：按编码本融合。
        """
        probs = self.track_probs(model, tracks)
        if mode == "codebook":
            return self.fuse_tracks(probs, tracks.interpolated, codebook, cfg.model_copy(update={"fusion_mode": "codebook"}), tau_c)
        n, n_r = probs.shape[0], tracks.n_cycles
        score = np.ones(n)
        for c in range(n_r):
            score = score * probs[:, c].max(axis=-1)
        return FusedLabels(
            letters=probs.argmax(axis=-1).astype(np.int64).reshape(n, n_r),
            score=score,
            source=np.full(n, PseudoSource.CONSENSUS_ARGMAX.value, dtype=object),
            labeled=np.ones((n, n_r), dtype=bool),
        )

    # ------------------------------------------------------------------
    # 自训练
    # ------------------------------------------------------------------

    def pseudo_labels_for_field(
        self,
        teacher: BaseCallerModel,
        tracks: TrackSet,
        codebook: Codebook,
        cfg: PLePIConfig,
        tau_c: float,
        train: TrainConfig,
        round_index: int,
    ) -> PseudoLabelSet:
        """
        教师快照在一个视野上生成伪标签

        教师看弱增强（恒等）特征，学生样本为强增强特征；只使用前景轨迹的已标注循环。
        """
        probs = self.track_probs(teacher, tracks)
        fused = self.fuse_tracks(probs, tracks.interpolated, codebook, cfg, tau_c)
        foreground = tracks.foreground.copy()
        mask = fused.labeled & foreground[:, None]
        t_idx, c_idx = np.nonzero(mask)
        letters = fused.letters[t_idx, c_idx]
        rng = substream_rng(train.seed, "augment", round_index, tracks.field)
        weak = basecaller_service.augment_weak(
            basecaller_service.featurize(tracks.intensity[t_idx, c_idx], teacher.feature_spec)
        ).reshape(-1, teacher.n_features)
        features = basecaller_service.augment_strong(weak, rng, train.augment) if len(weak) else weak
        return PseudoLabelSet(tracks.field, features, letters.astype(np.int64), fused, foreground)

    def burn_in(
        self,
        x: np.ndarray,
        letters: np.ndarray,
        train: TrainConfig,
        model: BaseCallerModel,
    ) -> Tuple[BaseCallerModel, List[float]]:
        """有标注数据上的监督初始化；教师为其副本"""
        if len(letters) == 0:
            raise ConfigError("有标注集合为空，无法 burn-in")
        rng = substream_rng(train.seed, "train", 0)
        return basecaller_service.train_supervised(model, x, letters, train, train.burnin_epochs, rng)

    def self_train(
        self,
        teacher: BaseCallerModel,
        student: BaseCallerModel,
        labeled_x: np.ndarray,
        labeled_letters: np.ndarray,
        field_tracks: Dict[int, TrackSet],
        train: TrainConfig,
        cfg: PLePIConfig,
        codebook: Codebook,
        quality: str = "lq",
        skip_burnin: bool = False,
        evaluator: Optional[Callable[[BaseCallerModel], float]] = None,
        dump_dir: Optional[Union[str, Path]] = None,
        n_jobs: int = 1,
    ) -> Tuple[BaseCallerModel, BaseCallerModel, List[RoundRecord]]:
        """
        教师-学生自训练

        Args:
            teacher, student: 初始模型；未跳过 burn-in 时由学生训练并复制为教师
            labeled_x, labeled_letters: 有标注特征与（带噪）字母
            field_tracks: 无标注视野的轨迹（只构建一次）
            train, cfg: 训练与 PLePI 配置
            codebook: 编码本（含诱饵条形码）
            quality: 标注质量，决定默认 tau_c
            skip_burnin: 输入模型已完成 burn-in
            evaluator: 可选的留出准确率评估
            dump_dir: 伪标签 CSV 输出目录
            n_jobs: 伪标签生成的并行数

        Returns:
            Tuple[BaseCallerModel, BaseCallerModel, List[RoundRecord]]: (teacher, student, history)

        Raises:
            ConfigError: 有标注集合为空
        """
        labeled_x = np.asarray(labeled_x, dtype=np.float64)
        labeled_letters = np.asarray(labeled_letters, dtype=np.int64)
        n_l = len(labeled_letters)
        if n_l == 0:
            raise ConfigError("有标注集合为空，无法自训练")
        tau_c = cfg.resolved_tau_c(quality)

        burnin_loss = None
        if not skip_burnin:
            student, losses = self.burn_in(labeled_x, labeled_letters, train, student)
            teacher = student
            burnin_loss = losses[-1] if losses else None
        history = [RoundRecord(
            round=0,
            loss=burnin_loss,
            heldout_accuracy=evaluator(teacher) if evaluator else None,
        )]

        rng = substream_rng(train.seed, "train", 1)
        fields = sorted(field_tracks)
        for rd in range(1, train.rounds + 1):
            snapshot = teacher
            sets: List[PseudoLabelSet] = Parallel(n_jobs=n_jobs)(
                delayed(self.pseudo_labels_for_field)(snapshot, field_tracks[f], codebook, cfg, tau_c, train, rd)
                for f in fields
            )
            if dump_dir is not None and cfg.dump_pseudo_labels:
                self.write_pseudo_labels(sets, Path(ensure_dir(dump_dir)) / f"pseudo_labels_r{rd:02d}.csv")

            n_tracks = int(sum(int(s.foreground.sum()) for s in sets))
            n_abstained = sum(s.count(PseudoSource.ABSTAINED) for s in sets)
            record = RoundRecord(
                round=rd,
                n_tracks=n_tracks,
                n_confident=sum(s.count(PseudoSource.ALL_CONFIDENT) for s in sets),
                n_fused=sum(s.count(PseudoSource.CODEBOOK_FUSED) + s.count(PseudoSource.CONSENSUS_ARGMAX) for s in sets),
                n_abstained=n_abstained,
                abstention_rate=n_abstained / n_tracks if n_tracks else 0.0,
            )
            x_u = np.concatenate([s.features for s in sets]) if sets else np.zeros((0, labeled_x.shape[1]))
            y_u = np.concatenate([s.letters for s in sets]) if sets else np.zeros(0, dtype=np.int64)
            n_u = len(y_u)
            record.n_pseudo_labels = n_u
            if n_u == 0:
                logger.warning(f"第 {rd} 轮没有伪标签，跳过模型更新")
                record.heldout_accuracy = evaluator(teacher) if evaluator else None
                history.append(record)
                continue

            steps = train.epochs_per_round * math.ceil(n_u / train.batch_size)
            order_u = rng.permutation(n_u)
            total = 0.0
            for step in range(steps):
                start = (step * train.batch_size) % n_u
                idx_u = order_u[start:start + train.batch_size]
                idx_l = rng.choice(n_l, size=min(train.batch_size, n_l), replace=False)
                loss_s, grad_s = basecaller_service.supervised_loss(student, labeled_x[idx_l], labeled_letters[idx_l])
                loss_u, grad_u = basecaller_service.pseudo_label_loss(student, x_u[idx_u], y_u[idx_u], train.lambda_u)
                student = basecaller_service.sgd_step(student, grad_s + grad_u, train.learning_rate)
                teacher = basecaller_service.ema_update(teacher, student, train.ema_decay)
                total += loss_s + loss_u
            record.loss = total / steps
            record.heldout_accuracy = evaluator(teacher) if evaluator else None
            history.append(record)
            logger.info(
                f"第 {rd}/{train.rounds} 轮: 伪标签 {n_u}, 融合 {record.n_fused}, "
                f"弃权率 {record.abstention_rate:.3f}, loss={record.loss:.4f}"
            )
        return teacher, student, history

    # ------------------------------------------------------------------
    # 文件读写
    # ------------------------------------------------------------------

    @staticmethod
    def write_pseudo_labels(sets: List[PseudoLabelSet], path: Union[str, Path]) -> Path:
        frames = [s.to_frame() for s in sets]
        frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PSEUDO_LABEL_COLUMNS)
        p = Path(path)
        frame.to_csv(p, index=False, lineterminator="\n", float_format="%.9g")
        return p

    @staticmethod
    def write_history(history: List[RoundRecord], path: Union[str, Path]) -> Path:
        p = Path(path)
        p.write_text("".join(r.model_dump_json() + "\n" for r in history), encoding="utf-8")
        return p

    @staticmethod
    def read_history(path: Union[str, Path]) -> List[RoundRecord]:
        p = Path(path)
        if not p.exists():
            return []
        return [RoundRecord.model_validate_json(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


# 创建服务实例
plepi_service = PLePIService()
