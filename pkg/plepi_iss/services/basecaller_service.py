import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from plepi_iss.models.models import (
    FEATURE_DIM,
    N_LETTERS,
    AugmentConfig,
    BaseCallerModel,
    DetectionSet,
    FeatureSpec,
    TrainConfig,
)
from plepi_iss.utils.exceptions import DataError, MissingArtifact, NumericalError, ShapeMismatch

logger = logging.getLogger(__name__)

# 零强度斑点的对数总强度下限
LOG_TOTAL_FLOOR = 1e-6


def _features_from_scaled(v: np.ndarray) -> np.ndarray:
    """由已扣背景并缩放的强度 (n, 4) 构造特征 (n, 9)"""
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    unit = np.where(norm > 0, v / safe, 0.0)
    log_total = np.log(np.maximum(v.sum(axis=1, keepdims=True), LOG_TOTAL_FLOOR))
    return np.hstack([v, unit, log_total])


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


class BaseCallerService:
    """
    碱基识别器服务类

    多项逻辑回归：特征构造、概率预测、损失与梯度、SGD、EMA 与增强。
    """

    @staticmethod
    def fit_feature_spec(intensity: np.ndarray, background_level: float) -> FeatureSpec:
        """以有标注集合的总强度中位数作为强度尺度"""
        totals = np.clip(np.asarray(intensity, dtype=np.float64) - background_level, 0.0, None).sum(axis=1)
        scale = float(np.median(totals)) if len(totals) else 1.0
        if not math.isfinite(scale) or scale <= 0:
            scale = 1.0
        return FeatureSpec(background_level=background_level, intensity_scale=scale)

    @staticmethod
    def featurize(intensity: np.ndarray, spec: FeatureSpec) -> np.ndarray:
        """
        强度向量 → 特征

        Args:
            intensity: (4,) 或 (n, 4) 的原始通道强度
            spec: 背景与缩放

        Returns:
            np.ndarray: (n, 9)；单个向量输入返回 (9,)
        """
        arr = np.asarray(intensity, dtype=np.float64)
        single = arr.ndim == 1
        arr = arr.reshape(-1, N_LETTERS)
        v = np.clip(arr - spec.background_level, 0.0, None) / spec.intensity_scale
        features = _features_from_scaled(v)
        return features[0] if single else features

    def featurize_detections(self, dets: DetectionSet, spec: FeatureSpec) -> np.ndarray:
        return self.featurize(dets.intensity, spec)

    @staticmethod
    def augment_weak(x: np.ndarray) -> np.ndarray:
        """弱增强为恒等变换"""
        return x

    @staticmethod
    def augment_strong(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
        """
        强增强：通道乘性抖动 (1 ± jitter) 与加性噪声后重新构造特征

        jitter 与 noise_sd 均为 0 时为恒等变换。
        """
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        arr = arr.reshape(-1, FEATURE_DIM)
        v = arr[:, :N_LETTERS]
        if cfg.jitter > 0:
            v = v * rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter, size=v.shape)
        if cfg.noise_sd > 0:
            v = v + rng.normal(0.0, cfg.noise_sd, size=v.shape)
        v = np.clip(v, 0.0, None)
        out = _features_from_scaled(v)
        return out[0] if single else out

    @staticmethod
    def init_model(spec: Optional[FeatureSpec] = None, n_features: int = FEATURE_DIM) -> BaseCallerModel:
        return BaseCallerModel(
            weights=np.zeros((N_LETTERS, n_features + 1)),
            feature_spec=spec or FeatureSpec(),
        )

    @staticmethod
    def _logits(model: BaseCallerModel, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != model.n_features:
            raise ShapeMismatch(f"特征维数 {x.shape[1]} 与模型 {model.n_features} 不符")
        return (_with_bias(x) @ model.weights.T) / model.temperature

    def predict_probs(self, model: BaseCallerModel, x: np.ndarray) -> np.ndarray:
        """softmax((W·[x;1]) / T)；单个样本返回 (4,)，批量返回 (n, 4)"""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        probs = softmax(self._logits(model, arr.reshape(1, -1) if single else arr), axis=1)
        return probs[0] if single else probs

    def supervised_loss(
        self,
        model: BaseCallerModel,
        x: np.ndarray,
        letters: np.ndarray,
    ) -> Tuple[float, np.ndarray]:
        """
        平均交叉熵及其对权重的梯度

        Returns:
            Tuple[float, np.ndarray]: (loss, 形状同 weights 的梯度)

        Raises:
            DataError: 空批次
        """
        x = np.asarray(x, dtype=np.float64)
        letters = np.asarray(letters, dtype=np.int64)
        n = x.shape[0]
        if n == 0:
            raise DataError("损失计算需要非空批次")
        logits = self._logits(model, x)
        log_p = log_softmax(logits, axis=1)
        loss = -float(log_p[np.arange(n), letters].mean())
        residual = np.exp(log_p)
        residual[np.arange(n), letters] -= 1.0
        grad = residual.T @ _with_bias(x) / (n * model.temperature)
        return loss, grad

    def pseudo_label_loss(
        self,
        model: BaseCallerModel,
        x: np.ndarray,
        letters: np.ndarray,
        lambda_u: float,
    ) -> Tuple[float, np.ndarray]:
        """λ_u 加权的伪标签交叉熵"""
        loss, grad = self.supervised_loss(model, x, letters)
        return lambda_u * loss, lambda_u * grad

    @staticmethod
    def sgd_step(model: BaseCallerModel, grad: np.ndarray, learning_rate: float) -> BaseCallerModel:
        """
        weights ← weights − lr·grad

        Raises:
            ShapeMismatch: 梯度形状与权重不符
            NumericalError: 梯度或更新后的权重包含非有限值
        """
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != model.weights.shape:
            raise ShapeMismatch(f"梯度形状 {grad.shape} 与权重 {model.weights.shape} 不符")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("梯度包含 NaN 或 Inf")
        weights = model.weights - learning_rate * grad
        if not np.all(np.isfinite(weights)):
            raise NumericalError("SGD 更新后权重溢出")
        return model.model_copy(update={"weights": weights})

    @staticmethod
    def ema_update(teacher: BaseCallerModel, student: BaseCallerModel, decay: float) -> BaseCallerModel:
        """teacher ← α·teacher + (1−α)·student（逐元素）"""
        if teacher.weights.shape != student.weights.shape:
            raise ShapeMismatch(f"教师 {teacher.weights.shape} 与学生 {student.weights.shape} 形状不符")
        weights = decay * teacher.weights + (1.0 - decay) * student.weights
        return teacher.model_copy(update={"weights": weights})

    def accuracy(self, model: BaseCallerModel, x: np.ndarray, letters: np.ndarray) -> float:
        if len(letters) == 0:
            return 0.0
        predicted = np.argmax(self.predict_probs(model, np.asarray(x, dtype=np.float64)), axis=1)
        return float(np.mean(predicted == np.asarray(letters)))

    def train_supervised(
        self,
        model: BaseCallerModel,
        x: np.ndarray,
        letters: np.ndarray,
        cfg: TrainConfig,
        epochs: int,
        rng: np.random.Generator,
    ) -> Tuple[BaseCallerModel, List[float]]:
        """
        小批量 SGD 监督训练（用于 burn-in）

        Returns:
            Tuple[BaseCallerModel, List[float]]: 训练后模型与每轮平均损失
        """
        n = len(letters)
        if n == 0:
            raise DataError("监督训练需要非空样本")
        losses = []
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss, grad = self.supervised_loss(model, x[idx], letters[idx])
                model = self.sgd_step(model, grad, cfg.learning_rate)
                total += loss * len(idx)
            losses.append(total / n)
            logger.info(f"burn-in epoch {epoch + 1}/{epochs}: loss={losses[-1]:.4f}")
        return model, losses

    # ------------------------------------------------------------------
    # 检查点
    # ------------------------------------------------------------------

    @staticmethod
    def save_checkpoint(model: BaseCallerModel, path: Union[str, Path]) -> Path:
        p = Path(path)
        p.write_text(model.model_dump_json(indent=2), encoding="utf-8")
        return p

    @staticmethod
    def load_checkpoint(path: Union[str, Path]) -> BaseCallerModel:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"模型检查点不存在: {p}")
        return BaseCallerModel.model_validate_json(p.read_text(encoding="utf-8"))


# 创建服务实例
basecaller_service = BaseCallerService()
