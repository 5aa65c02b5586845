class PLePIError(Exception):
    """PLePI-ISS 基础异常类"""
    exit_code: int = 1


class ConfigError(PLePIError):
    """配置无效异常"""
    exit_code = 2


class InfeasibleDesign(ConfigError):
    """条形码设计约束无法满足"""
    pass


class DataError(PLePIError):
    """输入数据异常"""
    exit_code = 3


class CodebookError(DataError):
    """编码本基础异常"""
    pass


class DuplicateEntry(CodebookError):
    """编码本中存在重复条形码"""
    pass


class LengthMismatch(CodebookError):
    """条形码长度不一致"""
    pass


class BadAlphabet(CodebookError):
    """条形码包含非 A/C/G/T 字符"""
    pass


class CodebookFormatError(CodebookError):
    """编码本文件格式错误"""
    pass


class IncompleteField(DataError):
    """视野缺少某个循环的图像"""
    pass


class MissingArtifact(DataError):
    """前序阶段的产物不存在"""
    pass


class UndefinedMetric(DataError):
    """指标在当前数据上无定义"""
    pass


class NumericalError(PLePIError):
    """数值计算异常（NaN、Inf）"""
    exit_code = 4


class ShapeMismatch(NumericalError):
    """模型权重形状不匹配"""
    pass
