from pathlib import Path
from typing import Union

import numpy as np

# 命名随机子流：同一主种子下各阶段互不干扰，缓存前序阶段时仍可复现
STREAMS = {
    "sim": 1,
    "render": 2,
    "corrupt": 3,
    "train": 4,
    "augment": 5,
    "design": 6,
}


def substream_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """
    由主种子派生命名子流的随机数生成器

    Args:
        seed: 主种子
        stream: 子流名称，必须是 STREAMS 中的键
        keys: 附加整数键（如视野、循环、轮次），用于进一步拆分子流

    Returns:
        np.random.Generator: 与调用顺序无关的确定性生成器
    """
    if stream not in STREAMS:
        raise KeyError(f"未知的随机子流: {stream}")
    spawn_key = (STREAMS[stream],) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


def ensure_dir(path: Union[str, Path]) -> Path:
    """创建目录（若不存在）并返回 Path"""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def tile_stem(field: int, cycle: int) -> str:
    """图块文件名主干"""
    return f"f{field:03d}_r{cycle:02d}"


def format_error_message(message: str, exit_code: int) -> str:
    """格式化命令行错误输出"""
    return f"error[{exit_code}]: {message}"
