import io
import itertools
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from plepi_iss.models.models import ALPHABET, N_LETTERS, BarcodeKind, CodebookEntry
from plepi_iss.utils.exceptions import (
    BadAlphabet,
    CodebookFormatError,
    ConfigError,
    DuplicateEntry,
    InfeasibleDesign,
    LengthMismatch,
)
from plepi_iss.utils.helpers import substream_rng

logger = logging.getLogger(__name__)

HEADER = ["barcode", "name", "kind"]
# 拒绝采样的最大尝试次数，超过后退化为贪心最远点选择
MAX_REJECTION_ATTEMPTS = 100_000
# 贪心候选池：小于该规模时穷举全部序列，否则随机抽样
EXHAUSTIVE_POOL_LIMIT = 4 ** 9
RANDOM_POOL_SIZE = 1 << 18

_LETTER_INDEX = {letter: i for i, letter in enumerate(ALPHABET)}


def encode_barcode(barcode: str) -> np.ndarray:
    """条形码字符串转为字母索引数组"""
    try:
        return np.array([_LETTER_INDEX[c] for c in barcode], dtype=np.int8)
    except KeyError as e:
        raise BadAlphabet(f"条形码 {barcode!r} 包含非法字符 {e.args[0]!r}")


def decode_barcode(codes: Iterable[int]) -> str:
    """字母索引数组转为条形码字符串"""
    return "".join(ALPHABET[int(c)] for c in codes)


class Codebook:
    """
    参考条形码库

    构造后不可变；迭代顺序为插入顺序，供下游 argmax 打破平局使用。
    """

    def __init__(self, entries: Sequence[CodebookEntry]):
        seen: Dict[str, str] = {}
        length: Optional[int] = None
        for entry in entries:
            barcode = entry.barcode
            if not barcode:
                raise LengthMismatch("条形码不能为空")
            bad = [c for c in barcode if c not in _LETTER_INDEX]
            if bad:
                raise BadAlphabet(f"条形码 {barcode!r} 包含非法字符 {bad[0]!r}")
            if length is None:
                length = len(barcode)
            elif len(barcode) != length:
                raise LengthMismatch(f"条形码 {barcode!r} 长度为 {len(barcode)}，期望 {length}")
            if barcode in seen:
                raise DuplicateEntry(f"条形码 {barcode!r} 重复（{seen[barcode]} 与 {entry.name}）")
            seen[barcode] = entry.name

        self._entries = tuple(entries)
        self._n_cycles = length or 0
        self._array = (
            np.stack([encode_barcode(e.barcode) for e in self._entries])
            if self._entries else np.zeros((0, self._n_cycles), dtype=np.int8)
        )
        self._array.setflags(write=False)
        self._is_trick = np.array([e.kind == BarcodeKind.TRICK for e in self._entries], dtype=bool)
        self._index = {e.barcode: i for i, e in enumerate(self._entries)}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.barcodes)

    def __contains__(self, barcode: object) -> bool:
        return barcode in self._index

    def __repr__(self) -> str:
        return f"Codebook(targeted={len(self.targeted)}, trick={len(self.trick)}, n_cycles={self.n_cycles})"

    @property
    def entries(self) -> tuple:
        return self._entries

    @property
    def n_cycles(self) -> int:
        return self._n_cycles

    @property
    def barcodes(self) -> List[str]:
        return [e.barcode for e in self._entries]

    @property
    def targeted(self) -> List[str]:
        return [e.barcode for e in self._entries if e.kind == BarcodeKind.TARGETED]

    @property
    def trick(self) -> List[str]:
        return [e.barcode for e in self._entries if e.kind == BarcodeKind.TRICK]

    @property
    def names(self) -> Dict[str, str]:
        return {e.barcode: e.name for e in self._entries}

    @property
    def array(self) -> np.ndarray:
        """(K, N_r) 字母索引矩阵，只读"""
        return self._array

    @property
    def is_trick(self) -> np.ndarray:
        return self._is_trick

    def index_of(self, barcode: str) -> int:
        return self._index[barcode]

    def kind_of(self, barcode: str) -> Optional[BarcodeKind]:
        i = self._index.get(barcode)
        return None if i is None else self._entries[i].kind

    def select(self, include_trick: bool = True) -> "Codebook":
        """仅保留目标条形码（或全部）"""
        if include_trick:
            return self
        return Codebook([e for e in self._entries if e.kind == BarcodeKind.TARGETED])


class CodebookService:
    """
    编码本服务类

    负责编码本的解析、序列化、汉明空间工具和诱饵条形码生成。
    """

    @staticmethod
    def parse_codebook(text: str) -> Codebook:
        """
        解析 barcode,name,kind 格式的编码本文本

        表头可选；空行忽略。

        Raises:
            DuplicateEntry, LengthMismatch, BadAlphabet, CodebookFormatError
        """
        if not text.strip():
            return Codebook([])
        try:
            frame = pd.read_csv(
                io.StringIO(text),
                header=None,
                dtype=str,
                keep_default_na=False,
                skip_blank_lines=True,
                skipinitialspace=True,
            )
        except pd.errors.ParserError as e:
            raise CodebookFormatError(f"编码本格式错误: {e}")
        if frame.shape[1] != len(HEADER):
            raise CodebookFormatError(f"编码本每行应有 {len(HEADER)} 列，实际 {frame.shape[1]} 列")
        frame = frame.fillna("")
        frame.columns = HEADER
        if [v.strip().lower() for v in frame.iloc[0]] == HEADER:
            frame = frame.iloc[1:]

        entries = []
        for row in frame.itertuples(index=False):
            barcode = row.barcode.strip()
            kind = row.kind.strip().lower()
            if kind not in (BarcodeKind.TARGETED.value, BarcodeKind.TRICK.value):
                raise CodebookFormatError(f"条形码 {barcode!r} 的类型 {row.kind!r} 无效")
            name = row.name.strip() or barcode
            entries.append(CodebookEntry(barcode=barcode, name=name, kind=BarcodeKind(kind)))
        codebook = Codebook(entries)
        logger.debug(f"解析编码本: {codebook!r}")
        return codebook

    @staticmethod
    def serialize_codebook(codebook: Codebook) -> str:
        """序列化为带表头的 CSV 文本"""
        frame = pd.DataFrame(
            [(e.barcode, e.name, e.kind.value) for e in codebook.entries],
            columns=HEADER,
        )
        return frame.to_csv(index=False, lineterminator="\n")

    def load_codebook(self, path: Union[str, Path]) -> Codebook:
        return self.parse_codebook(Path(path).read_text(encoding="utf-8"))

    def save_codebook(self, codebook: Codebook, path: Union[str, Path]) -> Path:
        p = Path(path)
        p.write_text(self.serialize_codebook(codebook), encoding="utf-8")
        return p

    @staticmethod
    def hamming(a: str, b: str) -> int:
        """两条等长条形码的汉明距离"""
        if len(a) != len(b):
            raise LengthMismatch(f"条形码长度不一致: {len(a)} != {len(b)}")
        return sum(1 for x, y in zip(a, b) if x != y)

    @staticmethod
    def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """字母索引矩阵 (n, N_r) 与 (m, N_r) 的两两汉明距离 (n, m)"""
        if a.shape[1] != b.shape[1]:
            raise LengthMismatch(f"条形码长度不一致: {a.shape[1]} != {b.shape[1]}")
        return (a[:, None, :] != b[None, :, :]).sum(axis=2)

    def min_distance(self, codebook: Codebook) -> Optional[int]:
        """编码本内最小两两距离；少于两条时返回 None"""
        if len(codebook) < 2:
            return None
        d = self.hamming_matrix(codebook.array, codebook.array)
        np.fill_diagonal(d, codebook.n_cycles + 1)
        return int(d.min())

    @staticmethod
    def matches_with_fixed(
        codebook: Codebook,
        fixed: Mapping[int, str],
        include_trick: bool = True,
    ) -> List[str]:
        """
        返回在所有固定位置上字母一致的条形码（保持插入顺序）

        Args:
            codebook: 编码本
            fixed: 位置 -> 字母 的部分赋值
            include_trick: 是否包含诱饵条形码
        """
        for pos in fixed:
            if not 0 <= pos < codebook.n_cycles:
                raise LengthMismatch(f"固定位置 {pos} 超出 [0, {codebook.n_cycles})")
        cb = codebook.select(include_trick)
        if not len(cb):
            return []
        mask = np.ones(len(cb), dtype=bool)
        for pos, letter in fixed.items():
            mask &= cb.array[:, pos] == _LETTER_INDEX[letter]
        return [cb.barcodes[i] for i in np.flatnonzero(mask)]

    def generate_trick_barcodes(
        self,
        codebook: Codebook,
        count: int,
        min_dist: int = 5,
        seed: int = 0,
    ) -> List[str]:
        """
        生成与目标条形码及彼此之间汉明距离均不小于 min_dist 的诱饵条形码

        先做带拒绝的随机采样；失败 MAX_REJECTION_ATTEMPTS 次后改为
        贪心最远点选择。

        Raises:
            InfeasibleDesign: 候选池耗尽仍无法满足约束
        """
        n_cycles = codebook.n_cycles
        if count < 1:
            raise ConfigError("诱饵条形码数量必须 >= 1")
        if n_cycles == 0:
            raise InfeasibleDesign("编码本为空，无法确定条形码长度")
        if min_dist > n_cycles:
            raise InfeasibleDesign(f"min_dist={min_dist} 超过条形码长度 {n_cycles}")

        min_dist = max(min_dist, 1)
        rng = substream_rng(seed, "design", 1)
        existing = codebook.array.astype(np.int8)
        chosen: List[np.ndarray] = []
        attempts = 0
        batch = 4096
        while len(chosen) < count and attempts < MAX_REJECTION_ATTEMPTS:
            draws = rng.integers(0, N_LETTERS, size=(batch, n_cycles), dtype=np.int8)
            nearest = self.hamming_matrix(draws, existing).min(axis=1) if len(existing) else \
                np.full(batch, n_cycles)
            for candidate, d in zip(draws, nearest):
                attempts += 1
                if attempts > MAX_REJECTION_ATTEMPTS:
                    break
                if d < min_dist:
                    continue
                if chosen and (np.stack(chosen) != candidate).sum(axis=1).min() < min_dist:
                    continue
                chosen.append(candidate)
                if len(chosen) == count:
                    break

        if len(chosen) < count:
            logger.info(f"拒绝采样仅得到 {len(chosen)}/{count} 条诱饵条形码，改用贪心最远点选择")
            chosen = self._farthest_point(existing, count, min_dist, n_cycles, rng)

        tricks = [decode_barcode(c) for c in chosen]
        logger.info(f"生成 {len(tricks)} 条诱饵条形码 (min_dist={min_dist})")
        return tricks

    def _farthest_point(
        self,
        existing: np.ndarray,
        count: int,
        min_dist: int,
        n_cycles: int,
        rng: np.random.Generator,
    ) -> List[np.ndarray]:
        if N_LETTERS ** n_cycles <= EXHAUSTIVE_POOL_LIMIT:
            pool = np.array(list(itertools.product(range(N_LETTERS), repeat=n_cycles)), dtype=np.int8)
        else:
            pool = rng.integers(0, N_LETTERS, size=(RANDOM_POOL_SIZE, n_cycles), dtype=np.int8)

        nearest = np.full(len(pool), n_cycles + 1, dtype=np.int64)
        for row in existing:
            nearest = np.minimum(nearest, (pool != row).sum(axis=1))

        chosen: List[np.ndarray] = []
        for _ in range(count):
            best = int(np.argmax(nearest))
            if nearest[best] < min_dist:
                raise InfeasibleDesign(
                    f"候选池耗尽：仅找到 {len(chosen)}/{count} 条距离 >= {min_dist} 的诱饵条形码"
                )
            chosen.append(pool[best].copy())
            nearest = np.minimum(nearest, (pool != pool[best]).sum(axis=1))
        return chosen

    def design_codebook(
        self,
        n_targeted: int,
        n_cycles: int,
        min_dist: int = 3,
        seed: int = 0,
        prefix: str = "bc",
    ) -> Codebook:
        """随机设计两两距离不小于 min_dist 的目标条形码库"""
        if n_targeted < 1:
            raise ConfigError("目标条形码数量必须 >= 1")
        if min_dist > n_cycles:
            raise InfeasibleDesign(f"min_dist={min_dist} 超过条形码长度 {n_cycles}")
        rng = substream_rng(seed, "design", 0)
        chosen: List[np.ndarray] = []
        attempts = 0
        while len(chosen) < n_targeted:
            attempts += 1
            if attempts > MAX_REJECTION_ATTEMPTS:
                raise InfeasibleDesign(
                    f"无法在 {MAX_REJECTION_ATTEMPTS} 次尝试内设计 {n_targeted} 条距离 >= {min_dist} 的条形码"
                )
            candidate = rng.integers(0, N_LETTERS, size=n_cycles, dtype=np.int8)
            if chosen and (np.stack(chosen) != candidate).sum(axis=1).min() < min_dist:
                continue
            chosen.append(candidate)
        width = len(str(n_targeted))
        entries = [
            CodebookEntry(barcode=decode_barcode(c), name=f"{prefix}{i:0{width}d}", kind=BarcodeKind.TARGETED)
            for i, c in enumerate(chosen)
        ]
        return Codebook(entries)

    @staticmethod
    def with_tricks(codebook: Codebook, tricks: Sequence[str]) -> Codebook:
        """追加诱饵条形码，返回新编码本"""
        extra = [
            CodebookEntry(barcode=b, name=f"trick{i}", kind=BarcodeKind.TRICK)
            for i, b in enumerate(tricks)
        ]
        return Codebook(list(codebook.entries) + extra)


# 创建服务实例
codebook_service = CodebookService()
