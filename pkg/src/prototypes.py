"""
可训练原型、原型分组与两级分配概率。
"""

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple
import logging

import numpy as np

from src.encoder import EmbeddingBatch
from src.numerics import NORM_FLOOR, normalize_rows
from src.utils.errors import ContractViolation, DegenerateVectorError

logger = logging.getLogger(__name__)

PROTOTYPE_LEVEL = 'prototype'
GROUP_LEVEL = 'group'


@dataclass
class PrototypeBank:
    """K 个单位范数原型与温度 τ"""
    vectors: np.ndarray
    temperature: float = 0.1

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ContractViolation(f"原型矩阵必须是二维: {self.vectors.shape}")
        if not self.temperature > 0:
            raise ContractViolation(f"温度必须为正: {self.temperature}")

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @classmethod
    def random(cls, num_prototypes: int, dim: int, temperature: float = 0.1,
               seed: int = 0) -> 'PrototypeBank':
        """在单位球面上均匀采样 K 个原型"""
        rng = np.random.default_rng(seed)
        while True:
            raw = rng.standard_normal((num_prototypes, dim))
            norms = np.linalg.norm(raw, axis=1)
            if np.all(norms > NORM_FLOOR):
                return cls(vectors=raw / norms[:, None], temperature=temperature)


@dataclass(frozen=True)
class GroupPartition:
    """原型到组的划分；组号 0..group_count-1 全部被使用"""
    assignment: Tuple[int, ...]

    def __post_init__(self):
        assignment = tuple(int(g) for g in self.assignment)
        object.__setattr__(self, 'assignment', assignment)
        if not assignment:
            raise ContractViolation("划分不能为空")
        used = set(assignment)
        if used != set(range(len(used))):
            raise ContractViolation(f"组号必须连续覆盖 0..{len(used) - 1}: {sorted(used)}")

    @property
    def size(self) -> int:
        """原型个数 K"""
        return len(self.assignment)

    @property
    def group_count(self) -> int:
        return max(self.assignment) + 1

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(np.asarray(self.assignment), minlength=self.group_count)

    def members(self, group: int) -> List[int]:
        return [k for k, g in enumerate(self.assignment) if g == group]

    def groups(self) -> List[List[int]]:
        return [self.members(g) for g in range(self.group_count)]

    def membership_matrix(self) -> np.ndarray:
        """K × N_g 的 0/1 归属矩阵"""
        matrix = np.zeros((self.size, self.group_count), dtype=np.float64)
        matrix[np.arange(self.size), np.asarray(self.assignment)] = 1.0
        return matrix

    def refines(self, other: 'GroupPartition') -> bool:
        """self 的每个组都包含在 other 的某个组内"""
        if other.size != self.size:
            return False
        return all(len({other.assignment[k] for k in members}) == 1 for members in self.groups())

    @classmethod
    def singletons(cls, num_prototypes: int) -> 'GroupPartition':
        return cls(tuple(range(num_prototypes)))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> 'GroupPartition':
        """把任意组标签规范化：按组内最小原型下标升序编号"""
        mapping = {}
        canonical = []
        for label in labels:
            if label not in mapping:
                mapping[label] = len(mapping)
            canonical.append(mapping[label])
        return cls(tuple(canonical))

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[int]], num_prototypes: int) -> 'GroupPartition':
        labels = [-1] * num_prototypes
        for g, members in enumerate(groups):
            for k in members:
                if labels[k] != -1:
                    raise ContractViolation(f"原型 {k} 同时属于多个组")
                labels[k] = g
        if -1 in labels:
            raise ContractViolation(f"原型 {labels.index(-1)} 不属于任何组")
        return cls.from_labels(labels)


@dataclass
class AssignmentMatrix:
    """逐样本的分配概率（原型级 p 或组级 q）"""
    rows: np.ndarray
    level: str = PROTOTYPE_LEVEL

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ContractViolation(f"分配矩阵必须是二维: {self.rows.shape}")
        if self.level not in (PROTOTYPE_LEVEL, GROUP_LEVEL):
            raise ContractViolation(f"未知的分配层级: {self.level}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows.shape

    def take(self, indices: np.ndarray) -> 'AssignmentMatrix':
        return AssignmentMatrix(self.rows[np.asarray(indices, dtype=np.int64)], self.level)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def assign_prototypes(z: EmbeddingBatch, bank: PrototypeBank) -> AssignmentMatrix:
    """p = softmax(z·cᵀ / τ)"""
    vectors = z.vectors if isinstance(z, EmbeddingBatch) else np.asarray(z, dtype=np.float64)
    if vectors.shape[1] != bank.dim:
        raise ContractViolation(f"嵌入维度 {vectors.shape[1]} 与原型维度 {bank.dim} 不符")
    logits = vectors @ bank.vectors.T / bank.temperature
    return AssignmentMatrix(softmax_rows(logits), PROTOTYPE_LEVEL)


def assign_groups(p: AssignmentMatrix, partition: GroupPartition) -> AssignmentMatrix:
    """q^(g) = Σ_{k∈C_g} p^(k)"""
    if p.level != PROTOTYPE_LEVEL:
        raise ContractViolation("assign_groups 需要原型级分配")
    if p.rows.shape[1] != partition.size:
        raise ContractViolation(f"分配列数 {p.rows.shape[1]} 与划分覆盖的原型数 {partition.size} 不符")
    return AssignmentMatrix(p.rows @ partition.membership_matrix(), GROUP_LEVEL)


def prototype_prior(partition: GroupPartition) -> np.ndarray:
    """p_prior^(k) = 1 / (N_g · |C_k|)：组间均匀、组内均匀"""
    sizes = partition.group_sizes
    own = sizes[np.asarray(partition.assignment)]
    return 1.0 / (partition.group_count * own.astype(np.float64))


def project_prototypes(bank: PrototypeBank) -> PrototypeBank:
    """优化器步后把每个原型投影回单位球面"""
    try:
        vectors, _ = normalize_rows(bank.vectors, NORM_FLOOR, what="原型")
    except DegenerateVectorError as e:
        raise DegenerateVectorError(f"原型 {e.index} 退化: {e}", index=e.index) from e
    return PrototypeBank(vectors=vectors, temperature=bank.temperature)
