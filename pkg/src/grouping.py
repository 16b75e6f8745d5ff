"""
渐进式原型分组：代表样本集合、Jaccard 亲和度、阈值连通分量、
已知类与原型组的匈牙利匹配，以及由标注准确率驱动的阈值选择。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple
import logging

import networkx as nx
import numpy as np
from networkx.utils import UnionFind
from scipy.optimize import linear_sum_assignment

from src.prototypes import PROTOTYPE_LEVEL, AssignmentMatrix, GroupPartition
from src.utils.errors import ContractViolation, InfeasibleMatchingError

logger = logging.getLogger(__name__)


@dataclass
class RepresentingSets:
    """Γ(c_k)：前 κ 个分配中包含原型 k 的样本集合，以 N×K 布尔矩阵保存"""
    membership: np.ndarray
    kappa: int

    @property
    def size(self) -> int:
        return int(self.membership.shape[1])

    def __getitem__(self, k: int) -> Set[int]:
        return set(np.flatnonzero(self.membership[:, k]).tolist())

    def sets(self) -> List[Set[int]]:
        return [self[k] for k in range(self.size)]


@dataclass
class AffinityMatrix:
    """K×K 对称亲和度矩阵，取值 [0,1]"""
    matrix: np.ndarray

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(self.size, k=1)
        return self.matrix[iu]


def representing_sets(p_all: AssignmentMatrix, kappa: int) -> RepresentingSets:
    """样本 i 属于 Γ(c_k) 当且仅当 k 在第 i 行前 κ 大的分配中（并列时下标小者优先）"""
    if p_all.level != PROTOTYPE_LEVEL:
        raise ContractViolation("representing_sets 需要原型级分配")
    rows = p_all.rows
    num_prototypes = rows.shape[1]
    if not 1 <= kappa <= num_prototypes:
        raise ContractViolation(f"κ={kappa} 必须在 [1, {num_prototypes}] 内")

    # 稳定排序：相等值保持原始下标顺序
    top = np.argsort(-rows, axis=1, kind='stable')[:, :kappa]
    membership = np.zeros(rows.shape, dtype=bool)
    membership[np.arange(rows.shape[0])[:, None], top] = True
    return RepresentingSets(membership=membership, kappa=kappa)


def jaccard_affinity(sets: RepresentingSets) -> AffinityMatrix:
    """s_ij = |Γ_i ∩ Γ_j| / |Γ_i ∪ Γ_j|，两者皆空时为 0"""
    indicator = sets.membership.astype(np.float64)
    intersection = indicator.T @ indicator
    sizes = np.diag(intersection)
    union = sizes[:, None] + sizes[None, :] - intersection
    with np.errstate(invalid='ignore', divide='ignore'):
        affinity = np.where(union > 0, intersection / np.where(union > 0, union, 1.0), 0.0)
    return AffinityMatrix(matrix=affinity)


def link_groups(affinity: AffinityMatrix, delta: float) -> GroupPartition:
    """以 s_ij > δ 为边的图的连通分量，组号按最小成员下标升序"""
    graph = nx.Graph()
    graph.add_nodes_from(range(affinity.size))
    rows, cols = np.nonzero(np.triu(affinity.matrix, k=1) > delta)
    graph.add_edges_from(zip(rows.tolist(), cols.tolist()))

    labels = [0] * affinity.size
    for component in nx.connected_components(graph):
        root = min(component)
        for node in component:
            labels[node] = root
    return GroupPartition.from_labels(labels)


@dataclass
class ClassGroupMatching:
    """已知类 → 原型组的单射匹配"""
    class_to_group: Dict[int, int]
    per_class_accuracy: Dict[int, float]
    matched_count: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.matched_count / self.total if self.total else 0.0

    @property
    def matched_groups(self) -> Set[int]:
        return set(self.class_to_group.values())

    def group_labels_for(self, labels: np.ndarray) -> np.ndarray:
        """把类别编号换成匹配的组号，未匹配的类记为 -1"""
        return np.array([self.class_to_group.get(int(c), -1) for c in labels], dtype=np.int64)

    def to_dict(self) -> Dict[str, object]:
        return {
            'class_to_group': {str(c): g for c, g in sorted(self.class_to_group.items())},
            'per_class_accuracy': {str(c): a for c, a in sorted(self.per_class_accuracy.items())},
            'matched_count': self.matched_count,
            'total': self.total,
        }

    @classmethod
    def empty(cls) -> 'ClassGroupMatching':
        return cls(class_to_group={}, per_class_accuracy={}, matched_count=0, total=0)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'ClassGroupMatching':
        return cls(
            class_to_group={int(c): int(g) for c, g in data['class_to_group'].items()},
            per_class_accuracy={int(c): float(a) for c, a in data['per_class_accuracy'].items()},
            matched_count=int(data['matched_count']),
            total=int(data['total']),
        )


def match_benefit(benefit: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """在收益矩阵（行=类，列=组）上求最大收益的单射匹配"""
    benefit = np.asarray(benefit)
    if benefit.shape[1] < benefit.shape[0]:
        raise InfeasibleMatchingError(f"组数 {benefit.shape[1]} 少于类别数 {benefit.shape[0]}")
    rows, cols = linear_sum_assignment(benefit, maximize=True)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    return pairs, float(benefit[rows, cols].sum())


def match_classes_to_groups(q_labeled: AssignmentMatrix, labels: np.ndarray) -> ClassGroupMatching:
    """匈牙利匹配：最大化 argmax 组等于所属类匹配组的标注样本数"""
    labels = np.asarray(labels, dtype=np.int64)
    if q_labeled.shape[0] != labels.size:
        raise ContractViolation("组级分配行数与标签数不一致")
    if labels.size == 0:
        return ClassGroupMatching.empty()

    classes, class_index = np.unique(labels, return_inverse=True)
    num_groups = q_labeled.shape[1]
    if num_groups < classes.size:
        raise InfeasibleMatchingError(f"组数 {num_groups} 少于已知类别数 {classes.size}")

    predicted = np.argmax(q_labeled.rows, axis=1)
    benefit = np.zeros((classes.size, num_groups), dtype=np.int64)
    np.add.at(benefit, (class_index, predicted), 1)
    class_sizes = np.bincount(class_index, minlength=classes.size)

    pairs, total = match_benefit(benefit)
    class_to_group = {int(classes[r]): int(c) for r, c in pairs}
    per_class = {int(classes[r]): float(benefit[r, c] / class_sizes[r]) for r, c in pairs}
    return ClassGroupMatching(class_to_group=class_to_group, per_class_accuracy=per_class,
                              matched_count=int(total), total=int(labels.size))


@dataclass
class ThresholdSelection:
    """阈值搜索结果"""
    delta: float
    partition: GroupPartition
    accuracy: float
    matching: Optional[ClassGroupMatching]
    feasible: bool = True
    evaluations: List[Tuple[float, int, float]] = field(default_factory=list)


def threshold_candidates(affinity: AffinityMatrix) -> np.ndarray:
    """候选阈值：非对角取值、相邻取值的中点，以及 0 和 1（升序去重）"""
    values = np.unique(affinity.off_diagonal())
    midpoints = (values[:-1] + values[1:]) / 2.0 if values.size > 1 else np.zeros(0)
    return np.unique(np.concatenate([values, midpoints, [0.0, 1.0]]))


def tune_threshold(affinity: AffinityMatrix,
                   q_builder: Callable[[GroupPartition], AssignmentMatrix],
                   labels: np.ndarray) -> ThresholdSelection:
    """在所有候选 δ 上选出标注已知类准确率最高的划分

    准确率最高的候选在 δ 轴上连成若干段，取最宽一段中离段中心最近的候选，
    等距时取较小的 δ。
    候选按 δ 降序扫描，用并查集逐步加入 s_ij > δ 的边，相同划分只评估一次。
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ContractViolation("阈值搜索至少需要一个标注样本")

    size = affinity.size
    candidates = threshold_candidates(affinity)
    iu, ju = np.triu_indices(size, k=1)
    weights = affinity.matrix[iu, ju]
    order = np.argsort(-weights, kind='stable')

    union_find = UnionFind(range(size))
    partition = GroupPartition.singletons(size)
    cache: Dict[Tuple[int, ...], Optional[ClassGroupMatching]] = {}
    scanned: List[Tuple[GroupPartition, Optional[ClassGroupMatching]]] = []
    pointer = 0

    for delta in candidates[::-1]:
        changed = False
        while pointer < order.size and weights[order[pointer]] > delta:
            edge = order[pointer]
            a, b = int(iu[edge]), int(ju[edge])
            if union_find[a] != union_find[b]:
                union_find.union(a, b)
                changed = True
            pointer += 1
        if changed:
            partition = GroupPartition.from_labels([union_find[k] for k in range(size)])

        if partition.assignment not in cache:
            try:
                cache[partition.assignment] = match_classes_to_groups(q_builder(partition), labels)
            except InfeasibleMatchingError:
                cache[partition.assignment] = None
        scanned.append((partition, cache[partition.assignment]))

    scanned.reverse()
    evaluations = [(float(delta), part.group_count,
                    matching.accuracy if matching is not None else float('nan'))
                   for delta, (part, matching) in zip(candidates, scanned)]
    counts = np.array([m.matched_count if m is not None else -1 for _, m in scanned])
    if counts.max() < 0:
        logger.warning("所有候选阈值下组数均少于已知类别数，退回全单例划分")
        return ThresholdSelection(delta=float(candidates[-1]), partition=GroupPartition.singletons(size),
                                  accuracy=0.0, matching=None, feasible=False, evaluations=evaluations)

    index = _plateau_center(candidates, counts == counts.max())
    partition, matching = scanned[index]
    return ThresholdSelection(delta=float(candidates[index]), partition=partition,
                              accuracy=matching.accuracy, matching=matching, evaluations=evaluations)


def _plateau_center(candidates: np.ndarray, best: np.ndarray) -> int:
    """最宽的最优段 [c_a, c_{b+1}) 中离段中心最近的候选下标（等距取较小的 δ）"""
    last = candidates.size - 1
    chosen, widest = 0, -1.0
    start = None
    for i in range(candidates.size + 1):
        if i <= last and best[i]:
            start = i if start is None else start
            continue
        if start is not None:
            end = i - 1
            low, high = candidates[start], candidates[min(end + 1, last)]
            if high - low > widest:
                widest = high - low
                center = (low + high) / 2.0
                span = np.arange(start, end + 1)
                chosen = int(span[np.argmin(np.abs(candidates[span] - center))])
            start = None
    return chosen


def empty_prototypes(sets: RepresentingSets) -> np.ndarray:
    """没有任何代表样本的原型下标"""
    return np.flatnonzero(~sets.membership.any(axis=0))


def reseed_sources(sets: RepresentingSets, instance_groups: np.ndarray,
                   partition: GroupPartition, rng: np.random.Generator) -> Dict[int, int]:
    """为每个空原型挑一个样本作为新位置，返回 {原型: 样本下标}

    空原型逐个分给"样本数 / 活跃成员数"最大的组，再从该组样本中不放回地随机抽取。
    """
    empty = empty_prototypes(sets)
    if empty.size == 0:
        return {}
    instance_groups = np.asarray(instance_groups, dtype=np.int64)
    if instance_groups.size != sets.membership.shape[0]:
        raise ContractViolation("样本组号数量与代表集合行数不一致")

    num_groups = partition.group_count
    active = sets.membership.any(axis=0)
    population = np.bincount(instance_groups, minlength=num_groups).astype(np.float64)
    members = np.bincount(np.asarray(partition.assignment)[active], minlength=num_groups).astype(np.float64)
    pools = [list(rng.permutation(np.flatnonzero(instance_groups == g))) for g in range(num_groups)]

    sources: Dict[int, int] = {}
    for k in empty.tolist():
        remaining = np.array([len(pool) for pool in pools])
        if not remaining.any():
            break
        load = np.divide(population, members, out=np.full(num_groups, np.inf), where=members > 0)
        load[remaining == 0] = -np.inf
        target = int(np.argmax(load))
        sources[k] = int(pools[target].pop())
        members[target] += 1
    return sources


def estimate_class_count(partition: GroupPartition) -> int:
    """估计的类别总数 = 当前组数"""
    return partition.group_count
