"""
开放世界评估：已知类准确率、新类聚类准确率、整体聚类准确率与 NMI。
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from src.grouping import ClassGroupMatching
from src.prototypes import GROUP_LEVEL, AssignmentMatrix
from src.utils.errors import ContractViolation

logger = logging.getLogger(__name__)


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ContractViolation(f"预测与真值长度不一致: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ContractViolation("评估输入不能为空")


def _matched_count(pred: np.ndarray, truth: np.ndarray) -> int:
    table = contingency_matrix(truth, pred)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return int(table[rows, cols].sum())


def clustering_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """簇→类单射映射下的最大匹配比例（列联表上的匈牙利算法）"""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    _check_pair(pred, truth)
    return _matched_count(pred, truth) / truth.size


def nmi(pred: np.ndarray, truth: np.ndarray) -> float:
    """归一化互信息，分母取两个熵的算术平均"""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    _check_pair(pred, truth)
    return float(normalized_mutual_info_score(truth, pred, average_method='arithmetic'))


@dataclass
class EvalReport:
    """一次评估的结果"""
    known_acc: float
    novel_acc: float
    all_acc: float
    nmi: float
    estimated_class_count: int
    known_count: int = 0
    novel_count: int = 0
    confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @property
    def population(self) -> int:
        return int(sum(sum(row.values()) for row in self.confusion.values()))

    def scores(self) -> Dict[str, float]:
        return {
            'known_acc': self.known_acc,
            'novel_acc': self.novel_acc,
            'all_acc': self.all_acc,
            'nmi': self.nmi,
        }

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        return cls(**data)


def _confusion(truth: np.ndarray, pred: np.ndarray) -> Dict[str, Dict[str, int]]:
    table: Dict[str, Dict[str, int]] = {}
    pairs, counts = np.unique(np.stack([truth, pred], axis=1), axis=0, return_counts=True)
    for (c, g), n in zip(pairs.tolist(), counts.tolist()):
        table.setdefault(str(c), {})[str(g)] = int(n)
    return table


def _known_accuracy(pred: np.ndarray, truth: np.ndarray, matching: ClassGroupMatching) -> float:
    expected = matching.group_labels_for(truth)
    return float(np.mean(pred == expected))


def _novel_accuracy(pred: np.ndarray, truth: np.ndarray, matched_groups) -> float:
    """只有未匹配的组算作新类预测；落入已匹配组的新类样本记为错误"""
    allowed = ~np.isin(pred, list(matched_groups))
    if not allowed.any():
        return 0.0
    return _matched_count(pred[allowed], truth[allowed]) / truth.size


def open_world_report(q_eval: AssignmentMatrix, labels: np.ndarray, is_known: np.ndarray,
                      matching: Optional[ClassGroupMatching],
                      estimated_class_count: Optional[int] = None) -> EvalReport:
    """在留出集上生成开放世界评估报告

    预测为组级分配 q 的 argmax。known_acc 使用训练时的类↔组匹配；
    匹配为空（无标注）时，已知类与新类各自按匈牙利聚类准确率计分。
    """
    if matching is None:
        raise ContractViolation("缺少类↔组匹配，无法评估")
    if q_eval.level != GROUP_LEVEL:
        raise ContractViolation("open_world_report 需要组级分配")
    labels = np.asarray(labels, dtype=np.int64)
    is_known = np.asarray(is_known, dtype=bool)
    if not (q_eval.shape[0] == labels.size == is_known.size):
        raise ContractViolation("分配、标签与已知掩码长度不一致")
    if labels.size == 0:
        raise ContractViolation("评估集不能为空")

    pred = np.argmax(q_eval.rows, axis=1).astype(np.int64)
    known_pred, known_truth = pred[is_known], labels[is_known]
    novel_pred, novel_truth = pred[~is_known], labels[~is_known]
    unsupervised = not matching.class_to_group

    if known_truth.size == 0:
        logger.warning("评估集中没有已知类样本，known_acc 记为 0")
        known_acc = 0.0
    elif unsupervised:
        known_acc = clustering_accuracy(known_pred, known_truth)
    else:
        known_acc = _known_accuracy(known_pred, known_truth, matching)

    if novel_truth.size == 0:
        logger.warning("评估集中没有新类样本，novel_acc 记为 0")
        novel_acc = 0.0
    elif unsupervised:
        novel_acc = clustering_accuracy(novel_pred, novel_truth)
    else:
        novel_acc = _novel_accuracy(novel_pred, novel_truth, matching.matched_groups)

    return EvalReport(
        known_acc=float(known_acc),
        novel_acc=float(novel_acc),
        all_acc=clustering_accuracy(pred, labels),
        nmi=nmi(pred, labels),
        estimated_class_count=int(estimated_class_count if estimated_class_count is not None
                                  else q_eval.shape[1]),
        known_count=int(known_truth.size),
        novel_count=int(novel_truth.size),
        confusion=_confusion(labels, pred),
    )
