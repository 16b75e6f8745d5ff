"""
目标函数各项及其解析梯度：

    L = L_proto + L_group + λ₁·L_reg + λ₂·L_ce

所有进入 log 的概率都在 LOG_EPS 处截断。梯度对正样本一侧同样回传（不做 stop-gradient）。
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from src.prototypes import (
    GROUP_LEVEL,
    PROTOTYPE_LEVEL,
    AssignmentMatrix,
    GroupPartition,
    PrototypeBank,
    prototype_prior,
    softmax_rows,
)
from src.utils.errors import ContractViolation

logger = logging.getLogger(__name__)

LOG_EPS = 1e-8

LABELED_SAME_CLASS = 'labeled-same-class'
UNLABELED_NEAREST = 'unlabeled-nearest-neighbor'


@dataclass
class LossBreakdown:
    """各项损失与总损失"""
    proto: float
    group: float
    reg: float
    ce: float
    total: float
    lambda1: float = 1.0
    lambda2: float = 1.0

    @classmethod
    def combine(cls, proto: float, group: float, reg: float, ce: float,
                lambda1: float, lambda2: float) -> 'LossBreakdown':
        total = proto + group + lambda1 * reg + lambda2 * ce
        return cls(proto=float(proto), group=float(group), reg=float(reg), ce=float(ce),
                   total=float(total), lambda1=float(lambda1), lambda2=float(lambda2))

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.proto, self.group, self.reg, self.ce, self.total))

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class PositivePairing:
    """锚点与正样本的下标对，以及每对的来源"""
    anchor_indices: np.ndarray
    positive_indices: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.anchor_indices = np.asarray(self.anchor_indices, dtype=np.int64)
        self.positive_indices = np.asarray(self.positive_indices, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.full(self.anchor_indices.shape, UNLABELED_NEAREST, dtype=object)
        self.provenance = np.asarray(self.provenance, dtype=object)
        if not (self.anchor_indices.shape == self.positive_indices.shape == self.provenance.shape):
            raise ContractViolation("锚点、正样本与来源标记长度不一致")
        if np.any(self.anchor_indices == self.positive_indices):
            bad = int(np.flatnonzero(self.anchor_indices == self.positive_indices)[0])
            raise ContractViolation(f"第 {bad} 对的锚点与正样本相同")

    @property
    def size(self) -> int:
        return int(self.anchor_indices.size)

    def check_labels(self, labels: np.ndarray) -> None:
        """有标注的同类对必须共享真值标签"""
        mask = self.provenance == LABELED_SAME_CLASS
        a = labels[self.anchor_indices[mask]]
        p = labels[self.positive_indices[mask]]
        if np.any(a != p):
            raise ContractViolation("同类正样本对的标签不一致")


# ---------------------------------------------------------------------------
# 各项损失（值 + 对输入概率行的梯度）
# ---------------------------------------------------------------------------

def _proto_terms(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    n = a.shape[0]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.sum(a * b, axis=1) / (na * nb)
    value = float(np.mean(-np.log(np.clip(cos, LOG_EPS, 1.0))))

    coef = np.where(cos > LOG_EPS, -1.0 / (n * np.maximum(cos, LOG_EPS)), 0.0)
    inv = 1.0 / (na * nb)
    grad_a = coef[:, None] * (b * inv[:, None] - cos[:, None] * a / (na * na)[:, None])
    grad_b = coef[:, None] * (a * inv[:, None] - cos[:, None] * b / (nb * nb)[:, None])
    return value, grad_a, grad_b


def _group_terms(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    n = a.shape[0]
    la = np.log(np.maximum(a, LOG_EPS))
    lb = np.log(np.maximum(b, LOG_EPS))
    value = float(np.mean(-(np.sum(b * la, axis=1) + np.sum(a * lb, axis=1))))

    ratio_a = np.where(a > LOG_EPS, b / np.maximum(a, LOG_EPS), 0.0)
    ratio_b = np.where(b > LOG_EPS, a / np.maximum(b, LOG_EPS), 0.0)
    grad_a = -(lb + ratio_a) / n
    grad_b = -(la + ratio_b) / n
    return value, grad_a, grad_b


def _reg_terms(p_all: np.ndarray, prior: np.ndarray) -> Tuple[float, np.ndarray]:
    rows = p_all.shape[0]
    p_proto = p_all.mean(axis=0)
    log_ratio = np.log(p_proto / prior)
    value = max(float(np.sum(p_proto * log_ratio)), 0.0)
    grad = np.broadcast_to((log_ratio + 1.0) / rows, p_all.shape).copy()
    return value, grad


def _ce_terms(q: np.ndarray, group_labels: np.ndarray) -> Tuple[float, np.ndarray]:
    m = q.shape[0]
    grad = np.zeros_like(q)
    if m == 0:
        return 0.0, grad
    picked = q[np.arange(m), group_labels]
    value = float(np.mean(-np.log(np.maximum(picked, LOG_EPS))))
    grad[np.arange(m), group_labels] = np.where(
        picked > LOG_EPS, -1.0 / (m * np.maximum(picked, LOG_EPS)), 0.0)
    return value, grad


def _check_pair_shapes(a: AssignmentMatrix, b: AssignmentMatrix, level: str) -> None:
    if a.level != level or b.level != level:
        raise ContractViolation(f"需要 {level} 级分配矩阵")
    if a.shape != b.shape:
        raise ContractViolation(f"锚点与正样本分配形状不一致: {a.shape} vs {b.shape}")


def proto_loss(p_anchor: AssignmentMatrix, p_positive: AssignmentMatrix) -> float:
    """原型级相似损失：-log cos(p_i, p_i') 的均值"""
    _check_pair_shapes(p_anchor, p_positive, PROTOTYPE_LEVEL)
    return _proto_terms(p_anchor.rows, p_positive.rows)[0]


def group_loss(q_anchor: AssignmentMatrix, q_positive: AssignmentMatrix) -> float:
    """组级相似损失：互为伪标签的对称交叉熵"""
    _check_pair_shapes(q_anchor, q_positive, GROUP_LEVEL)
    return _group_terms(q_anchor.rows, q_positive.rows)[0]


def reg_loss(p_all: AssignmentMatrix, prior: np.ndarray) -> float:
    """KL(p_proto ‖ p_prior)，p_proto 为整批原型级分配的列均值"""
    if p_all.level != PROTOTYPE_LEVEL:
        raise ContractViolation("reg_loss 需要原型级分配")
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (p_all.shape[1],):
        raise ContractViolation(f"先验长度 {prior.shape} 与原型数 {p_all.shape[1]} 不符")
    return _reg_terms(p_all.rows, prior)[0]


def ce_loss(q_labeled: AssignmentMatrix, group_labels: np.ndarray) -> float:
    """多原型交叉熵：-log q^(y) 的均值，y 为匹配得到的组号"""
    if q_labeled.level != GROUP_LEVEL:
        raise ContractViolation("ce_loss 需要组级分配")
    group_labels = np.asarray(group_labels, dtype=np.int64)
    if group_labels.shape != (q_labeled.shape[0],):
        raise ContractViolation("组标签数量与分配行数不一致")
    if group_labels.size and (group_labels.min() < 0 or group_labels.max() >= q_labeled.shape[1]):
        raise ContractViolation(f"组标签越界: 组数 {q_labeled.shape[1]}")
    return _ce_terms(q_labeled.rows, group_labels)[0]


# ---------------------------------------------------------------------------
# 组合目标
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    """总损失与对两个视图嵌入、原型的梯度"""
    breakdown: LossBreakdown
    grad_view: np.ndarray
    grad_aug: np.ndarray
    grad_prototypes: np.ndarray
    p_view: Optional[np.ndarray] = None


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=1, keepdims=True))


def total_loss_and_grads(z_view: np.ndarray, z_aug: np.ndarray, bank: PrototypeBank,
                         partition: GroupPartition, pairing: PositivePairing,
                         group_labels: np.ndarray, lambda1: float = 1.0, lambda2: float = 1.0,
                         use_proto: bool = True, use_group: bool = True) -> LossResult:
    """计算总损失与解析梯度

    Args:
        z_view: 原始视图嵌入 (B×d)，提供正样本、L_reg 与 L_ce
        z_aug: 增强视图嵌入 (B×d)，提供锚点
        pairing: 锚点下标指向 z_aug，正样本下标指向 z_view
        group_labels: 每个样本匹配得到的组号，未标注为 -1
        use_proto / use_group: 消融开关，关闭的项记为 0 且不产生梯度
    """
    z_view = np.asarray(z_view, dtype=np.float64)
    z_aug = np.asarray(z_aug, dtype=np.float64)
    if z_view.shape != z_aug.shape or z_view.shape[1] != bank.dim:
        raise ContractViolation(f"嵌入形状不一致: {z_view.shape}, {z_aug.shape}, 原型维度 {bank.dim}")
    if partition.size != bank.size:
        raise ContractViolation(f"划分覆盖 {partition.size} 个原型，原型库有 {bank.size} 个")
    group_labels = np.asarray(group_labels, dtype=np.int64)
    if group_labels.shape != (z_view.shape[0],):
        raise ContractViolation("组标签长度与批大小不一致")

    tau = bank.temperature
    C = bank.vectors
    membership = partition.membership_matrix()

    p_view = softmax_rows(z_view @ C.T / tau)
    p_aug = softmax_rows(z_aug @ C.T / tau)
    g_view = np.zeros_like(p_view)
    g_aug = np.zeros_like(p_aug)

    anchors = p_aug[pairing.anchor_indices]
    positives = p_view[pairing.positive_indices]

    proto_value = 0.0
    if use_proto and pairing.size:
        proto_value, ga, gb = _proto_terms(anchors, positives)
        np.add.at(g_aug, pairing.anchor_indices, ga)
        np.add.at(g_view, pairing.positive_indices, gb)

    group_value = 0.0
    if use_group and pairing.size:
        group_value, ga, gb = _group_terms(anchors @ membership, positives @ membership)
        np.add.at(g_aug, pairing.anchor_indices, ga @ membership.T)
        np.add.at(g_view, pairing.positive_indices, gb @ membership.T)

    reg_value, gr = _reg_terms(p_view, prototype_prior(partition))
    if lambda1 != 0:
        g_view += lambda1 * gr

    labeled = np.flatnonzero(group_labels >= 0)
    if labeled.size and group_labels[labeled].max() >= partition.group_count:
        raise ContractViolation(f"组标签越界: 组数 {partition.group_count}")
    ce_value, gq = _ce_terms(p_view[labeled] @ membership, group_labels[labeled])
    if lambda2 != 0 and labeled.size:
        g_view[labeled] += lambda2 * (gq @ membership.T)

    breakdown = LossBreakdown.combine(proto_value, group_value, reg_value, ce_value, lambda1, lambda2)

    ds_view = _softmax_backward(p_view, g_view) / tau
    ds_aug = _softmax_backward(p_aug, g_aug) / tau
    grad_view = ds_view @ C
    grad_aug = ds_aug @ C
    grad_prototypes = ds_view.T @ z_view + ds_aug.T @ z_aug

    return LossResult(breakdown=breakdown, grad_view=grad_view, grad_aug=grad_aug,
                      grad_prototypes=grad_prototypes, p_view=p_view)
