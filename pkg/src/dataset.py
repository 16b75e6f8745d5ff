"""
开放世界数据：合成高斯团数据、CSV 读写、已知/新类与标注划分、增强视图。
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import logging

import numpy as np
from sklearn.model_selection import train_test_split

from src.utils.errors import ContractViolation, DataGenerationError, DataParseError, SplitError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]


@dataclass
class FeatureBatch:
    """一个小批量的输入向量"""
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    is_labeled: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ContractViolation(f"特征必须是二维矩阵: {self.features.shape}")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


@dataclass
class SplitConfig:
    """开放世界划分配置"""
    known_class_fraction: float = 0.5
    label_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.known_class_fraction <= 1:
            raise ContractViolation(f"known_class_fraction 必须在 (0,1] 内: {self.known_class_fraction}")
        if not 0 <= self.label_fraction <= 1:
            raise ContractViolation(f"label_fraction 必须在 [0,1] 内: {self.label_fraction}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], seed: int = 0) -> 'SplitConfig':
        return cls(
            known_class_fraction=data.get('known_class_fraction', 0.5),
            label_fraction=data.get('label_fraction', 0.1),
            seed=seed,
        )


@dataclass
class Dataset:
    """带真值标签与已知/标注掩码的数据集

    labels 总是真值（仅用于评估与已标注样本）；is_labeled 之外的标签在训练中不可见。
    """
    features: np.ndarray
    labels: np.ndarray
    is_labeled: Optional[np.ndarray] = None
    is_known: Optional[np.ndarray] = None
    class_ids: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractViolation(f"特征 {self.features.shape} 与标签数 {n} 不一致")
        if self.is_labeled is None:
            self.is_labeled = np.zeros(n, dtype=bool)
        if self.is_known is None:
            self.is_known = np.zeros(n, dtype=bool)
        self.is_labeled = np.asarray(self.is_labeled, dtype=bool)
        self.is_known = np.asarray(self.is_known, dtype=bool)
        if self.class_ids is None:
            self.class_ids = np.unique(self.labels)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

        if self.is_labeled.shape != (n,) or self.is_known.shape != (n,):
            raise ContractViolation("掩码长度与样本数不一致")
        if np.any(self.is_labeled & ~self.is_known):
            raise ContractViolation("只有已知类样本可以被标注 (is_labeled ⊆ is_known)")
        if np.any(self.labels < 0):
            raise ContractViolation("类别编号必须是非负整数")
        missing = np.setdiff1d(np.unique(self.labels), self.class_ids)
        if missing.size:
            raise ContractViolation(f"标签 {missing.tolist()} 不在类别元数据中")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def m(self) -> int:
        """已标注样本数"""
        return int(self.is_labeled.sum())

    @property
    def n(self) -> int:
        """未标注样本数"""
        return self.size - self.m

    @property
    def known_classes(self) -> np.ndarray:
        return np.unique(self.labels[self.is_known])

    @property
    def labeled_classes(self) -> np.ndarray:
        return np.unique(self.labels[self.is_labeled])

    @property
    def novel_classes(self) -> np.ndarray:
        return np.setdiff1d(self.class_ids, self.known_classes)

    def subset(self, indices: np.ndarray) -> 'Dataset':
        """按索引取子集，保留完整的类别元数据"""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            is_labeled=self.is_labeled[indices],
            is_known=self.is_known[indices],
            class_ids=self.class_ids,
            metadata=dict(self.metadata),
        )

    def batch(self, indices: np.ndarray) -> FeatureBatch:
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureBatch(
            features=self.features[indices],
            labels=self.labels[indices],
            indices=indices,
            is_labeled=self.is_labeled[indices],
        )

    def full_batch(self) -> FeatureBatch:
        return self.batch(np.arange(self.size))


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def nearest_centroid_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """以经验类均值为中心的最近中心分类准确率"""
    classes = np.unique(labels)
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(d2, axis=1)]
    return float(np.mean(predicted == labels))


def generate_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                   spread: float, seed: int = 0, max_retries: int = 1000) -> Dataset:
    """生成各向同性高斯团数据

    类均值落在半径为 separation 的球面上，两两距离不小于 separation（拒绝采样）。
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ContractViolation(f"num_classes/per_class/dim 必须为正: {num_classes}/{per_class}/{dim}")
    if not (separation > 0 and spread > 0):
        raise ContractViolation(f"separation 与 spread 必须大于0: {separation}, {spread}")

    rng = np.random.default_rng(seed)
    means = []
    for c in range(num_classes):
        for _ in range(max_retries):
            direction = rng.standard_normal(dim)
            norm = np.linalg.norm(direction)
            if norm == 0:
                continue
            candidate = direction / norm * separation
            if all(np.linalg.norm(candidate - m) >= separation for m in means):
                means.append(candidate)
                break
        else:
            raise DataGenerationError(
                f"第 {c} 个类均值在 {max_retries} 次尝试后仍无法满足间隔要求，"
                f"请增大 dim 或减少 num_classes")

    means_arr = np.stack(means)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    features = means_arr[labels] + spread * rng.standard_normal((labels.size, dim))

    acc = nearest_centroid_accuracy(features, labels)
    logger.info(f"生成高斯团数据: {num_classes} 类 × {per_class}, dim={dim}, 最近中心准确率 {acc:.4f}")

    return Dataset(
        features=features,
        labels=labels,
        metadata={
            'source': 'blobs',
            'num_classes': num_classes,
            'per_class': per_class,
            'dim': dim,
            'separation': float(separation),
            'spread': float(spread),
            'seed': seed,
            'nearest_centroid_accuracy': acc,
        },
    )


def _ceil_fraction(fraction: float, count: int) -> int:
    # 先四舍五入再取上整，避免 0.3*10=3.0000000000000004 之类的浮点误差
    return int(math.ceil(round(fraction * count, 9)))


def apply_split(dataset: Dataset, cfg: SplitConfig) -> Dataset:
    """按类别编号排序取前若干类为已知类，并在每个已知类内按比例随机标注"""
    classes = np.sort(dataset.class_ids)
    n_known = max(1, _ceil_fraction(cfg.known_class_fraction, classes.size))
    known = classes[:n_known]

    is_known = np.isin(dataset.labels, known)
    is_labeled = np.zeros(dataset.size, dtype=bool)

    rng = np.random.default_rng(cfg.seed)
    for c in known:
        members = np.flatnonzero(dataset.labels == c)
        if cfg.label_fraction == 0 or members.size == 0:
            continue
        n_labeled = min(members.size, _ceil_fraction(cfg.label_fraction, members.size))
        if n_labeled == 0:
            raise SplitError(f"已知类 {int(c)} 在 label_fraction={cfg.label_fraction} 下没有标注样本")
        chosen = rng.choice(members, size=n_labeled, replace=False)
        is_labeled[chosen] = True

    logger.info(f"开放世界划分: 已知类 {known.tolist()}, 标注样本 {int(is_labeled.sum())}/{dataset.size}")
    return replace(dataset, is_known=is_known, is_labeled=is_labeled,
                   metadata={**dataset.metadata, 'split': {
                       'known_class_fraction': cfg.known_class_fraction,
                       'label_fraction': cfg.label_fraction,
                       'seed': cfg.seed,
                   }})


def train_eval_split(dataset: Dataset, eval_fraction: float,
                     seed: int = 0) -> Tuple[Dataset, Dataset]:
    """按类别分层的训练/留出划分；eval_fraction=0 时在训练集上评估"""
    if eval_fraction <= 0:
        return dataset, dataset
    indices = np.arange(dataset.size)
    train_idx, eval_idx = train_test_split(
        indices, test_size=eval_fraction, stratify=dataset.labels, random_state=seed)
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(eval_idx))


def make_views(batch: FeatureBatch, noise_std: float, seed: SeedLike = None) -> FeatureBatch:
    """加性各向同性高斯噪声增强"""
    if noise_std < 0:
        raise ContractViolation(f"noise_std 不能为负数: {noise_std}")
    if noise_std == 0:
        return replace(batch, features=batch.features.copy())
    noise = _rng(seed).standard_normal(batch.features.shape) * noise_std
    return replace(batch, features=batch.features + noise)


def load_csv(path: Union[str, Path], has_header: bool = False) -> Dataset:
    """读取 `label,feat_0,...` 格式的 CSV，所有样本初始为未知/未标注"""
    path = Path(path)
    labels = []
    rows = []
    width = None

    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        for line_number, row in enumerate(reader, start=1):
            if has_header and line_number == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataParseError(f"至少需要标签列和一个特征列，实际 {len(row)} 列", line_number)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataParseError(f"列数 {len(row)} 与首行列数 {width} 不一致", line_number)
            try:
                label = int(row[0].strip())
            except ValueError:
                raise DataParseError(f"标签不是整数: {row[0]!r}", line_number) from None
            if label < 0:
                raise DataParseError(f"标签不能为负数: {label}", line_number)
            try:
                values = [float(cell) for cell in row[1:]]
            except ValueError as e:
                raise DataParseError(f"特征不是数值: {e}", line_number) from None
            if not all(math.isfinite(v) for v in values):
                raise DataParseError("特征包含 NaN/Inf", line_number)
            labels.append(label)
            rows.append(values)

    if not rows:
        raise DataParseError(f"文件没有数据行: {path}", 1)

    logger.info(f"读取CSV完成: {path}, 样本 {len(rows)}, 维度 {width - 1}")
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        metadata={'source': 'csv', 'path': str(path)},
    )


def write_csv(dataset: Dataset, path: Union[str, Path], header: bool = True) -> Path:
    """按线格式写出数据集（浮点数使用可往返的最短表示）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        if header:
            writer.writerow(['label'] + [f"feat_{j}" for j in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])
    logger.info(f"数据集已写出: {path} ({dataset.size} 行)")
    return path


def write_masks(dataset: Dataset, path: Union[str, Path]) -> Path:
    """写出 `index,is_known,is_labeled` 掩码旁车文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['index', 'is_known', 'is_labeled'])
        for i in range(dataset.size):
            writer.writerow([i, int(dataset.is_known[i]), int(dataset.is_labeled[i])])
    return path


def load_masks(dataset: Dataset, path: Union[str, Path]) -> Dataset:
    """读取掩码旁车文件并应用到数据集"""
    path = Path(path)
    is_known = np.zeros(dataset.size, dtype=bool)
    is_labeled = np.zeros(dataset.size, dtype=bool)
    seen = np.zeros(dataset.size, dtype=bool)

    with open(path, 'r', encoding='utf-8', newline='') as f:
        for line_number, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if line_number == 1 and not row[0].strip().isdigit():
                continue  # 表头
            if len(row) != 3:
                raise DataParseError(f"掩码行需要 3 列，实际 {len(row)} 列", line_number)
            try:
                index, known, labeled = (int(cell) for cell in row)
            except ValueError:
                raise DataParseError(f"掩码必须是整数: {row}", line_number) from None
            if not 0 <= index < dataset.size:
                raise DataParseError(f"样本索引越界: {index}", line_number)
            if known not in (0, 1) or labeled not in (0, 1):
                raise DataParseError(f"掩码只能是 0/1: {row}", line_number)
            is_known[index] = bool(known)
            is_labeled[index] = bool(labeled)
            seen[index] = True

    if not seen.all():
        raise DataParseError(f"掩码文件缺少 {int((~seen).sum())} 个样本", line_number=0)
    return replace(dataset, is_known=is_known, is_labeled=is_labeled)
