"""
训练流程：小批量正样本配对、损失与梯度、Adam 更新与原型投影、
每轮结束后的渐进式分组、类↔组匹配刷新与留出集评估。
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np
from tqdm import tqdm

from src.dataset import Dataset, FeatureBatch, make_views, train_eval_split
from src.encoder import EmbeddingBatch, EncoderConfig, encode, encode_backward, init_params
from src.grouping import (
    ClassGroupMatching,
    estimate_class_count,
    jaccard_affinity,
    link_groups,
    match_classes_to_groups,
    representing_sets,
    reseed_sources,
    tune_threshold,
)
from src.losses import (
    LABELED_SAME_CLASS,
    UNLABELED_NEAREST,
    LossBreakdown,
    LossResult,
    PositivePairing,
    total_loss_and_grads,
)
from src.metrics import EvalReport, open_world_report
from src.numerics import AdamState, ParamVector, adam_step
from src.prototypes import (
    AssignmentMatrix,
    GroupPartition,
    PrototypeBank,
    assign_groups,
    assign_prototypes,
    project_prototypes,
)
from src.utils.errors import ContractViolation, InfeasibleMatchingError, TrainingAbortError
from src.utils.logger import LoggerMixin

logger = logging.getLogger(__name__)

THRESHOLD_POLICIES = ('labeled', 'fixed')


@dataclass(frozen=True)
class TrainConfig:
    """训练超参数"""
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.002
    temperature: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    kappa: int = 5
    num_prototypes: int = 50
    warmup_epochs: int = 0
    noise_std: float = 0.5
    eval_fraction: float = 0.2
    threshold_policy: str = 'labeled'
    fixed_threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    use_proto_loss: bool = True
    use_group_loss: bool = True
    reseed_empty: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractViolation(f"epochs 必须为正: {self.epochs}")
        if self.batch_size < 2:
            raise ContractViolation(f"batch_size 必须 >= 2: {self.batch_size}")
        if not 1 <= self.kappa <= self.num_prototypes:
            raise ContractViolation(f"κ={self.kappa} 必须在 [1, K={self.num_prototypes}] 内")
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ContractViolation(f"未知的阈值策略: {self.threshold_policy}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], seed: int = 0) -> 'TrainConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**{**known, 'seed': seed})


def derive_seeds(seed: int) -> Dict[str, int]:
    """由一个主种子派生各环节的独立种子"""
    names = ('split', 'encoder', 'prototypes', 'shuffle', 'holdout', 'reseed')
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return {name: int(s) for name, s in zip(names, states)}


@dataclass
class TrainState:
    """模型状态：编码器参数、原型、当前划分、优化器与匹配"""
    params: ParamVector
    bank: PrototypeBank
    partition: GroupPartition
    adam: AdamState
    matching: ClassGroupMatching
    encoder_cfg: EncoderConfig
    delta: Optional[float] = None
    epoch: int = 0

    def joint_vector(self) -> ParamVector:
        return np.concatenate([self.params, self.bank.vectors.ravel()])

    def split_joint(self, joint: ParamVector) -> Tuple[ParamVector, np.ndarray]:
        size = self.params.size
        return joint[:size].copy(), joint[size:].reshape(self.bank.vectors.shape).copy()


@dataclass
class RunRecord:
    """一次完整运行的记录"""
    rows: List[Dict[str, Any]]
    estimated_class_count: int
    config: Dict[str, Any]
    seed: int
    final_report: Optional[EvalReport]
    group_counts: List[int] = field(default_factory=list)
    state: Optional[TrainState] = field(default=None, repr=False, compare=False)
    eval_set: Optional[Dataset] = field(default=None, repr=False, compare=False)


def nearest_neighbors(vectors: np.ndarray) -> np.ndarray:
    """批内余弦最近邻（排除自身，并列取下标小者）；输入行已单位化"""
    sims = vectors @ vectors.T
    np.fill_diagonal(sims, -np.inf)
    return np.argmax(sims, axis=1)


def build_pairs(batch: FeatureBatch, embeddings: EmbeddingBatch,
                rng: np.random.Generator) -> PositivePairing:
    """每个样本都是锚点：有标注的锚点在批内随机选同类的另一标注样本，
    其余（含无同类伙伴的标注锚点）取余弦最近邻"""
    size = batch.size
    if size < 2:
        raise ContractViolation("配对需要至少 2 个样本的批次")
    if embeddings.size != size:
        raise ContractViolation("嵌入数量与批大小不一致")

    positives = nearest_neighbors(embeddings.vectors)
    provenance = np.full(size, UNLABELED_NEAREST, dtype=object)

    is_labeled = batch.is_labeled if batch.is_labeled is not None else np.zeros(size, dtype=bool)
    labeled = np.flatnonzero(is_labeled)
    if labeled.size:
        labels = batch.labels
        for i in labeled:
            mates = labeled[(labels[labeled] == labels[i]) & (labeled != i)]
            if mates.size:
                positives[i] = rng.choice(mates)
                provenance[i] = LABELED_SAME_CLASS

    return PositivePairing(anchor_indices=np.arange(size), positive_indices=positives,
                           provenance=provenance)


def batch_group_labels(batch: FeatureBatch, matching: ClassGroupMatching) -> np.ndarray:
    """已标注样本的匹配组号，其余为 -1"""
    group_labels = np.full(batch.size, -1, dtype=np.int64)
    if batch.is_labeled is None or not matching.class_to_group:
        return group_labels
    labeled = np.flatnonzero(batch.is_labeled)
    if labeled.size:
        group_labels[labeled] = matching.group_labels_for(batch.labels[labeled])
    return group_labels


def joint_objective(joint: ParamVector, view: FeatureBatch, aug: FeatureBatch,
                    pairing: PositivePairing, group_labels: np.ndarray,
                    partition: GroupPartition, encoder_cfg: EncoderConfig,
                    config: TrainConfig, num_prototypes: int) -> Tuple[LossResult, ParamVector]:
    """总损失及其对 [编码器参数, 原型] 拼接向量的梯度"""
    size = encoder_cfg.param_count
    params = joint[:size]
    prototypes = joint[size:].reshape(num_prototypes, -1)
    bank = PrototypeBank(vectors=prototypes, temperature=config.temperature)

    z_view = encode(view, params, encoder_cfg).vectors
    z_aug = encode(aug, params, encoder_cfg).vectors
    result = total_loss_and_grads(
        z_view, z_aug, bank, partition, pairing, group_labels,
        lambda1=config.lambda1, lambda2=config.lambda2,
        use_proto=config.use_proto_loss, use_group=config.use_group_loss)

    grad_params = (encode_backward(view, params, result.grad_view, encoder_cfg)
                   + encode_backward(aug, params, result.grad_aug, encoder_cfg))
    return result, np.concatenate([grad_params, result.grad_prototypes.ravel()])


def _batch_slices(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """按批切分；长度为 1 的尾批并入前一批"""
    slices = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    if len(slices) > 1 and slices[-1].size < 2:
        tail = slices.pop()
        slices[-1] = np.concatenate([slices[-1], tail])
    return slices


class Trainer(LoggerMixin):
    """训练器"""

    def __init__(self, config: TrainConfig, encoder_section: Optional[Dict[str, Any]] = None,
                 progress: bool = False, dump_dir: Optional[Path] = None):
        self.config = config
        self.encoder_section = dict(encoder_section or {})
        self.progress = progress
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.seeds = derive_seeds(config.seed)

    # ------------------------------------------------------------------
    # 初始化
    # ------------------------------------------------------------------

    def init_state(self, train_set: Dataset) -> TrainState:
        """初始化编码器、原型（全单例划分）与初始匹配"""
        known_count = int(train_set.known_classes.size)
        if self.config.num_prototypes < known_count:
            raise ContractViolation(
                f"原型数 K={self.config.num_prototypes} 少于已知类别数 {known_count}")

        encoder_cfg = EncoderConfig.from_dict(self.encoder_section, input_dim=train_set.dim,
                                              seed=self.seeds['encoder'])
        params = init_params(encoder_cfg)
        bank = PrototypeBank.random(self.config.num_prototypes, encoder_cfg.embed_dim,
                                    temperature=self.config.temperature,
                                    seed=self.seeds['prototypes'])
        partition = GroupPartition.singletons(bank.size)
        adam = AdamState.zeros(params.size + bank.vectors.size,
                               learning_rate=self.config.learning_rate,
                               beta1=self.config.beta1, beta2=self.config.beta2,
                               epsilon=self.config.adam_epsilon)
        state = TrainState(params=params, bank=bank, partition=partition, adam=adam,
                           matching=ClassGroupMatching.empty(), encoder_cfg=encoder_cfg)
        state.matching = self._refresh_matching(state, train_set, state.matching)
        return state

    # ------------------------------------------------------------------
    # 单轮训练
    # ------------------------------------------------------------------

    def train_epoch(self, state: TrainState, train_set: Dataset,
                    rng: np.random.Generator) -> Tuple[TrainState, Dict[str, Any]]:
        """一轮训练；返回更新后的状态与该轮的日志行（不含评估分数）"""
        if train_set.size < 2:
            raise ContractViolation("训练集至少需要 2 个样本")
        cfg = self.config
        epoch = state.epoch + 1
        order = rng.permutation(train_set.size)

        totals = {'proto': 0.0, 'group': 0.0, 'reg': 0.0, 'ce': 0.0}
        slices = _batch_slices(order, cfg.batch_size)
        for batch_index, indices in enumerate(slices):
            view = train_set.batch(indices)
            aug = make_views(view, cfg.noise_std, rng)
            z_view = encode(view, state.params, state.encoder_cfg)
            pairing = build_pairs(view, z_view, rng)
            group_labels = batch_group_labels(view, state.matching)

            joint = state.joint_vector()
            result, grads = joint_objective(joint, view, aug, pairing, group_labels,
                                            state.partition, state.encoder_cfg, cfg,
                                            state.bank.size)
            if not result.breakdown.is_finite():
                self._abort(epoch, batch_index, result.breakdown)

            updated = adam_step(joint, grads, state.adam)
            state.params, prototypes = state.split_joint(updated)
            state.bank = project_prototypes(PrototypeBank(prototypes, cfg.temperature))

            for key in totals:
                totals[key] += getattr(result.breakdown, key)

        means = {key: value / len(slices) for key, value in totals.items()}
        breakdown = LossBreakdown.combine(means['proto'], means['group'], means['reg'],
                                          means['ce'], cfg.lambda1, cfg.lambda2)

        state.epoch = epoch
        fallback = self.regroup(state, train_set)
        row = {
            'epoch': epoch,
            **breakdown.to_dict(),
            'group_count': state.partition.group_count,
            'delta': state.delta,
            'labeled_acc': state.matching.accuracy,
            'threshold_fallback': fallback,
            'batches': len(slices),
        }
        return state, row

    def _abort(self, epoch: int, batch_index: int, breakdown: LossBreakdown) -> None:
        diagnostics = {'epoch': epoch, 'batch_index': batch_index, 'loss': breakdown.to_dict()}
        dump_path = None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            dump_path = self.dump_dir / 'abort_diagnostics.json'
            with open(dump_path, 'w', encoding='utf-8') as f:
                json.dump(diagnostics, f, indent=2, ensure_ascii=False, sort_keys=True, default=str)
        self.log_with_context('error', "损失非有限，训练中止", **diagnostics)
        raise TrainingAbortError(f"第 {epoch} 轮第 {batch_index} 批损失非有限",
                                 diagnostics=diagnostics,
                                 dump_path=str(dump_path) if dump_path else None)

    # ------------------------------------------------------------------
    # 分组与匹配
    # ------------------------------------------------------------------

    def _prototype_assignments(self, state: TrainState, dataset: Dataset) -> AssignmentMatrix:
        z = encode(dataset.full_batch(), state.params, state.encoder_cfg)
        return assign_prototypes(z, state.bank)

    def _refresh_matching(self, state: TrainState, train_set: Dataset,
                          previous: ClassGroupMatching) -> ClassGroupMatching:
        if train_set.m == 0:
            return ClassGroupMatching.empty()
        labeled = np.flatnonzero(train_set.is_labeled)
        p_labeled = self._prototype_assignments(state, train_set.subset(labeled))
        try:
            return match_classes_to_groups(assign_groups(p_labeled, state.partition),
                                           train_set.labels[labeled])
        except InfeasibleMatchingError as e:
            self.log_with_context('warning', "类↔组匹配不可行，沿用上一次匹配",
                                  epoch=state.epoch, reason=str(e))
            return previous

    def _reseed_empty(self, state: TrainState, z: EmbeddingBatch,
                      p_all: AssignmentMatrix) -> AssignmentMatrix:
        """把没有代表样本的原型移到训练样本的嵌入上，并清零其 Adam 矩估计"""
        sets = representing_sets(p_all, self.config.kappa)
        rng = np.random.default_rng([self.seeds['reseed'], state.epoch])
        instance_groups = np.argmax(assign_groups(p_all, state.partition).rows, axis=1)
        sources = reseed_sources(sets, instance_groups, state.partition, rng)
        if not sources:
            return p_all

        vectors = state.bank.vectors.copy()
        offset, dim = state.params.size, state.bank.dim
        for k, i in sources.items():
            vectors[k] = z.vectors[i]
            rows = slice(offset + k * dim, offset + (k + 1) * dim)
            state.adam.first_moment[rows] = 0.0
            state.adam.second_moment[rows] = 0.0
        state.bank = project_prototypes(PrototypeBank(vectors, state.bank.temperature))
        self.log_with_context('info', f"重新放置 {len(sources)} 个空原型",
                              epoch=state.epoch, prototypes=sorted(sources))
        return assign_prototypes(z, state.bank)

    def regroup(self, state: TrainState, train_set: Dataset) -> bool:
        """重新计算代表样本集合与亲和度，选择阈值并更新划分；返回是否退回旧划分"""
        cfg = self.config
        fallback = False
        if state.epoch > cfg.warmup_epochs:
            z = encode(train_set.full_batch(), state.params, state.encoder_cfg)
            p_all = assign_prototypes(z, state.bank)
            if cfg.reseed_empty:
                p_all = self._reseed_empty(state, z, p_all)
            affinity = jaccard_affinity(representing_sets(p_all, cfg.kappa))
            labeled = np.flatnonzero(train_set.is_labeled) if train_set.m else np.zeros(0, dtype=np.int64)

            if cfg.threshold_policy == 'labeled' and labeled.size:
                p_labeled = p_all.take(labeled)
                selection = tune_threshold(affinity, lambda part: assign_groups(p_labeled, part),
                                           train_set.labels[labeled])
                if selection.feasible:
                    state.partition, state.delta = selection.partition, selection.delta
                else:
                    fallback = True
            else:
                candidate = link_groups(affinity, cfg.fixed_threshold)
                if labeled.size and candidate.group_count < train_set.labeled_classes.size:
                    fallback = True
                else:
                    state.partition, state.delta = candidate, float(cfg.fixed_threshold)

            if fallback:
                self.log_with_context('warning', "所有候选划分的组数都少于已知类别数，保留上一轮划分",
                                      epoch=state.epoch, group_count=state.partition.group_count)

        state.matching = self._refresh_matching(state, train_set, state.matching)
        self.log_with_context('info', f"第 {state.epoch} 轮分组完成",
                              epoch=state.epoch, delta=state.delta,
                              group_count=state.partition.group_count,
                              labeled_acc=state.matching.accuracy)
        return fallback

    # ------------------------------------------------------------------
    # 评估与完整运行
    # ------------------------------------------------------------------

    def group_assignments(self, state: TrainState, dataset: Dataset) -> AssignmentMatrix:
        return assign_groups(self._prototype_assignments(state, dataset), state.partition)

    def evaluate(self, state: TrainState, eval_set: Dataset) -> EvalReport:
        """在留出集上评估：预测为组级分配的 argmax"""
        q = self.group_assignments(state, eval_set)
        return open_world_report(q, eval_set.labels, eval_set.is_known, state.matching,
                                 estimate_class_count(state.partition))

    def run(self, dataset: Dataset, config_snapshot: Optional[Dict[str, Any]] = None) -> RunRecord:
        """执行全部轮次，每轮在留出集上评估"""
        cfg = self.config
        train_set, eval_set = train_eval_split(dataset, cfg.eval_fraction, seed=self.seeds['holdout'])
        state = self.init_state(train_set)
        rng = np.random.default_rng(self.seeds['shuffle'])

        rows: List[Dict[str, Any]] = []
        group_counts = [state.partition.group_count]
        report: Optional[EvalReport] = None

        self.logger.info(f"开始训练: 训练样本 {train_set.size}, 留出样本 {eval_set.size}, "
                         f"K={cfg.num_prototypes}, 轮数 {cfg.epochs}")
        epochs = tqdm(range(cfg.epochs), desc='训练', unit='epoch', disable=not self.progress)
        for _ in epochs:
            state, row = self.train_epoch(state, train_set, rng)
            report = self.evaluate(state, eval_set)
            row.update(report.scores())
            rows.append(row)
            group_counts.append(state.partition.group_count)
            epochs.set_postfix(groups=state.partition.group_count, all_acc=f"{report.all_acc:.3f}")

        estimated = estimate_class_count(state.partition)
        self.logger.info(f"训练完成: 估计类别数 {estimated}, all_acc={report.all_acc:.4f}")
        return RunRecord(
            rows=rows,
            estimated_class_count=estimated,
            config=dict(config_snapshot or {}),
            seed=cfg.seed,
            final_report=report,
            group_counts=group_counts,
            state=state,
            eval_set=eval_set,
        )
