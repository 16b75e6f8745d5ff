# tests/unit/test_trainer.py
import json
from dataclasses import replace

import numpy as np
import pytest

from src.dataset import FeatureBatch, SplitConfig, apply_split, generate_blobs
from src.encoder import EmbeddingBatch, EncoderConfig, encode, init_params
from src.grouping import ClassGroupMatching
from src.losses import LABELED_SAME_CLASS, UNLABELED_NEAREST, LossBreakdown, LossResult, PositivePairing
from src.numerics import finite_diff_gradient, relative_error
from src.prototypes import GroupPartition, PrototypeBank
from src.trainer import (
    TrainConfig,
    Trainer,
    _batch_slices,
    batch_group_labels,
    build_pairs,
    derive_seeds,
    joint_objective,
    nearest_neighbors,
)
from src.utils.errors import ContractViolation, TrainingAbortError

pytestmark = pytest.mark.unit

ENCODER_SECTION = {'hidden_dims': [8], 'embed_dim': 4, 'activation': 'tanh'}


def _unit(rows):
    rows = np.asarray(rows, dtype=float)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestTrainConfig:
    """测试训练配置"""

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.num_prototypes, cfg.kappa, cfg.temperature) == (200, 50, 5, 0.1)

    def test_from_dict_ignores_unknown(self):
        cfg = TrainConfig.from_dict({'epochs': 3, 'kappa': 2, 'num_prototypes': 4, 'extra': 1}, seed=8)
        assert (cfg.epochs, cfg.kappa, cfg.seed) == (3, 2, 8)

    @pytest.mark.parametrize("kwargs", [
        {'epochs': 0},
        {'batch_size': 1},
        {'kappa': 0},
        {'kappa': 9, 'num_prototypes': 8},
        {'threshold_policy': 'oracle'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ContractViolation):
            TrainConfig(**kwargs)

    def test_derive_seeds(self):
        seeds = derive_seeds(4)
        assert seeds == derive_seeds(4)
        assert len(set(seeds.values())) == len(seeds)
        assert seeds != derive_seeds(5)


class TestPairing:
    """测试批内正样本配对"""

    @staticmethod
    def _embeddings():
        return EmbeddingBatch(_unit([[1.0, 0.0], [0.0, 1.0], [0.8, 0.6], [0.6, 0.8]]))

    def test_nearest_neighbors(self):
        assert nearest_neighbors(self._embeddings().vectors).tolist() == [2, 3, 3, 2]

    def test_labeled_same_class(self, rng):
        batch = FeatureBatch(np.zeros((4, 2)), labels=np.array([0, 0, 1, 1]),
                             is_labeled=np.array([True, True, False, False]))
        pairing = build_pairs(batch, self._embeddings(), rng)

        assert pairing.positive_indices.tolist() == [1, 0, 3, 2]
        assert pairing.provenance.tolist() == [LABELED_SAME_CLASS, LABELED_SAME_CLASS,
                                               UNLABELED_NEAREST, UNLABELED_NEAREST]
        pairing.check_labels(batch.labels)

    def test_lonely_labeled_uses_neighbor(self, rng):
        batch = FeatureBatch(np.zeros((4, 2)), labels=np.array([0, 1, 1, 1]),
                             is_labeled=np.array([True, True, False, False]))
        pairing = build_pairs(batch, self._embeddings(), rng)

        assert pairing.positive_indices[0] == 2
        assert pairing.provenance[0] == UNLABELED_NEAREST

    def test_every_instance_is_anchor(self, rng):
        embeddings = EmbeddingBatch(_unit(rng.standard_normal((9, 3))))
        batch = FeatureBatch(np.zeros((9, 3)), labels=np.zeros(9, dtype=int), is_labeled=np.ones(9, dtype=bool))
        pairing = build_pairs(batch, embeddings, rng)

        assert pairing.anchor_indices.tolist() == list(range(9))
        assert np.all(pairing.anchor_indices != pairing.positive_indices)

    def test_single_instance(self, rng):
        with pytest.raises(ContractViolation):
            build_pairs(FeatureBatch(np.zeros((1, 2))), EmbeddingBatch(np.array([[1.0, 0.0]])), rng)

    def test_batch_group_labels(self):
        batch = FeatureBatch(np.zeros((3, 1)), labels=np.array([4, 7, 4]),
                             is_labeled=np.array([True, False, True]))
        matching = ClassGroupMatching(class_to_group={4: 2, 7: 0}, per_class_accuracy={},
                                      matched_count=0, total=0)

        assert batch_group_labels(batch, matching).tolist() == [2, -1, 2]
        assert batch_group_labels(batch, ClassGroupMatching.empty()).tolist() == [-1, -1, -1]

    def test_batch_slices_merge_tail(self):
        slices = _batch_slices(np.arange(10), 3)
        assert [s.size for s in slices] == [3, 3, 4]
        assert np.concatenate(slices).tolist() == list(range(10))


class TestJointGradient:
    """端到端梯度：编码器参数与原型"""

    def test_matches_finite_differences(self, rng):
        encoder_cfg = EncoderConfig(input_dim=4, hidden_dims=(5,), embed_dim=8, seed=3)
        config = TrainConfig(num_prototypes=6, kappa=2, temperature=0.5, lambda1=1.0, lambda2=1.0)
        partition = GroupPartition((0, 0, 0, 1, 1, 1))

        for trial in range(20):
            view = FeatureBatch(rng.standard_normal((8, 4)), labels=rng.integers(0, 2, size=8),
                                is_labeled=rng.uniform(size=8) < 0.5)
            aug = FeatureBatch(view.features + 0.3 * rng.standard_normal((8, 4)))
            params = init_params(replace(encoder_cfg, seed=trial))
            bank = PrototypeBank.random(6, 8, temperature=0.5, seed=trial)
            joint = np.concatenate([params, bank.vectors.ravel()])

            positives = (np.arange(8) + 1 + rng.integers(0, 7, size=8)) % 8
            pairing = PositivePairing(np.arange(8), positives)
            group_labels = np.where(view.is_labeled, view.labels, -1)

            def f(x):
                result, _ = joint_objective(x, view, aug, pairing, group_labels, partition,
                                            encoder_cfg, config, 6)
                return result.breakdown.total

            _, analytic = joint_objective(joint, view, aug, pairing, group_labels, partition,
                                          encoder_cfg, config, 6)
            numeric = finite_diff_gradient(f, joint)

            assert np.max(relative_error(analytic, numeric)) <= 1e-4


class TestTrainer:
    """测试训练器"""

    def test_init_state(self, small_dataset, tiny_train_config):
        trainer = Trainer(tiny_train_config, ENCODER_SECTION)
        state = trainer.init_state(small_dataset)

        assert state.partition == GroupPartition.singletons(8)
        assert state.bank.vectors.shape == (8, 4)
        assert np.allclose(np.linalg.norm(state.bank.vectors, axis=1), 1.0)
        assert set(state.matching.class_to_group) == {0, 1}

    def test_too_few_prototypes(self, small_dataset):
        config = TrainConfig(num_prototypes=1, kappa=1)
        with pytest.raises(ContractViolation):
            Trainer(config, ENCODER_SECTION).init_state(small_dataset)

    def test_single_epoch(self, small_dataset, tiny_train_config):
        record = Trainer(replace(tiny_train_config, epochs=1), ENCODER_SECTION).run(small_dataset)

        assert len(record.rows) == 1
        row = record.rows[0]
        assert row['epoch'] == 1
        assert row['total'] == pytest.approx(
            row['proto'] + row['group'] + row['lambda1'] * row['reg'] + row['lambda2'] * row['ce'])
        assert {'known_acc', 'novel_acc', 'all_acc', 'nmi', 'group_count'} <= set(row)
        assert record.group_counts[0] == 8

    def test_run_shapes(self, small_dataset, tiny_train_config):
        record = Trainer(tiny_train_config, ENCODER_SECTION).run(small_dataset)

        assert [row['epoch'] for row in record.rows] == [1, 2]
        assert len(record.group_counts) == 3
        assert record.estimated_class_count == record.group_counts[-1]
        assert 2 <= record.estimated_class_count <= 8
        assert record.final_report.estimated_class_count == record.estimated_class_count
        assert record.eval_set.size == 20
        for row in record.rows:
            assert 0.0 <= row['all_acc'] <= 1.0

    def test_deterministic(self, small_dataset, tiny_train_config):
        first = Trainer(tiny_train_config, ENCODER_SECTION).run(small_dataset)
        second = Trainer(tiny_train_config, ENCODER_SECTION).run(small_dataset)

        assert first.rows == second.rows
        assert first.group_counts == second.group_counts
        assert np.array_equal(first.state.params, second.state.params)

    def test_warmup_keeps_singletons(self, small_dataset, tiny_train_config):
        record = Trainer(replace(tiny_train_config, warmup_epochs=2), ENCODER_SECTION).run(small_dataset)

        assert record.group_counts == [8, 8, 8]
        assert all(row['delta'] is None for row in record.rows)

    def test_label_free_run(self, tiny_train_config):
        dataset = generate_blobs(num_classes=4, per_class=20, dim=6, separation=6.0, spread=1.0, seed=11)
        dataset = apply_split(dataset, SplitConfig(known_class_fraction=0.5, label_fraction=0.0))
        record = Trainer(tiny_train_config, ENCODER_SECTION).run(dataset)

        assert len(record.rows) == 2
        assert all(row['labeled_acc'] == 0.0 for row in record.rows)
        assert record.state.matching == ClassGroupMatching.empty()
        assert record.rows[-1]['delta'] == pytest.approx(tiny_train_config.fixed_threshold)

    def test_fixed_policy(self, small_dataset, tiny_train_config):
        config = replace(tiny_train_config, threshold_policy='fixed', fixed_threshold=1.0)
        record = Trainer(config, ENCODER_SECTION).run(small_dataset)

        # Jaccard 值不超过 1，δ=1 时不连任何边
        assert record.group_counts == [8, 8, 8]

    def _collapsed_state(self, trainer, dataset):
        # 8 个相同原型：每个样本的前 κ=2 都是原型 0、1，其余 6 个原型没有代表样本
        state = trainer.init_state(dataset)
        state.bank = PrototypeBank(np.tile(state.bank.vectors[0], (8, 1)), state.bank.temperature)
        state.adam.first_moment[:] = 1.0
        state.adam.second_moment[:] = 1.0
        state.epoch = 1
        return state

    def test_regroup_reseeds_empty_prototypes(self, small_dataset, tiny_train_config):
        trainer = Trainer(tiny_train_config, ENCODER_SECTION)
        state = self._collapsed_state(trainer, small_dataset)
        collapsed = state.bank.vectors[0].copy()

        trainer.regroup(state, small_dataset)

        z = encode(small_dataset.full_batch(), state.params, state.encoder_cfg).vectors
        vectors = state.bank.vectors
        assert np.allclose(vectors[:2], collapsed)
        sources = [int(np.argmin(np.linalg.norm(z - vectors[k], axis=1))) for k in range(2, 8)]
        assert all(np.allclose(vectors[k], z[i], atol=1e-12) for k, i in zip(range(2, 8), sources))
        assert len(set(sources)) == 6

        offset = state.params.size
        moments = state.adam.first_moment[offset:].reshape(8, -1)
        assert np.all(moments[2:] == 0.0) and np.all(moments[:2] == 1.0)
        assert np.all(state.adam.second_moment[:offset] == 1.0)

    def test_reseed_disabled(self, small_dataset, tiny_train_config):
        trainer = Trainer(replace(tiny_train_config, reseed_empty=False), ENCODER_SECTION)
        state = self._collapsed_state(trainer, small_dataset)
        before = state.bank.vectors.copy()

        trainer.regroup(state, small_dataset)

        assert np.array_equal(state.bank.vectors, before)

    def test_non_finite_loss_aborts(self, monkeypatch, temp_dir, small_dataset, tiny_train_config):
        def broken_objective(joint, *args, **kwargs):
            breakdown = LossBreakdown.combine(float('nan'), 0.0, 0.0, 0.0, 1.0, 1.0)
            result = LossResult(breakdown=breakdown, grad_view=None, grad_aug=None, grad_prototypes=None)
            return result, np.zeros_like(joint)

        monkeypatch.setattr('src.trainer.joint_objective', broken_objective)
        trainer = Trainer(tiny_train_config, ENCODER_SECTION, dump_dir=temp_dir)

        with pytest.raises(TrainingAbortError) as exc_info:
            trainer.run(small_dataset)

        assert exc_info.value.diagnostics['epoch'] == 1
        with open(exc_info.value.dump_path, 'r', encoding='utf-8') as f:
            assert json.load(f)['batch_index'] == 0
