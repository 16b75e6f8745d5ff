#!/usr/bin/env python3
"""
原型分组开放世界新类发现 - 命令行入口

命令: run / gen / sweep / ablate / eval
退出码: 0 成功, 1 运行失败, 2 用法或配置错误
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging

import numpy as np
import pandas as pd

from src.checkpoint_manager import CheckpointManager
from src.config_manager import ConfigManager, parse_sweep_values, sweep_key
from src.dataset import (
    Dataset,
    SplitConfig,
    apply_split,
    generate_blobs,
    load_csv,
    load_masks,
    write_csv,
    write_masks,
)
from src.encoder import encode
from src.metrics import EvalReport, open_world_report
from src.parallel_processor import ParallelProcessor, RunTask
from src.prototypes import assign_groups, assign_prototypes
from src.report_generator import ReportGenerator
from src.trainer import Trainer, TrainConfig, derive_seeds
from src.utils.errors import ProtoGroupError
from src.utils.logger import LoggerMixin, setup_logging
from src.utils.validators import ValidationError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# 消融变体 -> 相对完整目标的修改
ABLATIONS: Dict[str, Dict[str, Any]] = {
    'full': {},
    'without_reg': {'train.lambda1': 0.0},
    'without_ce': {'train.lambda2': 0.0},
    'without_group': {'train.use_group_loss': False},
    'without_proto': {'train.use_proto_loss': False},
}


def load_dataset(config: ConfigManager) -> Dataset:
    """按配置生成或读取数据集，并应用开放世界划分"""
    data = config.get_data_config()
    if data.source == 'csv':
        dataset = load_csv(data.csv_path, has_header=data.has_header)
        if data.mask_path is not None:
            return load_masks(dataset, data.mask_path)
    else:
        dataset = generate_blobs(data.num_classes, data.per_class, data.dim,
                                 data.separation, data.spread, seed=config.seed)
    split = SplitConfig.from_dict(config.get_split_section(), seed=derive_seeds(config.seed)['split'])
    return apply_split(dataset, split)


def run_task(task: RunTask) -> Dict[str, Any]:
    """执行一个独立运行（可在子进程中调用）"""
    runner = ExperimentRunner(ConfigManager(config=task.config))
    return {**task.tags, **runner.run(task.output_dir)}


class ExperimentRunner(LoggerMixin):
    """实验主程序"""

    def __init__(self, config: ConfigManager, out: Optional[str] = None):
        self.config = config
        self.output = config.get_output_config(out)

    def run(self, output_dir: Optional[Path] = None, progress: bool = False) -> Dict[str, Any]:
        """训练一次并写出运行日志、摘要、检查点；返回最终分数"""
        output_dir = Path(output_dir) if output_dir is not None else self.output.root
        output_dir.mkdir(parents=True, exist_ok=True)

        dataset = load_dataset(self.config)
        train_config = TrainConfig.from_dict(self.config.get_train_section(), seed=self.config.seed)
        trainer = Trainer(train_config, self.config.get_encoder_section(),
                          progress=progress and self.output.progress, dump_dir=output_dir)
        record = trainer.run(dataset, self.config.effective())

        reports = ReportGenerator(output_dir)
        reports.write_run(record)
        self.config.save_config(output_dir / 'config.yaml')

        if self.output.checkpoint:
            CheckpointManager(output_dir / 'checkpoint').save(record.state, dataset.known_classes.tolist())
        if self.output.export_embeddings:
            z = encode(record.eval_set.full_batch(), record.state.params, record.state.encoder_cfg)
            predicted = np.argmax(trainer.group_assignments(record.state, record.eval_set).rows, axis=1)
            reports.export_embeddings(z.vectors, record.eval_set.labels, record.eval_set.is_known, predicted)

        self.log_with_context('info', "运行完成", output_dir=str(output_dir),
                              estimated_class_count=record.estimated_class_count,
                              **record.final_report.scores())
        return {
            'run_dir': str(output_dir),
            'seed': record.seed,
            'estimated_class_count': record.estimated_class_count,
            **record.final_report.scores(),
            'summary': ReportGenerator.format_report(record),
        }

    def _execute(self, tasks: List[RunTask], parallel: int, key: str,
                 aggregate_dir: Path) -> pd.DataFrame:
        processor = ParallelProcessor(max_workers=parallel)
        results = processor.run_all(tasks, run_task)
        errors = processor.get_errors()
        rows = [{k: v for k, v in result.items() if k != 'summary'} for result in results.values()]
        table = ReportGenerator(aggregate_dir).write_aggregate(rows, key=key)
        if errors:
            first = next(iter(errors))
            raise ProtoGroupError(f"{len(errors)} 个运行失败，首个失败: {first}: {errors[first]}")
        return table

    def _seeds(self, repeats: int) -> List[int]:
        return [self.config.seed + r for r in range(max(1, repeats))]

    def sweep(self, param: str, values: List[Any], repeats: int = 1, parallel: int = 1) -> pd.DataFrame:
        """对一个参数的每个取值各运行一次（或 repeats 次），写出汇总 CSV"""
        dotted = sweep_key(param)
        name = dotted.split('.')[-1]
        sweep_dir = self.output.root / f"sweep_{name}"
        seeds = [None] if dotted == 'seed' else self._seeds(repeats)

        tasks = []
        for value in values:
            for seed in seeds:
                updates = {dotted: value}
                run_dir = sweep_dir / f"{name}={value}"
                if seed is not None and len(seeds) > 1:
                    updates['seed'] = seed
                    run_dir = run_dir / f"seed_{seed}"
                derived = self.config.derive(updates)
                tasks.append(RunTask(name=str(run_dir.relative_to(sweep_dir)), config=derived.effective(),
                                     output_dir=run_dir, tags={name: value}))

        self.logger.info(f"扫参 {dotted}: {len(values)} 个取值 × {len(seeds)} 次")
        return self._execute(tasks, parallel, key=name, aggregate_dir=sweep_dir)

    def ablate(self, repeats: int = 1, parallel: int = 1) -> pd.DataFrame:
        """完整目标与逐项移除的对比，相同数据与种子"""
        ablation_dir = self.output.root / 'ablation'
        seeds = self._seeds(repeats)
        tasks = []
        for variant, updates in ABLATIONS.items():
            for seed in seeds:
                run_dir = ablation_dir / variant
                if len(seeds) > 1:
                    run_dir = run_dir / f"seed_{seed}"
                derived = self.config.derive({**updates, 'seed': seed})
                tasks.append(RunTask(name=str(run_dir.relative_to(ablation_dir)), config=derived.effective(),
                                     output_dir=run_dir, tags={'variant': variant}))
        return self._execute(tasks, parallel, key='variant', aggregate_dir=ablation_dir)

    def evaluate_checkpoint(self, checkpoint_dir: Path, data_path: Path,
                            mask_path: Optional[Path] = None, has_header: bool = True) -> EvalReport:
        """用检查点重新评估一个 CSV 数据集"""
        loaded = CheckpointManager(checkpoint_dir).load()
        state = loaded['state']
        dataset = load_csv(data_path, has_header=has_header)
        if mask_path is not None:
            is_known = load_masks(dataset, mask_path).is_known
        else:
            is_known = np.isin(dataset.labels, loaded['known_classes'])

        z = encode(dataset.full_batch(), state.params, state.encoder_cfg)
        q = assign_groups(assign_prototypes(z, state.bank), state.partition)
        report = open_world_report(q, dataset.labels, is_known, state.matching,
                                   state.partition.group_count)

        self.output.root.mkdir(parents=True, exist_ok=True)
        ReportGenerator.write_json(report.to_dict(), self.output.root / 'eval.json')
        return report

    def generate(self, out_path: Path, header: bool = True, with_split: bool = False) -> Dict[str, Path]:
        """按配置生成高斯团数据集 CSV（可附带掩码旁车文件）"""
        data = self.config.get_data_config()
        dataset = generate_blobs(data.num_classes, data.per_class, data.dim,
                                 data.separation, data.spread, seed=self.config.seed)
        files = {'data': write_csv(dataset, out_path, header=header)}
        if with_split:
            split = SplitConfig.from_dict(self.config.get_split_section(),
                                          seed=derive_seeds(self.config.seed)['split'])
            files['masks'] = write_masks(apply_split(dataset, split), mask_path_for(Path(out_path)))
        return files


def mask_path_for(data_path: Path) -> Path:
    return data_path.with_name(f"{data_path.stem}.masks.csv")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', default=None, help='配置文件路径 (YAML)')
    common.add_argument('--out', '-o', default=None, help='输出目录（默认取环境变量或 output.root）')
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='KEY=VALUE', help='覆盖配置项，可重复')
    common.add_argument('--seed', type=int, default=None, help='主随机种子（等价于 --set seed=N）')

    parser = argparse.ArgumentParser(description='原型分组开放世界新类发现')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('run', parents=[common], help='训练一次并写出运行日志')

    gen = sub.add_parser('gen', parents=[common], help='生成高斯团数据集 CSV')
    gen.add_argument('out_path', help='输出 CSV 路径')
    gen.add_argument('--num-classes', type=int, default=None)
    gen.add_argument('--per-class', type=int, default=None)
    gen.add_argument('--dim', type=int, default=None)
    gen.add_argument('--separation', type=float, default=None)
    gen.add_argument('--spread', type=float, default=None)
    gen.add_argument('--no-header', action='store_true', help='不写表头')
    gen.add_argument('--split', action='store_true', help='同时写出掩码旁车文件')

    sweep = sub.add_parser('sweep', parents=[common], help='对一个超参数扫参')
    sweep.add_argument('--param', required=True, help='参数名，例如 lambda1')
    sweep.add_argument('--values', nargs='*', default=[], help='取值列表')
    sweep.add_argument('--repeats', type=int, default=1, help='每个取值的重复次数（派生种子）')
    sweep.add_argument('--parallel', type=int, default=1, help='并行进程数')

    ablate = sub.add_parser('ablate', parents=[common], help='损失项消融')
    ablate.add_argument('--repeats', type=int, default=1)
    ablate.add_argument('--parallel', type=int, default=1)

    evaluate = sub.add_parser('eval', parents=[common], help='用检查点评估 CSV 数据集')
    evaluate.add_argument('--checkpoint', required=True, help='检查点目录')
    evaluate.add_argument('--data', required=True, help='CSV 数据集')
    evaluate.add_argument('--masks', default=None, help='掩码旁车文件')
    evaluate.add_argument('--no-header', action='store_true', help='CSV 没有表头')
    return parser


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.command == 'gen':
        for option, key in (('num_classes', 'data.num_classes'), ('per_class', 'data.per_class'),
                            ('dim', 'data.dim'), ('separation', 'data.separation'),
                            ('spread', 'data.spread')):
            value = getattr(args, option)
            if value is not None:
                overrides.append(f"{key}={value}")
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = ConfigManager(args.config, overrides=_overrides(args))
    except ValidationError as e:
        print(f"配置错误 [{e.key}]: {e}", file=sys.stderr)
        return EXIT_USAGE

    runner = ExperimentRunner(config, args.out)
    log_file = config.get_logging_config().get('file')
    if args.command in ('run', 'sweep', 'ablate') and not log_file:
        log_file = str(runner.output.root / 'protogroup.log')
    setup_logging(config.get_logging_config(), log_file=log_file)
    logger = logging.getLogger(__name__)

    try:
        if args.command == 'run':
            result = runner.run(progress=True)
            print(result['summary'])
        elif args.command == 'gen':
            files = runner.generate(Path(args.out_path), header=not args.no_header, with_split=args.split)
            print(' '.join(str(p) for p in files.values()))
        elif args.command == 'sweep':
            values = parse_sweep_values(args.values)
            table = runner.sweep(args.param, values, repeats=args.repeats, parallel=args.parallel)
            print(table.to_string(index=False))
        elif args.command == 'ablate':
            table = runner.ablate(repeats=args.repeats, parallel=args.parallel)
            print(table.to_string(index=False))
        elif args.command == 'eval':
            report = runner.evaluate_checkpoint(Path(args.checkpoint), Path(args.data),
                                                Path(args.masks) if args.masks else None,
                                                has_header=not args.no_header)
            print(' '.join(f"{k}={v:.4f}" for k, v in report.scores().items()))
    except ValidationError as e:
        print(f"配置错误 [{e.key}]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtoGroupError, OSError) as e:
        dump = getattr(e, 'dump_path', None) or str(runner.output.root)
        logger.error(f"程序执行失败: {e}")
        print(f"运行失败: {e} (诊断: {dump})", file=sys.stderr)
        return EXIT_RUNTIME

    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
