import json
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging

import numpy as np
import pandas as pd

from src.trainer import RunRecord

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = [
    'epoch', 'proto', 'group', 'reg', 'ce', 'total', 'lambda1', 'lambda2',
    'group_count', 'delta', 'labeled_acc', 'known_acc', 'novel_acc', 'all_acc', 'nmi',
    'threshold_fallback', 'batches',
]

SCORE_COLUMNS = ['known_acc', 'novel_acc', 'all_acc', 'nmi', 'estimated_class_count']


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"无法序列化的类型: {type(value)}")


class ReportGenerator:
    """运行日志与汇总报告生成器"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_run(self, record: RunRecord) -> Dict[str, Path]:
        """写出 epochs.csv 与 summary.json"""
        files = {
            'epochs': self.write_epochs(record.rows),
            'summary': self.write_summary(record),
        }
        logger.info(f"运行日志已写出: {self.output_dir}")
        return files

    def write_epochs(self, rows: List[Dict[str, Any]]) -> Path:
        """每轮一行：损失分解、组数、δ*、标注准确率与评估分数"""
        df = pd.DataFrame(rows, columns=EPOCH_COLUMNS)
        path = self.output_dir / 'epochs.csv'
        df.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
        return path

    def build_summary(self, record: RunRecord) -> Dict[str, Any]:
        """运行摘要；不含时间戳，相同配置重跑时逐字节相同"""
        report = record.final_report.to_dict() if record.final_report else None
        last = record.rows[-1] if record.rows else {}
        return {
            'config': record.config,
            'seed': record.seed,
            'epochs_completed': len(record.rows),
            'estimated_class_count': record.estimated_class_count,
            'group_counts': list(record.group_counts),
            'final_delta': last.get('delta'),
            'final_loss': {k: last[k] for k in ('proto', 'group', 'reg', 'ce', 'total') if k in last},
            'report': report,
        }

    def write_summary(self, record: RunRecord) -> Path:
        path = self.output_dir / 'summary.json'
        self.write_json(self.build_summary(record), path)
        return path

    @staticmethod
    def write_json(data: Dict[str, Any], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True, default=_json_default)
            f.write('\n')
        return path

    def export_embeddings(self, embeddings: np.ndarray, labels: np.ndarray,
                          is_known: np.ndarray, predicted: np.ndarray) -> Path:
        """留出集嵌入导出：label, is_known, group, z_0..z_{d-1}"""
        df = pd.DataFrame(embeddings, columns=[f"z_{j}" for j in range(embeddings.shape[1])])
        df.insert(0, 'group', np.asarray(predicted, dtype=np.int64))
        df.insert(0, 'is_known', np.asarray(is_known, dtype=np.int64))
        df.insert(0, 'label', np.asarray(labels, dtype=np.int64))
        path = self.output_dir / 'embeddings.csv'
        df.to_csv(path, index=False, encoding='utf-8', lineterminator='\n', float_format='%.17g')
        logger.info(f"嵌入已导出: {path} ({len(df)} 行)")
        return path

    def write_aggregate(self, rows: List[Dict[str, Any]], key: str,
                        filename: str = 'aggregate.csv') -> pd.DataFrame:
        """扫参/消融汇总：每个取值一行；有重复运行时给出均值与标准差"""
        df = pd.DataFrame(rows)
        path = self.output_dir / filename
        if df.empty:
            df.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
            return df

        repeated = df.groupby(key, sort=False).size().max() > 1
        if repeated:
            grouped = df.groupby(key, sort=False)[SCORE_COLUMNS]
            mean = grouped.mean().add_suffix('_mean')
            std = grouped.std(ddof=0).add_suffix('_std')
            runs = grouped.size().rename('runs')
            table = pd.concat([mean, std, runs], axis=1).reset_index()
        else:
            table = df[[key, *SCORE_COLUMNS, *[c for c in df.columns if c not in (key, *SCORE_COLUMNS)]]]

        table.to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
        logger.info(f"汇总报告已写出: {path} ({len(table)} 行)")
        return table

    @staticmethod
    def format_report(record: RunRecord) -> str:
        """终端输出的最终结果"""
        report = record.final_report
        if report is None:
            return "无评估结果"
        return (f"known_acc={report.known_acc:.4f} novel_acc={report.novel_acc:.4f} "
                f"all_acc={report.all_acc:.4f} nmi={report.nmi:.4f} "
                f"estimated_class_count={record.estimated_class_count}")
