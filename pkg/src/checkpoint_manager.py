import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List
import logging

import numpy as np

from src.encoder import EncoderConfig
from src.grouping import ClassGroupMatching
from src.numerics import AdamState
from src.prototypes import GroupPartition, PrototypeBank
from src.trainer import TrainState
from src.utils.errors import DataParseError

logger = logging.getLogger(__name__)

PROTOTYPES_FILE = 'prototypes.csv'
ENCODER_FILE = 'encoder.csv'
METADATA_FILE = 'checkpoint.json'


@dataclass
class CheckpointInfo:
    """检查点信息"""
    path: Path
    epoch: int
    num_prototypes: int
    group_count: int
    known_classes: List[int]
    contents: List[str]


class CheckpointManager:
    """检查点管理器：原型库、划分、编码器参数与类↔组匹配"""

    def __init__(self, checkpoint_dir: Path):
        self.checkpoint_dir = Path(checkpoint_dir)

    def save(self, state: TrainState, known_classes: List[int]) -> CheckpointInfo:
        """保存检查点（浮点数使用可往返的最短表示）"""
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

        with open(self.checkpoint_dir / PROTOTYPES_FILE, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            for row in state.bank.vectors:
                writer.writerow([repr(float(v)) for v in row])
            writer.writerow(['partition', *state.partition.assignment])

        with open(self.checkpoint_dir / ENCODER_FILE, 'w', encoding='utf-8') as f:
            for value in state.params:
                f.write(f"{float(value)!r}\n")

        cfg = state.encoder_cfg
        metadata = {
            'encoder': {
                'input_dim': cfg.input_dim,
                'hidden_dims': list(cfg.hidden_dims),
                'embed_dim': cfg.embed_dim,
                'activation': cfg.activation,
                'seed': cfg.seed,
            },
            'temperature': state.bank.temperature,
            'matching': state.matching.to_dict(),
            'known_classes': [int(c) for c in known_classes],
            'delta': state.delta,
            'epoch': state.epoch,
        }
        with open(self.checkpoint_dir / METADATA_FILE, 'w', encoding='utf-8') as f:
            json.dump(metadata, f, indent=2, ensure_ascii=False, sort_keys=True)

        info = CheckpointInfo(
            path=self.checkpoint_dir,
            epoch=state.epoch,
            num_prototypes=state.bank.size,
            group_count=state.partition.group_count,
            known_classes=metadata['known_classes'],
            contents=[PROTOTYPES_FILE, ENCODER_FILE, METADATA_FILE],
        )
        logger.info(f"检查点已保存: {self.checkpoint_dir} (第 {state.epoch} 轮, {info.group_count} 组)")
        return info

    def load(self) -> Dict[str, Any]:
        """读取检查点，返回 {'state': TrainState, 'known_classes': [...]}"""
        metadata_path = self.checkpoint_dir / METADATA_FILE
        if not metadata_path.exists():
            raise FileNotFoundError(f"检查点不存在: {metadata_path}")
        with open(metadata_path, 'r', encoding='utf-8') as f:
            metadata = json.load(f)

        vectors, partition = self._read_prototypes(self.checkpoint_dir / PROTOTYPES_FILE)
        params = np.loadtxt(self.checkpoint_dir / ENCODER_FILE, dtype=np.float64, ndmin=1)

        encoder_cfg = EncoderConfig(**{**metadata['encoder'],
                                       'hidden_dims': tuple(metadata['encoder']['hidden_dims'])})
        if params.size != encoder_cfg.param_count:
            raise DataParseError(
                f"编码器参数个数 {params.size} 与配置要求 {encoder_cfg.param_count} 不符", line_number=0)

        bank = PrototypeBank(vectors=vectors, temperature=float(metadata['temperature']))
        state = TrainState(
            params=params,
            bank=bank,
            partition=partition,
            adam=AdamState.zeros(params.size + vectors.size),
            matching=ClassGroupMatching.from_dict(metadata['matching']),
            encoder_cfg=encoder_cfg,
            delta=metadata.get('delta'),
            epoch=int(metadata.get('epoch', 0)),
        )
        logger.info(f"检查点已加载: {self.checkpoint_dir}")
        return {'state': state, 'known_classes': metadata.get('known_classes', [])}

    @staticmethod
    def _read_prototypes(path: Path):
        rows: List[List[float]] = []
        partition = None
        with open(path, 'r', encoding='utf-8', newline='') as f:
            for line_number, row in enumerate(csv.reader(f), start=1):
                if not row:
                    continue
                if row[0] == 'partition':
                    partition = GroupPartition(tuple(int(g) for g in row[1:]))
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    raise DataParseError(f"原型取值不是数值: {row}", line_number) from None
        if partition is None:
            raise DataParseError("缺少 partition 行", line_number=0)
        if partition.size != len(rows):
            raise DataParseError(f"划分覆盖 {partition.size} 个原型，文件中有 {len(rows)} 行", line_number=0)
        return np.array(rows, dtype=np.float64), partition
