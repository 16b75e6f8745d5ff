# tests/conftest.py
import pytest
import tempfile
import shutil
import sys
from pathlib import Path
from typing import Dict, Any

import numpy as np
import yaml

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.config_manager import ConfigManager
from src.dataset import SplitConfig, apply_split, generate_blobs
from src.trainer import TrainConfig


@pytest.fixture(scope="function")
def temp_dir():
    """创建临时目录"""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    # 清理临时目录
    if Path(temp_dir).exists():
        shutil.rmtree(temp_dir)


@pytest.fixture(autouse=True)
def isolated_output_env(monkeypatch):
    """测试中不受外部输出目录环境变量影响"""
    monkeypatch.delenv('PROTOGROUP_OUTPUT_DIR', raising=False)


@pytest.fixture(scope="function")
def sample_config(temp_dir) -> Dict[str, Any]:
    """小规模、几秒内可跑完的实验配置"""
    return {
        'version': 1,
        'seed': 3,
        'data': {
            'source': 'blobs',
            'num_classes': 4,
            'per_class': 20,
            'dim': 6,
            'separation': 6.0,
            'spread': 1.0,
        },
        'split': {
            'known_class_fraction': 0.5,
            'label_fraction': 0.5,
        },
        'encoder': {
            'hidden_dims': [8],
            'embed_dim': 4,
            'activation': 'tanh',
        },
        'train': {
            'epochs': 2,
            'batch_size': 16,
            'num_prototypes': 8,
            'kappa': 2,
        },
        'output': {
            'root': str(temp_dir / 'runs'),
            'progress': False,
        },
        'logging': {
            'level': 'WARNING',
            'enable_console': False,
        },
    }


@pytest.fixture(scope="function")
def config_file(temp_dir, sample_config) -> Path:
    """把示例配置写成 YAML 文件"""
    path = temp_dir / 'test_config.yaml'
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(sample_config, f, allow_unicode=True)
    return path


@pytest.fixture(scope="function")
def config_manager(config_file):
    """创建配置管理器实例"""
    return ConfigManager(str(config_file))


@pytest.fixture(scope="function")
def small_dataset():
    """4 类 × 20 的高斯团，前 2 类已知、一半标注"""
    dataset = generate_blobs(num_classes=4, per_class=20, dim=6, separation=6.0, spread=1.0, seed=11)
    return apply_split(dataset, SplitConfig(known_class_fraction=0.5, label_fraction=0.5, seed=5))


@pytest.fixture(scope="function")
def tiny_train_config():
    """只训练两轮的训练配置"""
    return TrainConfig(epochs=2, batch_size=16, num_prototypes=8, kappa=2, eval_fraction=0.25, seed=1)


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(2024)
