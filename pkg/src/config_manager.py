import copy
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Tuple
from pathlib import Path
import logging

import yaml
from dotenv import load_dotenv

from src.utils.validators import ConfigValidator, ValidationError, validate_config_file

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = 'PROTOGROUP_OUTPUT_DIR'

# 每个键都有默认值；配置文件与覆盖项只能使用这里出现的键
DEFAULT_CONFIG: Dict[str, Any] = {
    'version': 1,
    'seed': 0,
    'data': {
        'source': 'blobs',
        'csv_path': None,
        'mask_path': None,
        'has_header': True,
        'num_classes': 10,
        'per_class': 200,
        'dim': 16,
        'separation': 6.0,
        'spread': 1.0,
    },
    'split': {
        'known_class_fraction': 0.5,
        'label_fraction': 0.1,
    },
    'encoder': {
        'hidden_dims': [64],
        'embed_dim': 32,
        'activation': 'tanh',
    },
    'train': {
        'epochs': 200,
        'batch_size': 128,
        'learning_rate': 0.002,
        'temperature': 0.1,
        'lambda1': 1.0,
        'lambda2': 1.0,
        'kappa': 5,
        'num_prototypes': 50,
        'warmup_epochs': 0,
        'noise_std': 0.5,
        'eval_fraction': 0.2,
        'threshold_policy': 'labeled',
        'fixed_threshold': 0.5,
        'beta1': 0.9,
        'beta2': 0.999,
        'adam_epsilon': 1e-8,
        'use_proto_loss': True,
        'use_group_loss': True,
        'reseed_empty': True,
    },
    'output': {
        'root': 'runs',
        'checkpoint': True,
        'export_embeddings': False,
        'progress': True,
    },
    'logging': {
        'level': 'INFO',
        'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        'file': None,
        'file_size': '10MB',
        'backup_count': 5,
        'enable_console': True,
        'enable_json': False,
    },
}

# 扫参时允许的简写 -> 点分键
SWEEP_KEYS: Dict[str, str] = {
    'lambda1': 'train.lambda1',
    'lambda2': 'train.lambda2',
    'temperature': 'train.temperature',
    'kappa': 'train.kappa',
    'num_prototypes': 'train.num_prototypes',
    'noise_std': 'train.noise_std',
    'learning_rate': 'train.learning_rate',
    'known_class_fraction': 'split.known_class_fraction',
    'label_fraction': 'split.label_fraction',
    'seed': 'seed',
}


@dataclass
class DataConfig:
    """数据来源配置"""
    source: str
    csv_path: Optional[Path]
    mask_path: Optional[Path]
    has_header: bool
    num_classes: int
    per_class: int
    dim: int
    separation: float
    spread: float

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DataConfig':
        return cls(
            source=data['source'],
            csv_path=Path(data['csv_path']) if data.get('csv_path') else None,
            mask_path=Path(data['mask_path']) if data.get('mask_path') else None,
            has_header=bool(data['has_header']),
            num_classes=data['num_classes'],
            per_class=data['per_class'],
            dim=data['dim'],
            separation=float(data['separation']),
            spread=float(data['spread']),
        )


@dataclass
class OutputConfig:
    """输出配置"""
    root: Path
    checkpoint: bool
    export_embeddings: bool
    progress: bool

    @classmethod
    def from_dict(cls, data: Dict[str, Any], root: Optional[Path] = None) -> 'OutputConfig':
        return cls(
            root=Path(root) if root is not None else Path(data['root']),
            checkpoint=bool(data['checkpoint']),
            export_embeddings=bool(data['export_embeddings']),
            progress=bool(data['progress']),
        )


def resolve_key(key: str, schema: Dict[str, Any] = DEFAULT_CONFIG) -> str:
    """把覆盖项的键解析为点分键；不带点的键可以是顶层键或唯一所在节中的键"""
    key = key.strip()
    if '.' in key:
        node: Any = schema
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                raise ValidationError(f"未知配置项: {key}", key=key)
            node = node[part]
        if isinstance(node, dict):
            raise ValidationError(f"不能覆盖整个配置节: {key}", key=key)
        return key

    if key in schema and not isinstance(schema[key], dict):
        return key
    owners = [section for section, body in schema.items()
              if isinstance(body, dict) and key in body]
    if not owners:
        raise ValidationError(f"未知配置项: {key}", key=key)
    if len(owners) > 1:
        raise ValidationError(f"配置项 {key} 有歧义，可能属于 {owners}", key=key)
    return f"{owners[0]}.{key}"


def parse_override(text: str) -> Tuple[str, Any]:
    """解析 `key=value`，值按 YAML 标量规则解析"""
    if '=' not in text:
        raise ValidationError(f"覆盖项必须是 key=value 形式: {text!r}", key=text)
    key, raw = text.split('=', 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ValidationError(f"覆盖项的值无法解析: {text!r}", key=key.strip()) from None
    return resolve_key(key), value


def _set_dotted(config: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split('.')
    node = config
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _get_dotted(config: Dict[str, Any], dotted: str) -> Any:
    node: Any = config
    for part in dotted.split('.'):
        node = node[part]
    return node


def _deep_merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


class ConfigManager:
    """配置管理器：默认值 ← 配置文件 ← 命令行覆盖项"""

    def __init__(self, config_file: Optional[str] = None, overrides: Iterable[str] = (),
                 config: Optional[Dict[str, Any]] = None):
        self.config_file = Path(config_file) if config_file else None
        self.config: Dict[str, Any] = copy.deepcopy(DEFAULT_CONFIG)
        self.load_config(config)
        self.apply_overrides(overrides)

    def load_config(self, raw: Optional[Dict[str, Any]] = None) -> None:
        """加载配置文件（或直接给定的字典）并做完整验证"""
        if raw is None and self.config_file is not None:
            raw = validate_config_file(self.config_file)
        if raw:
            unknown = ConfigValidator.find_unknown_keys(raw, DEFAULT_CONFIG)
            if unknown:
                raise ValidationError(f"未知配置项: {unknown[0]}", key=unknown[0])
            _deep_merge(self.config, copy.deepcopy(raw))
        ConfigValidator.validate(self.config, DEFAULT_CONFIG)
        if self.config_file is not None:
            logger.info(f"配置加载成功: {self.config_file}")

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """应用 `key=value` 覆盖项"""
        applied = False
        for text in overrides:
            dotted, value = parse_override(text)
            _set_dotted(self.config, dotted, value)
            logger.info(f"配置覆盖: {dotted} = {value!r}")
            applied = True
        if applied:
            ConfigValidator.validate(self.config, DEFAULT_CONFIG)

    def set_value(self, dotted: str, value: Any) -> None:
        """设置单个键并重新验证"""
        dotted = resolve_key(dotted)
        _set_dotted(self.config, dotted, value)
        ConfigValidator.validate(self.config, DEFAULT_CONFIG)

    def get_value(self, dotted: str) -> Any:
        return _get_dotted(self.config, resolve_key(dotted))

    def derive(self, updates: Dict[str, Any]) -> 'ConfigManager':
        """以当前有效配置为基础生成一个修改了若干键的新配置"""
        derived = ConfigManager(config=self.effective())
        for dotted, value in updates.items():
            derived.set_value(dotted, value)
        return derived

    @property
    def seed(self) -> int:
        return int(self.config['seed'])

    def get_data_config(self) -> DataConfig:
        return DataConfig.from_dict(self.config['data'])

    def get_split_section(self) -> Dict[str, Any]:
        return dict(self.config['split'])

    def get_encoder_section(self) -> Dict[str, Any]:
        return dict(self.config['encoder'])

    def get_train_section(self) -> Dict[str, Any]:
        return dict(self.config['train'])

    def get_logging_config(self) -> Dict[str, Any]:
        return dict(self.config['logging'])

    def get_output_config(self, cli_out: Optional[str] = None) -> OutputConfig:
        """输出根目录优先级：--out > 环境变量 > output.root"""
        return OutputConfig.from_dict(self.config['output'], root=self.output_root(cli_out))

    def output_root(self, cli_out: Optional[str] = None) -> Path:
        if cli_out:
            return Path(cli_out)
        load_dotenv()
        env_root = os.environ.get(OUTPUT_DIR_ENV)
        if env_root:
            return Path(env_root)
        return Path(self.config['output']['root'])

    def effective(self) -> Dict[str, Any]:
        """完整解析后的配置，原样写入每个运行摘要"""
        return copy.deepcopy(self.config)

    def save_config(self, path: Path) -> Path:
        """把有效配置写成 YAML，可直接作为 --config 复现运行"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.config, f, allow_unicode=True, default_flow_style=False, sort_keys=True)
        return path


def sweep_key(name: str) -> str:
    """扫参参数名 -> 点分键；不可扫的参数抛出 ValidationError"""
    if name in SWEEP_KEYS:
        return SWEEP_KEYS[name]
    if name in SWEEP_KEYS.values():
        return name
    raise ValidationError(f"参数 {name} 不支持扫参，可选: {sorted(SWEEP_KEYS)}", key=name)


def parse_sweep_values(values: List[str]) -> List[Any]:
    """扫参取值按 YAML 标量解析，必须全部是数值"""
    if not values:
        raise ValidationError("扫参取值列表不能为空", key='values')
    parsed = []
    for raw in values:
        value = yaml.safe_load(raw)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"扫参取值必须是数值: {raw!r}", key='values')
        parsed.append(value)
    return parsed
