import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml


class ValidationError(Exception):
    """配置验证错误"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class Validator:
    """验证器基类"""

    @staticmethod
    def validate_positive_int(value: Any) -> bool:
        """验证正整数（bool 不算整数）"""
        return isinstance(value, int) and not isinstance(value, bool) and value > 0

    @staticmethod
    def validate_non_negative_int(value: Any) -> bool:
        return isinstance(value, int) and not isinstance(value, bool) and value >= 0

    @staticmethod
    def validate_real(value: Any) -> bool:
        return isinstance(value, (int, float)) and not isinstance(value, bool)

    @staticmethod
    def validate_fraction(value: Any, allow_zero: bool = False) -> bool:
        """验证 (0,1] 区间，allow_zero 时为 [0,1]"""
        if not Validator.validate_real(value):
            return False
        lower_ok = value >= 0 if allow_zero else value > 0
        return lower_ok and value <= 1

    @staticmethod
    def validate_file_exists(file_path: Union[str, Path], check_readable: bool = True) -> bool:
        """验证文件是否存在（并可读）"""
        path = Path(file_path)
        exists = path.exists() and path.is_file()
        if exists and check_readable:
            return os.access(path, os.R_OK)
        return exists

    @staticmethod
    def validate_yaml(content: str) -> bool:
        """验证YAML字符串"""
        try:
            yaml.safe_load(content)
            return True
        except yaml.YAMLError:
            return False


class ConfigValidator(Validator):
    """实验配置验证器"""

    # 键 -> 检查函数 与 错误描述
    RULES = {
        'seed': (Validator.validate_non_negative_int, "必须是非负整数"),
        'data.num_classes': (Validator.validate_positive_int, "必须是正整数"),
        'data.per_class': (Validator.validate_positive_int, "必须是正整数"),
        'data.dim': (Validator.validate_positive_int, "必须是正整数"),
        'data.separation': (lambda v: Validator.validate_real(v) and v > 0, "必须大于0"),
        'data.spread': (lambda v: Validator.validate_real(v) and v > 0, "必须大于0"),
        'data.source': (lambda v: v in ('blobs', 'csv'), "只能是 blobs 或 csv"),
        'split.known_class_fraction': (Validator.validate_fraction, "必须在 (0,1] 内"),
        'split.label_fraction': (lambda v: Validator.validate_fraction(v, allow_zero=True),
                                 "必须在 [0,1] 内"),
        'encoder.embed_dim': (lambda v: Validator.validate_positive_int(v) and v >= 2, "必须 >= 2"),
        'encoder.hidden_dims': (lambda v: isinstance(v, list) and all(Validator.validate_positive_int(h) for h in v),
                                "必须是正整数列表"),
        'encoder.activation': (lambda v: v in ('tanh', 'relu'), "只能是 tanh 或 relu"),
        'train.epochs': (Validator.validate_positive_int, "必须是正整数"),
        'train.batch_size': (lambda v: Validator.validate_positive_int(v) and v >= 2, "必须 >= 2"),
        'train.learning_rate': (lambda v: Validator.validate_real(v) and v > 0, "必须大于0"),
        'train.temperature': (lambda v: Validator.validate_real(v) and v > 0, "必须大于0"),
        'train.lambda1': (lambda v: Validator.validate_real(v) and v >= 0, "不能为负数"),
        'train.lambda2': (lambda v: Validator.validate_real(v) and v >= 0, "不能为负数"),
        'train.kappa': (Validator.validate_positive_int, "必须是正整数"),
        'train.num_prototypes': (lambda v: Validator.validate_positive_int(v) and v >= 2, "必须 >= 2"),
        'train.warmup_epochs': (Validator.validate_non_negative_int, "必须是非负整数"),
        'train.noise_std': (lambda v: Validator.validate_real(v) and v >= 0, "不能为负数"),
        'train.eval_fraction': (lambda v: Validator.validate_real(v) and 0 <= v < 1, "必须在 [0,1) 内"),
        'train.threshold_policy': (lambda v: v in ('labeled', 'fixed'), "只能是 labeled 或 fixed"),
        'train.fixed_threshold': (lambda v: Validator.validate_fraction(v, allow_zero=True), "必须在 [0,1] 内"),
        'train.beta1': (lambda v: Validator.validate_real(v) and 0 < v < 1, "必须在 (0,1) 内"),
        'train.beta2': (lambda v: Validator.validate_real(v) and 0 < v < 1, "必须在 (0,1) 内"),
        'train.adam_epsilon': (lambda v: Validator.validate_real(v) and v > 0, "必须大于0"),
        'train.use_proto_loss': (lambda v: isinstance(v, bool), "必须是布尔值"),
        'train.use_group_loss': (lambda v: isinstance(v, bool), "必须是布尔值"),
        'train.reseed_empty': (lambda v: isinstance(v, bool), "必须是布尔值"),
    }

    @classmethod
    def find_unknown_keys(cls, config: Mapping[str, Any], schema: Mapping[str, Any],
                          prefix: str = '') -> List[str]:
        """返回 config 中 schema 没有定义的键（点分形式）"""
        unknown = []
        for key, value in config.items():
            dotted = f"{prefix}{key}"
            if key not in schema:
                unknown.append(dotted)
            elif isinstance(schema[key], dict):
                if not isinstance(value, dict):
                    unknown.append(dotted)
                else:
                    unknown.extend(cls.find_unknown_keys(value, schema[key], f"{dotted}."))
        return unknown

    @classmethod
    def validate_values(cls, config: Mapping[str, Any]) -> List[ValidationError]:
        """按规则检查取值"""
        errors = []
        for dotted, (check, description) in cls.RULES.items():
            value = _lookup(config, dotted)
            if value is _MISSING:
                continue
            if not check(value):
                errors.append(ValidationError(f"配置项 {dotted}={value!r} {description}", key=dotted))

        # 交叉约束
        train = config.get('train', {})
        kappa, num_prototypes = train.get('kappa'), train.get('num_prototypes')
        if (cls.validate_positive_int(kappa) and cls.validate_positive_int(num_prototypes)
                and kappa > num_prototypes):
            errors.append(ValidationError("train.kappa 不能大于 train.num_prototypes", key='train.kappa'))

        data = config.get('data', {})
        if data.get('source') == 'csv' and not data.get('csv_path'):
            errors.append(ValidationError("data.source=csv 时必须提供 data.csv_path", key='data.csv_path'))
        return errors

    @classmethod
    def validate(cls, config: Mapping[str, Any], schema: Mapping[str, Any]) -> None:
        """完整验证，遇到第一个问题即抛出 ValidationError"""
        unknown = cls.find_unknown_keys(config, schema)
        if unknown:
            raise ValidationError(f"未知配置项: {unknown[0]}", key=unknown[0])

        errors = cls.validate_values(config)
        if errors:
            raise errors[0]


_MISSING = object()


def _lookup(config: Mapping[str, Any], dotted: str) -> Any:
    node: Any = config
    for part in dotted.split('.'):
        if not isinstance(node, Mapping) or part not in node:
            return _MISSING
        node = node[part]
    return node


def validate_config_file(config_path: Union[str, Path]) -> Dict[str, Any]:
    """读取并做语法检查，返回原始字典（语义检查在 ConfigManager 中完成）"""
    config_path = Path(config_path)

    if not Validator.validate_file_exists(config_path):
        raise ValidationError(f"配置文件不存在: {config_path}", key=str(config_path))

    with open(config_path, 'r', encoding='utf-8') as f:
        content = f.read()

    if not Validator.validate_yaml(content):
        raise ValidationError(f"配置文件YAML格式错误: {config_path}", key=str(config_path))

    config = yaml.safe_load(content) or {}
    if not isinstance(config, dict):
        raise ValidationError(f"配置文件顶层必须是映射: {config_path}", key=str(config_path))
    return config
