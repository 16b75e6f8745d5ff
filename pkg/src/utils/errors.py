from typing import Any, Dict, Optional


class ProtoGroupError(Exception):
    """项目内所有运行期错误的基类"""
    pass


class ContractViolation(ProtoGroupError, ValueError):
    """形状、长度或前置条件不满足"""
    pass


class DegenerateVectorError(ProtoGroupError):
    """向量范数低于下限，无法归一化"""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class NonFiniteGradientError(ProtoGroupError):
    """梯度中出现 NaN/Inf，训练必须中止"""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class OracleError(ProtoGroupError):
    """有限差分求值得到非有限值"""

    def __init__(self, message: str, coordinate: int):
        super().__init__(message)
        self.coordinate = coordinate


class InfeasibleMatchingError(ProtoGroupError):
    """原型组数少于已知类别数，无法做单射匹配"""
    pass


class DataGenerationError(ProtoGroupError):
    """合成数据生成失败"""
    pass


class DataParseError(ProtoGroupError):
    """CSV 解析失败"""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"第 {line_number} 行: {message}")
        self.line_number = line_number


class SplitError(ProtoGroupError):
    """开放世界划分无法满足约束"""
    pass


class TrainingAbortError(ProtoGroupError):
    """训练中止（损失非有限等）"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None,
                 dump_path: Optional[str] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.dump_path = dump_path
