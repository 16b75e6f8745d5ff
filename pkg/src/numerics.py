"""
数值基础：参数展平、l2 归一化、Adam 更新规则与有限差分梯度检验。

所有训练数学均使用 float64。
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple
import logging

import numpy as np

from src.utils.errors import (
    ContractViolation,
    DegenerateVectorError,
    NonFiniteGradientError,
    OracleError,
)

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12

ParamVector = np.ndarray


def as_param_vector(values: Sequence[float]) -> ParamVector:
    """转换为一维 float64 参数向量并检查有限性"""
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        bad = int(np.flatnonzero(~np.isfinite(vec))[0])
        raise ContractViolation(f"参数向量第 {bad} 个元素非有限")
    return vec


def flatten_params(arrays: Sequence[np.ndarray]) -> ParamVector:
    """按顺序把若干数组拼成一个参数向量"""
    if not arrays:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_params(vec: ParamVector, shapes: Sequence[Tuple[int, ...]]) -> List[np.ndarray]:
    """flatten_params 的逆操作，返回视图"""
    expected = int(sum(int(np.prod(s)) for s in shapes))
    if vec.shape != (expected,):
        raise ContractViolation(f"参数长度 {vec.shape} 与形状要求 {expected} 不符")
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(vec[offset:offset + size].reshape(shape))
        offset += size
    return out


def l2_normalize(v: np.ndarray, floor: float = NORM_FLOOR) -> np.ndarray:
    """返回 v/||v||，范数低于 floor 时抛出 DegenerateVectorError"""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > floor:
        raise DegenerateVectorError(f"向量范数 {norm:.3e} 低于下限 {floor:.1e}")
    return v / norm


def normalize_rows(matrix: np.ndarray, floor: float = NORM_FLOOR,
                   what: str = "行") -> Tuple[np.ndarray, np.ndarray]:
    """逐行归一化，返回 (归一化矩阵, 原始范数)

    任一行范数低于 floor 时抛出 DegenerateVectorError，index 为该行号。
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(~(norms > floor))
    if bad.size:
        idx = int(bad[0])
        raise DegenerateVectorError(
            f"{what} {idx} 的范数 {norms[idx]:.3e} 低于下限 {floor:.1e}", index=idx)
    return matrix / norms[:, None], norms


@dataclass
class AdamState:
    """Adam 优化器状态"""
    first_moment: ParamVector
    second_moment: ParamVector
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int, learning_rate: float = 0.002, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> 'AdamState':
        if learning_rate <= 0:
            raise ContractViolation(f"学习率必须为正: {learning_rate}")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ContractViolation(f"beta 必须在 (0,1) 内: {beta1}, {beta2}")
        return cls(
            first_moment=np.zeros(size, dtype=np.float64),
            second_moment=np.zeros(size, dtype=np.float64),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState) -> ParamVector:
    """执行一步带偏差修正的 Adam 更新，原地修改 state，返回新参数"""
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ContractViolation(
            f"长度不一致: params={params.shape}, grads={grads.shape}, "
            f"m={state.first_moment.shape}, v={state.second_moment.shape}")

    finite = np.isfinite(grads)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NonFiniteGradientError(f"梯度第 {bad} 个元素非有限: {grads[bad]}", index=bad)

    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count

    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grads
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grads * grads)

    m_hat = state.first_moment / bc1
    v_hat = state.second_moment / bc2
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def finite_diff_gradient(f: Callable[[ParamVector], float], at: ParamVector,
                         h: float = 1e-5) -> ParamVector:
    """中心差分梯度 (f(x+h e_i) - f(x-h e_i)) / 2h，用作解析梯度的检验基准"""
    if h <= 0:
        raise ContractViolation(f"步长必须为正: {h}")
    x = np.array(at, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + h
        f_plus = float(f(x.copy()))
        x[i] = original - h
        f_minus = float(f(x.copy()))
        x[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"坐标 {i} 处函数值非有限: f+={f_plus}, f-={f_minus}", coordinate=i)
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """逐坐标相对误差 |a-n| / max(|a|, |n|, floor)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
