"""
特征提取器 f_θ：小型多层感知机，输出逐行 l2 归一化的嵌入。

参数布局：按层依次为 W (fan_in × fan_out，行优先) 与 b (fan_out)。
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Tuple
import logging

import numpy as np

from src.dataset import FeatureBatch
from src.numerics import NORM_FLOOR, ParamVector, normalize_rows, unflatten_params
from src.utils.errors import ContractViolation, DegenerateVectorError

logger = logging.getLogger(__name__)

ACTIVATIONS = ('tanh', 'relu')


@dataclass(frozen=True)
class EncoderConfig:
    """编码器配置"""
    input_dim: int
    hidden_dims: Tuple[int, ...] = (64,)
    embed_dim: int = 32
    activation: str = 'tanh'
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ContractViolation(f"input_dim 必须为正: {self.input_dim}")
        if self.embed_dim < 2:
            raise ContractViolation(f"embed_dim 必须 >= 2: {self.embed_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ContractViolation(f"hidden_dims 必须全为正: {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"不支持的激活函数: {self.activation}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], input_dim: int, seed: int = 0) -> 'EncoderConfig':
        return cls(
            input_dim=input_dim,
            hidden_dims=tuple(data.get('hidden_dims', (64,))),
            embed_dim=data.get('embed_dim', 32),
            activation=data.get('activation', 'tanh'),
            seed=seed,
        )

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, self.embed_dim]

    @property
    def param_shapes(self) -> List[Tuple[int, ...]]:
        shapes: List[Tuple[int, ...]] = []
        dims = self.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return shapes

    @property
    def param_count(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.param_shapes))


@dataclass
class EmbeddingBatch:
    """编码器输出，每行单位范数"""
    vectors: np.ndarray

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    def check_unit_norm(self, tol: float = 1e-9) -> None:
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad.size:
            raise ContractViolation(f"嵌入第 {int(bad[0])} 行范数 {norms[bad[0]]} 不是 1")


def init_params(cfg: EncoderConfig) -> ParamVector:
    """Glorot 均匀初始化（由 seed 决定），偏置为 0"""
    rng = np.random.default_rng(cfg.seed)
    arrays = []
    dims = cfg.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).ravel())
        arrays.append(np.zeros(fan_out, dtype=np.float64))
    return np.concatenate(arrays)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'tanh':
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _activate_grad(pre: np.ndarray, post: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'tanh':
        return 1.0 - post * post
    return (pre > 0.0).astype(np.float64)


def _check_inputs(features: np.ndarray, params: ParamVector, cfg: EncoderConfig) -> None:
    if features.ndim != 2 or features.shape[1] != cfg.input_dim:
        raise ContractViolation(f"特征宽度 {features.shape} 与 input_dim={cfg.input_dim} 不符")
    if params.shape != (cfg.param_count,):
        raise ContractViolation(f"参数长度 {params.shape} 与配置要求 {cfg.param_count} 不符")


def _forward(features: np.ndarray, params: ParamVector, cfg: EncoderConfig) -> Dict[str, Any]:
    """前向传播并保留反向传播所需的中间量"""
    _check_inputs(features, params, cfg)
    layers = unflatten_params(params, cfg.param_shapes)
    weights, biases = layers[0::2], layers[1::2]

    inputs = []
    pres = []
    h = features
    for W, b in zip(weights[:-1], biases[:-1]):
        inputs.append(h)
        pre = h @ W + b
        pres.append(pre)
        h = _activate(pre, cfg.activation)
    inputs.append(h)
    u = h @ weights[-1] + biases[-1]

    try:
        z, norms = normalize_rows(u, NORM_FLOOR, what="嵌入行")
    except DegenerateVectorError as e:
        raise DegenerateVectorError(f"编码结果退化: {e}", index=e.index) from e

    return {'weights': weights, 'inputs': inputs, 'pres': pres, 'z': z, 'norms': norms}


def encode(batch: FeatureBatch, params: ParamVector, cfg: EncoderConfig) -> EmbeddingBatch:
    """z ← f_θ(x)，仿射层 + 激活，最后逐行 l2 归一化"""
    cache = _forward(batch.features, params, cfg)
    return EmbeddingBatch(vectors=cache['z'])


def encode_backward(batch: FeatureBatch, params: ParamVector, upstream: np.ndarray,
                    cfg: EncoderConfig) -> ParamVector:
    """Σ⟨upstream, encode(x)⟩ 对参数的梯度（含归一化的雅可比）"""
    cache = _forward(batch.features, params, cfg)
    z, norms = cache['z'], cache['norms']
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != z.shape:
        raise ContractViolation(f"upstream 形状 {upstream.shape} 与输出 {z.shape} 不符")

    # d z / d u = (I - z zᵀ) / ||u||
    delta = (upstream - z * np.sum(upstream * z, axis=1, keepdims=True)) / norms[:, None]

    weights, inputs, pres = cache['weights'], cache['inputs'], cache['pres']
    grads: List[np.ndarray] = [None] * (2 * len(weights))
    for layer in range(len(weights) - 1, -1, -1):
        grads[2 * layer] = inputs[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            back = delta @ weights[layer].T
            delta = back * _activate_grad(pres[layer - 1], inputs[layer], cfg.activation)

    return np.concatenate([g.ravel() for g in grads])
