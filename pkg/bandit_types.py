"""
基础类型模块
负责臂向量、问题实例、可复现随机数流以及支撑集上的限制/嵌入运算
"""
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


logger = logging.getLogger(__name__)

# 单位球成员判定的浮点容差
BALL_TOLERANCE = 1e-9


class BanditError(Exception):
    """本项目所有错误的基类"""


class ValidationError(BanditError, ValueError):
    """输入校验错误"""


class BanditStateError(BanditError):
    """状态错误（例如运行记录不完整）"""


class NumericError(BanditError):
    """数值计算错误（非正定矩阵、非有限函数值等）"""


class UndefinedQuantityError(BanditError):
    """诊断量在给定参数下无定义"""


def as_vector(values, name: str = "vector") -> np.ndarray:
    """
    转换为一维浮点数组

    Args:
        values: 任意可转换为数组的对象
        name: 用于错误信息的名称

    Returns:
        一维 float64 数组
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} 必须是一维向量，实际维度: {arr.ndim}")
    return arr


def is_in_unit_ball(v, tol: float = BALL_TOLERANCE) -> bool:
    """判断向量是否在 ℓ₂ 单位球内（含容差）"""
    return float(np.linalg.norm(v)) <= 1.0 + tol


def validate_support(support: Sequence[int], K: Optional[int] = None) -> List[int]:
    """
    校验支撑集（保持调用方给定的顺序；本项目产生的支撑集均已排序）

    Args:
        support: 下标集合
        K: 环境维度，提供时检查越界

    Returns:
        下标列表

    Raises:
        ValidationError: 下标重复、为负或越界
    """
    indices = [int(i) for i in support]
    if len(set(indices)) != len(indices):
        raise ValidationError(f"支撑集包含重复下标: {indices}")
    for i in indices:
        if i < 0 or (K is not None and i >= K):
            raise ValidationError(f"支撑集下标越界: {i} (K={K})")
    return indices


@dataclass(frozen=True)
class ArmVector:
    """单位球 𝓑_K 中的臂"""

    coords: np.ndarray

    def __post_init__(self):
        coords = as_vector(self.coords, "arm").copy()
        if not is_in_unit_ball(coords):
            raise ValidationError(f"臂不在单位球内: ‖x‖₂ = {np.linalg.norm(coords):.12g}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


@dataclass(frozen=True)
class ProblemInstance:
    """
    稀疏线性老虎机问题实例

    theta 为未知参数，sigma 为噪声尺度（第 k 维噪声有界于 sigma_k/2）。
    """

    theta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        theta = as_vector(self.theta, "theta").copy()
        sigma = as_vector(self.sigma, "sigma").copy()
        if theta.shape != sigma.shape:
            raise ValidationError(f"theta 与 sigma 维度不一致: {theta.shape} vs {sigma.shape}")
        if theta.shape[0] < 1:
            raise ValidationError("维度 K 必须为正")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("theta 含有非有限值")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise ValidationError("sigma 必须为非负有限值")
        theta.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def create(cls, theta, sigma=0.0) -> "ProblemInstance":
        """由 theta 与标量或向量 sigma 构造实例"""
        theta = as_vector(theta, "theta")
        sigma_arr = np.asarray(sigma, dtype=np.float64)
        if sigma_arr.ndim == 0:
            sigma_arr = np.full(theta.shape, float(sigma_arr))
        return cls(theta=theta, sigma=sigma_arr)

    @property
    def K(self) -> int:
        return int(self.theta.shape[0])

    @property
    def support(self) -> List[int]:
        return [int(k) for k in np.flatnonzero(self.theta)]

    @property
    def S(self) -> int:
        return len(self.support)

    @property
    def theta_l2(self) -> float:
        return float(np.linalg.norm(self.theta))

    @property
    def sigma_l2(self) -> float:
        return float(np.linalg.norm(self.sigma))

    def restricted(self, support: Sequence[int]) -> "ProblemInstance":
        """返回限制到支撑集上的子问题"""
        return ProblemInstance(theta=restrict(self.theta, support), sigma=restrict(self.sigma, support))

    def digest(self) -> str:
        """(K, theta, sigma) 的稳定摘要"""
        h = hashlib.sha256()
        h.update(struct.pack("<q", self.K))
        h.update(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.sigma, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class RngStream:
    """
    可复现随机数流

    固定使用 numpy 的 PCG64 位生成器：相同种子在任何平台上产生逐位相同的序列。
    每次重复实验独占一个流，不在线程/进程间共享。
    """

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    @staticmethod
    def spawn_seed(base_seed: int, *indices: int) -> int:
        """
        稳定哈希派生子种子

        SHA-256(小端打包的 base_seed 与各下标) 的前 8 字节，按小端解释为无符号 64 位整数。
        """
        payload = struct.pack("<Q", int(base_seed) & 0xFFFFFFFFFFFFFFFF)
        for index in indices:
            payload += struct.pack("<Q", int(index) & 0xFFFFFFFFFFFFFFFF)
        return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def signs(self, size: int) -> np.ndarray:
        """独立公平的 ±1 序列"""
        return np.where(self.generator.integers(0, 2, size=size) == 1, 1.0, -1.0)

    def choice(self, K: int, size: int) -> np.ndarray:
        """无放回抽取下标"""
        return self.generator.choice(K, size=size, replace=False)


def restrict(v, support: Sequence[int]) -> np.ndarray:
    """
    将向量限制到支撑集坐标上

    Args:
        v: 长度 K 的向量
        support: 有序下标集合（大小 d）

    Returns:
        长度 d 的向量，第 j 个分量为 v[support_j]
    """
    v = as_vector(v, "v")
    indices = validate_support(support, v.shape[0])
    return v[np.asarray(indices, dtype=np.int64)] if indices else np.zeros(0)


def embed(v, support: Sequence[int], K: int) -> np.ndarray:
    """
    将支撑集上的向量嵌入回 ℝ^K（支撑集外为 0）

    Raises:
        ValidationError: 维度不匹配或下标越界
    """
    v = as_vector(v, "v")
    indices = validate_support(support, K)
    if len(indices) != v.shape[0]:
        raise ValidationError(f"维度不匹配: 向量长度 {v.shape[0]}，支撑集大小 {len(indices)}")
    out = np.zeros(int(K))
    if indices:
        out[np.asarray(indices, dtype=np.int64)] = v
    return out


def make_sparse_theta(K: int, S: int, norm: float, rng: RngStream, pattern: str = "equal") -> np.ndarray:
    """
    生成 S-稀疏参数

    Args:
        K: 维度
        S: 非零分量个数
        norm: 目标 ℓ₂ 范数
        rng: 随机数流（决定位置与符号）
        pattern: "equal" 等幅随机符号，"decaying" 幅度按 1/(j+1) 衰减

    Returns:
        长度 K 的参数向量
    """
    if not 0 <= S <= K:
        raise ValidationError(f"稀疏度必须满足 0 ≤ S ≤ K: S={S}, K={K}")
    theta = np.zeros(K)
    if S == 0 or norm == 0:
        return theta
    positions = np.sort(rng.choice(K, S))
    if pattern == "equal":
        magnitudes = np.ones(S)
    elif pattern == "decaying":
        magnitudes = 1.0 / np.arange(1, S + 1)
    else:
        raise ValidationError(f"未知的 theta 模式: {pattern}")
    values = magnitudes * rng.signs(S)
    theta[positions] = values * (norm / np.linalg.norm(values))
    return theta
