"""
置信球算法（ConfidenceBall₂）模块
在单位球臂集上维护椭球置信集，选取椭球中范数最大点的方向作为臂，并做秩一更新
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Set, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import bisect

from bandit_types import (
    NumericError,
    ProblemInstance,
    RngStream,
    ValidationError,
    as_vector,
    embed,
    validate_support,
)
from environment import BanditEnvironment, NoiseModel, RunRecord


logger = logging.getLogger(__name__)

# 久期方程二分的绝对容差与迭代上限
SECULAR_TOL = 1e-12
SECULAR_MAX_ITER = 200
# 范数低于该值时视为零点，返回固定的平局臂
ZERO_NORM = 1e-12

# 已告警过的 (d, n) 组合
_WARNED_SHAPES: Set[Tuple[int, int]] = set()


def beta_param(d: int, n: int, delta: float) -> float:
    """
    置信半径参数 β = 128·d·(log(n²/δ))²（已知预算版本，对 t 恒定）

    Raises:
        ValidationError: 参数越界（δ > n² 时对数为负）
    """
    if d < 1 or n < 1:
        raise ValidationError(f"需要 d ≥ 1 且 n ≥ 1: d={d}, n={n}")
    if not 0 < delta <= n * n:
        raise ValidationError(f"delta 必须满足 0 < δ ≤ n²: δ={delta}, n={n}")
    return 128.0 * d * math.log(n * n / delta) ** 2


def theorem1_bound(d: int, theta_l2: float, sigma_l2: float, n: int, delta: float) -> float:
    """诊断用遗憾上界 64·d·(‖θ‖₂+‖σ‖₂)·(log(n²/δ))²·√n"""
    return 64.0 * d * (theta_l2 + sigma_l2) * math.log(n * n / delta) ** 2 * math.sqrt(n)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    """翻转符号使最后一个非零坐标为正"""
    nonzero = np.flatnonzero(np.abs(v) > ZERO_NORM)
    if nonzero.size and v[nonzero[-1]] < 0:
        return -v
    return v


def _condition_report(eigenvalues: np.ndarray) -> str:
    lam_min, lam_max = float(eigenvalues[0]), float(eigenvalues[-1])
    cond = lam_max / lam_min if lam_min > 0 else float("inf")
    return f"λ_min={lam_min:.6g}, λ_max={lam_max:.6g}, 条件数={cond:.6g}"


def max_norm_in_ellipsoid(A, center, beta: float, tol: float = SECULAR_TOL,
                          max_iter: int = SECULAR_MAX_ITER) -> Tuple[np.ndarray, float]:
    """
    求椭球 {ν : (ν−c)ᵀA(ν−c) ≤ β} 中 ℓ₂ 范数最大的点

    特征分解 A = QΛQᵀ 后，边界上的驻点满足 u_i = c'_i/(μλ_i − 1)，μ > 1/λ_min，
    由 Σ λ_i u_i² = β 的久期方程二分求 μ；当中心与最小特征子空间正交且
    μ = 1/λ_min 处仍在椭球内部时（困难情形），补上最小特征向量方向的分量。

    Args:
        A: 对称正定矩阵
        center: 椭球中心
        beta: 半径参数（二次型上界）
        tol: 二分的绝对容差
        max_iter: 二分迭代上限

    Returns:
        (nu_star, value)，value = ‖nu_star‖₂

    Raises:
        NumericError: A 非对称或非正定
    """
    c = as_vector(center, "center")
    A = np.asarray(A, dtype=np.float64)
    d = c.shape[0]
    if A.shape != (d, d):
        raise ValidationError(f"矩阵形状 {A.shape} 与中心维度 {d} 不一致")
    if beta < 0:
        raise ValidationError(f"beta 必须非负: {beta}")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-10 * max(1.0, float(np.max(np.abs(A))))):
        raise NumericError("矩阵不对称")
    try:
        lam, Q = scipy.linalg.eigh(A)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericError(f"特征分解失败: {e}") from e
    if not np.all(np.isfinite(lam)) or lam[0] <= 0:
        raise NumericError(f"矩阵非正定: {_condition_report(lam)}")

    if beta == 0:
        return c.copy(), float(np.linalg.norm(c))

    if d == 1:
        radius = math.sqrt(beta / lam[0])
        nu = c + (radius if c[0] >= 0 else -radius)
        return nu, float(abs(nu[0]))

    cp = Q.T @ c
    lam_min = lam[0]
    min_mask = lam <= lam_min * (1.0 + 1e-10)
    other = ~min_mask
    c_norm = float(np.linalg.norm(c))

    def secular(mu: float) -> float:
        denom = mu * lam - 1.0
        return float(np.sum(lam * cp ** 2 / denom ** 2)) - beta

    def hard_case() -> np.ndarray:
        u = np.zeros(d)
        u[other] = cp[other] / (lam[other] / lam_min - 1.0)
        rest = max(beta - float(np.sum(lam * u ** 2)), 0.0)
        q = _canonical_sign(Q[:, int(np.flatnonzero(min_mask)[0])])
        y = cp.copy()
        y[min_mask] = 0.0
        return Q @ (y + u) + math.sqrt(rest / lam_min) * q

    c_min_sq = float(np.sum(cp[min_mask] ** 2))
    if c_min_sq <= (1e-12 * (1.0 + c_norm)) ** 2:
        g_hard = float(np.sum(lam[other] * cp[other] ** 2 / (lam[other] / lam_min - 1.0) ** 2))
        if g_hard <= beta:
            nu = hard_case()
            return nu, float(np.linalg.norm(nu))

    mu_lo = 1.0 / lam_min
    gap = 1.0 / lam_min
    for _ in range(max_iter * 5):
        if secular(mu_lo + gap) > 0:
            break
        gap /= 2.0
    else:
        nu = hard_case()
        return nu, float(np.linalg.norm(nu))
    lo = mu_lo + gap
    hi = lo + 1.0 / lam_min
    while secular(hi) > 0:
        hi = lo + 2.0 * (hi - lo)
    mu = bisect(secular, lo, hi, xtol=tol, maxiter=max_iter, disp=False)

    u = cp / (mu * lam - 1.0)
    u *= math.sqrt(beta / float(np.sum(lam * u ** 2)))
    nu = Q @ (cp + u)
    return nu, float(np.linalg.norm(nu))


@dataclass(frozen=True)
class EllipsoidState:
    """
    置信椭球状态

    A 为设计矩阵（初始化为单位阵），xr_sum 为 Σ x_t r_t，theta_hat 解 A·θ̂ = xr_sum。
    """

    d: int
    A: np.ndarray
    xr_sum: np.ndarray
    theta_hat: np.ndarray
    beta: float
    t: int = 0

    @classmethod
    def initial(cls, d: int, beta: float) -> "EllipsoidState":
        return cls(d=d, A=np.eye(d), xr_sum=np.zeros(d), theta_hat=np.zeros(d), beta=float(beta), t=0)

    def contains(self, nu) -> bool:
        """判断点是否在置信椭球内"""
        diff = as_vector(nu, "nu") - self.theta_hat
        return float(diff @ self.A @ diff) <= self.beta * (1.0 + 1e-9)


def select_arm(state: EllipsoidState, tol: float = SECULAR_TOL) -> np.ndarray:
    """
    选臂：椭球中范数最大点的单位方向

    若该点范数低于 1e-12，返回第一个标准基向量。
    """
    nu, value = max_norm_in_ellipsoid(state.A, state.theta_hat, state.beta, tol=tol)
    if value < ZERO_NORM:
        arm = np.zeros(state.d)
        arm[0] = 1.0
        return arm
    return nu / value


def update(state: EllipsoidState, arm, reward: float) -> EllipsoidState:
    """
    秩一更新 A' = A + x xᵀ，xr' = xr + x·r，并用 Cholesky 分解重解 θ̂
    """
    x = as_vector(arm, "arm")
    if x.shape[0] != state.d:
        raise ValidationError(f"臂维度 {x.shape[0]} 与状态维度 {state.d} 不一致")
    A = state.A + np.outer(x, x)
    xr_sum = state.xr_sum + x * float(reward)
    try:
        theta_hat = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), xr_sum)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"设计矩阵 Cholesky 分解失败: {e}") from e
    return replace(state, A=A, xr_sum=xr_sum, theta_hat=theta_hat, t=state.t + 1)


class ConfidenceBall2:
    """ConfidenceBall₂ 算法（已知预算版本）"""

    def __init__(self, d: int, n: int, delta: float, tol: float = SECULAR_TOL):
        """
        初始化算法

        Args:
            d: 维度
            n: 本算法的预算（用于 β）
            delta: 置信参数
            tol: 子问题求解容差
        """
        self.logger = logging.getLogger(__name__)
        self.n = n
        self.delta = delta
        self.tol = tol
        self.state = EllipsoidState.initial(d, beta_param(d, n, delta))
        if d > n:
            self.logger.debug(f"维度 d={d} 大于预算 n={n}")

    def select_arm(self) -> np.ndarray:
        return select_arm(self.state, tol=self.tol)

    def update(self, arm: np.ndarray, reward: float) -> None:
        self.state = update(self.state, arm, reward)


def play_restricted_cb2(env: BanditEnvironment, record: RunRecord, support: Sequence[int],
                        rounds: int, delta: float, phase: str = "exploit") -> Optional[ConfidenceBall2]:
    """
    在支撑集张成的子空间上运行 CB₂，每轮将臂嵌入回 ℝ^K 后在环境中拉动

    支撑集为空时剩余轮次全部选择零向量。

    Returns:
        运行后的算法对象（支撑集为空或轮数为 0 时返回 None）
    """
    K = env.instance.K
    support = validate_support(support, K)
    if rounds <= 0:
        return None
    if not support:
        zero = np.zeros(K)
        for _ in range(rounds):
            env.play(record, phase, zero)
        return None
    algo = ConfidenceBall2(len(support), rounds, delta)
    for _ in range(rounds):
        x = algo.select_arm()
        reward = env.play(record, phase, embed(x, support, K))
        algo.update(x, reward)
    return algo


def run_cb2(instance: ProblemInstance, n: int, delta: float, noise: NoiseModel, rng: RngStream,
            support: Optional[Sequence[int]] = None, algorithm: str = "cb2") -> RunRecord:
    """
    完整运行 n 轮 CB₂（选臂 → 拉动 → 更新）

    Args:
        instance: 问题实例
        n: 预算
        delta: 置信参数
        noise: 噪声模型
        rng: 随机数流
        support: 限制的支撑集，默认使用全部坐标
        algorithm: 记录中的算法名

    Returns:
        完整的运行记录
    """
    env = BanditEnvironment(instance, noise, rng)
    record = env.new_record(algorithm, n)
    support = list(range(instance.K)) if support is None else sorted(support)
    record.metadata["support"] = support
    shape = (len(support), n)
    if shape[0] > n and shape not in _WARNED_SHAPES:
        _WARNED_SHAPES.add(shape)
        logger.warning(f"维度 d={shape[0]} 大于预算 n={n}，置信椭球难以收缩")
    algo = play_restricted_cb2(env, record, support, n, delta, phase="cb2")
    if algo is not None:
        record.metadata["theta_covered"] = algo.state.contains(instance.restricted(support).theta)
    return record
