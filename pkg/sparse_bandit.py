"""
稀疏线性 UCB（SL-UCB）模块
支撑探索阶段：在 (1/√K){−1,+1}^K 上随机投影并估计 θ，满足停止条件后取活跃集；
受限线性老虎机阶段：在活跃集张成的子空间上运行 CB₂。
另含分析用诊断量（阈值 b、阶段长度界、A_min、子空间损失、集中事件检查）。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from bandit_types import (
    ProblemInstance,
    RngStream,
    UndefinedQuantityError,
    ValidationError,
    as_vector,
    embed,
    restrict,
)
from confidence_ball import ConfidenceBall2
from environment import BanditEnvironment, NoiseModel, RunRecord


logger = logging.getLogger(__name__)

PHASE_EXPLORE = "explore"
PHASE_EXPLOIT = "exploit"


@dataclass(frozen=True)
class SlucbConfig:
    """
    SL-UCB 参数

    sigma2_bar ≥ ‖σ‖₂ 与 theta2_bar ≥ ‖θ‖₂ 为已知上界；threshold_scale 为阈值 b 的乘子，
    默认 1.0 即理论值。min_rounds 为支撑探索的最少轮数（不超过 n），max_active 为受限阶段
    的最大维数（None 表示不截断），两者默认不改变算法。
    """

    sigma2_bar: float
    theta2_bar: float
    delta: float
    n: int
    threshold_scale: float = 1.0
    min_rounds: int = 1
    max_active: Optional[int] = None

    def __post_init__(self):
        if self.sigma2_bar < 0 or self.theta2_bar < 0:
            raise ValidationError("sigma2_bar 与 theta2_bar 必须非负")
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta 必须在 (0, 1) 内: {self.delta}")
        if self.n < 1:
            raise ValidationError(f"预算 n 必须 ≥ 1: {self.n}")
        if self.threshold_scale < 0:
            raise ValidationError(f"threshold_scale 必须非负: {self.threshold_scale}")
        if self.min_rounds < 1:
            raise ValidationError(f"min_rounds 必须 ≥ 1: {self.min_rounds}")
        if self.max_active is not None and self.max_active < 1:
            raise ValidationError(f"max_active 必须 ≥ 1: {self.max_active}")


def exploration_threshold(config: SlucbConfig, K: int) -> float:
    """阈值 b = (θ̄₂+σ̄₂)·√(2 log(2K/δ))（乘以 threshold_scale）"""
    if K < 1:
        raise ValidationError(f"K 必须 ≥ 1: {K}")
    base = (config.theta2_bar + config.sigma2_bar) * math.sqrt(2.0 * math.log(2.0 * K / config.delta))
    return config.threshold_scale * base


def sample_exploring_arm(K: int, rng: RngStream) -> np.ndarray:
    """从探索集 (1/√K){−1,+1}^K 中均匀抽取一个臂"""
    if K < 1:
        raise ValidationError(f"K 必须 ≥ 1: {K}")
    return rng.signs(K) / math.sqrt(K)


@dataclass(frozen=True)
class SupportExplorationState:
    """支撑探索阶段的估计状态：sums = Σ_i x_i r_i，θ̂ = (K/t)·sums"""

    K: int
    t: int = 0
    sums: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sums is None:
            object.__setattr__(self, "sums", np.zeros(self.K))

    @property
    def theta_hat(self) -> np.ndarray:
        if self.t == 0:
            return np.zeros(self.K)
        return (self.K / self.t) * self.sums


def update_estimate(state: SupportExplorationState, arm, reward: float) -> SupportExplorationState:
    """累加 x·r 并推进轮数"""
    x = as_vector(arm, "arm")
    if x.shape[0] != state.K:
        raise ValidationError(f"臂维度 {x.shape[0]} 与状态维度 {state.K} 不一致")
    return SupportExplorationState(K=state.K, t=state.t + 1, sums=state.sums + x * float(reward))


def should_stop(state: SupportExplorationState, b: float, n: int) -> bool:
    """
    支撑探索阶段的停止判定

    (i) max_k |θ̂_k| − 2b/√t ≥ 0，且 (ii) t ≥ √n / (max_k |θ̂_k| − b/√t)；
    (ii) 只在 (i) 成立时计算。t = n 时预算耗尽，无条件停止。
    """
    t = state.t
    if t < 1:
        raise ValidationError("停止判定需要至少一轮观测")
    if t >= n:
        return True
    peak = float(np.max(np.abs(state.theta_hat)))
    root_t = math.sqrt(t)
    if peak - 2.0 * b / root_t < 0:
        return False
    denom = peak - b / root_t
    if denom <= 0:
        return False
    return t >= math.sqrt(n) / denom


def active_set(theta_hat, b: float, T: int) -> List[int]:
    """活跃集 {k : |θ̂_{k,T}| ≥ 2b/√T}（按下标排序，零分量不入选）"""
    if T < 1:
        raise ValidationError(f"T 必须 ≥ 1: {T}")
    theta_hat = as_vector(theta_hat, "theta_hat")
    threshold = 2.0 * b / math.sqrt(T)
    mask = (np.abs(theta_hat) >= threshold) & (theta_hat != 0)
    return [int(k) for k in np.flatnonzero(mask)]


def cap_active_set(theta_hat, active: Sequence[int], max_active: Optional[int]) -> List[int]:
    """
    只保留 |θ̂_k| 最大的 max_active 个活跃坐标（同值取下标小者），结果按下标排序
    """
    active = sorted(int(k) for k in active)
    if max_active is None or len(active) <= max_active:
        return active
    theta_hat = as_vector(theta_hat, "theta_hat")
    order = sorted(active, key=lambda k: (-abs(float(theta_hat[k])), k))
    return sorted(order[:max_active])


def phase_bounds(b: float, theta_l2: float, S: int, n: int) -> Tuple[float, float]:
    """
    支撑探索阶段长度的解析界 (T_min, T_max) = (b²√n/‖θ‖₂, 9√S·b²√n/‖θ‖₂)

    仅用于诊断（依赖真实参数）。

    Raises:
        UndefinedQuantityError: ‖θ‖₂ = 0
    """
    if theta_l2 <= 0:
        raise UndefinedQuantityError("‖θ‖₂ = 0 时阶段长度界无定义")
    t_min = b * b * math.sqrt(n) / theta_l2
    return t_min, 9.0 * math.sqrt(S) * t_min


def stopping_window(b: float, theta_max: float, n: int) -> Tuple[float, float]:
    """
    集中事件 ξ 上逐条件推出的阶段长度区间

    下界 max(b²/θ*², √n/θ*)，上界 max(9b²/θ*², 3√n/θ*)，均不超过 n；θ* = max_k |θ_k|。
    """
    if theta_max <= 0:
        raise UndefinedQuantityError("θ = 0 时停止区间无定义")
    lower = max(b * b / theta_max ** 2, math.sqrt(n) / theta_max)
    upper = max(9.0 * b * b / theta_max ** 2, 3.0 * math.sqrt(n) / theta_max)
    return min(lower, float(n)), min(math.ceil(upper), n)


def theorem2_bound(theta2_bar: float, sigma2_bar: float, K: int, delta: float, S: int, n: int) -> float:
    """诊断用遗憾上界 118(θ̄₂+σ̄₂)²·log(2K/δ)·S·√n"""
    return 118.0 * (theta2_bar + sigma2_bar) ** 2 * math.log(2.0 * K / delta) * S * math.sqrt(n)


def a_min_set(theta, b: float, n: int) -> List[int]:
    """ξ 上必然被活跃集捕获的坐标 {k : |θ_k| ≥ 3b√‖θ‖₂/n^{1/4}}"""
    theta = as_vector(theta, "theta")
    threshold = 3.0 * b * math.sqrt(float(np.linalg.norm(theta))) / n ** 0.25
    mask = (np.abs(theta) >= threshold) & (theta != 0)
    return [int(k) for k in np.flatnonzero(mask)]


def subspace_loss(theta, active: Sequence[int]) -> float:
    """限制到活跃集后的范数损失 ‖θ‖₂ − ‖θ_𝒜‖₂"""
    theta = as_vector(theta, "theta")
    return float(np.linalg.norm(theta) - np.linalg.norm(restrict(theta, active)))


def concentration_check(instance: ProblemInstance, trajectory: Sequence[np.ndarray], b: float) -> bool:
    """
    集中事件 ξ：对支撑探索阶段的每一轮 t，‖θ − θ̂_t‖_∞ ≤ b/√t
    """
    if len(trajectory) == 0:
        return True
    estimates = np.asarray(trajectory, dtype=np.float64)
    deviations = np.max(np.abs(estimates - instance.theta[np.newaxis, :]), axis=1)
    radii = b / np.sqrt(np.arange(1, estimates.shape[0] + 1))
    return bool(np.all(deviations <= radii))


class SparseLinearUCB:
    """
    SL-UCB 在线智能体

    每轮调用 select_arm() 取臂，观测奖励后调用 observe()；智能体自行从探索阶段
    切换到受限 CB₂ 阶段。既可由老虎机环境驱动，也可由梯度上升包装器驱动。
    """

    def __init__(self, K: int, config: SlucbConfig, rng: RngStream, keep_trajectory: bool = True):
        """
        初始化智能体

        Args:
            K: 环境维度
            config: SL-UCB 参数
            rng: 用于抽取探索臂的随机数流
            keep_trajectory: 是否保留每轮的 θ̂（集中事件检查需要）
        """
        self.logger = logging.getLogger(__name__)
        self.K = K
        self.config = config
        self.rng = rng
        self.b = exploration_threshold(config, K)
        self.state = SupportExplorationState(K=K)
        self.phase = PHASE_EXPLORE
        self.T: Optional[int] = None
        self.active: Optional[List[int]] = None
        self.cb2: Optional[ConfidenceBall2] = None
        self.keep_trajectory = keep_trajectory
        self.trajectory: List[np.ndarray] = []

    def select_arm(self) -> np.ndarray:
        if self.phase == PHASE_EXPLORE:
            return sample_exploring_arm(self.K, self.rng)
        if self.cb2 is None:
            return np.zeros(self.K)
        return embed(self.cb2.select_arm(), self.active, self.K)

    def observe(self, arm: np.ndarray, reward: float) -> None:
        if self.phase == PHASE_EXPLORE:
            self.state = update_estimate(self.state, arm, reward)
            if self.keep_trajectory:
                self.trajectory.append(self.state.theta_hat)
            warmed_up = self.state.t >= min(self.config.min_rounds, self.config.n)
            if warmed_up and should_stop(self.state, self.b, self.config.n):
                self._start_exploitation()
        elif self.cb2 is not None:
            self.cb2.update(restrict(arm, self.active), reward)

    def _start_exploitation(self) -> None:
        self.T = self.state.t
        theta_hat = self.state.theta_hat
        selected = active_set(theta_hat, self.b, self.T)
        self.active = cap_active_set(theta_hat, selected, self.config.max_active)
        if len(self.active) < len(selected):
            self.logger.debug(f"活跃集由 {len(selected)} 个坐标截断为 {len(self.active)} 个")
        self.phase = PHASE_EXPLOIT
        remaining = self.config.n - self.T
        if remaining == 0:
            self.logger.debug(f"支撑探索耗尽预算: T={self.T}，活跃集大小 {len(self.active)}")
        elif not self.active:
            self.logger.warning(f"活跃集为空，剩余 {remaining} 轮选择零向量")
        else:
            self.cb2 = ConfidenceBall2(len(self.active), remaining, self.config.delta)
        self.logger.debug(f"支撑探索结束: T={self.T}, |A|={len(self.active)}, b={self.b:.6g}")


@dataclass
class SlucbResult:
    """一次 SL-UCB 运行的完整结果"""

    record: RunRecord
    T: int
    active: List[int]
    b: float
    trajectory: List[np.ndarray]


def run_slucb_detailed(instance: ProblemInstance, config: SlucbConfig, noise: NoiseModel,
                       rng: RngStream, keep_trajectory: bool = True,
                       explore_only: bool = False) -> SlucbResult:
    """
    运行 SL-UCB 并保留诊断所需的中间量

    Args:
        explore_only: 只运行支撑探索阶段（记录在停止轮截止）
    """
    env = BanditEnvironment(instance, noise, rng)
    agent = SparseLinearUCB(instance.K, config, rng, keep_trajectory=keep_trajectory)
    record = env.new_record("slucb", config.n)
    for _ in range(config.n):
        if explore_only and agent.phase != PHASE_EXPLORE:
            break
        x = agent.select_arm()
        phase = agent.phase
        reward = env.play(record, phase, x)
        agent.observe(x, reward)
    record.metadata["T"] = agent.T
    record.metadata["active_set"] = agent.active
    record.metadata["b"] = agent.b
    return SlucbResult(record=record, T=agent.T, active=agent.active, b=agent.b, trajectory=agent.trajectory)


def explore_support(instance: ProblemInstance, config: SlucbConfig, noise: NoiseModel,
                    rng: RngStream) -> SlucbResult:
    """只运行支撑探索阶段，返回 T、活跃集与 θ̂ 轨迹"""
    return run_slucb_detailed(instance, config, noise, rng, keep_trajectory=True, explore_only=True)


def run_slucb(instance: ProblemInstance, config: SlucbConfig, noise: NoiseModel,
              rng: RngStream) -> Tuple[RunRecord, int, List[int]]:
    """
    完整运行 SL-UCB：支撑探索后在活跃集上运行预算为 n−T 的 CB₂

    Returns:
        (运行记录, T, 活跃集)
    """
    result = run_slucb_detailed(instance, config, noise, rng, keep_trajectory=False)
    return result.record, result.T, result.active
