"""
老虎机环境模块
负责按有界噪声模型生成奖励，并以真实参数统计性能与遗憾
"""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from bandit_types import (
    ArmVector,
    BanditStateError,
    ProblemInstance,
    RngStream,
    ValidationError,
    as_vector,
)


logger = logging.getLogger(__name__)

# 臂坐标旁路文件只在维度不超过该值时写出
ARM_SIDECAR_MAX_K = 64

RUN_CSV_COLUMNS = ["t", "phase", "reward", "inst_perf", "cum_perf", "cum_regret", "arm_norm"]


class NoiseKind(str, Enum):
    """噪声类型"""

    UNIFORM = "uniform"
    RADEMACHER = "rademacher"


@dataclass(frozen=True)
class NoiseModel:
    """
    有界白噪声模型

    第 k 维噪声满足 |η_k| ≤ scale_k/2，均值为零，各维各轮独立。
    每轮总是抽取完整的 K 维噪声向量，与所选臂无关。
    """

    kind: NoiseKind
    scale: np.ndarray

    def __post_init__(self):
        scale = as_vector(self.scale, "noise scale").copy()
        if np.any(scale < 0):
            raise ValidationError("噪声尺度必须非负")
        scale.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    @classmethod
    def for_instance(cls, instance: ProblemInstance, kind: str = NoiseKind.UNIFORM) -> "NoiseModel":
        return cls(kind=NoiseKind(kind), scale=instance.sigma)

    def draw(self, rng: RngStream) -> np.ndarray:
        """抽取一轮 K 维噪声"""
        half = self.scale / 2.0
        if self.kind is NoiseKind.UNIFORM:
            return rng.uniform(-half, half)
        return half * rng.signs(half.shape[0])


def pull(instance: ProblemInstance, arm, noise: NoiseModel, rng: RngStream) -> float:
    """
    拉动一次臂，返回 ⟨x, θ + η⟩

    Args:
        instance: 问题实例
        arm: 单位球中的臂（ArmVector 或向量）
        noise: 噪声模型
        rng: 调用方独占的随机数流

    Returns:
        奖励

    Raises:
        ValidationError: 臂与实例维度不一致或臂不在单位球内
    """
    x = arm.coords if isinstance(arm, ArmVector) else ArmVector(arm).coords
    if x.shape[0] != instance.K:
        raise ValidationError(f"臂维度 {x.shape[0]} 与实例维度 {instance.K} 不一致")
    if noise.scale.shape[0] != instance.K:
        raise ValidationError(f"噪声维度 {noise.scale.shape[0]} 与实例维度 {instance.K} 不一致")
    eta = noise.draw(rng)
    return float(x @ (instance.theta + eta))


def optimal_performance(instance: ProblemInstance, n: int) -> float:
    """最优策略（始终选择 θ/‖θ‖₂）的性能 n‖θ‖₂"""
    if n < 0:
        raise ValidationError(f"轮数必须非负: {n}")
    return n * instance.theta_l2


def random_sphere_arm(K: int, rng: RngStream) -> np.ndarray:
    """单位球面上的均匀随机方向"""
    while True:
        v = rng.normal(K)
        norm = np.linalg.norm(v)
        if norm > 0:
            return v / norm


@dataclass
class RunRecord:
    """
    单次运行的逐轮记录

    每轮记录 (阶段, 臂, 奖励, 瞬时性能 ⟨θ, x_t⟩)，元数据包含种子、预算、算法名与实例摘要。
    """

    n: int
    algorithm: str
    seed: Optional[int] = None
    instance_digest: str = ""
    phases: List[str] = field(default_factory=list)
    arms: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    inst_perf: List[float] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def append(self, phase: str, arm: np.ndarray, reward: float, inst_perf: float) -> None:
        if len(self.rewards) >= self.n:
            raise BanditStateError(f"运行记录已满 ({self.n} 轮)")
        self.phases.append(phase)
        self.arms.append(np.array(arm, dtype=np.float64))
        self.rewards.append(float(reward))
        self.inst_perf.append(float(inst_perf))

    @property
    def rounds(self) -> int:
        return len(self.rewards)

    @property
    def is_complete(self) -> bool:
        return self.rounds == self.n

    @property
    def cumulative_performance(self) -> float:
        return float(math.fsum(self.inst_perf))

    @property
    def reward_sum(self) -> float:
        return float(math.fsum(self.rewards))

    def full_metadata(self) -> Dict[str, Any]:
        meta = {
            "algorithm": self.algorithm,
            "n": self.n,
            "seed": self.seed,
            "instance_digest": self.instance_digest,
        }
        meta.update(self.metadata)
        return meta

    def to_csv(self, path: str, instance: ProblemInstance) -> str:
        """
        写出逐轮 CSV，并在旁边写出元数据 JSON（K ≤ 64 时附带臂坐标文件）

        Args:
            path: CSV 文件路径
            instance: 问题实例（用于累计遗憾）

        Returns:
            CSV 文件路径
        """
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        theta_l2 = instance.theta_l2
        cum_perf = 0.0
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(RUN_CSV_COLUMNS)
            for i in range(self.rounds):
                cum_perf += self.inst_perf[i]
                t = i + 1
                writer.writerow([
                    t,
                    self.phases[i],
                    repr(self.rewards[i]),
                    repr(self.inst_perf[i]),
                    repr(cum_perf),
                    repr(t * theta_l2 - cum_perf),
                    repr(float(np.linalg.norm(self.arms[i]))),
                ])
        base, _ = os.path.splitext(path)
        with open(f"{base}.meta.json", "w", encoding="utf-8") as f:
            json.dump(self.full_metadata(), f, ensure_ascii=False, indent=2, sort_keys=True)
        if instance.K <= ARM_SIDECAR_MAX_K:
            self.write_arm_sidecar(f"{base}.arms.csv")
        return path

    def write_arm_sidecar(self, path: str) -> None:
        """写出每轮臂坐标"""
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            for i, arm in enumerate(self.arms, start=1):
                writer.writerow([i] + [repr(float(c)) for c in arm])


def regret(record: RunRecord, instance: ProblemInstance) -> float:
    """
    遗憾 n‖θ‖₂ − Σ_t ⟨θ, x_t⟩

    Raises:
        BanditStateError: 记录不完整
    """
    if not record.is_complete:
        raise BanditStateError(f"运行记录不完整: {record.rounds}/{record.n} 轮")
    return optimal_performance(instance, record.n) - record.cumulative_performance


def reward_sum_gap(record: RunRecord, instance: ProblemInstance, delta: float) -> Tuple[float, float]:
    """
    奖励和与性能之差，以及 Azuma 不等式给出的 1−δ 高概率界

    Returns:
        (gap, bound)，gap = Σr_t − Σ⟨θ,x_t⟩，bound = √(2 log(1/δ))·‖σ‖₂·√n
    """
    if not 0 < delta <= 1:
        raise ValidationError(f"delta 必须在 (0, 1] 内: {delta}")
    gap = record.reward_sum - record.cumulative_performance
    bound = math.sqrt(2.0 * math.log(1.0 / delta)) * instance.sigma_l2 * math.sqrt(record.rounds)
    return gap, bound


class BanditEnvironment:
    """老虎机环境（持有实例、噪声模型与调用方的随机数流）"""

    def __init__(self, instance: ProblemInstance, noise: NoiseModel, rng: RngStream):
        """
        初始化环境

        Args:
            instance: 问题实例
            noise: 噪声模型
            rng: 本次运行独占的随机数流
        """
        self.instance = instance
        self.noise = noise
        self.rng = rng
        self.logger = logging.getLogger(__name__)

    def new_record(self, algorithm: str, n: int) -> RunRecord:
        return RunRecord(n=n, algorithm=algorithm, seed=self.rng.seed,
                         instance_digest=self.instance.digest())

    def play(self, record: RunRecord, phase: str, arm: np.ndarray) -> float:
        """拉动臂并写入记录，返回观测到的奖励"""
        reward = pull(self.instance, arm, self.noise, self.rng)
        record.append(phase, arm, reward, float(self.instance.theta @ arm))
        return reward


def run_random(instance: ProblemInstance, n: int, noise: NoiseModel, rng: RngStream) -> RunRecord:
    """基线：每轮在单位球面上均匀随机选臂"""
    env = BanditEnvironment(instance, noise, rng)
    record = env.new_record("random", n)
    for _ in range(n):
        env.play(record, "random", random_sphere_arm(instance.K, rng))
    return record
