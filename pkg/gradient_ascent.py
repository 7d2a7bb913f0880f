"""
梯度上升应用模块
把固定步长的梯度上升建模为线性老虎机（臂为步长方向，奖励为函数增量），
并提供稀疏二次目标、全梯度基线（OGS）与随机最优方向基线（BRD）。
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import bisect

from bandit_types import NumericError, RngStream, ValidationError, as_vector
from environment import NoiseModel, RunRecord, random_sphere_arm
from sparse_bandit import SlucbConfig, SparseLinearUCB


logger = logging.getLogger(__name__)

STRATEGY_OGS = "OGS"
STRATEGY_SLUCB = "SL-UCB"
STRATEGY_BRD = "BRD"

TRAJECTORY_CSV_COLUMNS = ["t", "f_value", "delta_f", "step_norm", "phase"]
TABLE_CSV_COLUMNS = ["ratio", "strategy", "mean", "stderr", "seeds", "regret_mean", "positive_fraction"]

# 梯度上升中 SL-UCB 的默认校准：阈值乘子、支撑探索占预算的最小比例、受限阶段最大维数
ASCENT_THRESHOLD_SCALE = 0.1
ASCENT_EXPLORE_FRACTION = 0.5
ASCENT_MAX_ACTIVE = 30


@dataclass
class ObjectiveFunction:
    """
    目标函数

    oracle_gradient 只供基线与诊断使用；quadratic 字段在二次目标上保存
    (中心, 权重)，用于精确计算可达球内的最大值。
    """

    name: str
    K: int
    eval: Callable[[np.ndarray], float]
    oracle_gradient: Optional[Callable[[np.ndarray], np.ndarray]]
    relevant_dims: List[int]
    quadratic: Optional[Dict[str, np.ndarray]] = None
    linear: Optional[np.ndarray] = None


def quadratic_sparse(K: int, relevant: int = 10, center: float = 25.0, weight: float = 20.0) -> ObjectiveFunction:
    """
    稀疏二次目标 f(x) = Σ_{k<relevant} −weight·(x_k − center)²

    Raises:
        ValidationError: K < relevant
    """
    if relevant < 1:
        raise ValidationError(f"相关维度数必须 ≥ 1: {relevant}")
    if K < relevant:
        raise ValidationError(f"二次目标需要 K ≥ {relevant}: K={K}")
    dims = np.arange(relevant)
    centers = np.full(relevant, float(center))
    weights = np.full(relevant, float(weight))

    def f(x: np.ndarray) -> float:
        diff = x[:relevant] - centers
        return float(-np.sum(weights * diff * diff))

    def grad(x: np.ndarray) -> np.ndarray:
        g = np.zeros(K)
        g[:relevant] = -2.0 * weights * (x[:relevant] - centers)
        return g

    return ObjectiveFunction(
        name="quadratic_sparse",
        K=K,
        eval=f,
        oracle_gradient=grad,
        relevant_dims=[int(k) for k in dims],
        quadratic={"dims": dims, "center": centers, "weights": weights},
    )


def linear_objective(g) -> ObjectiveFunction:
    """线性目标 f(x) = ⟨g, x⟩"""
    g = as_vector(g, "g").copy()
    return ObjectiveFunction(
        name="linear",
        K=g.shape[0],
        eval=lambda x: float(g @ x),
        oracle_gradient=lambda x: g.copy(),
        relevant_dims=[int(k) for k in np.flatnonzero(g)],
        linear=g,
    )


@dataclass
class AscentConfig:
    """
    梯度上升参数

    epsilon 为步长，u0 为起点，n 为步数预算；eval_noise 为函数值的有界加性噪声宽度
    （均匀分布于 [−eval_noise/2, eval_noise/2]），gradient_noise 为作用在步长上的
    环境噪声 ⟨u_t − u_{t−1}, η_t⟩。
    """

    epsilon: float
    u0: np.ndarray
    n: int
    eval_noise: float = 0.0
    gradient_noise: Optional[NoiseModel] = None

    def __post_init__(self):
        self.u0 = as_vector(self.u0, "u0").copy()
        if self.epsilon <= 0:
            raise ValidationError(f"步长必须为正: {self.epsilon}")
        if self.n < 1:
            raise ValidationError(f"步数预算必须 ≥ 1: {self.n}")
        if self.eval_noise < 0:
            raise ValidationError(f"函数值噪声必须非负: {self.eval_noise}")


@dataclass
class Trajectory:
    """梯度上升轨迹 u_0..u_n 与对应的函数值"""

    strategy: str
    points: List[np.ndarray] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    phases: List[str] = field(default_factory=list)
    record: Optional[RunRecord] = None

    def add(self, u: np.ndarray, value: float, phase: str) -> None:
        self.points.append(np.array(u, dtype=np.float64))
        self.values.append(float(value))
        self.phases.append(phase)

    @property
    def improvement(self) -> float:
        return self.values[-1] - self.values[0]

    def step_norms(self) -> np.ndarray:
        pts = np.asarray(self.points)
        return np.linalg.norm(np.diff(pts, axis=0), axis=1)

    def to_csv(self, path: str) -> str:
        """写出逐步轨迹 CSV"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        norms = self.step_norms()
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRAJECTORY_CSV_COLUMNS)
            for t, value in enumerate(self.values):
                delta = value - self.values[t - 1] if t else 0.0
                step = float(norms[t - 1]) if t else 0.0
                writer.writerow([t, repr(value), repr(delta), repr(step), self.phases[t]])
        return path


class _Evaluator:
    """带噪声与有限性检查的函数求值器"""

    def __init__(self, f: ObjectiveFunction, cfg: AscentConfig, rng: Optional[RngStream]):
        self.f = f
        self.cfg = cfg
        self.rng = rng

    def __call__(self, u: np.ndarray) -> float:
        value = self.f.eval(u)
        if not math.isfinite(value):
            raise NumericError(f"目标函数在迭代点处取非有限值: f={value}, u={u.tolist()}")
        if self.cfg.eval_noise > 0:
            if self.rng is None:
                raise ValidationError("函数值带噪声时需要随机数流")
            half = self.cfg.eval_noise / 2.0
            value += float(self.rng.uniform(-half, half))
        return value


def run_slucb_ascent(f: ObjectiveFunction, cfg: AscentConfig, slucb_cfg: SlucbConfig,
                     rng: RngStream) -> Trajectory:
    """
    用 SL-UCB 做梯度上升

    每轮 SL-UCB 给出单位球中的臂 x̃_t，迭代点移动 u_t = u_{t−1} + ε·x̃_t，
    反馈给算法的奖励为 (f(u_t) − f(u_{t−1}))/ε（加上可选的步长噪声项）。

    Raises:
        ValidationError: slucb_cfg.n 与 cfg.n 不一致或维度不匹配
        NumericError: 函数值非有限
    """
    if slucb_cfg.n != cfg.n:
        raise ValidationError(f"SL-UCB 预算 {slucb_cfg.n} 与步数预算 {cfg.n} 不一致")
    if cfg.u0.shape[0] != f.K:
        raise ValidationError(f"起点维度 {cfg.u0.shape[0]} 与目标维度 {f.K} 不一致")
    evaluate = _Evaluator(f, cfg, rng)
    agent = SparseLinearUCB(f.K, slucb_cfg, rng, keep_trajectory=False)
    record = RunRecord(n=cfg.n, algorithm="slucb_ascent", seed=rng.seed)
    traj = Trajectory(strategy=STRATEGY_SLUCB, record=record)

    u = cfg.u0.copy()
    f_prev = evaluate(u)
    traj.add(u, f_prev, "start")
    for _ in range(cfg.n):
        x = agent.select_arm()
        phase = agent.phase
        step = cfg.epsilon * x
        u_next = u + step
        f_next = evaluate(u_next)
        increment = f_next - f_prev
        if cfg.gradient_noise is not None:
            increment += float(step @ cfg.gradient_noise.draw(rng))
        reward = increment / cfg.epsilon
        agent.observe(x, reward)
        inst_perf = float(f.oracle_gradient(u) @ x) if f.oracle_gradient else reward
        record.append(phase, x, reward, inst_perf)
        u, f_prev = u_next, f_next
        traj.add(u, f_prev, phase)
    record.metadata["T"] = agent.T
    record.metadata["active_set"] = agent.active
    return traj


def run_oracle_gradient(f: ObjectiveFunction, cfg: AscentConfig) -> Trajectory:
    """全梯度基线：沿归一化梯度方向走步长 ε，梯度范数低于 1e-12 时原地不动"""
    if f.oracle_gradient is None:
        raise ValidationError("全梯度基线需要目标函数的梯度")
    traj = Trajectory(strategy=STRATEGY_OGS)
    u = cfg.u0.copy()
    traj.add(u, f.eval(u), "start")
    for _ in range(cfg.n):
        g = f.oracle_gradient(u)
        norm = float(np.linalg.norm(g))
        if norm >= 1e-12:
            u = u + cfg.epsilon * g / norm
        traj.add(u, f.eval(u), "oracle")
    return traj


def run_best_random_direction(f: ObjectiveFunction, cfg: AscentConfig, rng: RngStream) -> Trajectory:
    """
    随机最优方向基线

    每步在单位球面上均匀抽取方向 v，评估 f(u + εv)，严格变大才移动；每步一次函数求值。
    """
    evaluate = _Evaluator(f, cfg, rng)
    traj = Trajectory(strategy=STRATEGY_BRD)
    u = cfg.u0.copy()
    f_cur = evaluate(u)
    traj.add(u, f_cur, "start")
    for _ in range(cfg.n):
        candidate = u + cfg.epsilon * random_sphere_arm(f.K, rng)
        f_candidate = evaluate(candidate)
        if f_candidate > f_cur:
            u, f_cur = candidate, f_candidate
            traj.add(u, f_cur, "accept")
        else:
            traj.add(u, f_cur, "reject")
    return traj


def _quadratic_ball_max(f: ObjectiveFunction, u0: np.ndarray, radius: float) -> float:
    """对角二次目标在球 𝓑₂(u0, radius) 上的最大值（对乘子 λ 做一维搜索）"""
    q = f.quadratic
    dims, center, weights = q["dims"], q["center"], q["weights"]
    z = center - u0[dims]

    def step(lam: float) -> np.ndarray:
        return weights * z / (weights + lam)

    if np.linalg.norm(z) <= radius:
        lam = 0.0
    else:
        hi = 1.0
        while np.linalg.norm(step(hi)) > radius:
            hi *= 2.0
        lam = bisect(lambda l: float(np.linalg.norm(step(l))) - radius, 0.0, hi, xtol=1e-8, disp=False)
    x = u0.copy()
    x[dims] = u0[dims] + step(lam)
    return f.eval(x)


def _approximate_ball_max(f: ObjectiveFunction, u0: np.ndarray, radius: float, rng: RngStream,
                          starts: int = 8, iterations: int = 400) -> float:
    """一般目标：多起点投影梯度上升（近似）"""
    if f.oracle_gradient is None:
        raise ValidationError("一般目标的遗憾计算需要梯度")
    best = f.eval(u0)
    for s in range(starts):
        x = u0.copy() if s == 0 else u0 + radius * rng.uniform() * random_sphere_arm(f.K, rng)
        lr = radius / 10.0
        for _ in range(iterations):
            g = f.oracle_gradient(x)
            norm = float(np.linalg.norm(g))
            if norm < 1e-12:
                break
            x = x + lr * g / norm
            offset = x - u0
            dist = float(np.linalg.norm(offset))
            if dist > radius:
                x = u0 + offset * (radius / dist)
            lr *= 0.98
        best = max(best, f.eval(x))
    return best


def gradient_regret(f: ObjectiveFunction, u0, un, n: int, epsilon: float,
                    rng: Optional[RngStream] = None) -> float:
    """
    梯度遗憾 max_{x∈𝓑₂(u0, nε)} f(x) − f(u_n)

    二次目标与线性目标精确求解；一般目标用多起点局部上升近似。
    """
    u0 = as_vector(u0, "u0")
    un = as_vector(un, "un")
    radius = n * epsilon
    if radius <= 0:
        raise ValidationError(f"可达半径 nε 必须为正: {radius}")
    if f.linear is not None:
        best = f.eval(u0) + radius * float(np.linalg.norm(f.linear))
    elif f.quadratic is not None:
        best = _quadratic_ball_max(f, u0, radius)
    else:
        best = _approximate_ball_max(f, u0, radius, rng or RngStream(0))
    return best - f.eval(un)


def ascent_slucb_config(f: ObjectiveFunction, cfg: AscentConfig, delta: float = 0.01,
                        sigma2_bar: float = 0.0, theta2_bar: Optional[float] = None,
                        threshold_scale: float = ASCENT_THRESHOLD_SCALE,
                        explore_fraction: float = ASCENT_EXPLORE_FRACTION,
                        max_active: Optional[int] = ASCENT_MAX_ACTIVE) -> SlucbConfig:
    """
    为梯度上升构造 SL-UCB 参数

    θ̄₂ 未给出时取 ‖∇f(u0)‖₂（需要梯度）。默认缩小阈值，让支撑探索至少运行
    explore_fraction·n 轮，并把受限阶段截断到 |θ̂| 最大的 max_active 个坐标。

    Raises:
        ValidationError: explore_fraction 不在 (0, 1] 内或缺少梯度且未给出 theta2_bar
    """
    if not 0 < explore_fraction <= 1:
        raise ValidationError(f"explore_fraction 必须在 (0, 1] 内: {explore_fraction}")
    if theta2_bar is None:
        if f.oracle_gradient is None:
            raise ValidationError("没有梯度时必须显式给出 theta2_bar")
        theta2_bar = float(np.linalg.norm(f.oracle_gradient(cfg.u0)))
    min_rounds = max(1, math.ceil(explore_fraction * cfg.n))
    return SlucbConfig(sigma2_bar=sigma2_bar, theta2_bar=theta2_bar, delta=delta, n=cfg.n,
                       threshold_scale=threshold_scale, min_rounds=min_rounds, max_active=max_active)


def finite_difference_check(f: ObjectiveFunction, points: Sequence[np.ndarray], rng: RngStream,
                            rel_tol: float = 1e-4, max_coords: int = 32) -> bool:
    """
    梯度与中心差分比较（步长 1e-5·(1+‖u‖)）

    高维时只检查相关维度加上随机抽取的若干坐标。
    """
    if f.oracle_gradient is None:
        return True
    for u in points:
        u = as_vector(u, "point")
        coords = list(f.relevant_dims)
        chosen = set(coords)
        others = [k for k in range(f.K) if k not in chosen]
        if others:
            extra = min(max_coords, len(others))
            picked = rng.choice(len(others), extra)
            coords += [others[int(i)] for i in picked]
        h = 1e-5 * (1.0 + float(np.linalg.norm(u)))
        g = f.oracle_gradient(u)
        fd = np.empty(len(coords))
        for j, k in enumerate(coords):
            e = np.zeros(f.K)
            e[k] = h
            fd[j] = (f.eval(u + e) - f.eval(u - e)) / (2.0 * h)
        exact = g[coords]
        if np.linalg.norm(fd - exact) > rel_tol * max(1.0, float(np.linalg.norm(exact))):
            return False
    return True


@dataclass
class ComparisonRow:
    """对比表的一行"""

    ratio: float
    strategy: str
    mean: float
    stderr: float
    seeds: int
    regret_mean: float = float("nan")
    positive_fraction: float = float("nan")


class GradientAscentRunner:
    """梯度上升对比实验（OGS / SL-UCB / BRD 在不同 K/n 下的 f(u_n) − f(u_0)）"""

    def __init__(self, n: int = 100, epsilon: float = 1.0, relevant: int = 10, eval_noise: float = 0.0,
                 delta: float = 0.01, sigma2_bar: float = 0.0,
                 threshold_scale: float = ASCENT_THRESHOLD_SCALE,
                 explore_fraction: float = ASCENT_EXPLORE_FRACTION,
                 max_active: Optional[int] = ASCENT_MAX_ACTIVE, base_seed: int = 0):
        """
        初始化实验

        Args:
            n: 步数预算
            epsilon: 步长
            relevant: 二次目标的相关维度数
            eval_noise: 函数值噪声宽度
            delta: SL-UCB 置信参数
            sigma2_bar: SL-UCB 噪声上界
            threshold_scale: SL-UCB 阈值乘子
            explore_fraction: 支撑探索占预算的最小比例
            max_active: 受限阶段的最大维数（None 不截断）
            base_seed: 基础种子
        """
        self.logger = logging.getLogger(__name__)
        self.n = n
        self.epsilon = epsilon
        self.relevant = relevant
        self.eval_noise = eval_noise
        self.delta = delta
        self.sigma2_bar = sigma2_bar
        self.threshold_scale = threshold_scale
        self.explore_fraction = explore_fraction
        self.max_active = max_active
        self.base_seed = base_seed

    def _slucb_config(self, f: ObjectiveFunction, cfg: AscentConfig) -> SlucbConfig:
        return ascent_slucb_config(f, cfg, delta=self.delta, sigma2_bar=self.sigma2_bar,
                                   threshold_scale=self.threshold_scale,
                                   explore_fraction=self.explore_fraction, max_active=self.max_active)

    def _config(self, K: int) -> AscentConfig:
        return AscentConfig(epsilon=self.epsilon, u0=np.zeros(K), n=self.n, eval_noise=self.eval_noise)

    def run_strategy(self, strategy: str, K: int, seed: int) -> Trajectory:
        """运行单个策略的一条轨迹"""
        f = quadratic_sparse(K, relevant=self.relevant)
        cfg = self._config(K)
        rng = RngStream(seed)
        if strategy == STRATEGY_OGS:
            return run_oracle_gradient(f, cfg)
        if strategy == STRATEGY_BRD:
            return run_best_random_direction(f, cfg, rng)
        if strategy == STRATEGY_SLUCB:
            return run_slucb_ascent(f, cfg, self._slucb_config(f, cfg), rng)
        raise ValidationError(f"未知策略: {strategy}")

    def figure4_experiment(self, ratios: Sequence[float], seeds: int) -> List[ComparisonRow]:
        """
        对每个 K/n 比例与策略，统计 seeds 次重复的 f(u_n) − f(u_0) 均值与标准误

        OGS 是确定性的（无函数值噪声时），只运行一次并按 seeds 条记录。
        """
        rows = []
        for ratio_index, ratio in enumerate(ratios):
            K = int(round(ratio * self.n))
            f = quadratic_sparse(K, relevant=self.relevant)
            u0 = self._config(K).u0
            for strategy_index, strategy in enumerate((STRATEGY_OGS, STRATEGY_SLUCB, STRATEGY_BRD)):
                gains, regrets = [], []
                for rep in range(seeds):
                    if strategy == STRATEGY_OGS and rep > 0 and self.eval_noise == 0:
                        gains.append(gains[0])
                        regrets.append(regrets[0])
                        continue
                    seed = RngStream.spawn_seed(self.base_seed, ratio_index, strategy_index, rep)
                    traj = self.run_strategy(strategy, K, seed)
                    gains.append(traj.improvement)
                    regrets.append(gradient_regret(f, u0, traj.points[-1], self.n, self.epsilon))
                values = np.asarray(gains)
                stderr = float(np.std(values, ddof=1) / math.sqrt(seeds)) if seeds > 1 else 0.0
                rows.append(ComparisonRow(ratio=ratio, strategy=strategy, mean=float(np.mean(values)),
                                          stderr=stderr, seeds=seeds, regret_mean=float(np.mean(regrets)),
                                          positive_fraction=float(np.mean(values > 0))))
                self.logger.info(f"K/n={ratio:g} {strategy}: 平均提升 {rows[-1].mean:.6g} ± {stderr:.3g}，"
                                 f"提升为正的比例 {rows[-1].positive_fraction:.2f}")
        return rows

    def trace_experiment(self, seed: int, K: int = 100, relevant: int = 2, n: int = 50) -> Trajectory:
        """两个相关维度的单条 SL-UCB 轨迹（用于观察探索阶段的抖动与后续跟随）"""
        f = quadratic_sparse(K, relevant=relevant)
        cfg = AscentConfig(epsilon=self.epsilon, u0=np.zeros(K), n=n, eval_noise=self.eval_noise)
        return run_slucb_ascent(f, cfg, self._slucb_config(f, cfg), RngStream(seed))


def write_comparison_table(rows: Sequence[ComparisonRow], path: str) -> str:
    """写出对比表 CSV"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TABLE_CSV_COLUMNS)
        for row in rows:
            writer.writerow([f"{row.ratio:g}", row.strategy, repr(row.mean), repr(row.stderr), row.seeds,
                             repr(row.regret_mean), repr(row.positive_fraction)])
    return path


def figure4_experiment(ratios: Sequence[float], n: int, seeds: int, **kwargs) -> List[ComparisonRow]:
    """便捷入口：构造 GradientAscentRunner 并运行对比实验"""
    return GradientAscentRunner(n=n, **kwargs).figure4_experiment(ratios, seeds)
