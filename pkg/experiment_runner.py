"""
实验运行模块
负责按网格做带种子的重复实验、汇总遗憾统计、拟合标度指数并写出 CSV 与绘图数据
"""
import csv
import hashlib
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from bandit_types import ProblemInstance, RngStream, UndefinedQuantityError, ValidationError, make_sparse_theta
from confidence_ball import run_cb2
from environment import NoiseModel, regret, run_random
from sparse_bandit import (
    SlucbConfig,
    a_min_set,
    concentration_check,
    phase_bounds,
    run_slucb_detailed,
    subspace_loss,
)


logger = logging.getLogger(__name__)

ALGORITHMS = ("slucb", "cb2_full", "cb2_oracle_support", "random")

RAW_CSV_COLUMNS = ["cell_id", "seed", "algorithm", "K", "n", "S", "regret", "T", "A_size",
                   "precision", "recall", "xi_holds", "T_min", "T_max", "subspace_loss", "covered"]
AGGREGATE_CSV_COLUMNS = ["cell_id", "algorithm", "K", "n", "S", "count", "failed", "regret_mean",
                         "regret_std", "regret_stderr", "regret_q10", "regret_q50", "regret_q90",
                         "T_mean", "precision_mean", "recall_mean", "xi_frequency", "covered_frequency"]

# 累计遗憾曲线的采样点数
CURVE_POINTS = 20


@dataclass(frozen=True)
class ExperimentCell:
    """网格中的一个单元"""

    algorithm: str
    K: int
    n: int
    S: int

    @property
    def cell_id(self) -> str:
        return f"{self.algorithm}_K{self.K}_n{self.n}_S{self.S}"

    @property
    def problem_key(self) -> str:
        return f"K{self.K}_n{self.n}_S{self.S}"


@dataclass
class ExperimentSpec:
    """
    实验网格

    sigma 为每个坐标的噪声尺度；sigma2_bar / theta2_bar 缺省时分别取 ‖σ‖₂ 与 theta_norm。
    """

    name: str
    K_values: Sequence[int]
    n_values: Sequence[int]
    S_values: Sequence[int]
    algorithms: Sequence[str] = ("slucb",)
    theta_norm: float = 1.0
    theta_pattern: str = "equal"
    sigma: float = 0.1
    noise: str = "uniform"
    delta: float = 0.01
    seeds: int = 10
    base_seed: int = 0
    sigma2_bar: Optional[float] = None
    theta2_bar: Optional[float] = None
    threshold_scale: float = 1.0

    def __post_init__(self):
        for algorithm in self.algorithms:
            if algorithm not in ALGORITHMS:
                raise ValidationError(f"未知算法: {algorithm}，可选: {', '.join(ALGORITHMS)}")
        if self.seeds < 1:
            raise ValidationError(f"重复次数必须 ≥ 1: {self.seeds}")
        for K, S in itertools.product(self.K_values, self.S_values):
            if not 0 <= S <= K:
                raise ValidationError(f"稀疏度越界: S={S}, K={K}")
        if any(n < 1 for n in self.n_values):
            raise ValidationError("预算 n 必须 ≥ 1")

    def cells(self) -> List[ExperimentCell]:
        """规范顺序的单元列表"""
        return [ExperimentCell(algorithm=a, K=int(K), n=int(n), S=int(S))
                for a, K, n, S in itertools.product(self.algorithms, self.K_values, self.n_values, self.S_values)]


@dataclass
class AggregateStats:
    """单元汇总统计"""

    cell: ExperimentCell
    count: int = 0
    error: Optional[str] = None
    regret_mean: float = float("nan")
    regret_std: float = float("nan")
    regret_quantiles: Tuple[float, float, float] = (float("nan"),) * 3
    T_mean: float = float("nan")
    precision_mean: float = float("nan")
    recall_mean: float = float("nan")
    xi_frequency: float = float("nan")
    covered_frequency: float = float("nan")
    curve_t: List[int] = field(default_factory=list)
    curve_mean: List[float] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def regret_stderr(self) -> float:
        return self.regret_std / math.sqrt(self.count) if self.count else float("nan")


@dataclass
class ExperimentResult:
    """实验输出：逐次重复的原始行与各单元汇总"""

    raw_rows: List[Dict[str, Any]]
    stats: List[AggregateStats]

    def stats_for(self, cell_id: str) -> AggregateStats:
        for s in self.stats:
            if s.cell.cell_id == cell_id:
                return s
        raise KeyError(cell_id)


def _key_to_int(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def replication_seeds(spec: ExperimentSpec, cell: ExperimentCell, rep: int) -> Tuple[int, int]:
    """
    (实例种子, 算法种子)

    实例种子只依赖问题参数，同一问题在不同算法间共享 θ；两者都不依赖单元在网格中的位置。
    """
    instance_seed = RngStream.spawn_seed(spec.base_seed, _key_to_int(cell.problem_key), rep)
    algo_seed = RngStream.spawn_seed(spec.base_seed, _key_to_int(cell.cell_id), rep)
    return instance_seed, algo_seed


def support_metrics(active: Sequence[int], instance: ProblemInstance, b: float, n: int) -> Tuple[float, float]:
    """
    活跃集相对真实支撑集的精确率，以及在 A_min 上的召回率（空集约定为 1）
    """
    active_set = set(active)
    support = set(instance.support)
    a_min = set(a_min_set(instance.theta, b, n))
    precision = len(active_set & support) / len(active_set) if active_set else 1.0
    recall = len(active_set & a_min) / len(a_min) if a_min else 1.0
    return precision, recall


def fit_scaling_exponent(points: Sequence[Tuple[float, float]]) -> float:
    """
    log(平均遗憾) 对 log(n) 的最小二乘斜率

    非正遗憾点被剔除并告警。

    Raises:
        ValidationError: 点数少于 3 或剔除后不足 2 个
    """
    if len(points) < 3:
        raise ValidationError(f"拟合标度指数至少需要 3 个点: {len(points)}")
    kept = [(n, r) for n, r in points if n > 0 and r > 0]
    if len(kept) < len(points):
        logger.warning(f"剔除 {len(points) - len(kept)} 个非正遗憾点")
    if len(kept) < 2:
        raise ValidationError("有效点不足，无法拟合")
    x = np.log([n for n, _ in kept])
    y = np.log([r for _, r in kept])
    return float(stats.linregress(x, y).slope)


def _curve_checkpoints(n: int) -> List[int]:
    return sorted(set(int(t) for t in np.linspace(1, n, min(CURVE_POINTS, n)).round()))


def build_instance(spec: ExperimentSpec, cell: ExperimentCell, instance_seed: int) -> ProblemInstance:
    theta = make_sparse_theta(cell.K, cell.S, spec.theta_norm, RngStream(instance_seed), spec.theta_pattern)
    return ProblemInstance.create(theta, spec.sigma)


def run_replication(spec: ExperimentSpec, cell: ExperimentCell, rep: int) -> Dict[str, Any]:
    """
    运行单元中的一次重复

    Returns:
        原始行字典（附带累计遗憾曲线 "_curve" 与错误信息 "_error"）
    """
    instance_seed, algo_seed = replication_seeds(spec, cell, rep)
    row: Dict[str, Any] = {"cell_id": cell.cell_id, "seed": algo_seed, "algorithm": cell.algorithm,
                           "K": cell.K, "n": cell.n, "S": cell.S, "T": "", "A_size": "",
                           "precision": "", "recall": "", "xi_holds": "", "T_min": "", "T_max": "",
                           "subspace_loss": "", "covered": "", "_rep": rep, "_error": None}
    try:
        instance = build_instance(spec, cell, instance_seed)
        noise = NoiseModel.for_instance(instance, spec.noise)
        rng = RngStream(algo_seed)
        if cell.algorithm == "slucb":
            config = SlucbConfig(
                sigma2_bar=spec.sigma2_bar if spec.sigma2_bar is not None else instance.sigma_l2,
                theta2_bar=spec.theta2_bar if spec.theta2_bar is not None else spec.theta_norm,
                delta=spec.delta, n=cell.n, threshold_scale=spec.threshold_scale)
            result = run_slucb_detailed(instance, config, noise, rng, keep_trajectory=True)
            record = result.record
            precision, recall = support_metrics(result.active, instance, result.b, cell.n)
            row.update(T=result.T, A_size=len(result.active), precision=precision, recall=recall,
                       xi_holds=int(concentration_check(instance, result.trajectory, result.b)),
                       subspace_loss=subspace_loss(instance.theta, result.active))
            try:
                row["T_min"], row["T_max"] = phase_bounds(result.b, instance.theta_l2, instance.S, cell.n)
            except UndefinedQuantityError:
                pass
        elif cell.algorithm == "cb2_full":
            record = run_cb2(instance, cell.n, spec.delta, noise, rng, algorithm="cb2_full")
        elif cell.algorithm == "cb2_oracle_support":
            record = run_cb2(instance, cell.n, spec.delta, noise, rng, support=instance.support,
                             algorithm="cb2_oracle_support")
        else:
            record = run_random(instance, cell.n, noise, rng)
        if "theta_covered" in record.metadata:
            row["covered"] = int(record.metadata["theta_covered"])
        row["regret"] = regret(record, instance)
        cum = np.cumsum(record.inst_perf)
        row["_curve"] = [(t, t * instance.theta_l2 - float(cum[t - 1])) for t in _curve_checkpoints(cell.n)]
    except Exception as e:
        row["_error"] = f"{type(e).__name__}: {e}"
    return row


def _run_task(args) -> Dict[str, Any]:
    return run_replication(*args)


class ExperimentRunner:
    """实验运行器：并行执行重复实验，按 (单元, 重复) 规范顺序归约"""

    def __init__(self, spec: ExperimentSpec, jobs: int = 1):
        """
        初始化运行器

        Args:
            spec: 实验网格
            jobs: 并行进程数（1 表示串行）
        """
        self.spec = spec
        self.jobs = max(1, int(jobs))
        self.logger = logging.getLogger(__name__)

    def run(self) -> ExperimentResult:
        cells = self.spec.cells()
        tasks = [(self.spec, cell, rep) for cell in cells for rep in range(self.spec.seeds)]
        self.logger.info(f"实验 {self.spec.name}: {len(cells)} 个单元 × {self.spec.seeds} 次重复")
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                rows = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * self.jobs))))
        else:
            rows = [_run_task(task) for task in tasks]

        by_cell: Dict[str, List[Dict[str, Any]]] = {}
        for row in rows:
            by_cell.setdefault(row["cell_id"], []).append(row)

        raw_rows: List[Dict[str, Any]] = []
        all_stats: List[AggregateStats] = []
        for cell in cells:
            cell_rows = sorted(by_cell.get(cell.cell_id, []), key=lambda r: r["_rep"])
            errors = [r["_error"] for r in cell_rows if r["_error"]]
            if errors:
                self.logger.error(f"单元 {cell.cell_id} 失败: {errors[0]}")
                all_stats.append(AggregateStats(cell=cell, error=errors[0]))
                continue
            raw_rows.extend(cell_rows)
            all_stats.append(aggregate(cell, cell_rows))
            self.logger.info(f"单元完成: {cell.cell_id} 平均遗憾 {all_stats[-1].regret_mean:.6g}")
        return ExperimentResult(raw_rows=raw_rows, stats=all_stats)


def aggregate(cell: ExperimentCell, rows: Sequence[Dict[str, Any]]) -> AggregateStats:
    """把同一单元的重复结果归约为汇总统计（与重复的先后顺序无关）"""
    rows = sorted(rows, key=lambda r: r["_rep"])
    regrets = np.asarray([r["regret"] for r in rows], dtype=np.float64)
    count = len(rows)
    result = AggregateStats(cell=cell, count=count)
    result.regret_mean = float(np.mean(regrets))
    result.regret_std = float(np.std(regrets, ddof=1)) if count > 1 else 0.0
    q10, q50, q90 = np.quantile(regrets, [0.1, 0.5, 0.9])
    result.regret_quantiles = (float(q10), float(q50), float(q90))
    if cell.algorithm == "slucb":
        result.T_mean = float(np.mean([r["T"] for r in rows]))
        result.precision_mean = float(np.mean([r["precision"] for r in rows]))
        result.recall_mean = float(np.mean([r["recall"] for r in rows]))
        result.xi_frequency = float(np.mean([r["xi_holds"] for r in rows]))
    covered = [r["covered"] for r in rows if r.get("covered", "") != ""]
    if covered:
        result.covered_frequency = float(np.mean(covered))
    curves = [r["_curve"] for r in rows]
    result.curve_t = [t for t, _ in curves[0]]
    result.curve_mean = [float(v) for v in np.mean([[v for _, v in c] for c in curves], axis=0)]
    return result


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_raw_csv(rows: Sequence[Dict[str, Any]], path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RAW_CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RAW_CSV_COLUMNS])
    return path


def write_aggregate_csv(all_stats: Sequence[AggregateStats], path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(AGGREGATE_CSV_COLUMNS)
        for s in all_stats:
            q10, q50, q90 = s.regret_quantiles
            writer.writerow([_fmt(v) for v in (
                s.cell.cell_id, s.cell.algorithm, s.cell.K, s.cell.n, s.cell.S, s.count, int(s.failed),
                s.regret_mean, s.regret_std, s.regret_stderr, q10, q50, q90,
                s.T_mean, s.precision_mean, s.recall_mean, s.xi_frequency, s.covered_frequency)])
    return path


def write_plot_data(name: str, curve: str, xs: Sequence[float], ys: Sequence[float], out_dir: str) -> str:
    """写出两列 (x, y) 的绘图数据文件 <experiment>/<curve>.dat"""
    directory = os.path.join(out_dir, name)
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{curve}.dat")
    with open(path, "w", encoding="utf-8") as f:
        for x, y in zip(xs, ys):
            f.write(f"{_fmt(float(x))} {_fmt(float(y))}\n")
    return path


def write_outputs(spec: ExperimentSpec, result: ExperimentResult, out_dir: str) -> List[str]:
    """
    写出原始 CSV、汇总 CSV 与绘图数据

    每个单元一条平均累计遗憾曲线；每个 (算法, K, S) 一条平均遗憾对 n 的曲线。
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = [write_raw_csv(result.raw_rows, os.path.join(out_dir, "raw.csv")),
             write_aggregate_csv(result.stats, os.path.join(out_dir, "aggregate.csv"))]
    ok = [s for s in result.stats if not s.failed]
    for s in ok:
        paths.append(write_plot_data(spec.name, f"{s.cell.cell_id}_cumregret", s.curve_t, s.curve_mean, out_dir))
    groups: Dict[Tuple[str, int, int], List[AggregateStats]] = {}
    for s in ok:
        groups.setdefault((s.cell.algorithm, s.cell.K, s.cell.S), []).append(s)
    for (algorithm, K, S), members in sorted(groups.items()):
        members = sorted(members, key=lambda m: m.cell.n)
        paths.append(write_plot_data(spec.name, f"{algorithm}_K{K}_S{S}_regret_vs_n",
                                     [m.cell.n for m in members], [m.regret_mean for m in members], out_dir))
    return paths


def run_experiment(spec: ExperimentSpec, out_dir: Optional[str] = None, jobs: int = 1) -> ExperimentResult:
    """运行实验网格；给出输出目录时写出 CSV 与绘图数据"""
    result = ExperimentRunner(spec, jobs=jobs).run()
    if out_dir:
        write_outputs(spec, result, out_dir)
    return result
