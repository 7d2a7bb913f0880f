#!/usr/bin/env python3
"""
稀疏线性随机老虎机实验主程序
运行 SL-UCB / CB₂ 遗憾实验、梯度上升对比实验与数值自检
"""
import argparse
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional

from bandit_types import BanditError, ValidationError
from config_manager import ConfigError, ConfigManager
from experiment_runner import ExperimentSpec, fit_scaling_exponent, run_experiment, write_plot_data
from gradient_ascent import GradientAscentRunner, write_comparison_table
from self_test import SelfTestRunner

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

BANDIT_REQUIRED = ("problem.K", "problem.n", "slucb.delta", "slucb.sigma2_bar", "slucb.theta2_bar",
                   "experiment.seeds")


def setup_logging(log_level: str = "INFO"):
    """
    设置日志配置

    Args:
        log_level: 日志级别
    """
    # 创建日志目录
    log_dir = "logs"
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f'Invalid log level: {log_level}')

    logging.basicConfig(
        level=numeric_level,
        format=log_format,
        handlers=[
            logging.FileHandler(f'{log_dir}/sparse_bandit.log', encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


def resolve_output_dir(out: str, name: str, tag: Optional[str]) -> str:
    """输出目录 <out>/<实验名>/<标签或时间戳>"""
    label = tag or datetime.now().strftime("%Y%m%d_%H%M%S")
    path = os.path.join(out, name, label)
    os.makedirs(path, exist_ok=True)
    return path


def build_bandit_spec(config: Dict[str, Any]) -> ExperimentSpec:
    """由配置构造实验网格"""
    return ExperimentSpec(
        name=config["experiment.name"],
        K_values=config["problem.K"],
        n_values=config["problem.n"],
        S_values=config["problem.S"],
        algorithms=config["experiment.algorithm"],
        theta_norm=config["problem.theta_norm"],
        theta_pattern=config["problem.theta_pattern"],
        sigma=config["problem.sigma"],
        noise=config["problem.noise"],
        delta=config["slucb.delta"],
        seeds=config["experiment.seeds"],
        base_seed=config["experiment.seed"],
        sigma2_bar=config["slucb.sigma2_bar"],
        theta2_bar=config["slucb.theta2_bar"],
        threshold_scale=config["slucb.threshold_scale"],
    )


def check_gradient_config(config: Dict[str, Any]) -> None:
    """二次目标要求每个比例给出的 K 不小于相关维度数"""
    relevant = config["gradient.relevant"]
    if relevant < 1:
        raise ConfigError(f"gradient.relevant 必须 ≥ 1: {relevant}", key="gradient.relevant")
    for ratio in config["gradient.ratios"]:
        K = int(round(ratio * config["gradient.n"]))
        if K < relevant:
            raise ConfigError(f"K/n={ratio:g} 给出 K={K}，小于相关维度数 {relevant}", key="gradient.ratios")
    if config["gradient.trace_K"] < config["gradient.trace_relevant"]:
        raise ConfigError("gradient.trace_K 必须 ≥ gradient.trace_relevant", key="gradient.trace_K")


def cmd_bandit(args: argparse.Namespace) -> int:
    """运行遗憾实验网格"""
    logger = logging.getLogger(__name__)
    manager = ConfigManager(args.config)
    config = manager.load_config(args.set)
    manager.require(config, BANDIT_REQUIRED)
    if args.jobs is not None:
        config = manager.update_config(config, {"experiment.jobs": args.jobs})
    try:
        spec = build_bandit_spec(config)
    except ValidationError as e:
        raise ConfigError(str(e)) from e

    out_dir = resolve_output_dir(args.out, spec.name, args.tag)
    manager.save_config(config, os.path.join(out_dir, "resolved.conf"))
    logger.info(f"实验 {spec.name} 输出目录: {out_dir}")

    result = run_experiment(spec, out_dir=out_dir, jobs=config["experiment.jobs"])

    for algorithm in spec.algorithms:
        for K in spec.K_values:
            for S in spec.S_values:
                points = [(s.cell.n, s.regret_mean) for s in result.stats
                          if not s.failed and s.cell.algorithm == algorithm and s.cell.K == K and s.cell.S == S]
                if len(points) < 3:
                    continue
                try:
                    slope = fit_scaling_exponent(points)
                except ValidationError as e:
                    logger.warning(f"{algorithm} K={K} S={S} 无法拟合标度指数: {e}")
                    continue
                print(f"📈 {algorithm} K={K} S={S}: 遗憾 ∝ n^{slope:.3f}")

    failed = [s.cell.cell_id for s in result.stats if s.failed]
    print(f"📁 结果已写入 {out_dir}")
    if failed:
        print(f"❌ {len(failed)} 个单元失败: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"✅ 完成 {len(result.stats)} 个单元")
    return EXIT_OK


def cmd_gradient(args: argparse.Namespace) -> int:
    """运行梯度上升对比实验（可选输出单条轨迹）"""
    logger = logging.getLogger(__name__)
    manager = ConfigManager(args.config)
    config = manager.load_config(args.set)
    check_gradient_config(config)

    runner = GradientAscentRunner(
        n=config["gradient.n"],
        epsilon=config["gradient.epsilon"],
        relevant=config["gradient.relevant"],
        eval_noise=config["gradient.eval_noise"],
        delta=config["gradient.delta"],
        sigma2_bar=config["gradient.sigma2_bar"],
        threshold_scale=config["gradient.threshold_scale"],
        explore_fraction=config["gradient.explore_fraction"],
        max_active=config["gradient.max_active"] or None,
        base_seed=config["experiment.seed"],
    )
    name = config["experiment.name"]
    out_dir = resolve_output_dir(args.out, name, args.tag)
    manager.save_config(config, os.path.join(out_dir, "resolved.conf"))
    logger.info(f"梯度实验 {name} 输出目录: {out_dir}")

    rows = runner.figure4_experiment(config["gradient.ratios"], config["gradient.seeds"])
    write_comparison_table(rows, os.path.join(out_dir, "table.csv"))
    for row in rows:
        print(f"📊 K/n={row.ratio:g} {row.strategy:>6}: {row.mean:.6g} ± {row.stderr:.3g}"
              f"  梯度遗憾 {row.regret_mean:.6g}")

    if args.trace:
        trajectory = runner.trace_experiment(config["experiment.seed"], K=config["gradient.trace_K"],
                                             relevant=config["gradient.trace_relevant"],
                                             n=config["gradient.trace_n"])
        trajectory.to_csv(os.path.join(out_dir, "trace.csv"))
        xs = [float(u[0]) for u in trajectory.points]
        ys = [float(u[1]) if len(u) > 1 else 0.0 for u in trajectory.points]
        write_plot_data(name, "trace_relevant_plane", xs, ys, out_dir)
        print(f"🧭 轨迹已写入 {os.path.join(out_dir, 'trace.csv')}")

    print(f"✅ 结果已写入 {out_dir}")
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    """运行数值自检套件"""
    results = SelfTestRunner(seed=0).run()
    for result in results:
        mark = "✅" if result.passed else "❌"
        print(f"{mark} {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"❌ 自检失败: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("✅ 全部自检通过")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='稀疏线性随机老虎机实验（SL-UCB / CB₂ / 梯度上升）',
        epilog=ConfigManager.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='日志级别')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='配置文件路径（key=value）')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='覆盖配置项，可重复')
    common.add_argument('--out', default='out', help='输出根目录')
    common.add_argument('--tag', help='输出子目录名（默认时间戳）')

    bandit = subparsers.add_parser('bandit', parents=[common], help='遗憾实验网格')
    bandit.add_argument('--jobs', type=int, help='并行进程数（覆盖 experiment.jobs）')
    bandit.set_defaults(handler=cmd_bandit)

    gradient = subparsers.add_parser('gradient', parents=[common], help='梯度上升对比实验')
    gradient.add_argument('--trace', action='store_true', help='额外输出一条 SL-UCB 轨迹')
    gradient.set_defaults(handler=cmd_gradient)

    selftest = subparsers.add_parser('selftest', help='数值自检')
    selftest.set_defaults(handler=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        setup_logging(args.log_level)
        logger = logging.getLogger(__name__)
        logger.info(f"命令: {args.command}")
        return args.handler(args)
    except ConfigError as e:
        print(f"❌ 配置错误: {e}")
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("\n👋 实验已中断")
        return EXIT_RUNTIME
    except BanditError as e:
        print(f"❌ 运行失败: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        print(f"❌ 运行失败: {e}")
        logging.getLogger(__name__).exception("未处理的异常")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
