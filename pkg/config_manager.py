"""
配置管理模块
负责实验配置文件（key=value 文本）的加载、校验、覆盖与序列化
"""
import io
import logging
import os
from typing import Any, Dict, Optional, Sequence, Tuple

from dotenv import dotenv_values

from bandit_types import BanditError


class ConfigError(BanditError):
    """配置错误（带行号与配置项名）"""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        prefix = f"第 {line} 行: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


# 配置项: (类型, 默认值, 说明)；默认值为 None 表示命令需要时必须显式给出
CONFIG_SCHEMA: Dict[str, Tuple[str, Any, str]] = {
    "experiment.name": ("str", "bandit", "实验名（输出目录名）"),
    "experiment.seed": ("int", 0, "基础种子"),
    "experiment.seeds": ("int", None, "每个单元的重复次数"),
    "experiment.algorithm": ("str_list", ["slucb"], "算法列表: slucb, cb2_full, cb2_oracle_support, random"),
    "experiment.jobs": ("int", 1, "并行进程数"),
    "problem.K": ("int_list", None, "维度 K（可为逗号列表）"),
    "problem.n": ("int_list", None, "预算 n（可为逗号列表）"),
    "problem.S": ("int_list", [1], "稀疏度 S（可为逗号列表）"),
    "problem.theta_norm": ("float", 1.0, "‖θ‖₂"),
    "problem.theta_pattern": ("str", "equal", "非零分量幅度: equal 或 decaying"),
    "problem.sigma": ("float", 0.1, "每个坐标的噪声尺度 σ_k（噪声有界于 σ_k/2）"),
    "problem.noise": ("str", "uniform", "噪声类型: uniform 或 rademacher"),
    "slucb.delta": ("float", 0.01, "置信参数 δ（SL-UCB 与 CB₂ 共用）"),
    "slucb.sigma2_bar": ("float", None, "噪声范数上界 σ̄₂"),
    "slucb.theta2_bar": ("float", None, "参数范数上界 θ̄₂"),
    "slucb.threshold_scale": ("float", 1.0, "阈值 b 的乘子"),
    "gradient.ratios": ("float_list", [2.0, 10.0, 100.0], "K/n 比例列表"),
    "gradient.n": ("int", 100, "梯度步数"),
    "gradient.epsilon": ("float", 1.0, "步长 ε"),
    "gradient.seeds": ("int", 50, "每个 (比例, 策略) 的重复次数"),
    "gradient.relevant": ("int", 10, "二次目标的相关维度数"),
    "gradient.eval_noise": ("float", 0.0, "函数值噪声宽度"),
    "gradient.delta": ("float", 0.01, "SL-UCB 置信参数"),
    "gradient.sigma2_bar": ("float", 0.0, "SL-UCB 噪声范数上界"),
    "gradient.threshold_scale": ("float", 0.1, "SL-UCB 阈值乘子"),
    "gradient.explore_fraction": ("float", 0.5, "SL-UCB 支撑探索占预算的最小比例"),
    "gradient.max_active": ("int", 30, "SL-UCB 受限阶段的最大维数（0 表示不截断）"),
    "gradient.trace_K": ("int", 100, "轨迹实验的维度"),
    "gradient.trace_relevant": ("int", 2, "轨迹实验的相关维度数"),
    "gradient.trace_n": ("int", 50, "轨迹实验的步数"),
}


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_file: Optional[str] = None):
        """
        初始化配置管理器

        Args:
            config_file: 配置文件路径，None 表示只使用默认值与覆盖项
        """
        self.config_file = config_file
        self.logger = logging.getLogger(__name__)
        self.default_config = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}

    def _scan_lines(self, text: str) -> Dict[str, int]:
        """逐行检查格式与配置项名，返回 配置项 → 行号"""
        lines: Dict[str, int] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"格式错误，应为 key=value: {line}", line=number)
            key = line.split("=", 1)[0].strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"未知配置项: {key}", line=number, key=key)
            lines[key] = number
        return lines

    def parse_text(self, text: str) -> Dict[str, Any]:
        """
        解析配置文本（不含默认值）

        Raises:
            ConfigError: 格式错误、未知配置项或取值类型错误
        """
        lines = self._scan_lines(text)
        raw = dotenv_values(stream=io.StringIO(text), interpolate=False)
        parsed = {}
        for key, value in raw.items():
            parsed[key] = self._convert(key, value, lines.get(key))
        return parsed

    def _convert(self, key: str, value: Optional[str], line: Optional[int] = None) -> Any:
        kind = CONFIG_SCHEMA[key][0]
        if value is None:
            raise ConfigError(f"配置项缺少取值: {key}", line=line, key=key)
        text = value.strip()
        try:
            if kind == "int":
                return int(text)
            if kind == "float":
                return float(text)
            if kind == "str":
                return text
            items = [item.strip() for item in text.split(",") if item.strip()]
            if not items:
                raise ValueError("空列表")
            if kind == "int_list":
                return [int(item) for item in items]
            if kind == "float_list":
                return [float(item) for item in items]
            return items
        except ValueError as e:
            raise ConfigError(f"配置项 {key} 的取值无效 ({kind}): {value!r} ({e})", line=line, key=key) from e

    def parse_overrides(self, overrides: Optional[Sequence[str]]) -> Dict[str, Any]:
        """解析 --set key=value 覆盖项"""
        parsed = {}
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"覆盖项格式错误，应为 key=value: {item}")
            key, value = item.split("=", 1)
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"未知配置项: {key}", key=key)
            parsed[key] = self._convert(key, value)
        return parsed

    def load_config(self, overrides: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """
        加载配置：默认值 ← 配置文件 ← 覆盖项

        Returns:
            完整的配置字典
        """
        config = self.default_config.copy()
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise ConfigError(f"配置文件不存在: {self.config_file}")
            with open(self.config_file, "r", encoding="utf-8") as f:
                config.update(self.parse_text(f.read()))
            self.logger.info(f"配置加载成功: {self.config_file}")
        return self.update_config(config, self.parse_overrides(overrides))

    def update_config(self, config: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
        """部分更新并重新校验"""
        merged = dict(config)
        merged.update(updates)
        return self._validate_config(merged)

    def _validate_config(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """校验取值范围"""
        for key in ("experiment.seeds", "gradient.seeds", "gradient.n", "experiment.jobs"):
            value = config.get(key)
            if value is not None and value < 1:
                raise ConfigError(f"{key} 必须 ≥ 1: {value}", key=key)
        for key in ("slucb.delta", "gradient.delta"):
            if not 0 < config[key] < 1:
                raise ConfigError(f"{key} 必须在 (0, 1) 内: {config[key]}", key=key)
        if config["problem.theta_pattern"] not in ("equal", "decaying"):
            raise ConfigError(f"problem.theta_pattern 只能是 equal 或 decaying: {config['problem.theta_pattern']}",
                              key="problem.theta_pattern")
        if config["problem.noise"] not in ("uniform", "rademacher"):
            raise ConfigError(f"problem.noise 只能是 uniform 或 rademacher: {config['problem.noise']}",
                              key="problem.noise")
        if config["gradient.epsilon"] <= 0:
            raise ConfigError("gradient.epsilon 必须为正", key="gradient.epsilon")
        if not 0 < config["gradient.explore_fraction"] <= 1:
            raise ConfigError(f"gradient.explore_fraction 必须在 (0, 1] 内: {config['gradient.explore_fraction']}",
                              key="gradient.explore_fraction")
        if config["gradient.max_active"] < 0:
            raise ConfigError(f"gradient.max_active 必须 ≥ 0: {config['gradient.max_active']}",
                              key="gradient.max_active")
        return config

    def require(self, config: Dict[str, Any], keys: Sequence[str]) -> None:
        """检查命令所需的配置项都已给出"""
        for key in keys:
            if config.get(key) is None:
                raise ConfigError(f"缺少必需的配置项: {key}", key=key)

    def serialize(self, config: Dict[str, Any]) -> str:
        """规范化序列化（按配置项排序，浮点数用 repr 保证可逆）"""
        lines = []
        for key in sorted(config):
            value = config[key]
            if value is None:
                continue
            if isinstance(value, list):
                text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    def save_config(self, config: Dict[str, Any], path: str) -> str:
        """保存解析后的配置"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.serialize(config))
        self.logger.info(f"配置保存成功: {path}")
        return path

    @staticmethod
    def help_text() -> str:
        """列出全部配置项及默认值"""
        lines = ["配置项（key=value，# 开头为注释）:"]
        for key, (kind, default, description) in CONFIG_SCHEMA.items():
            if default is None:
                shown = "<必填>"
            elif isinstance(default, list):
                shown = ",".join(str(v) for v in default)
            else:
                shown = str(default)
            lines.append(f"  {key} ({kind}, 默认 {shown}): {description}")
        return "\n".join(lines)
