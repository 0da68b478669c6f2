#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置管理模块

加载顺序: .env 格式配置文件 -> 进程环境变量 -> 内置默认值。
命令行参数和运行规格文档的优先级高于这里的值，由调用方覆盖。
"""

import os
import re
import logging
from typing import Optional, Dict, List

from .timeout_decorator import run_with_timeout, timeout_config


# 已知配置项及默认值（全部以字符串保存，与 .env 文件一致）
DEFAULTS: Dict[str, str] = {
    'LOG_LEVEL': 'INFO',
    'LOG_FILE': '',
    'DEBUG': '0',
    'BYTES_PER_ELEMENT': '4',
    'INPUT_GRAD_CONVENTION': 'paper',
    'OUTPUT_FORMAT': 'table',
    'MAX_WORKERS': '4',
    'VERIFY_SEED': '0',
    'VERIFY_TOY_GRAPHS': '20',
    'VERIFY_FD_EPSILON': '1e-5',
    'SUITE_TIMEOUT_SECONDS': '300',
}

ENV_PREFIX = 'PEFTPROF_'

VALID_CONVENTIONS = ('paper', 'exact')
VALID_FORMATS = ('json', 'csv', 'table')


class Config:
    """配置管理类"""

    def __init__(self, config_file: Optional[str] = None, logger: Optional[logging.Logger] = None):
        """初始化配置

        Args:
            config_file (str): 配置文件路径，None 时只搜索默认位置
            logger (logging.Logger): 日志记录器
        """
        self.config_file = config_file
        self.logger = logger or logging.getLogger(__name__)
        self._config: Dict[str, str] = {}
        self.loaded_from: Optional[str] = None
        self._load_config()

    def _candidate_paths(self) -> List[str]:
        """按优先级返回候选配置文件路径"""
        project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
        paths = []
        if self.config_file:
            paths.append(self.config_file)
        paths.append(os.path.join(os.getcwd(), 'config.env'))
        paths.append(os.path.join(project_root, 'data', 'config.env'))
        return paths

    def _load_config(self):
        """加载配置文件"""
        found_config = None
        for path in self._candidate_paths():
            if os.path.isfile(path):
                found_config = path
                break

        if found_config:
            self.logger.debug(f"找到配置文件: {found_config}")
            self._parse_env_file(found_config)
            self.loaded_from = found_config
        elif self.config_file:
            self.logger.warning(f"配置文件不存在: {self.config_file}，使用环境变量和默认值")

        self._load_from_env()
        self._set_defaults()
        self.logger.debug("配置加载完成")

    def _parse_env_file(self, file_path: str):
        """解析 .env 格式的配置文件"""

        def _parse_env_file_core():
            with open(file_path, 'r', encoding='utf-8') as f:
                content = f.read()

            # 反斜杠续行
            content = re.sub(r'\\\s*\n\s*', ' ', content)

            for line in content.split('\n'):
                line = line.strip()
                if not line or line.startswith('#') or '=' not in line:
                    continue

                key, value = line.split('=', 1)
                key = key.strip()
                value = value.strip()
                if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
                    value = value[1:-1]

                self._config[key] = self._expand_variables(value)

            self.logger.debug(f"从配置文件加载了 {len(self._config)} 个配置项")
            return True

        ok = run_with_timeout(
            _parse_env_file_core,
            timeout_seconds=timeout_config.get_timeout('short'),
            default=False,
            error_message=f"解析配置文件 {file_path} 超时",
        )
        if not ok:
            self.logger.error(f"解析配置文件失败: {file_path}")

    def _expand_variables(self, value: str) -> str:
        """展开 ${VAR} 或 $VAR 形式的环境变量引用"""
        pattern = r'\$\{([^}]+)\}|\$([a-zA-Z_][a-zA-Z0-9_]*)'

        def replace_var(match):
            var_name = match.group(1) or match.group(2)
            return self._config.get(var_name, os.environ.get(var_name, ''))

        return re.sub(pattern, replace_var, value)

    def _load_from_env(self):
        """从环境变量加载已知配置项（带前缀的优先）"""
        for key in DEFAULTS:
            prefixed = ENV_PREFIX + key
            if prefixed in os.environ:
                self._config[key] = os.environ[prefixed]
            elif key not in self._config and key in os.environ:
                self._config[key] = os.environ[key]

    def _set_defaults(self):
        """设置默认值"""
        for key, default_value in DEFAULTS.items():
            if key not in self._config:
                self._config[key] = default_value

    def set(self, key: str, value):
        """覆盖单个配置项（命令行参数使用）"""
        self._config[key] = str(value)

    def get(self, key, default=None):
        """获取配置项"""
        return self._config.get(key, default)

    def get_int(self, key, default=0):
        """获取整数类型的配置项"""
        try:
            return int(self.get(key, default))
        except (ValueError, TypeError):
            return default

    def get_float(self, key, default=0.0):
        """获取浮点类型的配置项"""
        try:
            return float(self.get(key, default))
        except (ValueError, TypeError):
            return default

    def get_bool(self, key, default=False):
        """获取布尔类型的配置项"""
        value = str(self.get(key, str(default)))
        return value.lower() in ('true', 'yes', '1', 'y', 't')

    def get_list(self, key, default=None):
        """获取列表类型的配置项（支持逗号、分号、空格分隔）"""
        if default is None:
            default = []

        value = self.get(key, '')
        if not value:
            return default

        for separator in [',', ';', '\n', ' ']:
            if separator in value:
                return [item.strip() for item in value.split(separator) if item.strip()]
        return [value.strip()]

    def validate(self) -> bool:
        """验证配置有效性"""
        ok = True

        if self.input_grad_convention not in VALID_CONVENTIONS:
            self.logger.error(f"INPUT_GRAD_CONVENTION 无效: {self.input_grad_convention}，可选 {VALID_CONVENTIONS}")
            ok = False
        if self.output_format not in VALID_FORMATS:
            self.logger.error(f"OUTPUT_FORMAT 无效: {self.output_format}，可选 {VALID_FORMATS}")
            ok = False
        if self.get_int('BYTES_PER_ELEMENT', 0) < 1:
            self.logger.error(f"BYTES_PER_ELEMENT 必须 >= 1: {self.get('BYTES_PER_ELEMENT')}")
            ok = False
        if self.max_workers < 1:
            self.logger.error(f"MAX_WORKERS 必须 >= 1: {self.get('MAX_WORKERS')}")
            ok = False
        if self.get_float('VERIFY_FD_EPSILON', 0.0) <= 0.0:
            self.logger.error(f"VERIFY_FD_EPSILON 必须 > 0: {self.get('VERIFY_FD_EPSILON')}")
            ok = False

        self.logger.debug("配置摘要:")
        self.logger.debug(f"  调试模式: {'开启' if self.debug else '关闭'}")
        self.logger.debug(f"  元素宽度: {self.bytes_per_element} 字节")
        self.logger.debug(f"  输入梯度计数约定: {self.input_grad_convention}")
        self.logger.debug(f"  并行线程数: {self.max_workers}")
        return ok

    @property
    def debug(self) -> bool:
        """是否启用调试模式"""
        return self.get_bool('DEBUG', False)

    @property
    def bytes_per_element(self) -> int:
        return self.get_int('BYTES_PER_ELEMENT', 4)

    @property
    def input_grad_convention(self) -> str:
        return str(self.get('INPUT_GRAD_CONVENTION', 'paper')).lower()

    @property
    def output_format(self) -> str:
        return str(self.get('OUTPUT_FORMAT', 'table')).lower()

    @property
    def max_workers(self) -> int:
        return self.get_int('MAX_WORKERS', 4)
