#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
日志管理模块
"""

import logging
import os
import sys

# 日志级别映射
LOG_LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARN': logging.WARNING,
    'WARNING': logging.WARNING,
    'ERROR': logging.ERROR,
    'CRITICAL': logging.CRITICAL
}

# 颜色代码（终端输出时使用）
COLORS = {
    'DEBUG': '\033[36m',      # 青色
    'INFO': '\033[32m',       # 绿色
    'WARNING': '\033[33m',    # 黄色
    'ERROR': '\033[31m',      # 红色
    'CRITICAL': '\033[35m',   # 紫色
    'RESET': '\033[0m'
}

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class ColoredFormatter(logging.Formatter):
    """带颜色的日志格式化器"""

    def __init__(self, fmt=None, datefmt=None, use_color=True):
        super().__init__(fmt, datefmt)
        self.use_color = use_color

    def format(self, record):
        # 复制一份再着色，避免污染同一记录的其他处理器
        if self.use_color and record.levelname in COLORS:
            record = logging.makeLogRecord(record.__dict__)
            record.levelname = f"{COLORS[record.levelname]}{record.levelname}{COLORS['RESET']}"
        return super().format(record)


def get_log_level_from_env(value=None):
    """从环境变量（或给定值）解析日志级别

    Args:
        value (str): 显式给定的级别名，None 时读取 LOG_LEVEL

    Returns:
        int: logging 级别
    """
    default_level = 'INFO'
    level_name = value if value is not None else os.environ.get('LOG_LEVEL', default_level)
    level_name = ''.join(c for c in str(level_name) if c.isalnum()).upper()

    if os.environ.get('DEBUG', '0') == '1':
        level_name = 'DEBUG'

    if level_name not in LOG_LEVELS:
        print(f"[ERROR] 无效的日志级别: {level_name}，使用默认: {default_level}", file=sys.stderr)
        level_name = default_level

    return LOG_LEVELS[level_name]


def setup_logger(name='peft_profiler', log_file=None, level=None, stream=None):
    """设置日志记录器

    Args:
        name (str): 日志记录器名称
        log_file (str): 可选的日志文件
        level (int|str): 日志级别，None 时从环境变量读取
        stream: 控制台输出流，默认 stderr 以免混入报告输出

    Returns:
        logging.Logger: 配置好的日志记录器
    """
    logger = logging.getLogger(name)

    if level is None or isinstance(level, str):
        level = get_log_level_from_env(level)
    logger.setLevel(level)

    if logger.handlers:
        logger.handlers.clear()

    stream = stream or sys.stderr
    console_handler = logging.StreamHandler(stream)
    console_handler.setLevel(level)
    use_color = hasattr(stream, 'isatty') and stream.isatty()
    console_handler.setFormatter(ColoredFormatter(LOG_FORMAT, DATE_FORMAT, use_color))
    logger.addHandler(console_handler)

    if log_file:
        try:
            log_dir = os.path.dirname(log_file)
            if log_dir and not os.path.exists(log_dir):
                os.makedirs(log_dir, exist_ok=True)

            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(level)
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
            logger.addHandler(file_handler)
        except OSError as e:
            logger.error(f"创建日志文件处理器失败: {str(e)}")

    logger.propagate = False
    return logger
