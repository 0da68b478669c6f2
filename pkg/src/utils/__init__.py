# -*- coding: utf-8 -*-
"""
工具模块：配置、日志、错误处理、超时控制
"""

from .config import Config
from .error_handler import (ConfigurationError, EngineError, ErrorCategory, ErrorHandler, GraphError,
                            ProfilerError, ShapeError, ValidationError, VerificationError, exit_code_for)
from .logger import setup_logger
from .timeout_decorator import run_with_timeout, timeout_config
