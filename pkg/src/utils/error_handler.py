#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
错误分类与退出码

每个异常子类带一个固定类别；命令行按类别给出退出码:
0 成功, 1 用法错误, 2 校验错误（配置/规格/形状/图/引擎）, 3 校验套件失败。
"""

import functools
import logging
import time
import traceback
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple


class ErrorCategory(Enum):
    """错误类别"""
    CONFIGURATION = "configuration"
    VALIDATION = "validation"
    SHAPE = "shape"
    GRAPH = "graph"
    ENGINE = "engine"
    VERIFY = "verify"
    UNKNOWN = "unknown"


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_VERIFY_FAILURE = 3


class ProfilerError(Exception):
    """剖析器异常基类

    Args:
        message (str): 错误消息
        category (ErrorCategory): 类别，缺省取子类的 default_category
        details (dict): 附加字段，如 line / field / node
        original_exception (Exception): 被包装的原始异常
    """

    default_category = ErrorCategory.UNKNOWN

    def __init__(self, message: str, category: Optional[ErrorCategory] = None,
                 details: Optional[Dict[str, Any]] = None, original_exception: Optional[Exception] = None):
        super().__init__(message)
        self.message = message
        self.category = category or self.default_category
        self.details = dict(details or {})
        self.original_exception = original_exception

    def __str__(self):
        parts = [f"[{self.category.name}] {self.message}"]
        if self.details:
            parts.append(f"Details: {self.details}")
        cause = self.original_exception
        if cause is not None:
            parts.append(f"Caused by: {type(cause).__name__}: {cause}")
        return ' | '.join(parts)


class _CategorizedError(ProfilerError):
    """子类只声明类别，构造参数为 (message, details, original_exception)"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None,
                 original_exception: Optional[Exception] = None):
        super().__init__(message, None, details, original_exception)


class ConfigurationError(_CategorizedError):
    """配置错误（配置文件、PEFT 参数、字节宽度）"""
    default_category = ErrorCategory.CONFIGURATION


class ValidationError(_CategorizedError):
    """输入校验错误（运行规格、报告文档、命令参数取值）"""
    default_category = ErrorCategory.VALIDATION


class GraphError(_CategorizedError):
    """图结构错误（未知架构、环、悬空边）"""
    default_category = ErrorCategory.GRAPH


class EngineError(_CategorizedError):
    """参考引擎使用错误"""
    default_category = ErrorCategory.ENGINE


class VerificationError(_CategorizedError):
    """校验套件失败"""
    default_category = ErrorCategory.VERIFY


class ShapeError(ProfilerError):
    """形状推断错误，node_id 指向出错节点"""

    default_category = ErrorCategory.SHAPE

    def __init__(self, message: str, node_id: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        if node_id is not None:
            details.setdefault('node', node_id)
        super().__init__(message, details=details)
        self.node_id = node_id


def exit_code_for(error: Exception) -> int:
    """把异常映射为命令行退出码"""
    if isinstance(error, VerificationError):
        return EXIT_VERIFY_FAILURE
    if isinstance(error, ProfilerError):
        return EXIT_VALIDATION
    return EXIT_USAGE


# 普通异常到类别的映射，按顺序匹配
_BUILTIN_CATEGORIES = (
    ((ValueError, KeyError, TypeError), ErrorCategory.VALIDATION),
    ((ArithmeticError,), ErrorCategory.ENGINE),
)


def wrap_exception(original_exception: Exception, message: str,
                   category: ErrorCategory = ErrorCategory.UNKNOWN,
                   details: Optional[Dict[str, Any]] = None) -> ProfilerError:
    """把普通异常包装成 ProfilerError；已经是 ProfilerError 的原样返回"""
    if isinstance(original_exception, ProfilerError):
        return original_exception
    if category is ErrorCategory.UNKNOWN:
        for types, guessed in _BUILTIN_CATEGORIES:
            if isinstance(original_exception, types):
                category = guessed
                break
    return ProfilerError(message, category, details, original_exception)


def handle_errors(default_return: Any = None,
                  error_categories: Optional[Tuple[ErrorCategory, ...]] = None,
                  reraise: bool = False,
                  log_level: int = logging.ERROR):
    """错误处理装饰器

    Args:
        default_return: 捕获后返回的值
        error_categories: 只捕获这些类别的 ProfilerError，None 表示全部
        reraise: 记录日志后继续抛出（普通异常先包装）
        log_level: 记录错误用的日志级别
    """
    def decorator(func: Callable) -> Callable:
        logger = logging.getLogger(func.__module__)

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except ProfilerError as e:
                if error_categories is not None and e.category not in error_categories:
                    raise
                logger.log(log_level, f"{func.__name__} 失败: {e}")
                if reraise:
                    raise
            except Exception as e:
                error = wrap_exception(e, f"{func.__name__} 出现未预期的异常: {e}")
                logger.log(log_level, str(error))
                logger.debug(traceback.format_exc())
                if reraise:
                    raise error from e
            return default_return

        return wrapper
    return decorator


class ErrorHandler:
    """收集一次命令执行中的诊断，给出最终退出码"""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)
        self.error_counts: Dict[ErrorCategory, int] = {}
        self.error_history: List[Dict[str, Any]] = []
        self._exit_code = EXIT_OK

    def handle(self, error: Exception, context: Optional[Dict[str, Any]] = None,
               reraise: bool = False) -> ProfilerError:
        """记录一条诊断

        Args:
            error (Exception): 捕获到的异常
            context (dict): 合并进 details 的上下文，如子命令名
            reraise (bool): 记录后抛出包装后的异常

        Returns:
            ProfilerError: 包装后的异常
        """
        wrapped = wrap_exception(error, str(error))
        if context:
            wrapped.details.update(context)

        self.logger.error(str(wrapped))
        self.logger.debug(traceback.format_exc())

        self.error_counts[wrapped.category] = self.error_counts.get(wrapped.category, 0) + 1
        self.error_history.append({
            'timestamp': time.time(),
            'category': wrapped.category.value,
            'message': wrapped.message,
            'details': wrapped.details,
        })
        self._exit_code = max(self._exit_code, exit_code_for(wrapped))

        if reraise:
            raise wrapped
        return wrapped

    @property
    def exit_code(self) -> int:
        """没有记录任何诊断时为 0"""
        return self._exit_code

    def get_error_stats(self) -> Dict[str, Any]:
        return {
            'error_counts': {cat.value: count for cat, count in self.error_counts.items()},
            'total_errors': sum(self.error_counts.values()),
            'exit_code': self._exit_code,
        }
