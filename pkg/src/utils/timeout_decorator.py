# -*- coding: utf-8 -*-
"""
超时控制

校验套件和配置解析都通过 run_with_timeout 在单线程池中执行，超时返回默认值。
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from typing import Optional

logger = logging.getLogger(__name__)


# 默认超时时间配置（秒）
DEFAULT_TIMEOUTS = {
    'short': 30,
    'flops_parity': 60,
    'memory_parity': 60,
    'gradient_check': 120,
    'identities': 60,
    'training': 300,
}


class TimeoutConfig:
    """超时配置类"""

    def __init__(self):
        self._timeouts = DEFAULT_TIMEOUTS.copy()
        self._multiplier = 1.0

    def get_timeout(self, category: str = 'short', custom_timeout: Optional[float] = None) -> float:
        """获取超时时间

        Args:
            category (str): 超时类别，未知类别使用 short
            custom_timeout (float): 自定义超时时间，提供时忽略 category

        Returns:
            float: 超时时间（秒）
        """
        if custom_timeout is not None:
            value = custom_timeout
        else:
            value = self._timeouts.get(category, DEFAULT_TIMEOUTS['short'])
        return value * self._multiplier

    def set_timeout(self, category: str, seconds: float):
        self._timeouts[category] = seconds

    def set_multiplier(self, multiplier: float):
        """整体放大或缩小所有超时（慢速机器上使用）"""
        self._multiplier = multiplier


# 全局超时配置实例
timeout_config = TimeoutConfig()


def run_with_timeout(func, *args, timeout_seconds=30, default=None, error_message=None, **kwargs):
    """在超时控制下运行函数

    Args:
        func (callable): 要执行的函数
        timeout_seconds (float): 超时时间（秒）
        default: 超时或出错时返回的默认值
        error_message (str): 自定义超时信息

    Returns:
        函数的返回值或默认值
    """
    start_time = time.time()
    actual_timeout = timeout_config.get_timeout(custom_timeout=timeout_seconds)
    logger.debug(f"开始执行函数 {func.__name__}，超时设置: {actual_timeout}秒")

    # 超时后不等待工作线程结束
    executor = ThreadPoolExecutor(max_workers=1)
    try:
        future = executor.submit(func, *args, **kwargs)
        result = future.result(timeout=actual_timeout)
        logger.debug(f"函数 {func.__name__} 执行完成，耗时: {time.time() - start_time:.2f}秒")
        return result
    except FutureTimeoutError:
        error_msg = error_message or f"函数 {func.__name__} 执行超时（{actual_timeout}秒）"
        logger.error(f"{error_msg} - 实际执行时间: {time.time() - start_time:.2f}秒")
        return default
    except Exception as e:
        logger.error(f"函数 {func.__name__} 执行出错: {str(e)} - 执行时间: {time.time() - start_time:.2f}秒")
        logger.debug("异常详情", exc_info=True)
        return default
    finally:
        executor.shutdown(wait=False)
