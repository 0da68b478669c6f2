#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
PEFT 方法配置
"""

from dataclasses import dataclass
from typing import Optional, Tuple

from ..utils.error_handler import ConfigurationError

METHODS = ('fft', 'lora', 'dora', 'galore', 'bnh')
OPTIMIZER_RULES = ('sgd_momentum', 'adam', 'galore_adam')
TARGET_KINDS = ('conv2d', 'linear')
PROJECTIONS = ('std',)

# 默认超参数
DEFAULT_RANK = 4
DEFAULT_ALPHA = 4.0
DEFAULT_GALORE_SCALE = 0.25
DEFAULT_GALORE_PERIOD = 200


@dataclass(frozen=True)
class PeftConfig:
    """一个 PEFT 方法及其超参数

    rank/alpha 用于 lora、dora；rank/galore_* 用于 galore。
    targets 是 lora/dora 挂适配器的层类型；optimizer 为 None 时按方法取默认。
    galore_selection_rank 只决定哪些矩阵被投影（两维都大于它），None 时取 rank；秩扫描用它固定投影集合。
    """
    method: str = 'fft'
    rank: int = DEFAULT_RANK
    alpha: float = DEFAULT_ALPHA
    galore_scale: float = DEFAULT_GALORE_SCALE
    galore_period: int = DEFAULT_GALORE_PERIOD
    galore_projection: str = 'std'
    targets: Tuple[str, ...] = TARGET_KINDS
    optimizer: Optional[str] = None
    galore_selection_rank: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"未知的 PEFT 方法: {self.method!r}，可选 {METHODS}")
        if isinstance(self.rank, bool) or not isinstance(self.rank, int) or self.rank < 1:
            raise ConfigurationError(f"rank 必须为 >= 1 的整数: {self.rank!r}", {'field': 'rank'})
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha 必须 > 0: {self.alpha!r}", {'field': 'alpha'})
        if not self.galore_scale > 0:
            raise ConfigurationError(f"galore_scale 必须 > 0: {self.galore_scale!r}", {'field': 'galore_scale'})
        if isinstance(self.galore_period, bool) or not isinstance(self.galore_period, int) or self.galore_period < 1:
            raise ConfigurationError(f"galore_period 必须为 >= 1 的整数: {self.galore_period!r}",
                                     {'field': 'galore_period'})
        if self.galore_projection not in PROJECTIONS:
            raise ConfigurationError(f"不支持的投影方式: {self.galore_projection!r}，可选 {PROJECTIONS}")
        if self.galore_selection_rank is not None and (
                isinstance(self.galore_selection_rank, bool) or not isinstance(self.galore_selection_rank, int)
                or self.galore_selection_rank < self.rank):
            raise ConfigurationError(f"galore_selection_rank 必须为 >= rank 的整数: {self.galore_selection_rank!r}",
                                     {'field': 'galore_selection_rank'})
        object.__setattr__(self, 'targets', tuple(self.targets))
        if self.optimizer is not None:
            if self.optimizer not in OPTIMIZER_RULES:
                raise ConfigurationError(f"未知的优化器: {self.optimizer!r}，可选 {OPTIMIZER_RULES}")
            if (self.optimizer == 'galore_adam') != (self.method == 'galore'):
                raise ConfigurationError(f"优化器 {self.optimizer} 与方法 {self.method} 不兼容",
                                         {'field': 'optimizer'})

    @property
    def scaling(self) -> float:
        """适配器输出缩放 alpha / r"""
        return self.alpha / self.rank

    @property
    def optimizer_rule(self) -> str:
        if self.optimizer:
            return self.optimizer
        return 'galore_adam' if self.method == 'galore' else 'adam'
