#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
优化器计划：更新规则、每参数状态大小、GaLore 投影集合
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

from ..graph.ir import ModelGraph
from ..utils.error_handler import ConfigurationError
from .config import OPTIMIZER_RULES, PeftConfig

logger = logging.getLogger(__name__)

STATE_MULTIPLIER = {'sgd_momentum': 1, 'adam': 2, 'galore_adam': 2}


def matricize(shape: Sequence[int]) -> Tuple[int, int]:
    """(C_out, C_in/g, k, k) -> (C_out, C_in/g*k*k)；线性层 (d_out, d_in) 不变"""
    rows = shape[0]
    cols = 1
    for dim in shape[1:]:
        cols *= dim
    return rows, cols


@dataclass(frozen=True)
class ProjectedParam:
    """GaLore 投影的一个 m x n 矩阵

    m <= n 时左投影 P (m x r)，否则右投影 Q (n x r)。
    """
    param_id: str
    rows: int
    cols: int
    rank: int

    @property
    def side(self) -> str:
        return 'left' if self.rows <= self.cols else 'right'

    @property
    def numel(self) -> int:
        return self.rows * self.cols

    @property
    def rank_space_numel(self) -> int:
        return self.rank * max(self.rows, self.cols)

    @property
    def projector_numel(self) -> int:
        return self.rank * min(self.rows, self.cols)


@dataclass(frozen=True)
class OptimizerPlan:
    """更新规则及其超参数"""
    rule: str
    rank: int = 0
    period: int = 1
    scale: float = 1.0
    projected: Mapping[str, ProjectedParam] = field(default_factory=dict)
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.rule not in OPTIMIZER_RULES:
            raise ConfigurationError(f"未知的优化器规则: {self.rule!r}")
        if self.rule != 'galore_adam' and self.projected:
            raise ConfigurationError(f"只有 galore_adam 可以有投影参数，当前规则 {self.rule}")

    @property
    def state_multiplier(self) -> int:
        """非投影参数每元素的状态张量个数"""
        return STATE_MULTIPLIER[self.rule]

    def is_projected(self, param_id: str) -> bool:
        return param_id in self.projected


def galore_plan(graph: ModelGraph, config: PeftConfig) -> OptimizerPlan:
    """列出所有矩阵化后两维都大于 r 的权重作为投影参数

    给出 galore_selection_rank 时按它筛选，投影秩仍为 r。

    Args:
        graph (ModelGraph): 基础图
        config (PeftConfig): method 必须为 galore

    Returns:
        OptimizerPlan: galore_adam 计划
    """
    if config.method != 'galore':
        raise ConfigurationError(f"galore_plan 只适用于 galore，当前方法 {config.method}")

    threshold = config.galore_selection_rank or config.rank
    projected = {}
    for spec in graph.parameters():
        if len(spec.shape) < 2:
            continue
        rows, cols = matricize(spec.shape)
        if rows > threshold and cols > threshold:
            projected[spec.param_id] = ProjectedParam(spec.param_id, rows, cols, config.rank)

    logger.debug(f"GaLore 计划: r={config.rank}, T={config.galore_period}, 投影矩阵 {len(projected)} 个")
    return OptimizerPlan(rule='galore_adam', rank=config.rank, period=config.galore_period,
                         scale=config.galore_scale, projected=projected)


def plan_for(graph: ModelGraph, config: PeftConfig, optimizer: Optional[str] = None) -> OptimizerPlan:
    """按配置（或显式覆盖）给出优化器计划"""
    rule = optimizer or config.optimizer_rule
    if rule == 'galore_adam':
        return galore_plan(graph, config)
    if config.method == 'galore':
        raise ConfigurationError(f"galore 方法必须使用 galore_adam，收到 {rule}")
    return OptimizerPlan(rule=rule)
