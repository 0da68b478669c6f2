#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分组峰值内存模型

PARAM / GRAD / ACT / OPT / TEMP 五组，各组取训练步内的峰值，总量为各组峰值之和。
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Set

from ..graph.ir import INPUT_EDGE, TensorShape
from ..peft.optimizer_plan import OptimizerPlan
from ..utils.error_handler import ConfigurationError, ValidationError
from .flops import base_weight_numel, with_input
from .grad_flow import GradFlow, analyze

logger = logging.getLogger(__name__)

DEFAULT_WIDTH = 4


class MemoryGroup(str, Enum):
    PARAM = 'PARAM'
    GRAD = 'GRAD'
    ACT = 'ACT'
    OPT = 'OPT'
    TEMP = 'TEMP'


GROUPS = tuple(MemoryGroup)


def lora_a_edge(node_id: str) -> str:
    return f"{node_id}.lora_a"


def dora_u_edge(node_id: str) -> str:
    return f"{node_id}.dora_u"


def _saved_for_node(tuned, node, flow: GradFlow) -> Set[str]:
    saved = set()
    kind = node.kind
    adapter = tuned.adapters.get(node.id)

    if kind in ('conv2d', 'linear'):
        if adapter is not None or tuned.is_trainable(f"{node.id}.weight"):
            saved.add(node.inputs[0])
        if adapter is not None:
            saved.add(lora_a_edge(node.id))
            if adapter.is_dora:
                saved.add(dora_u_edge(node.id))
    elif kind == 'batchnorm2d':
        saved.add(node.inputs[0])
    elif kind in ('activation', 'maxpool'):
        if flow.computes_input_grad(node.id, 0):
            saved.add(node.inputs[0])
    elif kind == 'scale_mul':
        if flow.computes_input_grad(node.id, 1):
            saved.add(node.inputs[0])
        if flow.computes_input_grad(node.id, 0):
            saved.add(node.inputs[1])
    return saved


def saved_activation_set(tuned) -> Set[str]:
    """反向需要保存的边（含适配器内部的中间量）

    只考虑输出需要梯度的节点；每条边只计一次。
    """
    flow = analyze(tuned)
    saved: Set[str] = set()
    for node in tuned.base.nodes:
        if node.id in flow.participating:
            saved |= _saved_for_node(tuned, node, flow)
    return saved


def saved_edge_numel(tuned, edge: str) -> int:
    """保存边的元素个数，适配器中间量按其自身形状计"""
    graph = tuned.base
    for suffix in ('.lora_a', '.dora_u'):
        if edge.endswith(suffix):
            node = graph.node(edge[:-len(suffix)])
            out = node.output_shape
            if suffix == '.dora_u':
                return out.numel
            rank = tuned.adapters[node.id].rank
            if node.kind == 'linear':
                return out.n * rank
            return out.n * rank * out.h * out.w
    return graph.edge_shape(edge).numel


def _param_elements(tuned) -> int:
    params = sum(spec.numel for spec in tuned.parameters())
    return params + sum(spec.numel for spec in tuned.buffers())


def _opt_elements(tuned, plan: OptimizerPlan) -> int:
    total = 0
    for spec in tuned.trainable_parameters():
        if plan.is_projected(spec.param_id):
            proj = plan.projected[spec.param_id]
            total += 2 * proj.rank_space_numel + proj.projector_numel
        else:
            total += plan.state_multiplier * spec.numel
    return total


def _act_elements(tuned) -> int:
    saved = saved_activation_set(tuned)
    total = tuned.base.input_shape.numel
    return total + sum(saved_edge_numel(tuned, edge) for edge in saved if edge != INPUT_EDGE)


def _temp_elements(tuned, plan: OptimizerPlan) -> int:
    graph = tuned.base
    flow = analyze(tuned)

    largest = 0
    # 前向：不为反向保存的输出在其消费者运行前一直存活
    saved = saved_activation_set(tuned)
    for node in graph.nodes:
        if node.id not in saved:
            largest = max(largest, node.output_shape.numel)

    # 反向：输出梯度与本层产生的输入梯度同时存活
    for node in graph.nodes:
        if node.id not in flow.participating:
            continue
        live = node.output_shape.numel
        for slot, edge in enumerate(node.inputs):
            if flow.computes_input_grad(node.id, slot):
                live += graph.edge_shape(edge).numel
        largest = max(largest, live)

    # DoRA: 每层的通道范数向量，以及分组支撑上的 V 与 ΔW（与基础权重同大小）
    dora = sum(node_adapter.magnitude_size + 2 * base_weight_numel(graph.node(layer_id))
               for layer_id, node_adapter in tuned.adapters.items() if node_adapter.is_dora)

    svd = 0
    for proj in plan.projected.values():
        m, n = proj.rows, proj.cols
        s = min(m, n)
        svd = max(svd, m * n + m * s + s * n + s)
    return largest + dora + svd


def group_bytes(tuned, plan: OptimizerPlan, group, input: Optional[TensorShape] = None,
                width: int = DEFAULT_WIDTH) -> int:
    """某一分组的峰值字节数

    Args:
        tuned (TunedModel): 变换后的模型
        plan (OptimizerPlan): 优化器计划
        group (MemoryGroup|str): 分组
        input (TensorShape): 输入形状，None 时使用图自带的
        width (int): 每元素字节数

    Returns:
        int: 字节数
    """
    if width < 1:
        raise ConfigurationError(f"bytes_per_element 必须 >= 1，收到 {width}")
    try:
        group = MemoryGroup(group)
    except ValueError:
        raise ValidationError(f"未知的内存分组: {group!r}，可选 {[g.value for g in GROUPS]}")
    tuned = with_input(tuned, input)

    if group == MemoryGroup.PARAM:
        elements = _param_elements(tuned)
    elif group == MemoryGroup.GRAD:
        elements = sum(spec.numel for spec in tuned.trainable_parameters())
    elif group == MemoryGroup.OPT:
        elements = _opt_elements(tuned, plan)
    elif group == MemoryGroup.ACT:
        elements = _act_elements(tuned)
    else:
        elements = _temp_elements(tuned, plan)
    return elements * width


@dataclass(frozen=True)
class MemoryReport:
    """各组峰值字节数"""
    method: str
    width: int
    groups: Mapping[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.groups.values())

    def __getitem__(self, group) -> int:
        return self.groups[MemoryGroup(group).value]

    def to_dict(self) -> Dict[str, Any]:
        return {'method': self.method, 'width': self.width,
                'groups': dict(self.groups), 'total': self.total}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'MemoryReport':
        return cls(method=doc['method'], width=int(doc['width']),
                   groups={name: int(value) for name, value in doc['groups'].items()})


def profile_memory(tuned, plan: OptimizerPlan, input: Optional[TensorShape] = None,
                   width: int = DEFAULT_WIDTH) -> MemoryReport:
    """五个分组的峰值字节数"""
    tuned = with_input(tuned, input)
    groups = {group.value: group_bytes(tuned, plan, group, width=width) for group in GROUPS}
    report = MemoryReport(method=tuned.method, width=width, groups=groups)
    logger.debug(f"内存统计 {tuned.base.name}/{tuned.method}: {groups}")
    return report
