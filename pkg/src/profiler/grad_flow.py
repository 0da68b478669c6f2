#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
梯度流分析

requires: 值依赖可训练参数的边（沿前向传播，遇 detached 边截断）。
needs: 反向传播中真正会算出梯度的边（从输出倒推）。
participating: 输出需要梯度、因而执行反向计算的节点。
解析模型和参考引擎共用这份分析来决定哪些反向核被执行。
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, Mapping, Tuple

from ..graph.ir import INPUT_EDGE


@dataclass(frozen=True)
class GradFlow:
    requires: FrozenSet[str]
    needs: FrozenSet[str]
    participating: FrozenSet[str]
    input_grads: Mapping[str, Tuple[bool, ...]]
    contributions: Mapping[str, int]

    def computes_input_grad(self, node_id: str, slot: int = 0) -> bool:
        flags = self.input_grads.get(node_id, ())
        return slot < len(flags) and flags[slot]


def owns_trainable(tuned, node) -> bool:
    """节点自身是否持有可训练参数（含适配器）"""
    if node.id in tuned.adapters:
        return True
    return any(spec.param_id in tuned.trainable for spec in node.param_specs())


def analyze(tuned) -> GradFlow:
    """对 TunedModel 做一次前向 requires 传播和反向 needs 传播"""
    graph = tuned.base
    order = graph.topological_order()
    detached = tuned.detached

    requires = set()
    for node_id in order:
        node = graph.node(node_id)
        if owns_trainable(tuned, node) or any(
                edge in requires and edge not in detached for edge in node.inputs):
            requires.add(node_id)

    output_id = graph.output_id
    needs = {output_id} if output_id in requires else set()
    input_grads: Dict[str, Tuple[bool, ...]] = {}
    contributions: Dict[str, int] = {}

    for node_id in reversed(order):
        if node_id not in needs:
            continue
        node = graph.node(node_id)
        flags = []
        for edge in node.inputs:
            flowing = edge != INPUT_EDGE and edge in requires and edge not in detached
            flags.append(flowing)
            if flowing:
                needs.add(edge)
                contributions[edge] = contributions.get(edge, 0) + 1
        input_grads[node_id] = tuple(flags)

    return GradFlow(
        requires=frozenset(requires),
        needs=frozenset(needs),
        participating=frozenset(input_grads),
        input_grads=input_grads,
        contributions=contributions,
    )
