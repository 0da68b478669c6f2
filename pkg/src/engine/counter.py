#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运算计数器与分配账本
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Mapping

from ..profiler.flops import PHASES, Phase
from ..profiler.memory import GROUPS, MemoryGroup


class OpCounter:
    """按 (阶段, 层) 累计标量运算次数"""

    def __init__(self):
        self._counts: Dict[str, Dict[str, int]] = defaultdict(lambda: {p.value: 0 for p in PHASES})

    def add(self, phase, layer_id: str, n: int):
        if n:
            self._counts[layer_id][Phase(phase).value] += int(n)

    def reset(self):
        self._counts.clear()

    @property
    def per_layer(self) -> Dict[str, Dict[str, int]]:
        return {layer: dict(counts) for layer, counts in self._counts.items()}

    @property
    def totals(self) -> Dict[str, int]:
        totals = {p.value: 0 for p in PHASES}
        for counts in self._counts.values():
            for phase, value in counts.items():
                totals[phase] += value
        return totals


class AllocationLedger:
    """按分组记录当前字节数与峰值

    字节数按 元素个数 x width 记，与解析模型使用同一元素宽度。
    """

    def __init__(self, width: int = 4):
        self.width = width
        self._live: Dict[str, Dict[str, int]] = {g.value: {} for g in GROUPS}
        self._peaks: Dict[str, int] = {g.value: 0 for g in GROUPS}

    def allocate(self, group, key: str, numel: int):
        """分配（同 key 覆盖）"""
        live = self._live[MemoryGroup(group).value]
        live[key] = int(numel) * self.width
        current = sum(live.values())
        name = MemoryGroup(group).value
        if current > self._peaks[name]:
            self._peaks[name] = current

    def free(self, group, key: str):
        self._live[MemoryGroup(group).value].pop(key, None)

    def free_group(self, group):
        self._live[MemoryGroup(group).value].clear()

    def current(self, group) -> int:
        return sum(self._live[MemoryGroup(group).value].values())

    def keys(self, group):
        return set(self._live[MemoryGroup(group).value])

    @property
    def peaks(self) -> Dict[str, int]:
        return dict(self._peaks)


@dataclass(frozen=True)
class OpCountReport:
    """一次训练步的实测计数"""
    per_layer: Mapping[str, Mapping[str, int]] = field(default_factory=dict)
    totals: Mapping[str, int] = field(default_factory=dict)
    ledger: Mapping[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.totals.values())
