#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令实现：profile / compare / sweep / plan

compare 与 sweep 的各点通过线程池并行计算，结果按输入顺序组装。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from ..peft.transform import trainable_summary
from ..profiler.flops import profile_flops
from ..profiler.memory import profile_memory
from ..utils.error_handler import ValidationError
from .emit import (ComparisonRow, ComparisonTable, PlanResult, ProfileReport, SweepPoint, SweepResult,
                   percent_delta)
from .runspec import RunSpec

logger = logging.getLogger(__name__)

SWEEP_METHODS = ('lora', 'dora', 'galore')
DEFAULT_WORKERS = 4


def cmd_profile(spec: RunSpec) -> ProfileReport:
    """剖析一个 (架构, 方法)"""
    tuned = spec.tuned()
    plan = spec.plan(tuned)
    flops = profile_flops(tuned, plan, convention=spec.convention)
    memory = profile_memory(tuned, plan, width=spec.bytes_per_element)
    logger.info(f"{spec.arch}/{spec.method}: FLOPs {flops.total:,}, 峰值内存 {memory.total:,} 字节")
    return ProfileReport(spec=spec.to_dict(), flops=flops, memory=memory, params=trainable_summary(tuned))


def _map_ordered(func, items: Sequence, max_workers: int) -> List:
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        return list(executor.map(func, items))


def cmd_compare(specs: Sequence[RunSpec], max_workers: int = DEFAULT_WORKERS) -> ComparisonTable:
    """多方法对比；缺少 fft 时自动补上作为基准"""
    if not specs:
        raise ValidationError("compare 至少需要一个运行规格")
    archs = {(spec.arch, spec.input_shape, spec.num_classes) for spec in specs}
    if len(archs) != 1:
        raise ValidationError(f"compare 的所有规格必须使用同一架构与输入: {sorted(str(a) for a in archs)}")

    specs = list(specs)
    if not any(spec.method == 'fft' for spec in specs):
        specs.insert(0, specs[0].with_peft(method='fft', optimizer=None))
        logger.debug("compare 自动加入 fft 作为基准")

    reports = _map_ordered(cmd_profile, specs, max_workers)
    reference = next(report for report in reports if report.flops.method == 'fft')

    rows = []
    for report in reports:
        flops = report.flops.totals
        deltas = {'flops_total': percent_delta(report.flops.total, reference.flops.total),
                  'memory_total': percent_delta(report.memory.total, reference.memory.total)}
        deltas.update({f"flops.{phase}": percent_delta(value, reference.flops.totals[phase])
                       for phase, value in flops.items()})
        deltas.update({f"memory.{group}": percent_delta(value, reference.memory.groups[group])
                       for group, value in report.memory.groups.items()})
        rows.append(ComparisonRow(method=report.flops.method, flops=flops,
                                  memory=dict(report.memory.groups), deltas=deltas))
    return ComparisonTable(arch=specs[0].arch, rows=tuple(rows))


def linear_fit(xs: Sequence[float], ys: Sequence[float]):
    """最小二乘直线的斜率与 R^2"""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) < 2:
        return 0.0, 1.0
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    total = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - residual / total if total > 0 else 1.0
    return float(slope), float(r2)


def cmd_sweep(spec: RunSpec, ranks: Sequence[int], max_workers: int = DEFAULT_WORKERS) -> SweepResult:
    """对一个低秩方法扫描秩，拟合 FLOPs 与内存随秩的斜率

    galore 的投影集合按最大秩筛选并在各点保持不变，否则小秩点会多投影几个窄矩阵，拟合不再是直线。
    """
    if spec.method not in SWEEP_METHODS:
        raise ValidationError(f"sweep 只支持 {SWEEP_METHODS}，收到 {spec.method}")
    ranks = sorted(set(ranks))
    if not ranks or ranks[0] < 1:
        raise ValidationError(f"ranks 必须为正整数列表: {list(ranks)}")

    fixed = {'galore_selection_rank': ranks[-1]} if spec.method == 'galore' else {}
    reports = _map_ordered(cmd_profile, [spec.with_peft(rank=r, **fixed) for r in ranks], max_workers)
    points = tuple(SweepPoint(rank=r, flops_total=rep.flops.total, memory_total=rep.memory.total,
                              groups=dict(rep.memory.groups)) for r, rep in zip(ranks, reports))
    fits = {
        'flops': linear_fit(ranks, [p.flops_total for p in points]),
        'memory': linear_fit(ranks, [p.memory_total for p in points]),
    }
    return SweepResult(arch=spec.arch, method=spec.method, points=points, fits=fits)


def cmd_plan(specs: Sequence[RunSpec], memory_budget: Optional[int] = None, flops_budget: Optional[int] = None,
             max_workers: int = DEFAULT_WORKERS) -> PlanResult:
    """列出满足预算的方法，按 (FLOPs 总量, 内存总量) 升序"""
    for name, budget in (('memory_budget', memory_budget), ('flops_budget', flops_budget)):
        if budget is not None and budget <= 0:
            raise ValidationError(f"{name} 必须 > 0: {budget}")
    table = cmd_compare(specs, max_workers)
    requested = {spec.method for spec in specs}
    fits = [row for row in table.rows if row.method in requested
            and (memory_budget is None or row.memory_total <= memory_budget)
            and (flops_budget is None or row.flops_total <= flops_budget)]
    fits.sort(key=lambda row: (row.flops_total, row.memory_total))
    return PlanResult(arch=table.arch, candidates=tuple(fits),
                      memory_budget=memory_budget, flops_budget=flops_budget)
