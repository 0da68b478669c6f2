#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
校验套件

在随机玩具网络上用参考引擎核对解析模型，并检查梯度、恒等关系与训练收敛。
每个套件在 run_with_timeout 下执行，超时或异常都记为失败。
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import psutil

from ..engine import (Executable, finite_difference_check, forward, instrumented_counts, jacobi_svd,
                      make_separable_dataset, random_toy_layers, train_toy)
from ..graph.builders import build_model
from ..graph.ir import ModelGraph, TensorShape
from ..peft.config import METHODS, PeftConfig
from ..peft.optimizer_plan import plan_for
from ..peft.transform import apply_method, merge_adapters
from ..profiler.flops import PHASES, layer_flops, profile_flops
from ..profiler.memory import MemoryGroup, group_bytes
from ..utils.config import Config
from ..utils.error_handler import handle_errors
from ..utils.timeout_decorator import DEFAULT_TIMEOUTS, run_with_timeout

logger = logging.getLogger(__name__)

# 2 类输出把线性层适配器的秩限制在 2 以内
TOY_RANK = 2
TOY_INPUT = TensorShape(2, 3, 8, 8)
FD_TOLERANCE = 1e-4
FD_EPSILON = 1e-5
TRAINING_EPOCHS = 10
# 训练套件要求末轮平均损失低于首轮的这个比例
TRAINING_LOSS_RATIO = 0.5
IDENTITY_TOLERANCE = 1e-9
PARITY_GROUPS = (MemoryGroup.PARAM, MemoryGroup.GRAD, MemoryGroup.OPT, MemoryGroup.ACT)


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str = ''
    seconds: float = 0.0


@dataclass(frozen=True)
class VerifySummary:
    results: Tuple[SuiteResult, ...]
    rss_bytes: int = 0
    kind: str = 'verify'

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'passed': self.passed,
            'rss_bytes': self.rss_bytes,
            'suites': [{'name': r.name, 'passed': r.passed, 'detail': r.detail, 'seconds': round(r.seconds, 3)}
                       for r in self.results],
        }

    def csv_rows(self):
        rows = [(r.name, 'passed', r.passed) for r in self.results]
        rows.append(('summary', 'rss_bytes', self.rss_bytes))
        return rows

    def table_lines(self) -> List[str]:
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<16} {r.seconds:7.2f}s  {r.detail}".rstrip()
                 for r in self.results]
        lines.append(f"常驻内存: {self.rss_bytes / 2 ** 20:.1f} MiB")
        lines.append('全部通过' if self.passed else '存在失败的套件')
        return lines


def toy_config(method: str, rank: int = TOY_RANK) -> PeftConfig:
    """玩具网络上的方法配置；galore 每步刷新投影"""
    return PeftConfig(method=method, rank=rank, galore_period=1)


def toy_graphs(seed: int, count: int) -> List[ModelGraph]:
    rng = np.random.default_rng(seed)
    return [build_model('toy_cnn', 2, TOY_INPUT, layers=random_toy_layers(rng)) for _ in range(count)]


def _toy_batch(graph: ModelGraph, seed: int):
    rng = np.random.default_rng(seed)
    shape = graph.input_shape
    x = rng.standard_normal(shape.as_tuple())
    labels = rng.integers(0, 2, size=shape.n)
    return x, labels


def _nonzero(per_layer) -> Dict[Tuple[str, str], int]:
    return {(layer, phase): value for layer, counts in per_layer.items()
            for phase, value in counts.items() if value}


def check_flops_parity(graphs: List[ModelGraph], seed: int = 0, convention: str = 'paper') -> List[str]:
    """逐层逐阶段比较解析 FLOPs 与引擎实测计数，返回不一致的描述"""
    mismatches = []
    for index, graph in enumerate(graphs):
        x, labels = _toy_batch(graph, seed + index)
        for method in METHODS:
            tuned = apply_method(graph, toy_config(method))
            plan = plan_for(tuned.base, tuned.config)
            analytic = _nonzero(profile_flops(tuned, plan, convention=convention, include_svd=False).per_layer)
            executable = Executable(tuned, seed=seed + index, convention=convention)
            executable.perturb_adapters(seed + index)
            measured = _nonzero(instrumented_counts(executable, x, labels, plan).per_layer)
            if analytic != measured:
                diff = sorted(key for key in set(analytic) | set(measured)
                              if analytic.get(key) != measured.get(key))
                mismatches.append(f"图 {index} / {method}: {diff[:3]}")
    return mismatches


def check_memory_parity(graphs: List[ModelGraph], seed: int = 0, width: int = 4) -> List[str]:
    mismatches = []
    for index, graph in enumerate(graphs):
        x, labels = _toy_batch(graph, seed + index)
        for method in METHODS:
            tuned = apply_method(graph, toy_config(method))
            plan = plan_for(tuned.base, tuned.config)
            executable = Executable(tuned, seed=seed + index, width=width)
            peaks = instrumented_counts(executable, x, labels, plan).ledger
            for group in PARITY_GROUPS:
                expected = group_bytes(tuned, plan, group, width=width)
                if peaks[group.value] != expected:
                    mismatches.append(f"图 {index} / {method} / {group.value}: 解析 {expected}, 实测 {peaks[group.value]}")
    return mismatches


def check_gradients(graphs: List[ModelGraph], seed: int = 0, eps: float = FD_EPSILON) -> List[str]:
    failures = []
    for index, graph in enumerate(graphs):
        x, labels = _toy_batch(graph, seed + index)
        for method in METHODS:
            tuned = apply_method(graph, toy_config(method))
            executable = Executable(tuned, seed=seed + index)
            executable.perturb_adapters(seed + index)
            errors = finite_difference_check(executable, x, labels, eps=eps, seed=seed + index)
            worst = max(errors.items(), key=lambda item: item[1], default=(None, 0.0))
            if worst[1] > FD_TOLERANCE:
                failures.append(f"图 {index} / {method}: {worst[0]} 相对误差 {worst[1]:.2e}")
    return failures


def _max_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def check_identities(graph: ModelGraph, seed: int = 0) -> List[str]:
    """B=0 输出不变、合并等价、满秩 galore 退化为 adam、SVD 重构、两种计数约定"""
    failures = []
    x, labels = _toy_batch(graph, seed)
    base = Executable(apply_method(graph, toy_config('fft')), seed=seed, train=False)
    base_out, _ = forward(base, x)
    base_weights = base.state_dict()

    for method in ('lora', 'dora'):
        tuned = apply_method(graph, toy_config(method))
        fresh = Executable(tuned, seed=seed, weights=base_weights, train=False)
        out, _ = forward(fresh, x)
        if _max_diff(out, base_out) > IDENTITY_TOLERANCE:
            failures.append(f"{method} 初始化后输出改变 {_max_diff(out, base_out):.2e}")

        fresh.perturb_adapters(seed + 1, scale=0.3)
        out, _ = forward(fresh, x)
        merged_graph, merged_weights = merge_adapters(tuned, fresh.weights)
        merged = Executable(apply_method(merged_graph, toy_config('fft')), weights=merged_weights, train=False)
        merged_out, _ = forward(merged, x)
        if _max_diff(out, merged_out) > 1e-8:
            failures.append(f"{method} 合并前后输出不一致 {_max_diff(out, merged_out):.2e}")

    # r 不小于任何矩阵的较小维时没有投影参数，galore 与 adam 逐位一致
    full_rank = max(min(spec.shape[0], int(np.prod(spec.shape[1:]))) for spec in graph.parameters())
    galore = apply_method(graph, PeftConfig(method='galore', rank=full_rank, galore_period=1))
    runs = []
    for tuned in (galore, apply_method(graph, toy_config('fft'))):
        executable = Executable(tuned, seed=seed)
        plan = plan_for(tuned.base, tuned.config)
        train_toy(executable, (x, labels), plan, epochs=2, lr=1e-2)
        runs.append(executable.weights)
    worst = max(_max_diff(runs[0][k], runs[1][k]) for k in runs[0])
    if worst != 0.0:
        failures.append(f"满秩 galore 与 adam 不一致 {worst:.2e}")

    rng = np.random.default_rng(seed)
    for shape in ((6, 4), (4, 9), (5, 5)):
        a = rng.standard_normal(shape)
        u, s, vt = jacobi_svd(a)
        if _max_diff(u * s @ vt, a) > 1e-10 or _max_diff(s, np.linalg.svd(a, compute_uv=False)) > 1e-10:
            failures.append(f"Jacobi SVD 在 {shape} 上误差过大")

    for node in graph.nodes:
        if node.is_depthwise:
            paper = layer_flops(node, 'bwd_input', 'paper')
            exact = layer_flops(node, 'bwd_input', 'exact')
            if paper != exact * node.in_channels:
                failures.append(f"{node.id}: paper/exact 输入梯度比不等于 C_in")
    return failures


def check_training(graph: ModelGraph, seed: int = 0, epochs: int = TRAINING_EPOCHS) -> List[str]:
    """每个方法训练 epochs 轮，末轮平均损失须低于首轮的 TRAINING_LOSS_RATIO 倍"""
    failures = []
    shape = graph.input_shape
    dataset = make_separable_dataset((shape.c, shape.h, shape.w), seed=seed)
    for method in METHODS:
        tuned = apply_method(graph, toy_config(method))
        executable = Executable(tuned, seed=seed)
        history = train_toy(executable, dataset, plan_for(tuned.base, tuned.config), epochs=epochs)
        if not history[-1] < TRAINING_LOSS_RATIO * history[0]:
            failures.append(f"{method} 训练损失未减半: {history[0]:.4f} -> {history[-1]:.4f}")
    return failures


def _run_suite(name: str, func: Callable[[], List[str]], budget: float) -> SuiteResult:
    start = time.time()
    failures = run_with_timeout(func, timeout_seconds=budget, default=None,
                                error_message=f"校验套件 {name} 超时（{budget}秒）")
    seconds = time.time() - start
    if failures is None:
        return SuiteResult(name, False, '超时或执行出错', seconds)
    if failures:
        logger.warning(f"套件 {name} 失败: {failures[0]}")
        return SuiteResult(name, False, f"{len(failures)} 处失败, 如 {failures[0]}", seconds)
    return SuiteResult(name, True, '', seconds)


@handle_errors(default_return=0, log_level=logging.WARNING)
def resident_bytes() -> int:
    """当前进程常驻内存；受限环境下 psutil 可能拒绝访问，此时记 0"""
    return psutil.Process().memory_info().rss


def cmd_verify(config: Optional[Config] = None, seed: Optional[int] = None,
               toy_graphs_count: Optional[int] = None) -> VerifySummary:
    """运行全部校验套件"""
    config = config or Config()
    seed = config.get_int('VERIFY_SEED', 0) if seed is None else seed
    count = toy_graphs_count or config.get_int('VERIFY_TOY_GRAPHS', 20)
    eps = config.get_float('VERIFY_FD_EPSILON', FD_EPSILON)
    cap = config.get_float('SUITE_TIMEOUT_SECONDS', 300)
    convention = config.input_grad_convention

    graphs = toy_graphs(seed, count)
    small = graphs[:3]
    # 单独加一个带深度卷积的网络，保证计数约定检查有对象
    identity_graph = build_model('toy_cnn', 2, TOY_INPUT, layers=[
        {'kind': 'conv2d', 'out_channels': 4, 'kernel': 3},
        {'kind': 'batchnorm2d'},
        {'kind': 'activation', 'fn': 'relu'},
        {'kind': 'conv2d', 'kernel': 3, 'depthwise': True},
        {'kind': 'avgpool'},
        {'kind': 'linear'},
    ])

    suites = [
        ('flops_parity', lambda: check_flops_parity(graphs, seed, convention)),
        ('memory_parity', lambda: check_memory_parity(graphs, seed, config.bytes_per_element)),
        ('gradient_check', lambda: check_gradients([identity_graph] + small, seed, eps)),
        ('identities', lambda: check_identities(identity_graph, seed)),
        ('training', lambda: check_training(graphs[0], seed)),
    ]
    results = []
    for name, func in suites:
        result = _run_suite(name, func, min(DEFAULT_TIMEOUTS[name], cap))
        logger.info(f"套件 {name}: {'通过' if result.passed else '失败'} ({result.seconds:.2f}s)")
        results.append(result)

    return VerifySummary(results=tuple(results), rss_bytes=resident_bytes())
