#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
引擎上的训练步工具：实测计数、玩具数据集与训练、有限差分检查
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..peft.optimizer_plan import OptimizerPlan
from ..utils.error_handler import EngineError
from .counter import OpCountReport
from .executable import Executable, backward, forward
from .optim import OptimizerState, step

logger = logging.getLogger(__name__)

DEFAULT_LR = {'sgd_momentum': 5e-2, 'adam': 2e-2, 'galore_adam': 2e-2}
BATCH_SIZE = 8
# 梯度范数低于此值时按绝对误差比较
GRAD_FLOOR = 1e-6
# 两个步长差分之差的舍入量级
ROUNDING_FLOOR = 1e-9
MAX_DRAWS = 8


def instrumented_counts(executable: Executable, x: np.ndarray, labels: Optional[np.ndarray] = None,
                        plan: Optional[OptimizerPlan] = None, lr: float = 1e-3) -> OpCountReport:
    """执行一次完整训练步（前向、反向、优化器）并返回计数与账本峰值

    Args:
        executable (Executable): 可执行模型（计数器会被清零）
        x (np.ndarray): 输入
        labels (np.ndarray): 标签，None 时以全 1 作为输出梯度
        plan (OptimizerPlan): 优化器计划，None 时跳过优化器步

    Returns:
        OpCountReport: 每层每阶段计数、总计、各组峰值字节
    """
    executable.counter.reset()
    _, tape = forward(executable, x, labels)
    grads = backward(executable, tape)
    if plan is not None:
        state = OptimizerState.for_executable(executable, plan, lr=lr)
        step(state, grads)
    return OpCountReport(per_layer=executable.counter.per_layer,
                         totals=executable.counter.totals,
                         ledger=executable.ledger.peaks)


def make_separable_dataset(shape: Sequence[int], seed: int = 0, n: int = 64,
                           num_classes: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """可分的合成数据：类别 k 的样本在第 k 个通道上整体平移 +2

    Args:
        shape: 单个样本 (C, H, W)
        seed (int): 随机种子
        n (int): 样本数
        num_classes (int): 类别数（不超过通道数）

    Returns:
        (x, labels)
    """
    c = shape[0]
    if num_classes > c:
        raise EngineError(f"类别数 {num_classes} 超过通道数 {c}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    x = 0.5 * rng.standard_normal((n,) + tuple(shape))
    x[np.arange(n), labels] += 2.0
    return x, labels


def evaluate_loss(executable: Executable, x: np.ndarray, labels: np.ndarray) -> float:
    _, tape = forward(executable, x, labels)
    return tape.loss


def train_toy(executable: Executable, dataset: Tuple[np.ndarray, np.ndarray], plan: OptimizerPlan,
              epochs: int = 5, lr: Optional[float] = None) -> List[float]:
    """按固定顺序分批训练，返回每轮的平均损失"""
    x, labels = dataset
    lr = lr if lr is not None else DEFAULT_LR[plan.rule]
    state = OptimizerState.for_executable(executable, plan, lr=lr)
    history = []
    for epoch in range(epochs):
        losses = []
        for start in range(0, len(x), BATCH_SIZE):
            batch = slice(start, start + BATCH_SIZE)
            _, tape = forward(executable, x[batch], labels[batch])
            grads = backward(executable, tape)
            step(state, grads)
            losses.append(tape.loss)
        history.append(float(np.mean(losses)))
        logger.debug(f"{executable.method} 第 {epoch + 1} 轮平均损失 {history[-1]:.4f}")
    return history


def _central_difference(executable: Executable, x: np.ndarray, labels: np.ndarray, flat: np.ndarray,
                        index: int, eps: float) -> float:
    original = flat[index]
    flat[index] = original + eps
    plus = evaluate_loss(executable, x, labels)
    flat[index] = original - eps
    minus = evaluate_loss(executable, x, labels)
    flat[index] = original
    return (plus - minus) / (2.0 * eps)


def finite_difference_check(executable: Executable, x: np.ndarray, labels: np.ndarray, eps: float = 1e-5,
                            samples: int = 4, seed: int = 0, kink_tolerance: float = 1e-5) -> Dict[str, float]:
    """中心差分检查反向梯度

    每个可训练参数抽取 samples 个元素。bnh 的 BN 仿射参数在截断的目标下梯度为零，不参与检查。
    步长 eps 与 eps/4 的差分结果不一致说明扰动跨过了 ReLU / 最大池化的折点，该元素换一个重抽。

    Returns:
        dict: 参数 id -> 相对误差 ||g - g_fd|| / max(||g||, ||g_fd||, GRAD_FLOOR)
    """
    rng = np.random.default_rng(seed)
    _, tape = forward(executable, x, labels)
    grads = backward(executable, tape)

    errors = {}
    for name, value in executable.trainable_weights().items():
        node = executable.graph.node(executable.owners[name])
        if executable.method == 'bnh' and node.kind == 'batchnorm2d':
            continue
        flat = value.reshape(-1)
        grad = grads[name].reshape(-1)
        analytic, numeric = [], []
        skipped = 0
        for index in rng.permutation(flat.size)[:samples * MAX_DRAWS]:
            coarse = _central_difference(executable, x, labels, flat, index, eps)
            fine = _central_difference(executable, x, labels, flat, index, eps / 4.0)
            if abs(coarse - fine) > kink_tolerance * max(abs(coarse), abs(fine)) + ROUNDING_FLOOR:
                skipped += 1
                continue
            analytic.append(grad[index])
            numeric.append(coarse)
            if len(numeric) == samples:
                break
        if skipped:
            logger.debug(f"{name}: {skipped} 个元素落在折点附近，已跳过")
        if not numeric:
            continue
        analytic, numeric = np.asarray(analytic), np.asarray(numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
        errors[name] = float(np.linalg.norm(analytic - numeric) / scale)
    return errors


def random_toy_layers(rng: np.random.Generator, num_classes: int = 2) -> List[dict]:
    """随机生成一个小 CNN 层列表（含分组卷积、残差、池化）"""
    width = int(rng.choice([4, 6, 8]))
    layers = [
        {'kind': 'conv2d', 'out_channels': width, 'kernel': 3, 'stride': int(rng.choice([1, 2]))},
        {'kind': 'batchnorm2d'},
        {'kind': 'activation', 'fn': str(rng.choice(['relu', 'relu6', 'hardswish']))},
    ]
    if rng.random() < 0.5:
        layers += [
            {'kind': 'conv2d', 'out_channels': width, 'kernel': 3, 'depthwise': True},
            {'kind': 'batchnorm2d'},
            {'kind': 'residual_add', 'from': 2},
        ]
    if rng.random() < 0.5:
        layers.append({'kind': 'maxpool', 'kernel': 2, 'stride': 2})
    layers += [
        {'kind': 'conv2d', 'out_channels': width * 2, 'kernel': 1, 'bias': bool(rng.random() < 0.5)},
        {'kind': 'activation', 'fn': 'relu'},
        {'kind': 'avgpool'},
        {'kind': 'linear', 'out_features': num_classes, 'bias': True},
    ]
    return layers
