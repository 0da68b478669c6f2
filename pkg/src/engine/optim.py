#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
优化器：SGD 动量、Adam、GaLore-Adam

状态在第一次 step 时分配并记入 OPT；运算次数记在参数所属层的 opt 阶段。
GaLore 刷新投影时 Jacobi SVD 的实测运算量单独累计在 svd_work 中，不进入阶段计数。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from ..peft.optimizer_plan import OptimizerPlan
from ..profiler.memory import MemoryGroup
from ..utils.error_handler import EngineError
from .kernels import OPT
from .svd import top_left_vectors, top_right_vectors

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """每参数的状态张量

    galore 投影参数: projector 为 P (m x r) 或 Q (n x r)，moments 在秩空间。
    """
    plan: OptimizerPlan
    params: Dict[str, np.ndarray]
    owners: Mapping[str, str]
    ledger: object
    counter: object
    lr: float = 1e-3
    step_count: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    projectors: Dict[str, np.ndarray] = field(default_factory=dict)
    last_refresh: Dict[str, int] = field(default_factory=dict)
    svd_work: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_executable(cls, executable, plan: OptimizerPlan, lr: float = 1e-3) -> 'OptimizerState':
        return cls(plan=plan, params=executable.weights, owners=executable.owners,
                   ledger=executable.ledger, counter=executable.counter, lr=lr)

    def tick(self, param_id: str, n: int):
        self.counter.add(OPT, self.owners[param_id], n)

    def svd_tick(self, param_id: str):
        def tick(n: int):
            self.svd_work[param_id] = self.svd_work.get(param_id, 0) + n
        return tick


def _sgd(state: OptimizerState, name: str, grad: np.ndarray):
    plan = state.plan
    if name not in state.buffers:
        state.buffers[name] = np.zeros_like(grad)
        state.ledger.allocate(MemoryGroup.OPT, f"{name}.momentum", grad.size)
    buf = plan.momentum * state.buffers[name] + grad
    state.buffers[name] = buf
    state.params[name] -= state.lr * buf
    state.tick(name, 4 * grad.size)


def _adam_direction(state: OptimizerState, name: str, grad: np.ndarray, step: int) -> np.ndarray:
    """更新两个矩并返回偏差校正后的方向，12 次运算/元素"""
    plan = state.plan
    if name not in state.first:
        state.first[name] = np.zeros_like(grad)
        state.second[name] = np.zeros_like(grad)
        state.ledger.allocate(MemoryGroup.OPT, f"{name}.exp_avg", grad.size)
        state.ledger.allocate(MemoryGroup.OPT, f"{name}.exp_avg_sq", grad.size)
    m = plan.beta1 * state.first[name] + (1.0 - plan.beta1) * grad
    v = plan.beta2 * state.second[name] + (1.0 - plan.beta2) * grad * grad
    state.first[name], state.second[name] = m, v
    m_hat = m / (1.0 - plan.beta1 ** (step + 1))
    v_hat = v / (1.0 - plan.beta2 ** (step + 1))
    state.tick(name, 12 * grad.size)
    return m_hat / (np.sqrt(v_hat) + plan.eps)


def _adam(state: OptimizerState, name: str, grad: np.ndarray, step: int):
    direction = _adam_direction(state, name, grad, step)
    state.params[name] -= state.lr * direction
    state.tick(name, 2 * grad.size)


def _galore(state: OptimizerState, name: str, grad: np.ndarray, step: int):
    plan = state.plan
    proj = plan.projected[name]
    m, n, r = proj.rows, proj.cols, proj.rank
    g = grad.reshape(m, n)

    if step % plan.period == 0:
        # 刷新投影，矩保留在原秩空间中继续累计
        tick = state.svd_tick(name)
        basis = top_left_vectors(g, r, tick) if proj.side == 'left' else top_right_vectors(g, r, tick)
        if name not in state.projectors:
            state.ledger.allocate(MemoryGroup.OPT, f"{name}.projector", basis.size)
        state.projectors[name] = basis
        state.last_refresh[name] = step

    basis = state.projectors[name]
    low = basis.T @ g if proj.side == 'left' else g @ basis
    state.tick(name, 2 * m * r * n)
    direction = _adam_direction(state, name, low, step)
    full = basis @ direction if proj.side == 'left' else direction @ basis.T
    state.tick(name, 2 * m * r * n)
    state.params[name] -= (state.lr * plan.scale) * full.reshape(grad.shape)
    state.tick(name, 2 * m * n)


def step(state: OptimizerState, grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """按计划更新所有带梯度的参数

    Args:
        state (OptimizerState): 优化器状态（原地更新参数）
        grads (dict): 参数 id -> 梯度

    Returns:
        dict: 更新后的参数
    """
    plan = state.plan
    current = state.step_count
    for name, grad in grads.items():
        if name not in state.params:
            raise EngineError(f"梯度对应的参数不存在: {name}")
        if grad.shape != state.params[name].shape:
            raise EngineError(f"参数 {name} 梯度形状 {grad.shape} 与参数 {state.params[name].shape} 不符")
        if plan.rule == 'sgd_momentum':
            _sgd(state, name, grad)
        elif plan.rule == 'adam' or not plan.is_projected(name):
            _adam(state, name, grad, current)
        else:
            _galore(state, name, grad, current)
    state.step_count += 1
    return state.params

