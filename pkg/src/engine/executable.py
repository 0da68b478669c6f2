#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
参考执行引擎

在 numpy 上执行 TunedModel 的前向与反向，记录实测运算次数和分组分配，
作为解析模型的对照。反向只为梯度流分析中参与的节点构建闭包。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..graph.ir import INPUT_EDGE, LayerNode
from ..peft.transform import DORA_EPS, TunedModel, dense_weight, dora_direction_norm
from ..profiler.flops import CountingConvention
from ..profiler.grad_flow import GradFlow, analyze
from ..profiler.memory import MemoryGroup, dora_u_edge, lora_a_edge
from ..utils.error_handler import EngineError, ShapeError
from .counter import AllocationLedger, OpCounter
from .kernels import BWD_INPUT, BWD_WEIGHT, FWD, Kernels, softmax_cross_entropy

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Tuple[List[Optional[np.ndarray]], Dict[str, np.ndarray]]]


@dataclass
class Tape:
    """一次前向的执行记录：保存的激活、反向闭包、输出与损失"""
    ledger: AllocationLedger
    flow: GradFlow
    closures: List[Tuple[LayerNode, Backward]] = field(default_factory=list)
    saved: Dict[str, np.ndarray] = field(default_factory=dict)
    output: Optional[np.ndarray] = None
    loss: Optional[float] = None
    loss_grad: Optional[np.ndarray] = None
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    consumed: bool = False

    def save(self, key: str, value: np.ndarray):
        """按 key 去重保存，记入 ACT"""
        if key not in self.saved:
            self.saved[key] = value
            self.ledger.allocate(MemoryGroup.ACT, key, value.size)

    @property
    def saved_numel(self) -> int:
        return sum(value.size for value in self.saved.values())


def _uniform(rng, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Executable:
    """带权重的可执行模型

    Args:
        tuned (TunedModel): 变换后的模型（须已推断形状）
        seed (int): 参数初始化种子
        weights (dict): 覆盖初始化的参数取值
        width (int): 账本每元素字节数
        convention (str): 输入梯度计数约定
        train (bool): BN 使用批统计量并更新 running 统计量
    """

    def __init__(self, tuned: TunedModel, seed: int = 0, weights: Optional[Mapping[str, np.ndarray]] = None,
                 width: int = 4, convention: str = 'paper', train: bool = True):
        self.tuned = tuned
        self.graph = tuned.base
        self.convention = CountingConvention(convention)
        self.train = train
        self.counter = OpCounter()
        self.ledger = AllocationLedger(width)
        self.kernels = Kernels(self.counter)
        self.flow = analyze(tuned)
        self.owners = {spec.param_id: spec.node_id for spec in tuned.parameters()}
        self.weights: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._init_parameters(np.random.default_rng(seed), weights or {})

    def _init_parameters(self, rng, given: Mapping[str, np.ndarray]):
        for spec in self.tuned.parameters():
            node = self.graph.node(spec.node_id)
            if spec.param_id in given:
                value = np.array(given[spec.param_id], dtype=np.float64)
                if value.shape != tuple(spec.shape):
                    raise ShapeError(f"参数 {spec.param_id} 形状 {value.shape} 与期望 {spec.shape} 不符",
                                     node_id=node.id)
            elif spec.name == 'lora_A':
                value = _uniform(rng, 1.0 / np.sqrt(np.prod(spec.shape[1:])), spec.shape)
            elif spec.name == 'lora_B':
                value = np.zeros(spec.shape)
            elif spec.name == 'dora_m':
                value = dora_direction_norm(dense_weight(node, self.weights[f"{node.id}.weight"]))
            elif node.kind == 'batchnorm2d':
                value = rng.uniform(0.5, 1.5, size=spec.shape) if spec.name == 'weight' \
                    else _uniform(rng, 0.1, spec.shape)
            else:
                fan_in = node.in_features if node.kind == 'linear' else \
                    (node.in_channels // node.groups) * node.kernel * node.kernel
                value = _uniform(rng, 1.0 / np.sqrt(fan_in), spec.shape)
            self.weights[spec.param_id] = value
            self.ledger.allocate(MemoryGroup.PARAM, spec.param_id, value.size)

        for spec in self.tuned.buffers():
            value = np.zeros(spec.shape) if spec.name == 'running_mean' else np.ones(spec.shape)
            self.buffers[spec.param_id] = value
            self.ledger.allocate(MemoryGroup.PARAM, spec.param_id, value.size)

    @property
    def method(self) -> str:
        return self.tuned.method

    def trainable_weights(self) -> Dict[str, np.ndarray]:
        return {name: value for name, value in self.weights.items() if self.tuned.is_trainable(name)}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.weights.items()}

    def perturb_adapters(self, seed: int = 1, scale: float = 0.1):
        """给 B（以及 DoRA 的 m）加随机扰动，使适配器分支非零"""
        rng = np.random.default_rng(seed)
        for adapter in self.tuned.adapters.values():
            self.weights[adapter.b_id] = self.weights[adapter.b_id] + scale * rng.standard_normal(adapter.b_shape)
            if adapter.is_dora:
                m = self.weights[adapter.m_id]
                self.weights[adapter.m_id] = m * (1.0 + scale * rng.standard_normal(m.shape))

    # 基础层与适配器分支

    def _apply(self, node: LayerNode, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if node.kind == 'linear':
            return self.kernels.linear(node.id, x, w)
        return self.kernels.conv2d(node.id, x, w, node.stride, node.padding, node.groups)

    def _weight_grad(self, node: LayerNode, x: np.ndarray, dy: np.ndarray, w_shape) -> np.ndarray:
        if node.kind == 'linear':
            return self.kernels.linear_weight_grad(node.id, x, dy)
        return self.kernels.conv2d_weight_grad(node.id, x, dy, w_shape, node.stride, node.padding, node.groups)

    def _input_grad(self, node: LayerNode, dy: np.ndarray, w: np.ndarray, x_shape, dense_cost: bool) -> np.ndarray:
        if node.kind == 'linear':
            return self.kernels.linear_input_grad(node.id, dy, w, x_shape)
        return self.kernels.conv2d_input_grad(node.id, dy, w, x_shape, node.stride, node.padding,
                                              node.groups, dense_cost=dense_cost)

    def _adapter_a(self, node: LayerNode, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        if node.kind == 'linear':
            return self.kernels.linear(node.id, x, a)
        return self.kernels.conv2d(node.id, x, a, node.stride, node.padding, 1)

    def _adapter_b(self, node: LayerNode, h: np.ndarray, b: np.ndarray) -> np.ndarray:
        if node.kind == 'linear':
            return self.kernels.linear(node.id, h, b)
        return self.kernels.conv2d(node.id, h, b)

    def _adapter_b_grads(self, node: LayerNode, h: np.ndarray, dt: np.ndarray, b: np.ndarray):
        k = self.kernels
        if node.kind == 'linear':
            return k.linear_weight_grad(node.id, h, dt), k.linear_input_grad(node.id, dt, b, h.shape)
        return (k.conv2d_weight_grad(node.id, h, dt, b.shape),
                k.conv2d_input_grad(node.id, dt, b, h.shape))

    def _adapter_a_grads(self, node: LayerNode, x: np.ndarray, dh: np.ndarray, a: np.ndarray, need_dx: bool):
        k = self.kernels
        if node.kind == 'linear':
            da = k.linear_weight_grad(node.id, x, dh)
            dx = k.linear_input_grad(node.id, dh, a, x.shape) if need_dx else None
            return da, dx
        da = k.conv2d_weight_grad(node.id, x, dh, a.shape, node.stride, node.padding, 1)
        dx = k.conv2d_input_grad(node.id, dh, a, x.shape, node.stride, node.padding, 1) if need_dx else None
        return da, dx

    # 各类节点的前向，返回 (输出, 反向闭包)

    def _run_dense(self, node: LayerNode, x: np.ndarray, tape: Tape, participating: bool):
        w = self.weights[f"{node.id}.weight"]
        bias_id = f"{node.id}.bias"
        y = self._apply(node, x, w)
        if node.bias:
            y = self.kernels.bias_add(node.id, y, self.weights[bias_id])
        if not participating:
            return y, None

        w_trainable = self.tuned.is_trainable(f"{node.id}.weight")
        b_trainable = node.bias and self.tuned.is_trainable(bias_id)
        need_dx = self.flow.computes_input_grad(node.id, 0)
        dense_cost = self.convention == CountingConvention.PAPER and w_trainable
        if w_trainable:
            tape.save(node.inputs[0], x)
        x_shape = x.shape

        def backward(dy):
            grads = {}
            if w_trainable:
                grads[f"{node.id}.weight"] = self._weight_grad(node, tape.saved[node.inputs[0]], dy, w.shape)
            if b_trainable:
                grads[bias_id] = self.kernels.bias_grad(node.id, dy).reshape(-1)
            dx = self._input_grad(node, dy, w, x_shape, dense_cost) if need_dx else None
            return [dx], grads

        return y, backward

    def _run_adapter(self, node: LayerNode, x: np.ndarray, tape: Tape):
        k = self.kernels
        adapter = self.tuned.adapters[node.id]
        s = adapter.scaling
        w0 = self.weights[f"{node.id}.weight"]
        a_w, b_w = self.weights[adapter.a_id], self.weights[adapter.b_id]

        base = self._apply(node, x, w0)
        h = self._adapter_a(node, x, a_w)
        st = k.scale(FWD, node.id, self._adapter_b(node, h, b_w), s)
        tape.save(node.inputs[0], x)
        tape.save(lora_a_edge(node.id), h)

        dora = None
        if adapter.is_dora:
            u = k.add(FWD, node.id, base, st)
            dora = self._dora_gain(node, adapter, w0, a_w, b_w)
            y = k.multiply(FWD, node.id, u, dora['g'].reshape(1, -1, 1, 1))
            tape.save(dora_u_edge(node.id), u)
        else:
            y = base
            if node.bias:
                y = k.bias_add(node.id, y, self.weights[f"{node.id}.bias"])
            y = k.add(FWD, node.id, y, st)
        if adapter.is_dora and node.bias:
            y = k.bias_add(node.id, y, self.weights[f"{node.id}.bias"])

        need_dx = self.flow.computes_input_grad(node.id, 0)
        x_key, h_key = node.inputs[0], lora_a_edge(node.id)

        def backward(dy):
            grads = {}
            if dora is not None:
                u_saved = tape.saved[dora_u_edge(node.id)]
                d_branch = k.multiply(BWD_INPUT, node.id, dy, dora['g'].reshape(1, -1, 1, 1))
                dg = (dy * u_saved).sum(axis=(0, 2, 3))
                k.tick(BWD_WEIGHT, node.id, 2 * dy.size)
            else:
                d_branch = dy
            dt = k.scale(BWD_INPUT, node.id, d_branch, s)
            x_saved, h_saved = tape.saved[x_key], tape.saved[h_key]
            d_b, dh = self._adapter_b_grads(node, h_saved, dt, b_w)
            d_a, dx_a = self._adapter_a_grads(node, x_saved, dh, a_w, need_dx)
            dx = None
            if need_dx:
                dx_base = self._input_grad(node, d_branch, w0, x_saved.shape, dense_cost=False)
                dx = k.add(BWD_INPUT, node.id, dx_a, dx_base)
            if dora is not None:
                d_m, d_a_w, d_b_w = self._dora_weight_grads(node, adapter, dora, dg, w0, a_w)
                grads[adapter.m_id] = d_m
                d_a = k.add(BWD_WEIGHT, node.id, d_a, d_a_w.reshape(d_a.shape))
                d_b = k.add(BWD_WEIGHT, node.id, d_b, d_b_w.reshape(d_b.shape))
            grads[adapter.a_id] = d_a.reshape(adapter.a_shape)
            grads[adapter.b_id] = d_b.reshape(adapter.b_shape)
            return [dx], grads

        return y, backward

    def _dora_gain(self, node: LayerNode, adapter, w0, a_w, b_w) -> Dict[str, np.ndarray]:
        """权重侧：V = W0 + s*B@A，g = m / (||V||_c + eps)

        V 只在本层的分组支撑上展开（与 W0 同形状）；分组卷积里 B@A 的块外元素
        对列范数的贡献用 r x r 的 Gram 矩阵补上：s^2 * (B G B^T - ||ΔW_支撑||^2)。
        """
        k = self.kernels
        r, s = adapter.rank, adapter.scaling
        groups = node.groups if node.kind == 'conv2d' else 1
        b_mat = b_w.reshape(-1, r)
        c_out = b_mat.shape[0]
        delta = k.grouped_product(FWD, node.id, b_mat, a_w, groups)
        v = k.add(FWD, node.id, w0, k.scale(FWD, node.id, delta, s))
        squares = k.multiply(FWD, node.id, v, v)
        k.tick(FWD, node.id, squares.size)
        sq = squares.reshape(c_out, -1).sum(axis=1)
        bg = None
        if groups > 1:
            a_mat = a_w.reshape(r, -1)
            gram = k.matmul(FWD, node.id, a_mat, a_mat.T)
            bg = k.matmul(FWD, node.id, b_mat, gram)
            full = k.multiply(FWD, node.id, bg, b_mat)
            k.tick(FWD, node.id, full.size)
            inside = k.multiply(FWD, node.id, delta, delta)
            k.tick(FWD, node.id, inside.size)
            outside = full.sum(axis=1) - inside.reshape(c_out, -1).sum(axis=1)
            sq = sq + (s * s) * outside
            k.tick(FWD, node.id, 3 * c_out)
        norm = np.sqrt(sq)
        den = norm + DORA_EPS
        g = self.weights[adapter.m_id] / den
        k.tick(FWD, node.id, 3 * norm.size)
        return {'v': v, 'norm': norm, 'den': den, 'g': g, 'b_mat': b_mat, 'bg': bg, 'groups': groups}

    def _dora_weight_grads(self, node: LayerNode, adapter, dora, dg, w0, a_w):
        k = self.kernels
        r, s = adapter.rank, adapter.scaling
        den, norm, g, v = dora['den'], dora['norm'], dora['g'], dora['v']
        b_mat, groups = dora['b_mat'], dora['groups']
        d_m = dg / den
        d_den = -dg * (g / den)
        coef = d_den / norm
        k.tick(BWD_WEIGHT, node.id, 5 * den.size)
        column = coef.reshape((-1,) + (1,) * (v.ndim - 1))
        # 有块外项时，平方范数对支撑上 ΔW 的导数是 2s*W0
        d_v = k.multiply(BWD_WEIGHT, node.id, v if groups == 1 else w0, column)
        d_delta = k.scale(BWD_WEIGHT, node.id, d_v, s)
        d_b, d_a = k.grouped_product_grads(BWD_WEIGHT, node.id, d_delta, b_mat, a_w, groups)
        if groups > 1:
            weighted = k.multiply(BWD_WEIGHT, node.id, b_mat, coef.reshape(-1, 1))
            inner = k.matmul(BWD_WEIGHT, node.id, b_mat.T, weighted)
            extra_a = k.scale(BWD_WEIGHT, node.id, k.matmul(BWD_WEIGHT, node.id, inner, a_w.reshape(r, -1)), s * s)
            d_a = k.add(BWD_WEIGHT, node.id, d_a, extra_a.reshape(d_a.shape))
            extra_b = k.scale(BWD_WEIGHT, node.id, k.multiply(BWD_WEIGHT, node.id, dora['bg'], coef.reshape(-1, 1)),
                              s * s)
            d_b = k.add(BWD_WEIGHT, node.id, d_b, extra_b)
        return d_m, d_a, d_b

    def _run_batchnorm(self, node: LayerNode, x: np.ndarray, tape: Tape, participating: bool):
        k = self.kernels
        gamma, beta = self.weights[f"{node.id}.weight"], self.weights[f"{node.id}.bias"]
        mean, var = self.buffers[f"{node.id}.running_mean"], self.buffers[f"{node.id}.running_var"]
        if self.train:
            y = k.batchnorm_train(node.id, x, gamma, beta, mean, var)
        else:
            y = k.batchnorm_eval(node.id, x, gamma, beta, mean, var)
        if not participating:
            return y, None
        tape.save(node.inputs[0], x)
        need_dx = self.flow.computes_input_grad(node.id, 0)
        w_id, b_id = f"{node.id}.weight", f"{node.id}.bias"
        need_dw, need_db = self.tuned.is_trainable(w_id), self.tuned.is_trainable(b_id)

        def backward(dy):
            dx, dw, db = k.batchnorm_grad(node.id, tape.saved[node.inputs[0]], gamma, dy,
                                          need_dx, need_dw, need_db)
            grads = {}
            if dw is not None:
                grads[w_id] = dw
            if db is not None:
                grads[b_id] = db
            return [dx], grads

        return y, backward

    def _run_simple(self, node: LayerNode, xs: List[np.ndarray], tape: Tape, participating: bool):
        """无参数节点"""
        k = self.kernels
        x = xs[0]
        need = [self.flow.computes_input_grad(node.id, slot) for slot in range(len(node.inputs))]

        if node.kind == 'activation':
            y = k.activation(node.id, node.fn, x)
            if participating and need[0]:
                tape.save(node.inputs[0], x)
            backward = lambda dy: ([k.activation_grad(node.id, node.fn, tape.saved[node.inputs[0]], dy)], {})
        elif node.kind == 'maxpool':
            y = k.maxpool(node.id, x, node.kernel, node.stride, node.padding)
            if participating and need[0]:
                tape.save(node.inputs[0], x)
            backward = lambda dy: ([k.maxpool_grad(node.id, tape.saved[node.inputs[0]], dy, node.kernel,
                                                   node.stride, node.padding)], {})
        elif node.kind == 'avgpool':
            y = k.avgpool(node.id, x, node.kernel, node.stride, node.padding)
            shape = x.shape
            backward = lambda dy: ([k.avgpool_grad(node.id, dy, shape, node.kernel, node.stride, node.padding)], {})
        elif node.kind == 'residual_add':
            y = k.add(FWD, node.id, x, xs[1])
            backward = lambda dy: ([dy, dy], {})
        elif node.kind == 'scale_mul':
            y = k.scale_mul(node.id, x, xs[1])
            if participating and need[1]:
                tape.save(node.inputs[0], x)
            if participating and need[0]:
                tape.save(node.inputs[1], xs[1])

            def backward(dy):
                return list(k.scale_mul_grad(node.id, tape.saved.get(node.inputs[0]), tape.saved.get(node.inputs[1]),
                                             dy, need[0], need[1])), {}
        elif node.kind == 'flatten':
            y = x.reshape(x.shape[0], -1, 1, 1)
            shape = x.shape
            backward = lambda dy: ([dy.reshape(shape)], {})
        else:
            raise EngineError(f"引擎不支持的层类型: {node.kind}", {'node': node.id})

        if not participating:
            return y, None

        def gated(dy):
            grads, params = backward(dy)
            return [g if flag else None for g, flag in zip(grads, need)], params

        return y, gated

    def run_node(self, node: LayerNode, values: Mapping[str, np.ndarray], tape: Tape):
        xs = [values[edge] for edge in node.inputs]
        participating = node.id in self.flow.participating
        if node.id in self.tuned.adapters:
            return self._run_adapter(node, xs[0], tape)
        if node.kind in ('conv2d', 'linear'):
            return self._run_dense(node, xs[0], tape, participating)
        if node.kind == 'batchnorm2d':
            return self._run_batchnorm(node, xs[0], tape, participating)
        return self._run_simple(node, xs, tape, participating)


def forward(executable: Executable, x: np.ndarray, labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Tape]:
    """执行一次前向，返回输出和 Tape

    Args:
        executable (Executable): 可执行模型
        x (np.ndarray): 输入 (N, C, H, W)
        labels (np.ndarray): 类别标签；给出时计算交叉熵损失及其梯度

    Returns:
        (np.ndarray, Tape): 输出与执行记录
    """
    graph = executable.graph
    expected = graph.input_shape
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (expected.c, expected.h, expected.w):
        raise ShapeError(f"输入形状 {x.shape} 与图输入 {expected} 不符", node_id=INPUT_EDGE)

    ledger = executable.ledger
    ledger.free_group(MemoryGroup.ACT)
    tape = Tape(ledger=ledger, flow=executable.flow)
    tape.save(INPUT_EDGE, x)

    values: Dict[str, np.ndarray] = {INPUT_EDGE: x}
    for node_id in graph.topological_order():
        node = graph.node(node_id)
        y, backward_fn = executable.run_node(node, values, tape)
        values[node_id] = y
        if backward_fn is not None:
            tape.closures.append((node, backward_fn))

    tape.output = values[graph.output_id]
    if labels is not None:
        tape.loss, tape.loss_grad = softmax_cross_entropy(tape.output, np.asarray(labels))
    return tape.output, tape


def backward(executable: Executable, tape: Optional[Tape], grad_output: Optional[np.ndarray] = None
             ) -> Dict[str, np.ndarray]:
    """沿 Tape 反向，返回所有可训练参数的梯度（无梯度流经的参数填零）"""
    if tape is None or tape.output is None:
        raise EngineError("反向之前必须先执行前向")
    if tape.consumed:
        raise EngineError("同一个 Tape 只能反向一次")
    if grad_output is None:
        grad_output = tape.loss_grad if tape.loss_grad is not None else np.ones_like(tape.output)

    graph = executable.graph
    kernels = executable.kernels
    edge_grads: Dict[str, np.ndarray] = {}
    if graph.output_id in executable.flow.participating:
        edge_grads[graph.output_id] = np.asarray(grad_output, dtype=np.float64)

    param_grads: Dict[str, np.ndarray] = {}
    for node, fn in reversed(tape.closures):
        dy = edge_grads.pop(node.id, None)
        if dy is None:
            raise EngineError(f"节点 {node.id} 没有收到输出梯度", {'node': node.id})
        input_grads, grads = fn(dy)
        for edge, grad in zip(node.inputs, input_grads):
            if grad is not None:
                edge_grads[edge] = kernels.accumulate(edge, edge_grads.get(edge), grad)
        param_grads.update(grads)

    for spec in executable.tuned.trainable_parameters():
        if spec.param_id not in param_grads:
            param_grads[spec.param_id] = np.zeros(spec.shape)
        executable.ledger.allocate(MemoryGroup.GRAD, spec.param_id, spec.numel)

    tape.grads = param_grads
    tape.consumed = True
    return param_grads
