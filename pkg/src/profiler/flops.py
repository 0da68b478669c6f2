#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分阶段 FLOPs 解析模型

一个训练步拆成 fwd / bwd_input / bwd_weight / opt 四个阶段，按层给出精确整数。
约定: 1 次乘加 = 2 FLOPs，批大小计入，损失和 BN 统计量归约不计。
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, Mapping, Optional

from ..graph.ir import LayerNode, TensorShape, infer_shapes
from ..peft.optimizer_plan import OptimizerPlan, matricize
from ..utils.error_handler import ShapeError, ValidationError
from .grad_flow import GradFlow, analyze

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    FWD = 'fwd'
    BWD_INPUT = 'bwd_input'
    BWD_WEIGHT = 'bwd_weight'
    OPT = 'opt'


PHASES = tuple(Phase)


class CountingConvention(str, Enum):
    """输入梯度计数约定

    paper: 同时求权重梯度的分组卷积，其输入梯度按未分组计价；
    exact: 始终按分组计价。
    """
    PAPER = 'paper'
    EXACT = 'exact'


# 每元素开销
BN_FWD = 4
BN_BWD_INPUT = 7
BN_BWD_WEIGHT = 2
BN_BWD_BIAS = 1
# 优化器每元素开销
C_SGD = 4
C_ADAM = 14
ADAM_DIRECTION = 12
WEIGHT_UPDATE = 2
# Jacobi SVD: 约 10 轮扫描，每轮每个旋转对元素 12 次运算
K_SVD = 120


def _conv_macs(node: LayerNode, dense: bool = False) -> int:
    out = node.output_shape
    c_in = node.in_channels if dense else node.in_channels // node.groups
    return out.numel * c_in * node.kernel * node.kernel


def _linear_macs(node: LayerNode) -> int:
    return node.output_shape.n * node.in_features * node.out_features


def _window_ops(node: LayerNode) -> int:
    """池化每个输出元素覆盖的窗口大小 x 输出元素数"""
    x = node.input_shape
    out = node.output_shape
    if node.kind == 'avgpool' and node.kernel == 0:
        return x.numel
    return out.numel * node.kernel * node.kernel


def layer_flops(layer: LayerNode, phase, convention='paper', weight_trainable: bool = True) -> int:
    """单层在某一阶段的 FLOPs（假设该层完整参与反向）

    Args:
        layer (LayerNode): 已推断形状的层
        phase (Phase|str): 阶段
        convention (CountingConvention|str): 输入梯度计数约定
        weight_trainable (bool): 权重梯度是否一并计算（影响 paper 约定下的分组卷积输入梯度）

    Returns:
        int: FLOPs
    """
    if not layer.shaped:
        raise ShapeError(f"层 {layer.id} 尚未推断形状", node_id=layer.id)
    phase = Phase(phase)
    convention = CountingConvention(convention)
    kind = layer.kind
    out = layer.output_shape

    if phase == Phase.OPT:
        return 0

    if kind == 'conv2d':
        bias = out.numel if layer.bias else 0
        if phase == Phase.FWD:
            return 2 * _conv_macs(layer) + bias
        if phase == Phase.BWD_WEIGHT:
            return 2 * _conv_macs(layer) + bias
        dense = convention == CountingConvention.PAPER and weight_trainable
        return 2 * _conv_macs(layer, dense=dense)

    if kind == 'linear':
        bias = out.numel if layer.bias else 0
        if phase == Phase.BWD_INPUT:
            return 2 * _linear_macs(layer)
        return 2 * _linear_macs(layer) + bias

    if kind == 'batchnorm2d':
        per_elem = {Phase.FWD: BN_FWD, Phase.BWD_INPUT: BN_BWD_INPUT,
                    Phase.BWD_WEIGHT: BN_BWD_WEIGHT + BN_BWD_BIAS}[phase]
        return per_elem * out.numel

    if kind == 'activation':
        return 0 if phase == Phase.BWD_WEIGHT else out.numel

    if kind == 'avgpool':
        return 0 if phase == Phase.BWD_WEIGHT else _window_ops(layer)

    if kind == 'maxpool':
        if phase == Phase.FWD:
            return _window_ops(layer)
        return out.numel if phase == Phase.BWD_INPUT else 0

    if kind == 'residual_add':
        return out.numel if phase == Phase.FWD else 0

    if kind == 'scale_mul':
        if phase == Phase.FWD:
            return out.numel
        return 3 * out.numel if phase == Phase.BWD_INPUT else 0

    return 0


@dataclass(frozen=True)
class FlopsReport:
    """一个训练步的分阶段 FLOPs

    per_layer: 节点 id -> {阶段名: FLOPs}；优化器开销记在参数所属节点上。
    """
    method: str
    input_shape: TensorShape
    convention: str
    per_layer: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    @property
    def totals(self) -> Dict[str, int]:
        totals = {phase.value: 0 for phase in PHASES}
        for counts in self.per_layer.values():
            for phase, value in counts.items():
                totals[phase] += value
        return totals

    def phase_total(self, phase) -> int:
        return self.totals[Phase(phase).value]

    @property
    def forward(self) -> int:
        return self.totals[Phase.FWD.value]

    @property
    def backward(self) -> int:
        totals = self.totals
        return totals[Phase.BWD_INPUT.value] + totals[Phase.BWD_WEIGHT.value]

    @property
    def total(self) -> int:
        return sum(self.totals.values())

    def to_dict(self) -> Dict[str, Any]:
        ratio = flops_ratio(self) if self.forward else None
        return {
            'method': self.method,
            'input_shape': list(self.input_shape.as_tuple()),
            'convention': self.convention,
            'phases': self.totals,
            'total': self.total,
            'ratio': float(ratio) if ratio is not None else None,
            'ratio_exact': f"{ratio.numerator}/{ratio.denominator}" if ratio is not None else None,
            'per_layer': {name: dict(counts) for name, counts in self.per_layer.items()},
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'FlopsReport':
        return cls(
            method=doc['method'],
            input_shape=TensorShape(*doc['input_shape']),
            convention=doc['convention'],
            per_layer={name: {phase: int(v) for phase, v in counts.items()}
                       for name, counts in doc['per_layer'].items()},
        )


def with_input(tuned, input: Optional[TensorShape]):
    """输入形状与图不同或图未推断形状时，重新推断"""
    graph = tuned.base
    if input is None and graph.shaped:
        return tuned
    if input is not None and input == graph.input_shape and graph.shaped:
        return tuned
    return replace(tuned, base=infer_shapes(graph, input))


def base_weight_numel(node: LayerNode) -> int:
    """基础权重的实际（分组）元素个数"""
    if node.kind == 'conv2d':
        return node.out_channels * (node.in_channels // node.groups) * node.kernel * node.kernel
    return node.out_features * node.in_features


def _adapter_costs(node: LayerNode, adapter, need_dx: bool, costs: Dict[Phase, int]):
    """LoRA/DoRA 适配器在一层上的额外开销（基础权重冻结）"""
    out = node.output_shape
    r = adapter.rank
    if node.kind == 'conv2d':
        positions = out.n * out.h * out.w
        d = node.in_channels * node.kernel * node.kernel
        c_out = node.out_channels
    else:
        positions = out.n
        d = node.in_features
        c_out = node.out_features
    a_macs = positions * r * d
    b_macs = positions * c_out * r

    # A、B 两次卷积 + 缩放 + 与主路相加
    costs[Phase.FWD] += 2 * a_macs + 2 * b_macs + 2 * out.numel
    costs[Phase.BWD_INPUT] += out.numel + 2 * b_macs
    costs[Phase.BWD_WEIGHT] += 2 * b_macs + 2 * a_macs
    if need_dx:
        base_macs = _conv_macs(node) if node.kind == 'conv2d' else _linear_macs(node)
        costs[Phase.BWD_INPUT] += 2 * a_macs + 2 * base_macs + node.input_shape.numel

    if adapter.is_dora:
        # 权重侧只在分组支撑上展开: ΔW_支撑, V=W0+sΔW, 行范数, g=m/(‖V‖+eps)
        w = base_weight_numel(node)
        costs[Phase.FWD] += 2 * r * w + 4 * w + 3 * c_out
        costs[Phase.FWD] += out.numel
        costs[Phase.BWD_WEIGHT] += 2 * out.numel
        costs[Phase.BWD_INPUT] += out.numel
        costs[Phase.BWD_WEIGHT] += 5 * c_out + 2 * w + 4 * r * w
        costs[Phase.BWD_WEIGHT] += r * d + c_out * r
        if node.kind == 'conv2d' and node.groups > 1:
            # 块外元素的范数贡献: Gram 矩阵 A A^T 及其反向
            costs[Phase.FWD] += 2 * r * r * d + 2 * c_out * r * r + 2 * c_out * r + 2 * w + 3 * c_out
            costs[Phase.BWD_WEIGHT] += 2 * r * r * c_out + 2 * r * r * d + 2 * r * d + 4 * c_out * r


def node_costs(tuned, node: LayerNode, flow: GradFlow, convention) -> Dict[Phase, int]:
    """一层在 TunedModel 中的实际开销（只计真正执行的反向核）"""
    convention = CountingConvention(convention)
    costs = {phase: 0 for phase in PHASES}
    adapter = tuned.adapters.get(node.id)
    participating = node.id in flow.participating
    out = node.output_shape

    costs[Phase.FWD] = layer_flops(node, Phase.FWD, convention)
    if not participating:
        if adapter is not None:
            _adapter_costs(node, adapter, False, costs)
            costs[Phase.BWD_INPUT] = costs[Phase.BWD_WEIGHT] = 0
        return costs

    need_dx = flow.computes_input_grad(node.id, 0)
    kind = node.kind

    if adapter is not None:
        _adapter_costs(node, adapter, need_dx, costs)
    elif kind in ('conv2d', 'linear'):
        w_trainable = tuned.is_trainable(f"{node.id}.weight")
        if w_trainable:
            macs = _conv_macs(node) if kind == 'conv2d' else _linear_macs(node)
            costs[Phase.BWD_WEIGHT] += 2 * macs
        if node.bias and tuned.is_trainable(f"{node.id}.bias"):
            costs[Phase.BWD_WEIGHT] += out.numel
        if need_dx:
            costs[Phase.BWD_INPUT] += layer_flops(node, Phase.BWD_INPUT, convention, weight_trainable=w_trainable)
    elif kind == 'batchnorm2d':
        if tuned.is_trainable(f"{node.id}.weight"):
            costs[Phase.BWD_WEIGHT] += BN_BWD_WEIGHT * out.numel
        if tuned.is_trainable(f"{node.id}.bias"):
            costs[Phase.BWD_WEIGHT] += BN_BWD_BIAS * out.numel
        if need_dx:
            costs[Phase.BWD_INPUT] += BN_BWD_INPUT * out.numel
    elif kind == 'scale_mul':
        if need_dx:
            costs[Phase.BWD_INPUT] += out.numel
        if flow.computes_input_grad(node.id, 1):
            costs[Phase.BWD_INPUT] += 2 * out.numel
    elif need_dx:
        costs[Phase.BWD_INPUT] += layer_flops(node, Phase.BWD_INPUT, convention)

    # 多个消费者回传的梯度在本层输出处累加
    extra = flow.contributions.get(node.id, 0) - 1
    if extra > 0:
        costs[Phase.BWD_INPUT] += extra * out.numel
    return costs


def svd_flops(rows: int, cols: int) -> int:
    return K_SVD * rows * cols * min(rows, cols)


def param_step_flops(plan: OptimizerPlan, param_id: str, numel: int, step: Optional[int] = None,
                     include_svd: bool = True) -> int:
    """一个参数一次更新的 FLOPs

    step 为 None 时 SVD 按周期 T 向下取整摊销；给定 step 时只在刷新步计全额。
    include_svd=False 时不计 SVD，与参考引擎的阶段计数口径一致。
    """
    if plan.rule == 'sgd_momentum':
        return C_SGD * numel
    if plan.rule == 'adam' or not plan.is_projected(param_id):
        return C_ADAM * numel

    proj = plan.projected[param_id]
    m, n, r = proj.rows, proj.cols, proj.rank
    flops = 2 * m * r * n                       # 投影到秩空间
    flops += ADAM_DIRECTION * proj.rank_space_numel
    flops += 2 * m * r * n                      # 投影回原空间
    flops += WEIGHT_UPDATE * m * n
    if not include_svd:
        return flops
    if step is None:
        flops += svd_flops(m, n) // plan.period
    elif step % plan.period == 0:
        flops += svd_flops(m, n)
    return flops


def optimizer_flops_by_param(plan: OptimizerPlan, tuned, step: Optional[int] = None,
                             include_svd: bool = True) -> Dict[str, int]:
    return {spec.param_id: param_step_flops(plan, spec.param_id, spec.numel, step, include_svd)
            for spec in tuned.trainable_parameters()}


def optimizer_flops(plan: OptimizerPlan, tuned) -> int:
    """优化器一步的 FLOPs（SVD 摊销）"""
    return sum(optimizer_flops_by_param(plan, tuned).values())


def profile_flops(tuned, plan: OptimizerPlan, input: Optional[TensorShape] = None,
                  convention='paper', include_svd: bool = True) -> FlopsReport:
    """按层、按阶段统计一个训练步的 FLOPs

    Args:
        tuned (TunedModel): 变换后的模型
        plan (OptimizerPlan): 优化器计划
        input (TensorShape): 输入形状，None 时使用图自带的
        convention: 输入梯度计数约定
        include_svd (bool): 是否计入摊销的 GaLore SVD

    Returns:
        FlopsReport: 报告
    """
    convention = CountingConvention(convention)
    tuned = with_input(tuned, input)
    flow = analyze(tuned)

    per_layer: Dict[str, Dict[str, int]] = {}
    for node in tuned.base.nodes:
        costs = node_costs(tuned, node, flow, convention)
        per_layer[node.id] = {phase.value: value for phase, value in costs.items()}

    owners = {spec.param_id: spec.node_id for spec in tuned.parameters()}
    for param_id, value in optimizer_flops_by_param(plan, tuned, include_svd=include_svd).items():
        per_layer[owners[param_id]][Phase.OPT.value] += value

    report = FlopsReport(method=tuned.method, input_shape=tuned.base.input_shape,
                         convention=convention.value, per_layer=per_layer)
    logger.debug(f"FLOPs 统计 {tuned.base.name}/{tuned.method}: {report.totals}")
    return report


def flops_ratio(report: FlopsReport) -> Fraction:
    """反向 / 前向 的精确有理数"""
    if report.forward <= 0:
        raise ValidationError("前向 FLOPs 为 0，无法计算反向/前向比")
    return Fraction(report.backward, report.forward)
