#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
标准架构构建器

ResNet-18、MobileNetV2、MobileNetV3-Large 按公开定义（宽度系数 1.0）逐层展开，
toy_cnn 从显式层列表构建。返回的图已完成形状推断。
"""

import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence

from ..utils.error_handler import GraphError
from .ir import (ACTIVATIONS, INPUT_EDGE, LayerNode, ModelGraph, TensorShape,
                 infer_shapes, output_shape_for)

logger = logging.getLogger(__name__)

ARCHITECTURES = ('resnet18', 'mobilenet_v2', 'mobilenet_v3_large', 'toy_cnn')

# (expand t, out c, repeats n, stride s)
MOBILENET_V2_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

# (in, kernel, expanded, out, se, activation, stride)
MOBILENET_V3_LARGE_SETTINGS = [
    (16, 3, 16, 16, False, 'relu', 1),
    (16, 3, 64, 24, False, 'relu', 2),
    (24, 3, 72, 24, False, 'relu', 1),
    (24, 5, 72, 40, True, 'relu', 2),
    (40, 5, 120, 40, True, 'relu', 1),
    (40, 5, 120, 40, True, 'relu', 1),
    (40, 3, 240, 80, False, 'hardswish', 2),
    (80, 3, 200, 80, False, 'hardswish', 1),
    (80, 3, 184, 80, False, 'hardswish', 1),
    (80, 3, 184, 80, False, 'hardswish', 1),
    (80, 3, 480, 112, True, 'hardswish', 1),
    (112, 3, 672, 112, True, 'hardswish', 1),
    (112, 5, 672, 160, True, 'hardswish', 2),
    (160, 5, 960, 160, True, 'hardswish', 1),
    (160, 5, 960, 160, True, 'hardswish', 1),
]


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """通道数取整到 divisor 的倍数，且不低于原值的 90%"""
    if min_value is None:
        min_value = divisor
    new_value = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if new_value < 0.9 * value:
        new_value += divisor
    return new_value


class _GraphBuilder:
    """顺序搭图的小工具：每加一层立即算出输出形状"""

    def __init__(self, input_shape: TensorShape):
        self.nodes: List[LayerNode] = []
        self.shapes: Dict[str, TensorShape] = {INPUT_EDGE: input_shape}
        self.current = INPUT_EDGE

    def shape(self, edge: Optional[str] = None) -> TensorShape:
        return self.shapes[edge or self.current]

    def add(self, node_id: str, kind: str, inputs: Optional[Sequence[str]] = None, **attrs) -> str:
        inputs = tuple(inputs) if inputs is not None else (self.current,)
        node = LayerNode(id=node_id, kind=kind, inputs=inputs, **attrs)
        self.shapes[node_id] = output_shape_for(node, [self.shapes[e] for e in inputs])
        self.nodes.append(node)
        self.current = node_id
        return node_id

    def conv(self, node_id, out_channels, kernel, stride=1, groups=1, bias=False, padding=None, source=None):
        c_in = self.shape(source).c
        if padding is None:
            padding = (kernel - 1) // 2
        return self.add(node_id, 'conv2d', inputs=(source or self.current,), in_channels=c_in,
                        out_channels=out_channels, kernel=kernel, stride=stride, padding=padding,
                        groups=groups, bias=bias)

    def bn(self, node_id):
        c = self.shape().c
        return self.add(node_id, 'batchnorm2d', in_channels=c, out_channels=c)

    def act(self, node_id, fn):
        return self.add(node_id, 'activation', fn=fn)

    def linear(self, node_id, out_features, bias=True):
        x = self.shape()
        return self.add(node_id, 'linear', in_features=x.c * x.h * x.w, out_features=out_features, bias=bias)

    def conv_bn_act(self, prefix, out_channels, kernel, stride=1, groups=1, fn='relu'):
        self.conv(f"{prefix}.conv", out_channels, kernel, stride=stride, groups=groups)
        self.bn(f"{prefix}.bn")
        if fn:
            self.act(f"{prefix}.act", fn)
        return self.current

    def finish(self, name: str, head_ids: Sequence[str]) -> ModelGraph:
        graph = ModelGraph(nodes=tuple(self.nodes), input_shape=self.shapes[INPUT_EDGE],
                           head_ids=tuple(head_ids), name=name)
        return infer_shapes(graph)


def _build_resnet18(num_classes: int, input_shape: TensorShape) -> ModelGraph:
    b = _GraphBuilder(input_shape)
    b.conv('conv1', 64, 7, stride=2, padding=3)
    b.bn('bn1')
    b.act('relu', 'relu')
    b.add('maxpool', 'maxpool', kernel=3, stride=2, padding=1)

    in_planes = 64
    for stage, planes in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            prefix = f"layer{stage}.{block}"
            identity = b.current
            b.conv(f"{prefix}.conv1", planes, 3, stride=stride)
            b.bn(f"{prefix}.bn1")
            b.act(f"{prefix}.relu1", 'relu')
            b.conv(f"{prefix}.conv2", planes, 3)
            main = b.bn(f"{prefix}.bn2")
            if stride != 1 or in_planes != planes:
                b.conv(f"{prefix}.downsample.0", planes, 1, stride=stride, padding=0, source=identity)
                identity = b.bn(f"{prefix}.downsample.1")
            b.add(f"{prefix}.add", 'residual_add', inputs=(main, identity))
            b.act(f"{prefix}.relu2", 'relu')
            in_planes = planes

    b.add('avgpool', 'avgpool', kernel=0)
    b.linear('fc', num_classes)
    return b.finish('resnet18', ['fc'])


def _build_mobilenet_v2(num_classes: int, input_shape: TensorShape) -> ModelGraph:
    b = _GraphBuilder(input_shape)
    b.conv_bn_act('features.0', 32, 3, stride=2, fn='relu6')

    in_c = 32
    index = 1
    for t, c, n, s in MOBILENET_V2_SETTINGS:
        for i in range(n):
            stride = s if i == 0 else 1
            prefix = f"features.{index}"
            identity = b.current
            hidden = in_c * t
            if t != 1:
                b.conv_bn_act(f"{prefix}.expand", hidden, 1, fn='relu6')
            b.conv_bn_act(f"{prefix}.dw", hidden, 3, stride=stride, groups=hidden, fn='relu6')
            b.conv_bn_act(f"{prefix}.project", c, 1, fn='')
            if stride == 1 and in_c == c:
                b.add(f"{prefix}.add", 'residual_add', inputs=(b.current, identity))
            in_c = c
            index += 1

    b.conv_bn_act(f"features.{index}", 1280, 1, fn='relu6')
    b.add('avgpool', 'avgpool', kernel=0)
    b.linear('classifier', num_classes)
    return b.finish('mobilenet_v2', ['classifier'])


def _build_mobilenet_v3_large(num_classes: int, input_shape: TensorShape) -> ModelGraph:
    b = _GraphBuilder(input_shape)
    b.conv_bn_act('features.0', 16, 3, stride=2, fn='hardswish')

    for index, (c_in, k, exp, c_out, se, fn, stride) in enumerate(MOBILENET_V3_LARGE_SETTINGS, start=1):
        prefix = f"features.{index}"
        identity = b.current
        if exp != c_in:
            b.conv_bn_act(f"{prefix}.expand", exp, 1, fn=fn)
        features = b.conv_bn_act(f"{prefix}.dw", exp, k, stride=stride, groups=exp, fn=fn)
        if se:
            squeeze = make_divisible(exp // 4, 8)
            b.add(f"{prefix}.se.pool", 'avgpool', kernel=0)
            b.conv(f"{prefix}.se.fc1", squeeze, 1, bias=True)
            b.act(f"{prefix}.se.relu", 'relu')
            b.conv(f"{prefix}.se.fc2", exp, 1, bias=True)
            gate = b.act(f"{prefix}.se.gate", 'hardsigmoid')
            b.add(f"{prefix}.se.scale", 'scale_mul', inputs=(features, gate))
        b.conv_bn_act(f"{prefix}.project", c_out, 1, fn='')
        if stride == 1 and c_in == c_out:
            b.add(f"{prefix}.add", 'residual_add', inputs=(b.current, identity))

    last = len(MOBILENET_V3_LARGE_SETTINGS) + 1
    b.conv_bn_act(f"features.{last}", 960, 1, fn='hardswish')
    b.add('avgpool', 'avgpool', kernel=0)
    b.linear('classifier.0', 1280)
    b.act('classifier.1', 'hardswish')
    b.linear('classifier.3', num_classes)
    return b.finish('mobilenet_v3_large', ['classifier.0', 'classifier.1', 'classifier.3'])


def _default_head(nodes: Sequence[LayerNode]) -> List[str]:
    """尾部连续的 linear/activation 链，以 linear 开头"""
    chain: List[str] = []
    for node in reversed(nodes):
        if node.kind not in ('linear', 'activation'):
            break
        chain.append(node.id)
    chain.reverse()
    while chain and next(n for n in nodes if n.id == chain[0]).kind != 'linear':
        chain.pop(0)
    return chain


def _build_toy_cnn(layers: Sequence[Mapping[str, Any]], num_classes: int, input_shape: TensorShape,
                   head_ids: Optional[Sequence[str]] = None) -> ModelGraph:
    """按层列表构建玩具网络

    每层是一个映射，必须有 kind；conv2d 可给 out_channels/kernel/stride/padding/groups/bias，
    depthwise: true 表示 groups = out = C_in；linear 缺省 out_features 时取 num_classes；
    residual_add/scale_mul 用 from 指向更早的层序号（-1 表示图输入）。
    """
    if not layers:
        raise GraphError("toy_cnn 需要非空的层列表")

    b = _GraphBuilder(input_shape)
    ids: List[str] = []
    for i, raw in enumerate(layers):
        spec = dict(raw)
        kind = spec.pop('kind', None)
        node_id = str(spec.pop('id', f"{i}.{kind}"))
        try:
            if kind == 'conv2d':
                c_in = b.shape().c
                declared = int(spec.pop('in_channels', c_in))
                if declared != c_in:
                    raise GraphError(f"toy_cnn 第 {i} 层: in_channels={declared} 与上一层输出通道 {c_in} 不符",
                                     {'layer': i})
                depthwise = bool(spec.pop('depthwise', False))
                out = int(spec.pop('out_channels', c_in))
                groups = int(spec.pop('groups', c_in if depthwise else 1))
                padding = spec.pop('padding', None)
                b.conv(node_id, out, int(spec.pop('kernel', 3)), stride=int(spec.pop('stride', 1)),
                       groups=groups, bias=bool(spec.pop('bias', False)),
                       padding=None if padding is None else int(padding))
            elif kind == 'batchnorm2d':
                b.bn(node_id)
            elif kind == 'activation':
                fn = spec.pop('fn', 'relu')
                if fn not in ACTIVATIONS:
                    raise GraphError(f"toy_cnn 第 {i} 层: 未知激活函数 {fn!r}")
                b.act(node_id, fn)
            elif kind == 'linear':
                b.linear(node_id, int(spec.pop('out_features', num_classes)), bias=bool(spec.pop('bias', True)))
            elif kind in ('avgpool', 'maxpool'):
                kernel = int(spec.pop('kernel', 0 if kind == 'avgpool' else 2))
                b.add(node_id, kind, kernel=kernel, stride=int(spec.pop('stride', kernel or 1)),
                      padding=int(spec.pop('padding', 0)))
            elif kind in ('residual_add', 'scale_mul'):
                source = int(spec.pop('from'))
                other = INPUT_EDGE if source < 0 else ids[source]
                b.add(node_id, kind, inputs=(b.current, other) if kind == 'residual_add' else (other, b.current))
            elif kind == 'flatten':
                b.add(node_id, 'flatten')
            else:
                raise GraphError(f"toy_cnn 第 {i} 层: 不支持的层类型 {kind!r}")
        except (KeyError, IndexError, ValueError, TypeError) as e:
            raise GraphError(f"toy_cnn 第 {i} 层定义错误: {e}", {'layer': i}, e)
        if spec:
            raise GraphError(f"toy_cnn 第 {i} 层含未知字段: {sorted(spec)}", {'layer': i})
        ids.append(node_id)

    heads = list(head_ids) if head_ids is not None else _default_head(b.nodes)
    return b.finish('toy_cnn', heads)


def build_model(arch_id: str, num_classes: int = 1000, input_shape: Optional[TensorShape] = None,
                layers: Optional[Sequence[Mapping[str, Any]]] = None,
                head_ids: Optional[Sequence[str]] = None) -> ModelGraph:
    """构建指定架构的层图

    Args:
        arch_id (str): resnet18 / mobilenet_v2 / mobilenet_v3_large / toy_cnn
        num_classes (int): 分类数，>= 1
        input_shape (TensorShape): 输入形状，默认 1x3x224x224（toy_cnn 默认 1x3x16x16）
        layers: toy_cnn 的层列表
        head_ids: toy_cnn 显式指定分类头

    Returns:
        ModelGraph: 已推断形状的图
    """
    if isinstance(num_classes, bool) or not isinstance(num_classes, int) or num_classes < 1:
        raise GraphError(f"num_classes 必须为正整数: {num_classes!r}")

    if arch_id == 'toy_cnn':
        graph = _build_toy_cnn(layers or [], num_classes, input_shape or TensorShape(1, 3, 16, 16), head_ids)
    elif arch_id == 'resnet18':
        graph = _build_resnet18(num_classes, input_shape or TensorShape(1, 3, 224, 224))
    elif arch_id == 'mobilenet_v2':
        graph = _build_mobilenet_v2(num_classes, input_shape or TensorShape(1, 3, 224, 224))
    elif arch_id == 'mobilenet_v3_large':
        graph = _build_mobilenet_v3_large(num_classes, input_shape or TensorShape(1, 3, 224, 224))
    else:
        raise GraphError(f"未知架构: {arch_id}，可选: {', '.join(ARCHITECTURES)}", {'arch': arch_id})

    logger.debug(f"构建模型 {arch_id}: {len(graph.nodes)} 个节点, 分类头 {list(graph.head_ids)}")
    return graph
