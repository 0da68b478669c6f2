#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
层图中间表示

ModelGraph 由按拓扑顺序排列的 LayerNode 组成。边以生产者节点 id 标识，
图输入边固定为 "input"。所有类型构造后不可变，可在线程间共享。
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from numbers import Integral
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..utils.error_handler import GraphError, ShapeError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INPUT_EDGE = 'input'

KINDS = (
    'conv2d', 'batchnorm2d', 'linear', 'activation', 'avgpool',
    'maxpool', 'residual_add', 'scale_mul', 'flatten',
)
ACTIVATIONS = ('relu', 'relu6', 'hardswish', 'hardsigmoid')
BINARY_KINDS = ('residual_add', 'scale_mul')
PARAM_KINDS = ('conv2d', 'batchnorm2d', 'linear')


@dataclass(frozen=True)
class TensorShape:
    """NCHW 张量形状"""
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ('n', 'c', 'h', 'w'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, Integral) or value < 1:
                raise ShapeError(f"张量形状字段 {name} 必须为正整数: {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    @classmethod
    def parse(cls, text: str, n: int = 1, c: int = 3) -> 'TensorShape':
        """解析 "HxW" 或 "NxCxHxW" 形式的字符串"""
        parts = [p.strip() for p in str(text).lower().split('x')]
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise ShapeError(f"无法解析输入尺寸: {text!r}，应为 HxW 或 NxCxHxW")
        if len(values) == 2:
            return cls(n, c, values[0], values[1])
        if len(values) == 4:
            return cls(*values)
        raise ShapeError(f"无法解析输入尺寸: {text!r}，应为 HxW 或 NxCxHxW")

    def __str__(self):
        return f"{self.n}x{self.c}x{self.h}x{self.w}"


@dataclass(frozen=True)
class ParamSpec:
    """一个参数（或缓冲区）张量的元数据"""
    param_id: str
    node_id: str
    name: str
    shape: Tuple[int, ...]

    @property
    def numel(self) -> int:
        total = 1
        for dim in self.shape:
            total *= dim
        return total


@dataclass(frozen=True)
class LayerNode:
    """图中的一层

    卷积字段: in_channels/out_channels/kernel/stride/padding/groups/bias。
    batchnorm2d 用 in_channels = out_channels = C。
    linear 用 in_features/out_features，输入隐式展平为 c*h*w。
    avgpool 的 kernel = 0 表示全局池化。
    """
    id: str
    kind: str
    inputs: Tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    fn: str = ''
    in_features: int = 0
    out_features: int = 0
    input_shapes: Tuple[TensorShape, ...] = ()
    output_shape: Optional[TensorShape] = None

    @property
    def shaped(self) -> bool:
        return self.output_shape is not None

    @property
    def is_depthwise(self) -> bool:
        return self.kind == 'conv2d' and self.groups > 1 and self.groups == self.in_channels

    @property
    def input_shape(self) -> TensorShape:
        if not self.input_shapes:
            raise ShapeError(f"节点 {self.id} 尚未推断形状", node_id=self.id)
        return self.input_shapes[0]

    def param_specs(self) -> List[ParamSpec]:
        """可训练参数（不含 BN 运行统计量）"""
        specs: List[Tuple[str, Tuple[int, ...]]] = []
        if self.kind == 'conv2d':
            specs.append(('weight', (self.out_channels, self.in_channels // max(self.groups, 1),
                                     self.kernel, self.kernel)))
            if self.bias:
                specs.append(('bias', (self.out_channels,)))
        elif self.kind == 'batchnorm2d':
            specs.append(('weight', (self.out_channels,)))
            specs.append(('bias', (self.out_channels,)))
        elif self.kind == 'linear':
            specs.append(('weight', (self.out_features, self.in_features)))
            if self.bias:
                specs.append(('bias', (self.out_features,)))
        return [ParamSpec(f"{self.id}.{name}", self.id, name, shape) for name, shape in specs]

    def buffer_specs(self) -> List[ParamSpec]:
        if self.kind != 'batchnorm2d':
            return []
        return [ParamSpec(f"{self.id}.{name}", self.id, name, (self.out_channels,))
                for name in ('running_mean', 'running_var')]


def _window_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def output_shape_for(node: LayerNode, in_shapes: Sequence[TensorShape]) -> TensorShape:
    """按节点类型计算输出形状，不一致时抛出 ShapeError（带节点 id）"""
    x = in_shapes[0]
    kind = node.kind

    def fail(message):
        raise ShapeError(f"节点 {node.id} ({kind}): {message}", node_id=node.id)

    if kind == 'conv2d':
        if x.c != node.in_channels:
            fail(f"输入通道 {x.c} 与 in_channels={node.in_channels} 不符")
        ho = _window_out(x.h, node.kernel, node.stride, node.padding)
        wo = _window_out(x.w, node.kernel, node.stride, node.padding)
        if ho < 1 or wo < 1:
            fail(f"输入 {x.h}x{x.w} 对 kernel={node.kernel} stride={node.stride} padding={node.padding} 太小")
        return TensorShape(x.n, node.out_channels, ho, wo)

    if kind == 'batchnorm2d':
        if x.c != node.out_channels:
            fail(f"输入通道 {x.c} 与 BN 通道数 {node.out_channels} 不符")
        return x

    if kind == 'linear':
        flat = x.c * x.h * x.w
        if flat != node.in_features:
            fail(f"展平后的特征数 {flat} 与 in_features={node.in_features} 不符")
        return TensorShape(x.n, node.out_features, 1, 1)

    if kind == 'activation':
        return x

    if kind == 'avgpool' and node.kernel == 0:
        return TensorShape(x.n, x.c, 1, 1)

    if kind in ('avgpool', 'maxpool'):
        ho = _window_out(x.h, node.kernel, node.stride, node.padding)
        wo = _window_out(x.w, node.kernel, node.stride, node.padding)
        if ho < 1 or wo < 1:
            fail(f"输入 {x.h}x{x.w} 对池化窗口 {node.kernel} 太小")
        return TensorShape(x.n, x.c, ho, wo)

    if kind == 'residual_add':
        if in_shapes[0] != in_shapes[1]:
            fail(f"残差相加的操作数形状不同: {in_shapes[0]} vs {in_shapes[1]}")
        return x

    if kind == 'scale_mul':
        s = in_shapes[1]
        if (s.n, s.c, s.h, s.w) != (x.n, x.c, 1, 1):
            fail(f"通道缩放因子形状 {s} 与 {x} 不匹配，应为 {x.n}x{x.c}x1x1")
        return x

    if kind == 'flatten':
        return TensorShape(x.n, x.c * x.h * x.w, 1, 1)

    fail("未知的层类型")


@dataclass(frozen=True)
class ModelGraph:
    """带形状的层图"""
    nodes: Tuple[LayerNode, ...]
    input_shape: TensorShape = field(default_factory=lambda: TensorShape(1, 3, 224, 224))
    head_ids: Tuple[str, ...] = ()
    name: str = 'custom'

    @cached_property
    def _index(self) -> Dict[str, LayerNode]:
        return {node.id: node for node in self.nodes}

    def node(self, node_id: str) -> LayerNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"图中不存在节点: {node_id}")

    def __contains__(self, node_id) -> bool:
        return node_id in self._index

    @property
    def edges(self) -> Dict[str, Tuple[str, ...]]:
        """前驱表: 节点 id -> 输入边 id"""
        return {node.id: node.inputs for node in self.nodes}

    @cached_property
    def consumers(self) -> Dict[str, List[str]]:
        """边 id -> 消费该边的节点 id（按节点顺序）"""
        result: Dict[str, List[str]] = {INPUT_EDGE: []}
        for node in self.nodes:
            result.setdefault(node.id, [])
        for node in self.nodes:
            for edge in node.inputs:
                result.setdefault(edge, []).append(node.id)
        return result

    @property
    def output_id(self) -> str:
        outputs = [node.id for node in self.nodes if not self.consumers.get(node.id)]
        if len(outputs) != 1:
            raise GraphError(f"图必须恰好有一个输出节点，实际: {outputs}")
        return outputs[0]

    @property
    def shaped(self) -> bool:
        return all(node.shaped for node in self.nodes)

    def edge_shape(self, edge_id: str) -> TensorShape:
        if edge_id == INPUT_EDGE:
            return self.input_shape
        node = self.node(edge_id)
        if node.output_shape is None:
            raise ShapeError(f"节点 {edge_id} 尚未推断形状", node_id=edge_id)
        return node.output_shape

    def parameters(self) -> List[ParamSpec]:
        return [spec for node in self.nodes for spec in node.param_specs()]

    def buffers(self) -> List[ParamSpec]:
        return [spec for node in self.nodes for spec in node.buffer_specs()]

    def topological_order(self) -> List[str]:
        """Kahn 算法；同层级按原始顺序，原本有序的图保持不变"""
        position = {node.id: i for i, node in enumerate(self.nodes)}
        indegree = {}
        for node in self.nodes:
            unknown = [e for e in node.inputs if e != INPUT_EDGE and e not in position]
            if unknown:
                raise GraphError(f"节点 {node.id} 引用了不存在的前驱: {unknown}", {'node': node.id})
            indegree[node.id] = sum(1 for e in node.inputs if e != INPUT_EDGE)

        ready = deque(sorted((nid for nid, d in indegree.items() if d == 0), key=position.get))
        order: List[str] = []
        while ready:
            current = ready.popleft()
            order.append(current)
            released = []
            for consumer in self.consumers.get(current, []):
                # 同一前驱出现两次时入度也减两次
                indegree[consumer] -= 1
                if indegree[consumer] == 0:
                    released.append(consumer)
            for nid in sorted(set(released), key=position.get):
                ready.append(nid)

        if len(order) != len(self.nodes):
            stuck = sorted(set(position) - set(order), key=position.get)
            raise GraphError(f"图中存在环，涉及节点: {stuck}", {'nodes': stuck})
        return order


@dataclass(frozen=True)
class Diagnostic:
    """validate() 的一条诊断"""
    code: str
    message: str
    node_id: Optional[str] = None

    def __str__(self):
        where = f" [{self.node_id}]" if self.node_id else ""
        return f"{self.code}{where}: {self.message}"


def infer_shapes(graph: ModelGraph, input: Optional[TensorShape] = None) -> ModelGraph:
    """为每个节点填入输入/输出形状，返回新图（按拓扑顺序）

    Args:
        graph (ModelGraph): 原图
        input (TensorShape): 输入形状，None 时使用 graph.input_shape

    Returns:
        ModelGraph: 带形状的新图；对同一输入重复调用结果相同
    """
    input_shape = input or graph.input_shape
    order = graph.topological_order()
    shapes: Dict[str, TensorShape] = {INPUT_EDGE: input_shape}
    shaped_nodes = []

    for node_id in order:
        node = graph.node(node_id)
        expected = 2 if node.kind in BINARY_KINDS else 1
        if len(node.inputs) != expected:
            raise ShapeError(f"节点 {node.id} ({node.kind}) 需要 {expected} 个输入，实际 {len(node.inputs)}",
                             node_id=node.id)
        in_shapes = tuple(shapes[edge] for edge in node.inputs)
        out = output_shape_for(node, in_shapes)
        shapes[node.id] = out
        shaped_nodes.append(replace(node, input_shapes=in_shapes, output_shape=out))

    logger.debug(f"形状推断完成: {graph.name}, 输入 {input_shape}, 共 {len(shaped_nodes)} 个节点")
    return replace(graph, nodes=tuple(shaped_nodes), input_shape=input_shape)


def param_count(graph: ModelGraph, filter: str = 'all', trainable: Optional[Sequence[str]] = None) -> int:
    """参数元素总数

    Args:
        graph (ModelGraph): 图
        filter (str): 'all' 或 'trainable_only'
        trainable: 可训练参数 id 集合；None 表示所有参数都可训练

    Returns:
        int: 元素个数（不含 BN 运行统计量）
    """
    if filter not in ('all', 'trainable_only'):
        raise GraphError(f"未知的参数过滤器: {filter}")
    specs = graph.parameters()
    if filter == 'trainable_only' and trainable is not None:
        wanted = set(trainable)
        specs = [s for s in specs if s.param_id in wanted]
    return sum(spec.numel for spec in specs)


def validate(graph: ModelGraph) -> List[Diagnostic]:
    """检查图的所有类型不变量，每处违例给出一条诊断"""
    diags: List[Diagnostic] = []
    seen = set()
    for node in graph.nodes:
        if node.id in seen or node.id == INPUT_EDGE:
            diags.append(Diagnostic('duplicate-id', f"节点 id 重复或保留: {node.id}", node.id))
        seen.add(node.id)

    for node in graph.nodes:
        if node.kind not in KINDS:
            diags.append(Diagnostic('unknown-kind', f"未知层类型: {node.kind}", node.id))
            continue
        expected = 2 if node.kind in BINARY_KINDS else 1
        if len(node.inputs) != expected:
            diags.append(Diagnostic('arity', f"需要 {expected} 个输入，实际 {len(node.inputs)}", node.id))
        for edge in node.inputs:
            if edge != INPUT_EDGE and edge not in seen:
                diags.append(Diagnostic('unknown-input', f"引用了不存在的前驱: {edge}", node.id))
        if node.kind == 'activation' and node.fn not in ACTIVATIONS:
            diags.append(Diagnostic('bad-attribute', f"未知激活函数: {node.fn!r}", node.id))
        if node.kind == 'conv2d':
            if min(node.in_channels, node.out_channels, node.kernel, node.stride, node.groups) < 1 or node.padding < 0:
                diags.append(Diagnostic('bad-attribute', "卷积参数必须为正", node.id))
            elif node.in_channels % node.groups or node.out_channels % node.groups:
                diags.append(Diagnostic(
                    'group-divisibility',
                    f"C_in={node.in_channels} 和 C_out={node.out_channels} 必须能被 groups={node.groups} 整除",
                    node.id))
        if node.kind == 'linear' and min(node.in_features, node.out_features) < 1:
            diags.append(Diagnostic('bad-attribute', "线性层特征数必须为正", node.id))
        if node.kind == 'batchnorm2d' and node.out_channels < 1:
            diags.append(Diagnostic('bad-attribute', "BN 通道数必须为正", node.id))
        if node.kind == 'maxpool' and (node.kernel < 1 or node.stride < 1):
            diags.append(Diagnostic('bad-attribute', "池化窗口和步长必须为正", node.id))

    for head_id in graph.head_ids:
        if head_id not in seen:
            diags.append(Diagnostic('head', f"分类头节点不存在: {head_id}", head_id))

    try:
        graph.topological_order()
    except GraphError as e:
        if not any(d.code == 'unknown-input' for d in diags):
            diags.append(Diagnostic('cycle', e.message))

    outputs = [node.id for node in graph.nodes if not graph.consumers.get(node.id)]
    if len(outputs) != 1:
        diags.append(Diagnostic('output-count', f"必须恰好有一个输出节点，实际 {len(outputs)} 个: {outputs}"))

    if not diags:
        try:
            infer_shapes(graph)
        except ShapeError as e:
            diags.append(Diagnostic('shape', e.message, e.node_id))

    return diags


_NODE_FIELDS = ('in_channels', 'out_channels', 'kernel', 'stride', 'padding', 'groups',
                'bias', 'fn', 'in_features', 'out_features')
_NODE_DEFAULTS = {name: LayerNode.__dataclass_fields__[name].default for name in _NODE_FIELDS}


def graph_to_dict(graph: ModelGraph) -> Dict[str, Any]:
    """导出为可 JSON 序列化的文档（只保存非默认属性，形状在导入时重新推断）"""
    nodes = []
    for node in graph.nodes:
        attrs = {name: getattr(node, name) for name in _NODE_FIELDS
                 if getattr(node, name) != _NODE_DEFAULTS[name]}
        nodes.append({'id': node.id, 'kind': node.kind, 'inputs': list(node.inputs), 'attrs': attrs})
    return {
        'schema_version': SCHEMA_VERSION,
        'name': graph.name,
        'input_shape': list(graph.input_shape.as_tuple()),
        'head_ids': list(graph.head_ids),
        'nodes': nodes,
    }


def graph_from_dict(doc: Dict[str, Any]) -> ModelGraph:
    """从 graph_to_dict 的文档重建图并推断形状"""
    if not isinstance(doc, dict) or doc.get('schema_version') != SCHEMA_VERSION:
        raise GraphError(f"不支持的图文档版本: {doc.get('schema_version') if isinstance(doc, dict) else doc!r}")
    try:
        nodes = []
        for entry in doc['nodes']:
            attrs = dict(entry.get('attrs', {}))
            unknown = set(attrs) - set(_NODE_FIELDS)
            if unknown:
                raise GraphError(f"节点 {entry.get('id')} 含未知属性: {sorted(unknown)}")
            nodes.append(LayerNode(id=str(entry['id']), kind=str(entry['kind']),
                                   inputs=tuple(entry.get('inputs', ())), **attrs))
        graph = ModelGraph(
            nodes=tuple(nodes),
            input_shape=TensorShape(*doc['input_shape']),
            head_ids=tuple(doc.get('head_ids', ())),
            name=str(doc.get('name', 'custom')),
        )
    except (KeyError, TypeError) as e:
        raise GraphError(f"图文档格式错误: {e}", original_exception=e)
    return infer_shapes(graph)
