#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
PEFT 变换

把基础图变成 TunedModel：挂载适配器、确定可训练参数集合、标记梯度截断边。
基础图与基础权重从不被修改。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple

import numpy as np

from ..graph.ir import ModelGraph, ParamSpec, infer_shapes, param_count, validate
from ..utils.error_handler import ConfigurationError, GraphError, ValidationError
from .config import TARGET_KINDS, PeftConfig

logger = logging.getLogger(__name__)

DORA_EPS = 1e-12


@dataclass(frozen=True)
class AdapterPair:
    """挂在一层上的低秩适配器

    卷积: A 为 C_in -> r 的卷积（沿用原层的 kernel/stride/padding，groups=1），
    B 为 1x1 的 r -> C_out 卷积。线性层: A (r, d_in)，B (d_out, r)。
    DoRA 额外有长度 C_out 的幅度向量 m。
    """
    layer_id: str
    layer_kind: str
    rank: int
    scaling: float
    a_shape: Tuple[int, ...]
    b_shape: Tuple[int, ...]
    magnitude_size: int = 0

    @property
    def is_dora(self) -> bool:
        return self.magnitude_size > 0

    @property
    def a_id(self) -> str:
        return f"{self.layer_id}.lora_A"

    @property
    def b_id(self) -> str:
        return f"{self.layer_id}.lora_B"

    @property
    def m_id(self) -> str:
        return f"{self.layer_id}.dora_m"

    def param_specs(self) -> List[ParamSpec]:
        specs = [ParamSpec(self.a_id, self.layer_id, 'lora_A', self.a_shape),
                 ParamSpec(self.b_id, self.layer_id, 'lora_B', self.b_shape)]
        if self.is_dora:
            specs.append(ParamSpec(self.m_id, self.layer_id, 'dora_m', (self.magnitude_size,)))
        return specs

    @property
    def param_count(self) -> int:
        return sum(spec.numel for spec in self.param_specs())


@dataclass(frozen=True)
class TunedModel:
    """PEFT 变换后的模型结构

    detached 为梯度在此截断的边（bnh 的分类头输入）。
    """
    base: ModelGraph
    config: PeftConfig
    adapters: Mapping[str, AdapterPair] = field(default_factory=dict)
    trainable: FrozenSet[str] = frozenset()
    detached: FrozenSet[str] = frozenset()

    @property
    def method(self) -> str:
        return self.config.method

    def parameters(self) -> List[ParamSpec]:
        """基础参数 + 适配器参数，按层顺序"""
        specs: List[ParamSpec] = []
        for node in self.base.nodes:
            specs.extend(node.param_specs())
            adapter = self.adapters.get(node.id)
            if adapter is not None:
                specs.extend(adapter.param_specs())
        return specs

    def buffers(self) -> List[ParamSpec]:
        return self.base.buffers()

    def trainable_parameters(self) -> List[ParamSpec]:
        return [spec for spec in self.parameters() if spec.param_id in self.trainable]

    def is_trainable(self, param_id: str) -> bool:
        return param_id in self.trainable


@dataclass(frozen=True)
class ParamSummary:
    """参数统计"""
    total: int
    trainable: int
    adapter: int = 0
    magnitude: int = 0

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def adapter_rank_bound(node) -> int:
    """适配器秩上限：更新 ΔW 矩阵化 (C_out x C_in*k*k) 的较小维"""
    if node.kind == 'conv2d':
        return min(node.out_channels, node.in_channels * node.kernel * node.kernel)
    return min(node.in_features, node.out_features)


def _make_adapter(node, config: PeftConfig) -> AdapterPair:
    r = config.rank
    if node.kind == 'conv2d':
        a_shape = (r, node.in_channels, node.kernel, node.kernel)
        b_shape = (node.out_channels, r, 1, 1)
        c_out = node.out_channels
    else:
        a_shape = (r, node.in_features)
        b_shape = (node.out_features, r)
        c_out = node.out_features
    return AdapterPair(
        layer_id=node.id,
        layer_kind=node.kind,
        rank=r,
        scaling=config.scaling,
        a_shape=a_shape,
        b_shape=b_shape,
        magnitude_size=c_out if config.method == 'dora' else 0,
    )


def apply_method(graph: ModelGraph, config: PeftConfig) -> TunedModel:
    """对基础图应用 PEFT 方法

    Args:
        graph (ModelGraph): 基础图，须通过 validate
        config (PeftConfig): 方法配置

    Returns:
        TunedModel: 变换结果
    """
    diagnostics = validate(graph)
    if diagnostics:
        raise GraphError(f"图校验失败，共 {len(diagnostics)} 处问题: {diagnostics[0]}",
                         {'diagnostics': [str(d) for d in diagnostics]})
    if not graph.shaped:
        graph = infer_shapes(graph)

    unsupported = [kind for kind in config.targets if kind not in TARGET_KINDS]
    if unsupported:
        raise ConfigurationError(f"不支持的目标层类型: {unsupported}，可选 {TARGET_KINDS}")

    adapters: Dict[str, AdapterPair] = {}
    detached: FrozenSet[str] = frozenset()

    if config.method in ('lora', 'dora'):
        for node in graph.nodes:
            if node.kind not in config.targets:
                continue
            bound = adapter_rank_bound(node)
            if config.rank > bound:
                raise ConfigurationError(
                    f"rank={config.rank} 超过层 {node.id} 的上限 {bound}",
                    {'layer': node.id, 'rank': config.rank, 'bound': bound})
            adapters[node.id] = _make_adapter(node, config)
        trainable = frozenset(spec.param_id for a in adapters.values() for spec in a.param_specs())
    elif config.method in ('fft', 'galore'):
        trainable = frozenset(spec.param_id for spec in graph.parameters())
    else:
        if not graph.head_ids:
            raise ConfigurationError("bnh 需要图定义分类头 head_ids")
        heads = set(graph.head_ids)
        names = set()
        for node in graph.nodes:
            if node.id in heads or node.kind == 'batchnorm2d':
                names.update(spec.param_id for spec in node.param_specs())
        trainable = frozenset(names)
        entry = next(node for node in graph.nodes if node.id in heads)
        detached = frozenset(edge for edge in entry.inputs if edge not in heads)

    tuned = TunedModel(base=graph, config=config, adapters=adapters, trainable=trainable, detached=detached)
    logger.debug(f"应用 {config.method}: 适配器 {len(adapters)} 个, 可训练参数张量 {len(trainable)} 个")
    return tuned


def trainable_summary(tuned: TunedModel) -> ParamSummary:
    """统计总参数、可训练参数、适配器参数"""
    adapter = sum(a.param_count for a in tuned.adapters.values())
    magnitude = sum(a.magnitude_size for a in tuned.adapters.values())
    total = param_count(tuned.base) + adapter
    trainable = sum(spec.numel for spec in tuned.trainable_parameters())
    return ParamSummary(total=total, trainable=trainable, adapter=adapter, magnitude=magnitude)


def dense_weight(node, weight: np.ndarray) -> np.ndarray:
    """把分组卷积权重按块对角嵌入为 (C_out, C_in, k, k)"""
    g = node.groups
    if node.kind != 'conv2d' or g == 1:
        return weight
    out_per, in_per = node.out_channels // g, node.in_channels // g
    dense = np.zeros((node.out_channels, node.in_channels) + weight.shape[2:], dtype=weight.dtype)
    for j in range(g):
        dense[j * out_per:(j + 1) * out_per, j * in_per:(j + 1) * in_per] = weight[j * out_per:(j + 1) * out_per]
    return dense


def _regroup(node, dense: np.ndarray) -> Optional[np.ndarray]:
    """块外全为零时取回分组布局，否则返回 None"""
    g = node.groups
    out_per, in_per = node.out_channels // g, node.in_channels // g
    mask = np.ones(dense.shape[:2], dtype=bool)
    grouped = np.empty((node.out_channels, in_per) + dense.shape[2:], dtype=dense.dtype)
    for j in range(g):
        rows = slice(j * out_per, (j + 1) * out_per)
        cols = slice(j * in_per, (j + 1) * in_per)
        mask[rows, cols] = False
        grouped[rows] = dense[rows, cols]
    if np.any(dense[mask]):
        return None
    return grouped


def lora_delta(adapter: AdapterPair, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ΔW = B A，卷积时形状为 (C_out, C_in, k, k)"""
    r = adapter.rank
    delta = b.reshape(b.shape[0], r) @ a.reshape(r, -1)
    if adapter.layer_kind == 'conv2d':
        return delta.reshape((b.shape[0],) + a.shape[1:])
    return delta


def dora_direction_norm(v: np.ndarray) -> np.ndarray:
    """按输出通道的范数 ||V||_c，长度 C_out"""
    return np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))


def merge_adapters(tuned: TunedModel, weights: Optional[Mapping[str, np.ndarray]] = None
                   ) -> Tuple[ModelGraph, Optional[Dict[str, np.ndarray]]]:
    """把适配器并入基础权重

    Args:
        tuned (TunedModel): lora 或 dora 模型
        weights: 参数取值（含适配器）；None 时只返回结构

    Returns:
        (ModelGraph, dict|None): 合并后的普通图及其权重。分组层在 ΔW 有块外元素时改为稠密卷积
    """
    if tuned.method not in ('lora', 'dora'):
        raise ValidationError(f"merge_adapters 只适用于 lora/dora，当前方法 {tuned.method}")
    if weights is None:
        return tuned.base, None

    merged = {k: v for k, v in weights.items()
              if not k.endswith(('.lora_A', '.lora_B', '.dora_m'))}
    nodes = list(tuned.base.nodes)

    for index, node in enumerate(nodes):
        adapter = tuned.adapters.get(node.id)
        if adapter is None:
            continue
        w0 = np.asarray(weights[f"{node.id}.weight"])
        delta = lora_delta(adapter, np.asarray(weights[adapter.a_id]), np.asarray(weights[adapter.b_id]))

        if adapter.is_dora:
            v = dense_weight(node, w0) + adapter.scaling * delta
            gain = np.asarray(weights[adapter.m_id]) / (dora_direction_norm(v) + DORA_EPS)
            new_dense = gain.reshape((-1,) + (1,) * (v.ndim - 1)) * v
        elif not np.any(delta):
            merged[f"{node.id}.weight"] = w0.copy()
            continue
        else:
            new_dense = dense_weight(node, w0) + adapter.scaling * delta

        if node.kind == 'conv2d' and node.groups > 1:
            grouped = _regroup(node, new_dense)
            if grouped is None:
                nodes[index] = replace(node, groups=1)
                merged[f"{node.id}.weight"] = new_dense
                logger.debug(f"合并后层 {node.id} 由分组卷积改为稠密卷积")
            else:
                merged[f"{node.id}.weight"] = grouped
        else:
            merged[f"{node.id}.weight"] = new_dense

    graph = infer_shapes(replace(tuned.base, nodes=tuple(nodes)))
    return graph, merged
