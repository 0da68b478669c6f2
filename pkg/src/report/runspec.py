#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行规格文档

YAML 映射，描述一次剖析: 架构、输入、方法及其超参数、优化器、计数约定、输出格式。
解析错误尽量带上 1 起始的行号。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import yaml

from ..graph.builders import ARCHITECTURES, build_model
from ..graph.ir import ModelGraph, TensorShape
from ..peft.config import METHODS, PeftConfig
from ..peft.optimizer_plan import OptimizerPlan, plan_for
from ..peft.transform import TunedModel, apply_method
from ..utils.config import VALID_CONVENTIONS, VALID_FORMATS, Config
from ..utils.error_handler import ProfilerError, ValidationError

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ('arch', 'num_classes', 'input', 'method', 'peft', 'optimizer', 'input_grad',
                  'bytes_per_element', 'format', 'toy_layers')
PEFT_KEYS = ('rank', 'alpha', 'galore_scale', 'galore_period', 'galore_projection', 'targets')


@dataclass(frozen=True)
class RunSpec:
    """一次剖析的完整描述"""
    arch: str
    num_classes: int = 1000
    input_shape: Optional[TensorShape] = None
    peft: PeftConfig = field(default_factory=PeftConfig)
    convention: str = 'paper'
    bytes_per_element: int = 4
    output_format: str = 'table'
    toy_layers: Tuple[Mapping[str, Any], ...] = ()

    @property
    def method(self) -> str:
        return self.peft.method

    def build_graph(self) -> ModelGraph:
        return build_model(self.arch, self.num_classes, self.input_shape,
                           layers=list(self.toy_layers) or None)

    def tuned(self, graph: Optional[ModelGraph] = None) -> TunedModel:
        return apply_method(graph or self.build_graph(), self.peft)

    def plan(self, tuned: TunedModel) -> OptimizerPlan:
        return plan_for(tuned.base, self.peft)

    def with_peft(self, **changes) -> 'RunSpec':
        return replace(self, peft=replace(self.peft, **changes))

    def to_dict(self) -> Dict[str, Any]:
        doc = {
            'arch': self.arch,
            'num_classes': self.num_classes,
            'input': list(self.input_shape.as_tuple()) if self.input_shape else None,
            'method': self.peft.method,
            'peft': {
                'rank': self.peft.rank,
                'alpha': self.peft.alpha,
                'galore_scale': self.peft.galore_scale,
                'galore_period': self.peft.galore_period,
                'galore_projection': self.peft.galore_projection,
                'targets': list(self.peft.targets),
            },
            'optimizer': self.peft.optimizer_rule,
            'input_grad': self.convention,
            'bytes_per_element': self.bytes_per_element,
        }
        if self.toy_layers:
            doc['toy_layers'] = [dict(layer) for layer in self.toy_layers]
        return doc


def _key_lines(document: str) -> Dict[str, int]:
    """顶层和 peft 下各键所在行（1 起始）"""
    lines: Dict[str, int] = {}
    try:
        root = yaml.compose(document, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        lines[str(key_node.value)] = key_node.start_mark.line + 1
        if key_node.value == 'peft' and isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"peft.{sub_key.value}"] = sub_key.start_mark.line + 1
    return lines


def _fail(message: str, lines: Mapping[str, int], key: Optional[str] = None, cause: Optional[Exception] = None):
    details = {'field': key} if key else {}
    if key in lines:
        details['line'] = lines[key]
    raise ValidationError(message, details, cause)


def _parse_input(value: Any, lines: Mapping[str, int]) -> TensorShape:
    try:
        if isinstance(value, str):
            return TensorShape.parse(value)
        if isinstance(value, Mapping):
            unknown = set(value) - {'n', 'c', 'h', 'w'}
            if unknown:
                _fail(f"input 含未知字段: {sorted(unknown)}", lines, 'input')
            return TensorShape(int(value.get('n', 1)), int(value.get('c', 3)), int(value['h']), int(value['w']))
        if isinstance(value, Sequence) and len(value) == 4:
            return TensorShape(*(int(v) for v in value))
    except ValidationError:
        raise
    except (ProfilerError, KeyError, TypeError, ValueError) as e:
        _fail(f"无效的 input: {value!r}", lines, 'input', e)
    _fail(f"input 必须是 \"HxW\"、{{n, c, h, w}} 或长度为 4 的列表: {value!r}", lines, 'input')


def _choice(data: Mapping[str, Any], key: str, allowed: Sequence[str], default: str, lines) -> str:
    value = data.get(key)
    if value is None:
        return default
    if value not in allowed:
        _fail(f"{key} 取值 {value!r} 无效，可选 {list(allowed)}", lines, key)
    return value


def _positive_int(data: Mapping[str, Any], key: str, default: int, lines) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        _fail(f"{key} 必须为正整数: {value!r}", lines, key)
    return value


def parse_run_spec(document: str, config: Optional[Config] = None) -> RunSpec:
    """解析 YAML 运行规格

    Args:
        document (str): YAML 文本
        config (Config): 提供未在文档中给出的默认值（宽度、计数约定、输出格式）

    Returns:
        RunSpec: 解析结果

    Raises:
        ValidationError: 语法错误、未知键、取值非法（details 中带 line）
    """
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        details = {'line': mark.line + 1} if mark is not None else {}
        raise ValidationError(f"运行规格不是合法的 YAML: {getattr(e, 'problem', None) or e}", details, e)
    if not isinstance(data, Mapping):
        raise ValidationError("运行规格必须是一个映射", {'line': 1})

    lines = _key_lines(document)
    unknown = [key for key in data if key not in TOP_LEVEL_KEYS]
    if unknown:
        _fail(f"运行规格含未知键: {unknown}，可选 {list(TOP_LEVEL_KEYS)}", lines, str(unknown[0]))

    arch = data.get('arch')
    if arch not in ARCHITECTURES:
        _fail(f"arch 取值 {arch!r} 无效，可选 {list(ARCHITECTURES)}", lines, 'arch')

    peft_section = data.get('peft') or {}
    if not isinstance(peft_section, Mapping):
        _fail("peft 必须是映射", lines, 'peft')
    unknown = [key for key in peft_section if key not in PEFT_KEYS]
    if unknown:
        _fail(f"peft 含未知键: {unknown}，可选 {list(PEFT_KEYS)}", lines, f"peft.{unknown[0]}")

    config = config or Config()
    toy_layers = data.get('toy_layers') or ()
    if toy_layers and arch != 'toy_cnn':
        _fail("toy_layers 只适用于 toy_cnn", lines, 'toy_layers')
    if not isinstance(toy_layers, Sequence) or any(not isinstance(layer, Mapping) for layer in toy_layers):
        _fail("toy_layers 必须是映射列表", lines, 'toy_layers')

    method = _choice(data, 'method', METHODS, 'fft', lines)
    try:
        peft = PeftConfig(method=method, optimizer=data.get('optimizer'), **dict(peft_section))
    except ProfilerError as e:
        key = e.details.get('field')
        key = f"peft.{key}" if key in PEFT_KEYS else (key or 'method')
        _fail(e.message, lines, key if key in lines else 'peft', e)
    except TypeError as e:
        _fail(f"peft 参数无效: {e}", lines, 'peft', e)

    spec = RunSpec(
        arch=arch,
        num_classes=_positive_int(data, 'num_classes', 2 if arch == 'toy_cnn' else 1000, lines),
        input_shape=_parse_input(data['input'], lines) if data.get('input') is not None else None,
        peft=peft,
        convention=_choice(data, 'input_grad', VALID_CONVENTIONS, config.input_grad_convention, lines),
        bytes_per_element=_positive_int(data, 'bytes_per_element', config.bytes_per_element, lines),
        output_format=_choice(data, 'format', VALID_FORMATS, config.output_format, lines),
        toy_layers=tuple(dict(layer) for layer in toy_layers),
    )
    logger.debug(f"运行规格: {spec.arch}/{spec.method}, 输入 {spec.input_shape}")
    return spec


def load_run_spec(path: str, config: Optional[Config] = None) -> RunSpec:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = f.read()
    except OSError as e:
        raise ValidationError(f"无法读取运行规格 {path}: {e}", {'path': path}, e)
    return parse_run_spec(document, config)
