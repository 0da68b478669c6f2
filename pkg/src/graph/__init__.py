# -*- coding: utf-8 -*-
"""
层图中间表示与标准架构构建器
"""

from .ir import (INPUT_EDGE, Diagnostic, LayerNode, ModelGraph, ParamSpec, TensorShape,
                 graph_from_dict, graph_to_dict, infer_shapes, param_count, validate)
from .builders import ARCHITECTURES, build_model
