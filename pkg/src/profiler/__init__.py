# -*- coding: utf-8 -*-
"""
解析模型：梯度流、分阶段 FLOPs、分组内存
"""

from .flops import (PHASES, CountingConvention, FlopsReport, Phase, flops_ratio, layer_flops,
                    optimizer_flops, param_step_flops, profile_flops)
from .grad_flow import GradFlow, analyze
from .memory import (GROUPS, MemoryGroup, MemoryReport, group_bytes, profile_memory,
                     saved_activation_set)
