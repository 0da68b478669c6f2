# -*- coding: utf-8 -*-
"""
PEFT 方法：配置、结构变换、优化器计划
"""

from .config import METHODS, OPTIMIZER_RULES, PeftConfig
from .optimizer_plan import OptimizerPlan, ProjectedParam, galore_plan, matricize, plan_for
from .transform import (AdapterPair, ParamSummary, TunedModel, apply_method, merge_adapters,
                        trainable_summary)
