# -*- coding: utf-8 -*-
"""
命令与报告：运行规格、profile/compare/sweep/plan/verify、输出格式
"""

from .commands import cmd_compare, cmd_plan, cmd_profile, cmd_sweep, linear_fit
from .emit import (ComparisonRow, ComparisonTable, PlanResult, ProfileReport, SweepResult, render,
                   report_from_json, report_to_json)
from .runspec import RunSpec, load_run_spec, parse_run_spec
from .verify import SuiteResult, VerifySummary, cmd_verify
