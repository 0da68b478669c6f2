# -*- coding: utf-8 -*-
"""
PEFT 训练开销剖析器

在设备端训练场景下，按阶段统计各种参数高效微调方法一个训练步的 FLOPs 与分组峰值内存，
并用一个小型 numpy 参考引擎校验这些解析结果。
"""

__version__ = '1.0.0'
__description__ = 'PEFT 方法训练开销（FLOPs / 内存）剖析与校验工具'

# 注意：不直接导出 main 模块，以避免导入顺序警告
# 如需使用命令行入口，请直接导入: from src.main import main
