#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
分组内存模型测试：保存激活集合、各组字节数、总量可加、秩线性
"""

import logging
import os
import sys

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.graph.builders import build_model
from src.graph.ir import TensorShape, param_count
from src.peft.config import PeftConfig
from src.peft.optimizer_plan import plan_for
from src.peft.transform import apply_method
from src.profiler.memory import (GROUPS, MemoryReport, group_bytes, lora_a_edge, profile_memory,
                                 saved_activation_set)
from src.utils.error_handler import ConfigurationError, ValidationError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('test_memory_model')

TOY_LAYERS = [
    {'kind': 'conv2d', 'out_channels': 4, 'kernel': 3},
    {'kind': 'batchnorm2d'},
    {'kind': 'activation', 'fn': 'relu'},
    {'kind': 'conv2d', 'kernel': 3, 'depthwise': True},
    {'kind': 'avgpool'},
    {'kind': 'linear'},
]


def _tuned(arch, method, **kwargs):
    graph = build_model(arch) if arch != 'toy' else build_model('toy_cnn', 2, TensorShape(1, 3, 8, 8),
                                                                layers=TOY_LAYERS)
    config = PeftConfig(method, **kwargs)
    tuned = apply_method(graph, config)
    return tuned, plan_for(tuned.base, config)


def _report(arch, method, **kwargs):
    tuned, plan = _tuned(arch, method, **kwargs)
    return profile_memory(tuned, plan)


def test_fft_saves_every_weight_input():
    tuned, _ = _tuned('toy', 'fft')
    saved = saved_activation_set(tuned)
    assert saved == {'input', '0.conv2d', '1.batchnorm2d', '2.activation', '4.avgpool'}


def test_lora_saves_adapter_intermediates():
    tuned, _ = _tuned('toy', 'lora', rank=2)
    saved = saved_activation_set(tuned)
    for layer_id in ('0.conv2d', '3.conv2d', '5.linear'):
        assert lora_a_edge(layer_id) in saved
    assert {'input', '2.activation', '4.avgpool'} <= saved


def test_bnh_saves_only_head_input():
    tuned, _ = _tuned('mobilenet_v2', 'bnh')
    assert saved_activation_set(tuned) == {'avgpool'}


def test_total_is_sum_of_groups():
    for method in ('fft', 'lora', 'dora', 'galore', 'bnh'):
        report = _report('mobilenet_v3_large', method, rank=2)
        assert set(report.groups) == {g.value for g in GROUPS}
        assert report.total == sum(report.groups.values())
        assert all(value >= 0 for value in report.groups.values())


def test_param_and_grad_groups():
    graph = build_model('resnet18')
    fft = _report('resnet18', 'fft')
    buffers = sum(spec.numel for spec in graph.buffers())
    assert fft['GRAD'] == 4 * param_count(graph)
    assert fft['PARAM'] == 4 * (param_count(graph) + buffers)

    bnh = _report('resnet18', 'bnh')
    assert bnh['GRAD'] == 4 * (9600 + 513000)
    assert bnh['PARAM'] == fft['PARAM']

    for method in ('lora', 'dora', 'galore', 'bnh'):
        report = _report('resnet18', method)
        assert report['GRAD'] <= report['PARAM']


def test_optimizer_state_sizes():
    tuned, plan = _tuned('resnet18', 'galore', rank=4)
    expected = 0
    for spec in tuned.trainable_parameters():
        proj = plan.projected.get(spec.param_id)
        if proj is None:
            expected += 2 * spec.numel
        else:
            expected += 2 * 4 * max(proj.rows, proj.cols) + 4 * min(proj.rows, proj.cols)
    assert group_bytes(tuned, plan, 'OPT') == 4 * expected

    sgd_tuned, sgd_plan = _tuned('resnet18', 'fft', optimizer='sgd_momentum')
    assert group_bytes(sgd_tuned, sgd_plan, 'OPT') == 4 * param_count(sgd_tuned.base)


def test_bnh_has_smallest_activations():
    bnh = _report('mobilenet_v2', 'bnh')['ACT']
    for method in ('fft', 'lora', 'dora', 'galore'):
        assert bnh <= _report('mobilenet_v2', method)['ACT']
    # 只剩图输入和分类头输入
    assert bnh == 4 * (3 * 224 * 224 + 1280)


def test_dora_needs_more_temp_than_lora():
    lora = _report('mobilenet_v2', 'lora', rank=4)
    dora = _report('mobilenet_v2', 'dora', rank=4)
    assert dora['TEMP'] > lora['TEMP']
    assert 1.40 <= dora.total / lora.total <= 1.60


def test_dora_temp_uses_grouped_support():
    lora = _report('toy', 'lora', rank=2)
    dora = _report('toy', 'dora', rank=2)
    # 每层 C_out 的范数向量加两份基础权重大小的 V 与 ΔW；深度卷积按 4x1x3x3 而不是 4x4x3x3 计
    per_layer = [(4, 4 * 3 * 3 * 3), (4, 4 * 1 * 3 * 3), (2, 2 * 4)]
    expected = sum(c_out + 2 * weight for c_out, weight in per_layer)
    assert dora['TEMP'] - lora['TEMP'] == 4 * expected


def test_forward_outputs_count_as_temp():
    # bnh 不保存中间激活，但前向最大的输出 (96x112x112) 在下一层运行前一直存活
    bnh = _report('mobilenet_v2', 'bnh')
    assert bnh['TEMP'] == 4 * 96 * 112 * 112
    fft = _report('mobilenet_v2', 'fft')
    assert fft['TEMP'] >= bnh['TEMP']


def test_linear_in_rank():
    for method in ('lora', 'dora'):
        reports = [_report('resnet18', method, rank=r) for r in (1, 2, 3)]
        for group in ('GRAD', 'OPT', 'PARAM'):
            values = [rep[group] for rep in reports]
            assert values[0] < values[1] < values[2]
            assert values[1] - values[0] == values[2] - values[1]
    # 投影集合不变时 galore 的 OPT 也是线性的
    opt = [_report('resnet18', 'galore', rank=r)['OPT'] for r in (1, 2, 3)]
    assert opt[1] - opt[0] == opt[2] - opt[1]
    # mobilenet_v2 的深度卷积矩阵化后只有 9 列，r=8 与 r=16 的投影集合不同，固定筛选秩后 OPT 又是线性的
    opt = [_report('mobilenet_v2', 'galore', rank=r, galore_selection_rank=16)['OPT'] for r in (4, 8, 12)]
    assert opt[1] - opt[0] == opt[2] - opt[1]
    moving = [_report('mobilenet_v2', 'galore', rank=r)['OPT'] for r in (4, 8, 12)]
    assert moving[1] - moving[0] != moving[2] - moving[1]


def test_width_scales_every_group():
    tuned, plan = _tuned('toy', 'lora', rank=2)
    narrow = profile_memory(tuned, plan, width=2)
    wide = profile_memory(tuned, plan, width=4)
    assert all(2 * narrow.groups[g] == wide.groups[g] for g in wide.groups)
    try:
        group_bytes(tuned, plan, 'PARAM', width=0)
    except ConfigurationError:
        pass
    else:
        assert False


def test_unknown_group():
    tuned, plan = _tuned('toy', 'fft')
    try:
        group_bytes(tuned, plan, 'CACHE')
    except ValidationError as e:
        assert 'CACHE' in str(e)
    else:
        assert False


def test_input_shape_override():
    tuned, plan = _tuned('resnet18', 'fft')
    small = profile_memory(tuned, plan, input=TensorShape(1, 3, 112, 112))
    full = profile_memory(tuned, plan)
    assert small['ACT'] < full['ACT']
    assert small['PARAM'] == full['PARAM']


def test_report_round_trip():
    report = _report('toy', 'dora', rank=2)
    doc = report.to_dict()
    assert doc['total'] == report.total
    assert MemoryReport.from_dict(doc) == report


def main():
    """主测试函数"""
    tests = [value for name, value in sorted(globals().items()) if name.startswith('test_') and callable(value)]
    failed = 0
    for test in tests:
        try:
            test()
            logger.info(f"✓ {test.__name__}")
        except Exception as e:
            failed += 1
            logger.error(f"✗ {test.__name__}: {e}")
    if failed:
        logger.error(f"=== {failed}/{len(tests)} 个测试失败 ===")
        return 1
    logger.info(f"=== 全部 {len(tests)} 个测试通过 ===")
    return 0


if __name__ == '__main__':
    sys.exit(main())
