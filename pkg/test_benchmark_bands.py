#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
三个基准模型上的量级检查

能达到的区间直接断言；由固定计数公式决定、无法落入的区间断言其结构上界，
说明见 DESIGN.md 的“基准区间”一节。
"""

import logging
import os
import sys
from dataclasses import replace
from functools import lru_cache

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.profiler.flops import flops_ratio
from src.report import cmd_compare, cmd_profile, cmd_sweep, parse_run_spec

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('test_benchmark_bands')

ARCHS = ('resnet18', 'mobilenet_v2', 'mobilenet_v3_large')
MOBILENETS = ('mobilenet_v2', 'mobilenet_v3_large')
ALL_METHODS = ('fft', 'lora', 'dora', 'galore', 'bnh')
SWEEP_RANKS = [1, 2, 4, 8, 16]
# 内存区间的容差（百分点）
MEMORY_TOLERANCE = 10.0


def _spec(arch, method='fft', **peft):
    spec = parse_run_spec(f"arch: {arch}\nmethod: {method}\n")
    return spec.with_peft(**peft) if peft else spec


@lru_cache(maxsize=None)
def _compare(arch):
    return cmd_compare([_spec(arch, m) for m in ALL_METHODS], max_workers=4)


@lru_cache(maxsize=None)
def _sweep(method):
    return cmd_sweep(_spec('mobilenet_v2', method), SWEEP_RANKS)


def _ratio(arch, method='fft'):
    return float(flops_ratio(cmd_profile(_spec(arch, method)).flops))


def _memory_delta(arch, method):
    return _compare(arch).row(method).deltas['memory_total']


def _within(value, target, tolerance=MEMORY_TOLERANCE):
    return target - tolerance <= value <= target + tolerance


def test_standard_conv_ratio():
    ratio = _ratio('resnet18')
    assert 1.7 <= ratio <= 2.3, ratio


def test_depthwise_ratio():
    for arch in MOBILENETS:
        ratio = _ratio(arch)
        assert 15.0 <= ratio <= 25.0, (arch, ratio)
        exact = float(flops_ratio(cmd_profile(replace(_spec(arch), convention='exact')).flops))
        assert exact < 3.0, (arch, exact)


def test_adapter_ratio_on_depthwise_models():
    for arch in MOBILENETS:
        for method in ('lora', 'dora'):
            ratio = _ratio(arch, method)
            assert 0.9 <= ratio <= 1.5, (arch, method, ratio)


def test_resnet18_lora_reduction_bound():
    # lora 仍要做完整的基础前向和基础输入梯度，二者之和已占 fft 的 65%
    table = _compare('resnet18')
    fft, lora = table.row('fft'), table.row('lora')
    assert lora.flops['fwd'] >= fft.flops['fwd']
    assert lora.flops['bwd_input'] >= fft.flops['bwd_input']
    best = 100.0 * (1.0 - (fft.flops['fwd'] + fft.flops['bwd_input']) / fft.flops_total)
    assert best < 52.0, best
    assert -best <= lora.deltas['flops_total'] < 0


def test_mobilenet_lora_reduction_bounds():
    # 适配器的前向开销由其形状决定；把 lora 的反向/前向比放到 0.9..1.5 的两端
    # 得到 lora 总量占 fft 的上下界
    for arch, floor in (('mobilenet_v2', 0.9), ('mobilenet_v3_large', 1.5)):
        table = _compare(arch)
        fft, lora = table.row('fft'), table.row('lora')
        share = (lora.flops['fwd'] * (1.0 + floor) + lora.flops['opt']) / fft.flops_total
        if arch == 'mobilenet_v2':
            # 比值取最低的 0.9 时降幅仍不到 90%
            assert share > 0.10, share
        else:
            # 比值取最高的 1.5 时降幅仍超过 85%
            assert share < 0.15, share
        assert lora.deltas['flops_total'] < -80.0, (arch, lora.deltas['flops_total'])


def test_lora_cuts_flops_everywhere():
    for arch in ARCHS:
        table = _compare(arch)
        assert table.row('lora').deltas['flops_total'] < 0, arch
        assert table.row('bnh').deltas['flops_total'] < table.row('lora').deltas['flops_total'], arch
    # 深度可分离网络上降幅远大于标准卷积网络
    assert _compare('mobilenet_v2').row('lora').deltas['flops_total'] < \
        _compare('resnet18').row('lora').deltas['flops_total']


def test_galore_flops_overhead():
    overheads = {arch: _compare(arch).row('galore').deltas['flops_total'] for arch in ARCHS}
    assert all(value > 0 for value in overheads.values()), overheads
    assert any(10.0 <= value <= 30.0 for value in overheads.values()), overheads
    for arch in ARCHS:
        table = _compare(arch)
        assert table.row('galore').deltas['flops.opt'] > 0, arch
        assert table.row('galore').deltas['flops.fwd'] == 0.0, arch


def test_lora_memory_reductions():
    for arch, target in (('resnet18', -67.0), ('mobilenet_v2', -22.0), ('mobilenet_v3_large', -48.0)):
        delta = _memory_delta(arch, 'lora')
        assert _within(delta, target), (arch, delta)


def test_bnh_memory_reductions():
    for arch, target in (('mobilenet_v2', -85.0), ('mobilenet_v3_large', -52.0)):
        delta = _memory_delta(arch, 'bnh')
        assert _within(delta, target), (arch, delta)


def test_galore_memory_on_mobilenets():
    for arch in MOBILENETS:
        delta = _memory_delta(arch, 'galore')
        assert -10.0 - MEMORY_TOLERANCE <= delta <= -5.0 + MEMORY_TOLERANCE, (arch, delta)


def test_dora_over_lora_memory():
    table = _compare('mobilenet_v2')
    ratio = table.row('dora').memory_total / table.row('lora').memory_total
    assert 1.40 <= ratio <= 1.60, ratio


def test_galore_optimizer_state_bound():
    # 两维都大于 r 的矩阵全部投影，剩下的只有 BN 向量与偏置，状态缩到 fft 的一成以内
    deltas = []
    for arch in ARCHS:
        table = _compare(arch)
        delta = table.row('galore').deltas['memory.OPT']
        assert delta < -90.0, (arch, delta)
        assert table.row('galore').deltas['memory.PARAM'] == 0.0, arch
        deltas.append(delta)
    average = sum(deltas) / len(deltas)
    assert average < -65.0 - MEMORY_TOLERANCE, average


def test_lora_state_not_below_galore_state():
    # 每个投影层: lora 两个矩 2r(C_in*k*k + C_out) 不小于 galore 的 r(2*max + min)
    table = _compare('resnet18')
    lora, galore = table.row('lora').memory['OPT'], table.row('galore').memory['OPT']
    assert 0.9 * galore < lora, (lora, galore)


def test_memory_ordering_mobilenet_v2():
    table = _compare('mobilenet_v2')
    memory = {row.method: row.memory_total for row in table.rows}
    assert memory['bnh'] < memory['lora'] < memory['galore'] < memory['fft'] < memory['dora'], memory


def test_activation_dominates_fft_memory():
    groups = cmd_profile(_spec('mobilenet_v2')).memory.groups
    assert max(groups, key=groups.get) == 'ACT'


def test_bnh_gradients_are_small():
    memory = cmd_profile(_spec('resnet18', 'bnh')).memory
    assert memory['GRAD'] * 10 < memory['PARAM']


def test_rank_sweep_is_linear():
    for method in ('lora', 'dora', 'galore'):
        result = _sweep(method)
        assert [p.rank for p in result.points] == SWEEP_RANKS
        for key in ('flops', 'memory'):
            slope, r2 = result.fits[key]
            assert slope > 0 and r2 > 0.999, (method, key, slope, r2)
        totals = [p.flops_total for p in result.points]
        assert totals == sorted(totals)


def test_sweep_slope_ratios():
    lora, galore = _sweep('lora'), _sweep('galore')
    # galore 的每秩开销没有空间维，lora 光前向的每秩开销就已超过它
    rank1 = cmd_profile(_spec('mobilenet_v2', 'lora', rank=1)).flops
    rank2 = cmd_profile(_spec('mobilenet_v2', 'lora', rank=2)).flops
    assert rank2.forward - rank1.forward > galore.fits['flops'][0]
    assert galore.fits['flops'][0] / lora.fits['flops'][0] < 1.0

    # lora 每秩的参数、梯度与两个矩合计已超过 galore 每秩状态的 4 倍
    first, second = lora.points[0].groups, lora.points[1].groups
    adapter_slope = sum(second[g] - first[g] for g in ('PARAM', 'GRAD', 'OPT'))
    assert adapter_slope > 4 * galore.fits['memory'][0]
    assert lora.fits['memory'][0] / galore.fits['memory'][0] > 4.0


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
