#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行与报告测试：运行规格解析、输出格式、compare/sweep/plan、退出码、校验套件的反例
"""

import json
import logging
import os
import sys
import tempfile

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.graph.ir import TensorShape, graph_from_dict
from src.main import ProfilerApp, build_parser, main
from src.profiler import flops as flops_module
from src.report import (cmd_compare, cmd_plan, cmd_profile, cmd_sweep, linear_fit, parse_run_spec, render,
                        report_from_json, report_to_json)
from src.report.verify import check_flops_parity, toy_graphs
from src.utils.error_handler import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_VERIFY_FAILURE, ValidationError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('test_cli_report')

TOY_SPEC = """
arch: toy_cnn
input: 2x3x8x8
method: lora
peft:
  rank: 2
toy_layers:
  - {kind: conv2d, out_channels: 4, kernel: 3}
  - {kind: batchnorm2d}
  - {kind: activation, fn: relu}
  - {kind: conv2d, kernel: 3, depthwise: true}
  - {kind: avgpool}
  - {kind: linear}
"""


def _expect_validation(document, line=None, field=None):
    try:
        parse_run_spec(document)
    except ValidationError as e:
        if line is not None:
            assert e.details.get('line') == line, e.details
        if field is not None:
            assert e.details.get('field') == field, e.details
        return e
    assert False, f"应当拒绝: {document!r}"


def _write(text, suffix='.yaml'):
    fd, path = tempfile.mkstemp(suffix=suffix)
    with os.fdopen(fd, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def _temp_out(suffix='.json'):
    fd, path = tempfile.mkstemp(suffix=suffix)
    os.close(fd)
    return path


def test_run_spec_defaults():
    spec = parse_run_spec("arch: resnet18\n")
    assert spec.method == 'fft'
    assert spec.num_classes == 1000
    assert spec.input_shape is None
    assert spec.peft.optimizer_rule == 'adam'
    assert spec.bytes_per_element == 4
    assert parse_run_spec(TOY_SPEC).num_classes == 2


def test_run_spec_input_forms():
    assert parse_run_spec("arch: resnet18\ninput: 112x112\n").input_shape == TensorShape(1, 3, 112, 112)
    assert parse_run_spec("arch: resnet18\ninput: [2, 3, 64, 64]\n").input_shape == TensorShape(2, 3, 64, 64)
    assert parse_run_spec("arch: resnet18\ninput: {h: 32, w: 48}\n").input_shape == TensorShape(1, 3, 32, 48)
    _expect_validation("arch: resnet18\ninput: tiny\n", line=2, field='input')


def test_run_spec_errors_carry_line():
    _expect_validation("arch: resnet18\ncolour: red\n", line=2)
    _expect_validation("arch: vgg\n", line=1, field='arch')
    _expect_validation("arch: resnet18\nmethod: lora\npeft:\n  rank: 0\n", line=4, field='peft.rank')
    _expect_validation("arch: resnet18\npeft:\n  dropout: 0.1\n", line=3)
    _expect_validation("arch: resnet18\nformat: xml\n", line=2, field='format')
    _expect_validation("arch: resnet18\nmethod: lora\noptimizer: galore_adam\n")
    _expect_validation("arch: resnet18\ntoy_layers:\n  - {kind: linear}\n", field='toy_layers')
    _expect_validation("- just\n- a list\n", line=1)
    _expect_validation("arch: [resnet18\n")


def test_profile_report_round_trip():
    report = cmd_profile(parse_run_spec(TOY_SPEC))
    assert report.params.trainable == report.params.adapter
    again = report_from_json(report_to_json(report))
    assert again == report
    doc = json.loads(report_to_json(report))
    assert doc['schema_version'] == 1 and doc['kind'] == 'profile'
    assert doc['memory']['total'] == sum(doc['memory']['groups'].values())


def test_render_formats():
    report = cmd_profile(parse_run_spec(TOY_SPEC))
    csv_text = render(report, 'csv')
    lines = csv_text.splitlines()
    assert lines[0] == 'section,key,value'
    assert f"flops,total,{report.flops.total}" in lines
    assert f"memory,total,{report.memory.total}" in lines
    table = render(report, 'table')
    assert 'FLOPs' in table and 'memory' in table
    try:
        render(report, 'xml')
    except ValidationError:
        pass
    else:
        assert False


def test_report_from_json_rejects_other_documents():
    for text in ('{not json', json.dumps({'schema_version': 2, 'kind': 'profile'}),
                 json.dumps({'schema_version': 1, 'kind': 'compare'}),
                 json.dumps({'schema_version': 1, 'kind': 'profile'})):
        try:
            report_from_json(text)
        except ValidationError:
            continue
        assert False, text


def test_compare_adds_reference():
    base = parse_run_spec("arch: mobilenet_v2\nmethod: lora\n")
    specs = [base, base.with_peft(method='bnh')]
    table = cmd_compare(specs, max_workers=2)
    assert [row.method for row in table.rows] == ['fft', 'lora', 'bnh']
    fft = table.row('fft')
    assert fft.deltas['flops_total'] == 0.0 and fft.deltas['memory_total'] == 0.0
    assert table.row('bnh').deltas['memory_total'] < table.row('lora').deltas['memory_total'] < 0
    assert table.row('lora').deltas['flops.fwd'] > 0


def test_compare_rejects_mixed_architectures():
    specs = [parse_run_spec("arch: resnet18\n"), parse_run_spec("arch: mobilenet_v2\n")]
    try:
        cmd_compare(specs)
    except ValidationError:
        pass
    else:
        assert False


def test_sweep_is_linear():
    spec = parse_run_spec("arch: resnet18\nmethod: lora\n")
    result = cmd_sweep(spec, [4, 1, 2, 2], max_workers=2)
    assert [p.rank for p in result.points] == [1, 2, 4]
    slope, r2 = result.fits['flops']
    assert slope > 0 and r2 > 0.999999
    assert result.fits['memory'][1] > 0.999999
    # galore 各点按最大秩筛选投影集合，深度卷积 (9 列) 不会在 r=8 与 r=12 之间进出
    galore = cmd_sweep(parse_run_spec("arch: mobilenet_v2\nmethod: galore\n"), [4, 8, 12], max_workers=2)
    assert galore.fits['memory'][1] > 0.999999 and galore.fits['flops'][1] > 0.999999
    slope, r2 = linear_fit([1, 2, 3], [3, 5, 7])
    assert abs(slope - 2.0) < 1e-9 and abs(r2 - 1.0) < 1e-9
    assert linear_fit([4], [10]) == (0.0, 1.0)
    try:
        cmd_sweep(parse_run_spec("arch: resnet18\n"), [1, 2])
    except ValidationError:
        pass
    else:
        assert False, "fft 不能做秩扫描"


def test_plan_filters_and_orders():
    base = parse_run_spec("arch: mobilenet_v2\n")
    specs = [base.with_peft(method=m, optimizer=None) for m in ('fft', 'lora', 'dora', 'galore', 'bnh')]
    fft_memory = cmd_profile(base).memory.total
    result = cmd_plan(specs, memory_budget=fft_memory)
    methods = [c.method for c in result.candidates]
    assert 'dora' not in methods
    assert {'fft', 'lora', 'galore', 'bnh'} <= set(methods)
    flops = [c.flops_total for c in result.candidates]
    assert flops == sorted(flops)

    assert cmd_plan(specs, memory_budget=1).candidates == ()
    assert '没有满足预算的方法' in render(cmd_plan(specs, memory_budget=1), 'table')
    try:
        cmd_plan(specs, flops_budget=0)
    except ValidationError:
        pass
    else:
        assert False


def test_cli_overrides_spec_file():
    path = _write("arch: resnet18\nmethod: lora\npeft:\n  rank: 2\n  alpha: 8\n")
    try:
        args = build_parser().parse_args(['profile', '--spec', path, '--rank', '3', '--bytes-per-element', '2'])
        spec = ProfilerApp(args).specs()[0]
        assert spec.method == 'lora'
        assert spec.peft.rank == 3 and spec.peft.alpha == 8
        assert spec.bytes_per_element == 2
        legacy = build_parser().parse_args(['profile', '--spec', path, '--width', '8'])
        assert ProfilerApp(legacy).specs()[0].bytes_per_element == 8
    finally:
        os.remove(path)


def test_main_profile_json():
    out = _temp_out()
    try:
        code = main(['profile', '--arch', 'resnet18', '--method', 'lora', '--rank', '4',
                     '--format', 'json', '--out', out])
        assert code == EXIT_OK
        with open(out, 'r', encoding='utf-8') as f:
            doc = json.load(f)
        assert doc['kind'] == 'profile'
        assert doc['spec']['peft']['rank'] == 4
    finally:
        os.remove(out)


def test_main_compare_csv():
    out = _temp_out('.csv')
    try:
        code = main(['compare', '--arch', 'mobilenet_v2', '--method', 'lora', '--method', 'bnh',
                     '--format', 'csv', '--out', out])
        assert code == EXIT_OK
        with open(out, 'r', encoding='utf-8') as f:
            assert f.readline().strip() == 'section,key,value'
    finally:
        os.remove(out)


def test_main_graph_export():
    out = _temp_out()
    try:
        assert main(['graph', '--arch', 'mobilenet_v3_large', '--num-classes', '10', '--out', out]) == EXIT_OK
        with open(out, 'r', encoding='utf-8') as f:
            graph = graph_from_dict(json.load(f))
        assert graph.name == 'mobilenet_v3_large'
    finally:
        os.remove(out)


def test_main_exit_codes():
    assert main([]) == EXIT_USAGE
    assert main(['bogus']) == EXIT_USAGE
    assert main(['profile']) == EXIT_USAGE
    assert main(['sweep', '--arch', 'resnet18', '--method', 'lora', '--ranks', '1,x']) == EXIT_USAGE
    assert main(['profile', '--arch', 'resnet18', '--method', 'lora', '--rank', '0']) == EXIT_VALIDATION
    assert main(['profile', '--spec', '/nonexistent/run.yaml']) == EXIT_VALIDATION
    bad = _write("arch: resnet18\nmethod: lora\npeft:\n  rank: -1\n")
    try:
        assert main(['profile', '--spec', bad]) == EXIT_VALIDATION
    finally:
        os.remove(bad)


def test_parity_detects_wrong_constant():
    graphs = toy_graphs(0, 1)
    original = flops_module.C_ADAM
    try:
        flops_module.C_ADAM = original + 1
        assert check_flops_parity(graphs, seed=0)
    finally:
        flops_module.C_ADAM = original
    assert check_flops_parity(graphs, seed=0) == []


def test_verify_exit_codes():
    out = _temp_out()
    original = flops_module.C_ADAM
    try:
        assert main(['verify', '--toy-graphs', '1', '--seed', '2', '--format', 'json', '--out', out]) == EXIT_OK
        with open(out, 'r', encoding='utf-8') as f:
            doc = json.load(f)
        assert doc['passed'] is True
        assert doc['rss_bytes'] > 0

        flops_module.C_ADAM = original + 1
        assert main(['verify', '--toy-graphs', '1', '--seed', '2', '--out', out]) == EXIT_VERIFY_FAILURE
    finally:
        flops_module.C_ADAM = original
        os.remove(out)


def main_tests():
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
    sys.exit(main_tests())
