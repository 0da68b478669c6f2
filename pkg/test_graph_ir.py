#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
层图测试：构建、形状推断、参数统计、校验诊断、导出导入
"""

import json
import logging
import os
import sys

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.graph.builders import build_model
from src.graph.ir import (LayerNode, ModelGraph, TensorShape, graph_from_dict, graph_to_dict, infer_shapes,
                          param_count, validate)
from src.utils.error_handler import GraphError, ShapeError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('test_graph_ir')


def _conv(node_id, inputs, c_in, c_out, **kw):
    return LayerNode(id=node_id, kind='conv2d', inputs=inputs, in_channels=c_in, out_channels=c_out, **kw)


def test_published_parameter_counts():
    assert param_count(build_model('resnet18')) == 11689512
    assert param_count(build_model('mobilenet_v2')) == 3504872
    assert param_count(build_model('mobilenet_v3_large')) == 5483032


def test_classifier_shapes():
    for arch in ('resnet18', 'mobilenet_v2', 'mobilenet_v3_large'):
        graph = build_model(arch, num_classes=10)
        assert graph.node(graph.output_id).output_shape == TensorShape(1, 10, 1, 1)
        assert graph.head_ids


def test_resnet_stem_and_downsample_shapes():
    graph = build_model('resnet18')
    assert graph.node('conv1').output_shape == TensorShape(1, 64, 112, 112)
    assert graph.node('maxpool').output_shape == TensorShape(1, 64, 56, 56)
    assert graph.node('layer4.1.relu2').output_shape == TensorShape(1, 512, 7, 7)
    assert graph.node('fc').in_features == 512


def test_depthwise_layers_in_mobilenet_v2():
    graph = build_model('mobilenet_v2')
    depthwise = [node for node in graph.nodes if node.is_depthwise]
    assert len(depthwise) == 17
    assert all(node.groups == node.in_channels == node.out_channels for node in depthwise)


def test_other_input_resolution():
    graph = build_model('mobilenet_v2', input_shape=TensorShape(2, 3, 96, 96))
    assert graph.node('features.18.conv').output_shape == TensorShape(2, 1280, 3, 3)
    assert param_count(graph) == 3504872


def test_infer_shapes_is_idempotent():
    graph = build_model('resnet18')
    again = infer_shapes(graph)
    assert again == infer_shapes(again)
    assert [n.output_shape for n in again.nodes] == [n.output_shape for n in graph.nodes]


def test_trainable_only_filter():
    graph = build_model('resnet18')
    assert param_count(graph, 'trainable_only', ['fc.weight', 'fc.bias']) == 512 * 1000 + 1000
    assert param_count(graph, 'trainable_only', []) == 0


def test_shape_error_names_node():
    graph = ModelGraph(nodes=(
        _conv('a', ('input',), 3, 8, kernel=3, padding=1),
        _conv('b', ('a',), 16, 8, kernel=3, padding=1),
    ))
    try:
        infer_shapes(graph)
    except ShapeError as e:
        assert e.node_id == 'b'
    else:
        assert False, "通道数不匹配时应抛出 ShapeError"


def test_residual_shape_mismatch():
    graph = ModelGraph(nodes=(
        _conv('a', ('input',), 3, 8, kernel=3, padding=1),
        _conv('b', ('a',), 8, 8, kernel=3, stride=2, padding=1),
        LayerNode(id='add', kind='residual_add', inputs=('b', 'a')),
    ))
    diags = validate(graph)
    assert [d.code for d in diags] == ['shape']
    assert diags[0].node_id == 'add'


def test_validate_collects_every_violation():
    graph = ModelGraph(nodes=(
        _conv('a', ('input',), 3, 8, groups=2),
        LayerNode(id='a', kind='activation', inputs=('a',), fn='gelu'),
        LayerNode(id='p', kind='softmax', inputs=('a',)),
        LayerNode(id='q', kind='residual_add', inputs=('ghost',)),
    ), head_ids=('nope',))
    codes = {d.code for d in validate(graph)}
    assert {'duplicate-id', 'group-divisibility', 'bad-attribute', 'unknown-kind', 'arity',
            'unknown-input', 'head'} <= codes


def test_cycle_detection():
    graph = ModelGraph(nodes=(
        LayerNode(id='a', kind='activation', inputs=('b',), fn='relu'),
        LayerNode(id='b', kind='activation', inputs=('a',), fn='relu'),
        LayerNode(id='c', kind='activation', inputs=('input',), fn='relu'),
    ))
    assert 'cycle' in {d.code for d in validate(graph)}
    try:
        graph.topological_order()
    except GraphError:
        pass
    else:
        assert False, "环应当被检测出来"


def test_unknown_architecture():
    try:
        build_model('vgg16')
    except GraphError as e:
        assert 'vgg16' in str(e)
    else:
        assert False


def test_toy_cnn_builder():
    graph = build_model('toy_cnn', 2, layers=[
        {'kind': 'conv2d', 'out_channels': 4, 'kernel': 3},
        {'kind': 'batchnorm2d'},
        {'kind': 'activation', 'fn': 'relu'},
        {'kind': 'conv2d', 'kernel': 3, 'depthwise': True},
        {'kind': 'residual_add', 'from': 2},
        {'kind': 'avgpool'},
        {'kind': 'linear'},
    ])
    assert graph.input_shape == TensorShape(1, 3, 16, 16)
    assert graph.node('3.conv2d').groups == 4
    assert graph.head_ids == ('6.linear',)
    assert graph.node(graph.output_id).output_shape == TensorShape(1, 2, 1, 1)


def test_toy_cnn_rejects_unknown_fields():
    try:
        build_model('toy_cnn', 2, layers=[{'kind': 'conv2d', 'colour': 'red'}])
    except GraphError as e:
        assert 'colour' in str(e)
    else:
        assert False


def test_export_round_trip():
    graph = build_model('mobilenet_v3_large', num_classes=10)
    doc = json.loads(json.dumps(graph_to_dict(graph)))
    assert graph_from_dict(doc) == graph


def test_tensor_shape_parse():
    assert TensorShape.parse('224x224') == TensorShape(1, 3, 224, 224)
    assert TensorShape.parse('2x3x32x32') == TensorShape(2, 3, 32, 32)
    assert str(TensorShape(1, 3, 8, 8)) == '1x3x8x8'
    for bad in ('224', 'axb', '0x3x8x8'):
        try:
            TensorShape.parse(bad)
        except ShapeError:
            continue
        assert False, bad


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
