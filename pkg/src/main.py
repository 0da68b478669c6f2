#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
peft-profiler 命令行入口

子命令: profile / compare / sweep / plan / verify / graph
退出码: 0 成功, 1 用法错误, 2 校验错误, 3 校验套件失败
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .graph.builders import ARCHITECTURES, build_model
from .graph.ir import TensorShape, graph_to_dict
from .peft.config import METHODS, OPTIMIZER_RULES
from .report.commands import cmd_compare, cmd_plan, cmd_profile, cmd_sweep
from .report.emit import render
from .report.runspec import RunSpec, load_run_spec, parse_run_spec
from .report.verify import cmd_verify
from .utils.config import VALID_CONVENTIONS, VALID_FORMATS, Config
from .utils.error_handler import (EXIT_OK, EXIT_VERIFY_FAILURE, ErrorHandler, ValidationError,
                                  exit_code_for)
from .utils.logger import setup_logger

PACKAGE_LOGGER = __name__.split('.')[0]


class UsageError(Exception):
    """命令行用法错误（退出码 1）"""


class ProfilerArgumentParser(argparse.ArgumentParser):
    """参数错误时抛异常而不是直接退出，由 main 统一给出退出码"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ranks(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"无效的秩列表: {text!r}")


def _add_spec_options(parser: argparse.ArgumentParser, multi_method: bool = False):
    parser.add_argument('--spec', action='append', default=[], help='YAML 运行规格文件（可重复）')
    parser.add_argument('--arch', choices=ARCHITECTURES, help='模型架构')
    if multi_method:
        parser.add_argument('--method', action='append', choices=METHODS, default=[], help='PEFT 方法（可重复）')
    else:
        parser.add_argument('--method', choices=METHODS, help='PEFT 方法')
    parser.add_argument('--rank', type=int, help='适配器 / 梯度子空间的秩')
    parser.add_argument('--alpha', type=float, help='LoRA/DoRA 缩放 alpha')
    parser.add_argument('--galore-scale', type=float, help='GaLore 更新缩放')
    parser.add_argument('--galore-period', type=int, help='GaLore 子空间刷新周期 T')
    parser.add_argument('--optimizer', choices=OPTIMIZER_RULES, help='优化器规则')
    parser.add_argument('--num-classes', type=int, help='分类数')
    parser.add_argument('--input', help='输入形状 HxW 或 NxCxHxW')
    parser.add_argument('--input-grad', choices=VALID_CONVENTIONS, help='输入梯度计数约定')
    parser.add_argument('--bytes-per-element', '--width', dest='bytes_per_element', type=int,
                        help='每元素字节数（--width 为旧名）')
    parser.add_argument('--format', choices=VALID_FORMATS, help='输出格式')
    parser.add_argument('--out', help='输出文件，缺省写到标准输出')


def build_parser() -> ProfilerArgumentParser:
    parser = ProfilerArgumentParser(prog='peft-profiler', description='PEFT 方法训练开销剖析')
    parser.add_argument('--config', help='.env 格式配置文件')
    parser.add_argument('--debug', action='store_true', help='调试日志')
    parser.add_argument('--log-file', help='日志文件')
    sub = parser.add_subparsers(dest='command', parser_class=ProfilerArgumentParser)

    _add_spec_options(sub.add_parser('profile', help='剖析一个 (架构, 方法)'))
    _add_spec_options(sub.add_parser('compare', help='多方法对比（相对 fft）'), multi_method=True)

    sweep = sub.add_parser('sweep', help='秩扫描')
    _add_spec_options(sweep)
    sweep.add_argument('--ranks', type=_ranks, default=[1, 2, 4, 8, 16], help='逗号分隔的秩，如 1,2,4')

    plan = sub.add_parser('plan', help='按预算筛选方法')
    _add_spec_options(plan, multi_method=True)
    plan.add_argument('--memory-budget', type=int, help='内存预算（字节）')
    plan.add_argument('--flops-budget', type=int, help='FLOPs 预算')

    verify = sub.add_parser('verify', help='运行校验套件')
    verify.add_argument('--seed', type=int, help='随机种子')
    verify.add_argument('--toy-graphs', type=int, help='随机玩具网络个数')
    verify.add_argument('--format', choices=VALID_FORMATS, help='输出格式')
    verify.add_argument('--out', help='输出文件')

    graph = sub.add_parser('graph', help='导出层图 JSON')
    graph.add_argument('--arch', choices=ARCHITECTURES, required=True)
    graph.add_argument('--num-classes', type=int, default=1000)
    graph.add_argument('--input', help='输入形状 HxW 或 NxCxHxW')
    graph.add_argument('--out', help='输出文件')
    return parser


class ProfilerApp:
    """一次命令行调用"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = Config(args.config)
        if args.debug:
            self.config.set('LOG_LEVEL', 'DEBUG')
        if args.log_file:
            self.config.set('LOG_FILE', args.log_file)
        setup_logger(PACKAGE_LOGGER, log_file=self.config.get('LOG_FILE') or None,
                     level=self.config.get('LOG_LEVEL', 'INFO'))
        self.logger = logging.getLogger(__name__)
        self.errors = ErrorHandler(self.logger)
        if not self.config.validate():
            raise ValidationError("配置校验失败", {'config': self.config.loaded_from})

    def _overrides(self, method: Optional[str] = None) -> Dict[str, Any]:
        """命令行给出的字段，按运行规格文档的键组织"""
        args = self.args
        doc: Dict[str, Any] = {}
        peft: Dict[str, Any] = {}
        for key, value in (('arch', args.arch), ('num_classes', args.num_classes), ('input', args.input),
                           ('method', method), ('optimizer', args.optimizer), ('input_grad', args.input_grad),
                           ('bytes_per_element', args.bytes_per_element), ('format', args.format)):
            if value is not None:
                doc[key] = value
        for key, value in (('rank', args.rank), ('alpha', args.alpha), ('galore_scale', args.galore_scale),
                           ('galore_period', args.galore_period)):
            if value is not None:
                peft[key] = value
        if peft:
            doc['peft'] = peft
        return doc

    def _spec_from(self, path: Optional[str], method: Optional[str]) -> RunSpec:
        overrides = self._overrides(method)
        base: Dict[str, Any] = {}
        if path:
            parsed = load_run_spec(path, self.config)
            if not overrides:
                return parsed
            base = parsed.to_dict()
            # to_dict 不含输出格式
            base['format'] = parsed.output_format
        peft = dict(base.pop('peft', {}) or {})
        peft.update(overrides.pop('peft', {}))
        base.update(overrides)
        if peft:
            base['peft'] = peft
        if 'method' in overrides and 'optimizer' not in overrides:
            base.pop('optimizer', None)
        if 'arch' not in base:
            raise UsageError("需要 --spec 或 --arch")
        return parse_run_spec(yaml.safe_dump(base, sort_keys=False), self.config)

    def specs(self) -> List[RunSpec]:
        methods = self.args.method if isinstance(self.args.method, list) else [self.args.method]
        paths = self.args.spec or [None]
        result = [self._spec_from(path, method) for path in paths for method in (methods or [None])]
        return result

    def emit(self, report, fmt: Optional[str] = None):
        text = render(report, fmt or self.config.output_format)
        out = getattr(self.args, 'out', None)
        if out:
            directory = os.path.dirname(out)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(out, 'w', encoding='utf-8') as f:
                f.write(text + '\n')
            self.logger.info(f"报告已写入 {out}")
        else:
            print(text)

    def run(self) -> int:
        command = self.args.command
        workers = self.config.max_workers
        if command == 'profile':
            spec = self.specs()[0]
            self.emit(cmd_profile(spec), self.args.format or spec.output_format)
        elif command == 'compare':
            specs = self.specs()
            self.emit(cmd_compare(specs, workers), self.args.format or specs[0].output_format)
        elif command == 'sweep':
            spec = self.specs()[0]
            self.emit(cmd_sweep(spec, self.args.ranks, workers), self.args.format or spec.output_format)
        elif command == 'plan':
            specs = self.specs()
            if not self.args.method and not self.args.spec:
                specs = [specs[0].with_peft(method=m, optimizer=None) for m in METHODS]
            result = cmd_plan(specs, self.args.memory_budget, self.args.flops_budget, workers)
            self.emit(result, self.args.format or specs[0].output_format)
        elif command == 'verify':
            summary = cmd_verify(self.config, self.args.seed, self.args.toy_graphs)
            self.emit(summary, self.args.format)
            return EXIT_OK if summary.passed else EXIT_VERIFY_FAILURE
        elif command == 'graph':
            shape = TensorShape.parse(self.args.input) if self.args.input else None
            graph = build_model(self.args.arch, self.args.num_classes, shape)
            text = json.dumps(graph_to_dict(graph), indent=2, ensure_ascii=False)
            if self.args.out:
                with open(self.args.out, 'w', encoding='utf-8') as f:
                    f.write(text + '\n')
            else:
                print(text)
        else:
            raise UsageError("缺少子命令: profile / compare / sweep / plan / verify / graph")
        return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """命令行入口，返回退出码"""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return exit_code_for(e)

    try:
        app = ProfilerApp(args)
    except Exception as e:
        print(f"初始化失败: {e}", file=sys.stderr)
        return exit_code_for(e)

    try:
        return app.run()
    except UsageError as e:
        app.logger.error(str(e))
        return exit_code_for(e)
    except Exception as e:
        app.errors.handle(e, {'command': args.command})
        return app.errors.exit_code


if __name__ == '__main__':
    sys.exit(main())
