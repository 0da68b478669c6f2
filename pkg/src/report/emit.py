#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
报告文档与输出格式

每种报告都能转成 JSON 文档（schema_version 1）、CSV 行 (section, key, value) 和对齐的文本表。
"""

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from ..graph.ir import SCHEMA_VERSION
from ..peft.transform import ParamSummary
from ..profiler.flops import PHASES, FlopsReport
from ..profiler.memory import GROUPS, MemoryReport
from ..utils.error_handler import ValidationError

Row = Tuple[str, str, Any]


def percent_delta(value: float, reference: float) -> Optional[float]:
    """相对参考值的百分比变化，参考为 0 时无定义"""
    if reference == 0:
        return None
    return (value - reference) / reference * 100.0


def format_percent(delta: Optional[float]) -> str:
    return 'n/a' if delta is None else f"{delta:+.1f}%"


def format_count(value: int) -> str:
    return f"{value:,}"


def format_bytes(value: int) -> str:
    return f"{value / 2 ** 20:.2f} MiB"


def align(header: Sequence[str], body: Iterable[Sequence[Any]]) -> List[str]:
    """左列左对齐、其余右对齐的纯文本表"""
    rows = [list(map(str, header))] + [list(map(str, row)) for row in body]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]

    def line(row):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        return '  '.join(cells).rstrip()

    return [line(rows[0]), '  '.join('-' * w for w in widths)] + [line(row) for row in rows[1:]]


@dataclass(frozen=True)
class ProfileReport:
    """单个 (架构, 方法) 的剖析结果"""
    spec: Mapping[str, Any]
    flops: FlopsReport
    memory: MemoryReport
    params: ParamSummary
    kind: str = 'profile'

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': self.kind,
            'spec': dict(self.spec),
            'params': {'total': self.params.total, 'trainable': self.params.trainable,
                       'adapter': self.params.adapter, 'magnitude': self.params.magnitude},
            'flops': self.flops.to_dict(),
            'memory': self.memory.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'ProfileReport':
        return cls(spec=doc['spec'], flops=FlopsReport.from_dict(doc['flops']),
                   memory=MemoryReport.from_dict(doc['memory']), params=ParamSummary(**doc['params']))

    def csv_rows(self) -> List[Row]:
        rows: List[Row] = [('spec', key, value) for key, value in self.spec.items() if not isinstance(value, (dict, list))]
        rows += [('params', 'total', self.params.total), ('params', 'trainable', self.params.trainable)]
        rows += [('flops', phase, value) for phase, value in self.flops.totals.items()]
        rows.append(('flops', 'total', self.flops.total))
        if self.flops.forward:
            rows.append(('flops', 'ratio', float(self.flops.to_dict()['ratio'])))
        rows += [('memory', group, value) for group, value in self.memory.groups.items()]
        rows.append(('memory', 'total', self.memory.total))
        return rows

    def table_lines(self) -> List[str]:
        flops_doc = self.flops.to_dict()
        lines = [f"{self.spec.get('arch')} / {self.flops.method}  输入 {self.flops.input_shape}  "
                 f"约定 {self.flops.convention}",
                 f"参数: 总计 {format_count(self.params.total)}, 可训练 {format_count(self.params.trainable)} "
                 f"({self.params.fraction * 100:.2f}%)", '']
        body = [(phase, format_count(value)) for phase, value in self.flops.totals.items()]
        body.append(('total', format_count(self.flops.total)))
        lines += align(('FLOPs', 'count'), body)
        if flops_doc['ratio'] is not None:
            lines.append(f"反向/前向 = {flops_doc['ratio']:.3f} ({flops_doc['ratio_exact']})")
        lines.append('')
        body = [(group, format_count(value), format_bytes(value)) for group, value in self.memory.groups.items()]
        body.append(('total', format_count(self.memory.total), format_bytes(self.memory.total)))
        lines += align(('memory', 'bytes', ''), body)
        return lines


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    flops: Mapping[str, int]
    memory: Mapping[str, int]
    deltas: Mapping[str, Optional[float]] = field(default_factory=dict)

    @property
    def flops_total(self) -> int:
        return sum(self.flops.values())

    @property
    def memory_total(self) -> int:
        return sum(self.memory.values())


@dataclass(frozen=True)
class ComparisonTable:
    """多个方法在同一架构上的对比，delta 相对 fft"""
    arch: str
    rows: Tuple[ComparisonRow, ...]
    kind: str = 'compare'

    def row(self, method: str) -> ComparisonRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': self.kind,
            'arch': self.arch,
            'rows': [{'method': r.method, 'flops': dict(r.flops), 'flops_total': r.flops_total,
                      'memory': dict(r.memory), 'memory_total': r.memory_total, 'deltas': dict(r.deltas)}
                     for r in self.rows],
        }

    def csv_rows(self) -> List[Row]:
        rows: List[Row] = []
        for r in self.rows:
            rows += [(r.method, f"flops.{k}", v) for k, v in r.flops.items()]
            rows.append((r.method, 'flops.total', r.flops_total))
            rows += [(r.method, f"memory.{k}", v) for k, v in r.memory.items()]
            rows.append((r.method, 'memory.total', r.memory_total))
            rows += [(r.method, f"delta.{k}", v) for k, v in r.deltas.items()]
        return rows

    def table_lines(self) -> List[str]:
        phases = [p.value for p in PHASES]
        groups = [g.value for g in GROUPS]
        header = ['method'] + phases + ['FLOPs', 'dFLOPs'] + groups + ['memory', 'dmemory']
        body = []
        for r in self.rows:
            body.append([r.method] + [format_count(r.flops[p]) for p in phases]
                        + [format_count(r.flops_total), format_percent(r.deltas.get('flops_total'))]
                        + [format_count(r.memory[g]) for g in groups]
                        + [format_count(r.memory_total), format_percent(r.deltas.get('memory_total'))])
        return [f"{self.arch}: 相对 fft 的变化"] + align(header, body)


@dataclass(frozen=True)
class SweepPoint:
    rank: int
    flops_total: int
    memory_total: int
    groups: Mapping[str, int]


@dataclass(frozen=True)
class SweepResult:
    """秩扫描及线性拟合 (slope, r2)"""
    arch: str
    method: str
    points: Tuple[SweepPoint, ...]
    fits: Mapping[str, Tuple[float, float]]
    kind: str = 'sweep'

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': self.kind,
            'arch': self.arch,
            'method': self.method,
            'points': [{'rank': p.rank, 'flops_total': p.flops_total, 'memory_total': p.memory_total,
                        'memory': dict(p.groups)} for p in self.points],
            'fits': {name: {'slope': slope, 'r2': r2} for name, (slope, r2) in self.fits.items()},
        }

    def csv_rows(self) -> List[Row]:
        rows: List[Row] = []
        for p in self.points:
            rows += [(f"r={p.rank}", 'flops_total', p.flops_total), (f"r={p.rank}", 'memory_total', p.memory_total)]
        for name, (slope, r2) in self.fits.items():
            rows += [('fit', f"{name}.slope", slope), ('fit', f"{name}.r2", r2)]
        return rows

    def table_lines(self) -> List[str]:
        body = [(p.rank, format_count(p.flops_total), format_count(p.memory_total)) for p in self.points]
        lines = [f"{self.arch} / {self.method} 秩扫描"] + align(('rank', 'FLOPs', 'memory'), body)
        for name, (slope, r2) in self.fits.items():
            lines.append(f"{name}: 斜率 {slope:,.1f} / 秩, R^2 = {r2:.4f}")
        return lines


@dataclass(frozen=True)
class PlanResult:
    """满足预算的候选，按 (FLOPs, 内存) 升序"""
    arch: str
    candidates: Tuple[ComparisonRow, ...]
    memory_budget: Optional[int] = None
    flops_budget: Optional[int] = None
    kind: str = 'plan'

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'kind': self.kind,
            'arch': self.arch,
            'memory_budget': self.memory_budget,
            'flops_budget': self.flops_budget,
            'candidates': [{'method': c.method, 'flops_total': c.flops_total, 'memory_total': c.memory_total}
                           for c in self.candidates],
        }

    def csv_rows(self) -> List[Row]:
        rows: List[Row] = []
        for c in self.candidates:
            rows += [(c.method, 'flops_total', c.flops_total), (c.method, 'memory_total', c.memory_total)]
        return rows

    def table_lines(self) -> List[str]:
        if not self.candidates:
            return [f"{self.arch}: 没有满足预算的方法"]
        body = [(c.method, format_count(c.flops_total), format_bytes(c.memory_total)) for c in self.candidates]
        return [f"{self.arch}: 满足预算的方法"] + align(('method', 'FLOPs', 'memory'), body)


def render(report, fmt: str = 'table') -> str:
    """把报告渲染为 json / csv / table 文本"""
    if fmt == 'json':
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False)
    if fmt == 'csv':
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(('section', 'key', 'value'))
        writer.writerows(report.csv_rows())
        return buffer.getvalue().rstrip('\n')
    if fmt == 'table':
        return '\n'.join(report.table_lines())
    raise ValidationError(f"未知的输出格式: {fmt}")


def report_to_json(report: ProfileReport) -> str:
    return render(report, 'json')


def report_from_json(text: str) -> ProfileReport:
    """解析 profile 报告 JSON"""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"报告不是合法的 JSON: {e.msg}", {'line': e.lineno}, e)
    if doc.get('schema_version') != SCHEMA_VERSION:
        raise ValidationError(f"不支持的报告版本: {doc.get('schema_version')!r}")
    if doc.get('kind') != 'profile':
        raise ValidationError(f"期望 profile 报告，收到 {doc.get('kind')!r}")
    try:
        return ProfileReport.from_dict(doc)
    except (KeyError, TypeError) as e:
        raise ValidationError(f"报告字段缺失或类型错误: {e}", original_exception=e)
