#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
配置与基础设施测试
配置文件/环境变量的加载顺序、配置校验、错误处理与退出码、超时控制、日志文件
"""

import logging
import os
import sys
import tempfile
import time

# 添加项目根目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.utils.config import ENV_PREFIX, Config
from src.utils.error_handler import (EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_VERIFY_FAILURE, ErrorCategory,
                                     ErrorHandler, GraphError, ProfilerError, ValidationError, VerificationError,
                                     exit_code_for, handle_errors, wrap_exception)
from src.utils.logger import get_log_level_from_env, setup_logger
from src.report import verify as verify_module
from src.utils.timeout_decorator import run_with_timeout

# 配置日志
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('ConfigTest')


def _env_file(text):
    fd, path = tempfile.mkstemp(suffix='.env')
    with os.fdopen(fd, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


class _patched_env:
    """临时设置环境变量，退出时恢复"""

    def __init__(self, **values):
        self.values = values
        self.saved = {}

    def __enter__(self):
        for key, value in self.values.items():
            self.saved[key] = os.environ.get(key)
            os.environ[key] = value
        return self

    def __exit__(self, *exc):
        for key, value in self.saved.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value


def test_config_file_values():
    path = _env_file(
        "# 剖析器配置\n"
        "BYTES_PER_ELEMENT=2\n"
        "OUTPUT_FORMAT='json'\n"
        "EXTRA_RANKS=1, 2, 4\n"
        "LOG_FILE=${HOME_DIR}/profiler.log\n"
        "HOME_DIR=/tmp/peft\n"
    )
    try:
        config = Config(path, logger)
        assert config.loaded_from == path
        assert config.bytes_per_element == 2
        assert config.output_format == 'json'
        assert config.get_list('EXTRA_RANKS') == ['1', '2', '4']
        # 未定义的变量展开为空
        assert config.get('LOG_FILE') == '/profiler.log'
        assert config.input_grad_convention == 'paper'
        assert config.validate()
    finally:
        os.remove(path)


def test_prefixed_environment_wins():
    path = _env_file("MAX_WORKERS=2\n")
    try:
        with _patched_env(**{ENV_PREFIX + 'MAX_WORKERS': '8', 'INPUT_GRAD_CONVENTION': 'exact'}):
            config = Config(path, logger)
            assert config.max_workers == 8
            assert config.input_grad_convention == 'exact'
    finally:
        os.remove(path)


def test_defaults_without_file():
    config = Config('/nonexistent/config.env', logger)
    assert config.get_int('VERIFY_TOY_GRAPHS') >= 1
    assert config.get_float('VERIFY_FD_EPSILON') > 0
    assert config.get_int('NOT_A_KEY', 7) == 7
    assert config.get_bool('NOT_A_KEY', True) is True


def test_validate_rejects_bad_values():
    config = Config('/nonexistent/config.env', logger)
    for key, value in (('INPUT_GRAD_CONVENTION', 'rough'), ('OUTPUT_FORMAT', 'xml'),
                       ('BYTES_PER_ELEMENT', '0'), ('MAX_WORKERS', '-1'), ('VERIFY_FD_EPSILON', '0')):
        bad = Config('/nonexistent/config.env', logger)
        bad.set(key, value)
        assert not bad.validate(), key
    assert config.validate()


def test_exit_code_mapping():
    assert exit_code_for(ValidationError("x")) == EXIT_VALIDATION
    assert exit_code_for(GraphError("x")) == EXIT_VALIDATION
    assert exit_code_for(VerificationError("x")) == EXIT_VERIFY_FAILURE
    assert exit_code_for(RuntimeError("x")) == EXIT_USAGE


def test_error_handler_collects():
    handler = ErrorHandler(logger)
    assert handler.exit_code == EXIT_OK
    wrapped = handler.handle(KeyError('rank'), {'command': 'profile'})
    assert wrapped.category == ErrorCategory.VALIDATION
    assert wrapped.details['command'] == 'profile'
    handler.handle(VerificationError("套件失败"))
    stats = handler.get_error_stats()
    assert stats['total_errors'] == 2
    assert stats['exit_code'] == EXIT_VERIFY_FAILURE
    try:
        handler.handle(GraphError("坏图"), reraise=True)
    except GraphError:
        pass
    else:
        assert False


def test_handle_errors_decorator():
    @handle_errors(default_return=-1)
    def broken():
        raise ValueError("boom")

    @handle_errors(default_return=-1, error_categories=(ErrorCategory.GRAPH,))
    def wrong_category():
        raise ValidationError("不在捕获范围内")

    @handle_errors(reraise=True)
    def strict():
        raise ZeroDivisionError()

    assert broken() == -1
    try:
        wrong_category()
    except ValidationError:
        pass
    else:
        assert False
    try:
        strict()
    except ProfilerError as e:
        assert e.category == ErrorCategory.ENGINE
        assert isinstance(e.original_exception, ZeroDivisionError)
    else:
        assert False


def test_wrap_exception_keeps_profiler_errors():
    error = ValidationError("原样返回")
    assert wrap_exception(error, "忽略") is error
    assert wrap_exception(TypeError("t"), "m").category == ErrorCategory.VALIDATION
    assert wrap_exception(OSError("o"), "m").category == ErrorCategory.UNKNOWN


def test_run_with_timeout():
    assert run_with_timeout(lambda a, b: a + b, 2, 3, timeout_seconds=5) == 5
    assert run_with_timeout(lambda: time.sleep(2), timeout_seconds=0.1, default='timeout') == 'timeout'

    def failing():
        raise RuntimeError("suite crashed")

    assert run_with_timeout(failing, timeout_seconds=5, default=None) is None


def test_verify_suite_timeout():
    summary_func = verify_module._run_suite
    result = summary_func('slow', lambda: time.sleep(2) or [], budget=0.1)
    assert not result.passed and result.detail == '超时或执行出错'
    assert summary_func('fast', lambda: [], budget=5).passed
    failing = summary_func('failing', lambda: ['图 0 / lora: 不一致'], budget=5)
    assert not failing.passed and '1 处失败' in failing.detail


def test_resident_bytes_tolerates_psutil_errors():
    assert verify_module.resident_bytes() > 0
    original = verify_module.psutil.Process

    def denied():
        raise verify_module.psutil.AccessDenied()

    try:
        verify_module.psutil.Process = denied
        assert verify_module.resident_bytes() == 0
    finally:
        verify_module.psutil.Process = original


def test_logger_file_and_level():
    directory = tempfile.mkdtemp()
    path = os.path.join(directory, 'logs', 'profiler.log')
    log = setup_logger('peft_profiler_test', log_file=path, level='DEBUG')
    log.debug("写入日志文件")
    for handler in log.handlers:
        handler.flush()
    with open(path, 'r', encoding='utf-8') as f:
        assert '写入日志文件' in f.read()
    assert log.level == logging.DEBUG
    assert not log.propagate
    assert get_log_level_from_env('warn') == logging.WARNING
    for handler in list(log.handlers):
        handler.close()
        log.removeHandler(handler)


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
