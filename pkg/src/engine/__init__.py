# -*- coding: utf-8 -*-
"""
参考执行引擎：numpy 前向/反向、优化器、实测计数与分配账本
"""

from .counter import AllocationLedger, OpCounter, OpCountReport
from .executable import Executable, Tape, backward, forward
from .optim import OptimizerState, step
from .svd import jacobi_svd, top_left_vectors, top_right_vectors
from .train import (evaluate_loss, finite_difference_check, instrumented_counts, make_separable_dataset,
                    random_toy_layers, train_toy)
