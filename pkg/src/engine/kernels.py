#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
numpy 计算核

每个核按操作数形状把标量运算次数记到 OpCounter 上，计价规则与解析模型一致。
张量布局 NCHW，float64。
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..profiler.flops import BN_BWD_BIAS, BN_BWD_INPUT, BN_BWD_WEIGHT, BN_FWD, Phase

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

FWD = Phase.FWD
BWD_INPUT = Phase.BWD_INPUT
BWD_WEIGHT = Phase.BWD_WEIGHT
OPT = Phase.OPT


def out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp: np.ndarray, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, k, k) 视图"""
    view = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :ho, :wo]


class Kernels:
    """绑定到一个 OpCounter 的计算核集合"""

    def __init__(self, counter):
        self.counter = counter

    def tick(self, phase, layer_id: str, n: int):
        self.counter.add(phase, layer_id, n)

    # 卷积

    def conv2d(self, layer_id: str, x: np.ndarray, w: np.ndarray, stride: int = 1,
               padding: int = 0, groups: int = 1) -> np.ndarray:
        n, c_in, h, wd = x.shape
        c_out, c_per, k, _ = w.shape
        ho, wo = out_size(h, k, stride, padding), out_size(wd, k, stride, padding)
        cols = _windows(_pad(x, padding), k, stride, ho, wo)
        cols = cols.reshape(n, groups, c_in // groups, ho, wo, k, k)
        wg = w.reshape(groups, c_out // groups, c_per, k, k)
        y = np.einsum('ngchwij,gocij->ngohw', cols, wg, optimize=True).reshape(n, c_out, ho, wo)
        self.tick(FWD, layer_id, 2 * y.size * c_per * k * k)
        return y

    def conv2d_weight_grad(self, layer_id: str, x: np.ndarray, dy: np.ndarray, w_shape: Tuple[int, ...],
                           stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
        n, c_in = x.shape[:2]
        c_out, c_per, k, _ = w_shape
        ho, wo = dy.shape[2:]
        cols = _windows(_pad(x, padding), k, stride, ho, wo)
        cols = cols.reshape(n, groups, c_in // groups, ho, wo, k, k)
        dyg = dy.reshape(n, groups, c_out // groups, ho, wo)
        dw = np.einsum('ngchwij,ngohw->gocij', cols, dyg, optimize=True).reshape(w_shape)
        self.tick(BWD_WEIGHT, layer_id, 2 * dy.size * c_per * k * k)
        return dw

    def conv2d_input_grad(self, layer_id: str, dy: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...],
                          stride: int = 1, padding: int = 0, groups: int = 1,
                          dense_cost: bool = False) -> np.ndarray:
        """dense_cost 为真时按未分组价格计数（结果仍是分组卷积的梯度）"""
        n, c_in, h, wd = x_shape
        c_out, c_per, k, _ = w.shape
        ho, wo = dy.shape[2:]
        dxp = np.zeros((n, groups, c_per, h + 2 * padding, wd + 2 * padding))
        dyg = dy.reshape(n, groups, c_out // groups, ho, wo)
        wg = w.reshape(groups, c_out // groups, c_per, k, k)
        for i in range(k):
            for j in range(k):
                part = np.einsum('ngohw,goc->ngchw', dyg, wg[..., i, j], optimize=True)
                dxp[..., i:i + stride * ho:stride, j:j + stride * wo:stride] += part
        dx = dxp.reshape(n, c_in, h + 2 * padding, wd + 2 * padding)
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        priced = c_in if dense_cost else c_per
        self.tick(BWD_INPUT, layer_id, 2 * dy.size * priced * k * k)
        return np.ascontiguousarray(dx)

    # 全连接

    def linear(self, layer_id: str, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        self.tick(FWD, layer_id, 2 * x2.shape[0] * w.shape[0] * w.shape[1])
        return (x2 @ w.T).reshape(x2.shape[0], w.shape[0], 1, 1)

    def linear_weight_grad(self, layer_id: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        d2 = dy.reshape(dy.shape[0], -1)
        self.tick(BWD_WEIGHT, layer_id, 2 * x2.shape[0] * x2.shape[1] * d2.shape[1])
        return d2.T @ x2

    def linear_input_grad(self, layer_id: str, dy: np.ndarray, w: np.ndarray,
                          x_shape: Tuple[int, ...]) -> np.ndarray:
        d2 = dy.reshape(dy.shape[0], -1)
        self.tick(BWD_INPUT, layer_id, 2 * d2.shape[0] * w.shape[0] * w.shape[1])
        return (d2 @ w).reshape(x_shape)

    # 偏置与逐元素

    def bias_add(self, layer_id: str, y: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.tick(FWD, layer_id, y.size)
        return y + b.reshape(1, -1, 1, 1)

    def bias_grad(self, layer_id: str, dy: np.ndarray) -> np.ndarray:
        self.tick(BWD_WEIGHT, layer_id, dy.size)
        return dy.sum(axis=(0, 2, 3))

    def scale(self, phase, layer_id: str, x: np.ndarray, factor: float) -> np.ndarray:
        self.tick(phase, layer_id, x.size)
        return factor * x

    def add(self, phase, layer_id: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.tick(phase, layer_id, a.size)
        return a + b

    def multiply(self, phase, layer_id: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = a * b
        self.tick(phase, layer_id, out.size)
        return out

    def matmul(self, phase, layer_id: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.tick(phase, layer_id, 2 * a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    def grouped_product(self, phase, layer_id: str, b: np.ndarray, a: np.ndarray, groups: int) -> np.ndarray:
        """B@A 落在分组块上的部分，形状同分组权重

        b (C_out, r)，a (r, C_in, ...) -> (C_out, C_in/g, ...)；groups=1 即普通矩阵乘。
        """
        c_out, r = b.shape
        per = a.shape[1] // groups
        ag = a.reshape(r, groups, per, -1)
        bg = b.reshape(groups, c_out // groups, r)
        out = np.einsum('gor,rgjk->gojk', bg, ag, optimize=True)
        self.tick(phase, layer_id, 2 * r * out.size)
        return out.reshape((c_out, per) + a.shape[2:])

    def grouped_product_grads(self, phase, layer_id: str, d: np.ndarray, b: np.ndarray, a: np.ndarray,
                              groups: int) -> Tuple[np.ndarray, np.ndarray]:
        """grouped_product 的反向，返回 (dB, dA)"""
        c_out, r = b.shape
        per = a.shape[1] // groups
        dg = d.reshape(groups, c_out // groups, per, -1)
        ag = a.reshape(r, groups, per, -1)
        bg = b.reshape(groups, c_out // groups, r)
        d_b = np.einsum('gojk,rgjk->gor', dg, ag, optimize=True).reshape(c_out, r)
        d_a = np.einsum('gor,gojk->rgjk', bg, dg, optimize=True).reshape(a.shape)
        self.tick(phase, layer_id, 4 * r * d.size)
        return d_b, d_a

    def accumulate(self, layer_id: str, total: Optional[np.ndarray], g: np.ndarray) -> np.ndarray:
        """梯度累加：已有梯度时计一次逐元素加法"""
        if total is None:
            return g
        self.tick(BWD_INPUT, layer_id, g.size)
        return total + g

    # BN（训练模式）

    def batchnorm_train(self, layer_id: str, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                        running_mean: np.ndarray, running_var: np.ndarray,
                        momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> np.ndarray:
        """批统计量归一化并原地更新 running 统计量（统计量归约不计数）"""
        count = x.size // x.shape[1]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        x_hat = (x - mean.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + eps)
        self.tick(FWD, layer_id, BN_FWD * x.size)
        return gamma.reshape(1, -1, 1, 1) * x_hat + beta.reshape(1, -1, 1, 1)

    def batchnorm_eval(self, layer_id: str, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       running_mean: np.ndarray, running_var: np.ndarray, eps: float = BN_EPS) -> np.ndarray:
        x_hat = (x - running_mean.reshape(1, -1, 1, 1)) / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
        self.tick(FWD, layer_id, BN_FWD * x.size)
        return gamma.reshape(1, -1, 1, 1) * x_hat + beta.reshape(1, -1, 1, 1)

    def batchnorm_grad(self, layer_id: str, x: np.ndarray, gamma: np.ndarray, dy: np.ndarray,
                       need_dx: bool, need_dgamma: bool, need_dbeta: bool, eps: float = BN_EPS):
        count = x.size // x.shape[1]
        axes = (0, 2, 3)
        mean = x.mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=axes, keepdims=True) + eps)
        x_hat = (x - mean) * inv_std
        dx = dgamma = dbeta = None
        if need_dgamma:
            dgamma = (dy * x_hat).sum(axis=axes)
            self.tick(BWD_WEIGHT, layer_id, BN_BWD_WEIGHT * x.size)
        if need_dbeta:
            dbeta = dy.sum(axis=axes)
            self.tick(BWD_WEIGHT, layer_id, BN_BWD_BIAS * x.size)
        if need_dx:
            dxh = dy * gamma.reshape(1, -1, 1, 1)
            dx = inv_std / count * (count * dxh - dxh.sum(axis=axes, keepdims=True)
                                    - x_hat * (dxh * x_hat).sum(axis=axes, keepdims=True))
            self.tick(BWD_INPUT, layer_id, BN_BWD_INPUT * x.size)
        return dx, dgamma, dbeta

    # 激活

    def activation(self, layer_id: str, fn: str, x: np.ndarray) -> np.ndarray:
        self.tick(FWD, layer_id, x.size)
        if fn == 'relu':
            return np.maximum(x, 0.0)
        if fn == 'relu6':
            return np.clip(x, 0.0, 6.0)
        if fn == 'hardswish':
            return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
        if fn == 'hardsigmoid':
            return np.clip(x + 3.0, 0.0, 6.0) / 6.0
        raise ValueError(f"未知激活函数: {fn}")

    def activation_grad(self, layer_id: str, fn: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        self.tick(BWD_INPUT, layer_id, x.size)
        if fn == 'relu':
            return dy * (x > 0)
        if fn == 'relu6':
            return dy * ((x > 0) & (x < 6))
        if fn == 'hardswish':
            slope = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
            return dy * slope
        if fn == 'hardsigmoid':
            return dy * (((x > -3.0) & (x < 3.0)) / 6.0)
        raise ValueError(f"未知激活函数: {fn}")

    # 池化

    def maxpool(self, layer_id: str, x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
        ho = out_size(x.shape[2], kernel, stride, padding)
        wo = out_size(x.shape[3], kernel, stride, padding)
        cols = _windows(_pad(x, padding, -np.inf), kernel, stride, ho, wo)
        y = cols.max(axis=(4, 5))
        self.tick(FWD, layer_id, y.size * kernel * kernel)
        return y

    def maxpool_grad(self, layer_id: str, x: np.ndarray, dy: np.ndarray, kernel: int,
                     stride: int, padding: int) -> np.ndarray:
        """梯度送往窗口内第一个最大值位置"""
        n, c, h, w = x.shape
        ho, wo = dy.shape[2:]
        cols = _windows(_pad(x, padding, -np.inf), kernel, stride, ho, wo)
        winner = cols.reshape(n, c, ho, wo, kernel * kernel).argmax(axis=4)
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dy * (winner == i * kernel + j)
        self.tick(BWD_INPUT, layer_id, dy.size)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(dxp)

    def avgpool(self, layer_id: str, x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
        """kernel 为 0 时全局平均；窗口平均计入填充"""
        if kernel == 0:
            self.tick(FWD, layer_id, x.size)
            return x.mean(axis=(2, 3), keepdims=True)
        ho = out_size(x.shape[2], kernel, stride, padding)
        wo = out_size(x.shape[3], kernel, stride, padding)
        y = _windows(_pad(x, padding), kernel, stride, ho, wo).mean(axis=(4, 5))
        self.tick(FWD, layer_id, y.size * kernel * kernel)
        return y

    def avgpool_grad(self, layer_id: str, dy: np.ndarray, x_shape: Tuple[int, ...], kernel: int,
                     stride: int, padding: int) -> np.ndarray:
        n, c, h, w = x_shape
        if kernel == 0:
            self.tick(BWD_INPUT, layer_id, n * c * h * w)
            return np.broadcast_to(dy / (h * w), x_shape).copy()
        ho, wo = dy.shape[2:]
        share = dy / (kernel * kernel)
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        self.tick(BWD_INPUT, layer_id, dy.size * kernel * kernel)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(dxp)

    # 通道缩放

    def scale_mul(self, layer_id: str, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        self.tick(FWD, layer_id, x.size)
        return x * s

    def scale_mul_grad(self, layer_id: str, x: Optional[np.ndarray], s: Optional[np.ndarray],
                       dy: np.ndarray, need_dx: bool, need_ds: bool):
        dx = ds = None
        if need_dx:
            dx = dy * s
            self.tick(BWD_INPUT, layer_id, dy.size)
        if need_ds:
            ds = (dy * x).sum(axis=(2, 3), keepdims=True)
            self.tick(BWD_INPUT, layer_id, 2 * dy.size)
        return dx, ds


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """平均交叉熵及其对 logits 的梯度（不计数）"""
    z = logits.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    n = z.shape[0]
    loss = float(-np.log(prob[np.arange(n), labels] + 1e-300).mean())
    grad = prob.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).reshape(logits.shape)
