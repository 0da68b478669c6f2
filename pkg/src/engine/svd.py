#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
单边 Jacobi (Hestenes) SVD
"""

import logging
from typing import Callable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# 求 zeta、t、c、s 的标量运算
ROTATION_OPS = 10


def _complete_basis(u: np.ndarray, sigma: np.ndarray, tol: float) -> np.ndarray:
    """奇异值为零的列换成与其余列正交的单位向量"""
    good = sigma > tol
    if np.all(good):
        return u
    m, k = u.shape
    kept = int(good.sum())
    q, _ = np.linalg.qr(np.hstack([u[:, good], np.eye(m)]))
    result = u.copy()
    result[:, ~good] = q[:, kept:k]
    return result


def jacobi_svd(a: np.ndarray, tol: Optional[float] = None, max_sweeps: int = 60,
               tick: Optional[Callable[[int], None]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A = U diag(S) Vt，S 降序；m < n 时对 A^T 运算

    tick 给出时按实际执行的运算计数：每个列对 3 个长 m 的内积，每次旋转更新 work 与 V 的两列，
    最后的列范数与归一化。

    Returns:
        (U m x k, S k, Vt k x n)，k = min(m, n)
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if n > m:
        u, s, vt = jacobi_svd(a.T, tol, max_sweeps, tick)
        return vt.T, s, u.T

    work = a.copy()
    v = np.eye(n)
    tol = tol if tol is not None else 1e-15
    ops = 0
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                ops += 6 * m
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp, wq = work[:, p].copy(), work[:, q].copy()
                work[:, p], work[:, q] = c * wp - s * wq, s * wp + c * wq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
                ops += ROTATION_OPS + 6 * (m + n)
        if not rotated:
            break
    else:
        logger.warning(f"Jacobi SVD 在 {max_sweeps} 轮内未收敛 ({m}x{n})")

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    cutoff = 1e-12 * scale
    u = np.zeros_like(work)
    nonzero = sigma > cutoff
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    ops += 2 * m * n + m * int(nonzero.sum())
    if tick is not None:
        tick(ops)
    u = _complete_basis(u, sigma, cutoff)
    return u, sigma, v.T


def top_left_vectors(g: np.ndarray, r: int, tick: Optional[Callable[[int], None]] = None) -> np.ndarray:
    """前 r 个左奇异向量 (m x r)"""
    u, _, _ = jacobi_svd(g, tick=tick)
    return u[:, :r]


def top_right_vectors(g: np.ndarray, r: int, tick: Optional[Callable[[int], None]] = None) -> np.ndarray:
    """前 r 个右奇异向量 (n x r)"""
    _, _, vt = jacobi_svd(g, tick=tick)
    return vt[:r].T
