"""Independent reference implementations used to check the torch code paths.

Everything here is plain numpy with explicit loops over bins, pixels or
kernel taps. Nothing is imported from :mod:`dcanet.dca`; the oracles
re-derive the same contracts from scratch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonDifferentiableError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def oracle_context_pool(f: np.ndarray, r: int) -> np.ndarray:
    if int(r) != r or r < 1:
        raise ValueError(f"r must be a positive integer, got {r!r}")
    f = np.asarray(f)
    n, c, h, w = f.shape
    out = np.empty((n, c, r, r), dtype=f.dtype)
    for i in range(r):
        r0 = math.floor(i * h / r)
        r1 = math.floor((i + 1) * h / r)
        if r1 <= r0:
            r1 = r0 + 1
        for j in range(r):
            c0 = math.floor(j * w / r)
            c1 = math.floor((j + 1) * w / r)
            if c1 <= c0:
                c1 = c0 + 1
            for b in range(n):
                for ch in range(c):
                    total = 0.0
                    for y in range(r0, r1):
                        for x in range(c0, c1):
                            total += float(f[b, ch, y, x])
                    out[b, ch, i, j] = total / ((r1 - r0) * (c1 - c0))
    return out


def oracle_dca_update(fs: np.ndarray, mask: np.ndarray, fs_t: np.ndarray) -> np.ndarray:
    """out[n, c, y, x] = mask * fs_t + fs, one element at a time."""
    fs, mask, fs_t = np.asarray(fs), np.asarray(mask), np.asarray(fs_t)
    if not fs.shape == mask.shape == fs_t.shape:
        raise ValueError(f"shape mismatch: {fs.shape}, {mask.shape}, {fs_t.shape}")
    out = np.empty_like(fs)
    n, c, h, w = fs.shape
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    out[b, ch, y, x] = mask[b, ch, y, x] * fs_t[b, ch, y, x] + fs[b, ch, y, x]
    return out


def oracle_conv2d(x: np.ndarray, weight: np.ndarray, padding: int) -> np.ndarray:
    """Stride-1 zero-padded convolution (cross-correlation), summed tap by tap."""
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + oh, kj:kj + ow]
            out += np.einsum("oc,nchw->nohw", weight[:, :, ki, kj], patch)
    return out


def oracle_batchnorm(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch normalisation."""
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * scale[None, :, None, None] + beta[None, :, None, None]


def oracle_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (no corner alignment)."""
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()

    def taps(size_in, size_out):
        res = []
        for d in range(size_out):
            s = (d + 0.5) * size_in / size_out - 0.5
            s = max(s, 0.0)
            i0 = min(int(math.floor(s)), size_in - 1)
            i1 = min(i0 + 1, size_in - 1)
            res.append((i0, i1, s - i0))
        return res

    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for y, (y0, y1, ly) in enumerate(taps(h, out_h)):
        for xx, (x0, x1, lx) in enumerate(taps(w, out_w)):
            top = (1 - lx) * x[:, :, y0, x0] + lx * x[:, :, y0, x1]
            bot = (1 - lx) * x[:, :, y1, x0] + lx * x[:, :, y1, x1]
            out[:, :, y, xx] = (1 - ly) * top + ly * bot
    return out


def _conv_bn_relu(x, params, prefix, padding):
    y = oracle_conv2d(x, params[f"{prefix}.0.weight"], padding)
    y = oracle_batchnorm(y, params[f"{prefix}.1.weight"], params[f"{prefix}.1.bias"],
                         params[f"{prefix}.1.running_mean"], params[f"{prefix}.1.running_var"])
    return np.maximum(y, 0)


def oracle_dca_forward(params: dict, fc: np.ndarray, fs: np.ndarray, r: int):
    """Reference DCA forward in inference mode from a dict of named numpy parameters.

    ``params`` uses the module's state-dict names. Returns
    ``(context_out, spatial_out, mask)``.
    """
    h, w = fs.shape[-2:]
    pooled = oracle_context_pool(fc, r)
    g = _conv_bn_relu(pooled, params, "context_transform.reduce", 0)
    g = _conv_bn_relu(g, params, "context_transform.mix", 1)
    g = oracle_bilinear(g, h, w)
    mask = 1.0 / (1.0 + np.exp(-g))
    t1 = _conv_bn_relu(fs, params, "spatial_transform.conv1", 1)
    t2 = _conv_bn_relu(t1, params, "spatial_transform.conv2", 1)
    residual = fs if fs.shape[1] == t2.shape[1] else t1
    fs_hat = oracle_dca_update(residual, mask, t2)
    fc_hat = np.concatenate([g, fs_hat], axis=1)
    return fc_hat, fs_hat, mask


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} at coordinate "
                f"{self.worst_index} (tolerance {self.tolerance:.1e})")


def grad_check(func: Callable[[np.ndarray], float], point, analytic_grad=None, epsilon: float = 1e-5,
               tolerance: float = 1e-4, floor: float = 1e-8, kink_tol: float = 0.1) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``func`` at ``point``.

    Relative error per coordinate is ``|a - d| / max(|a|, |d|, floor)``.
    A coordinate whose forward and backward one-sided differences disagree
    by more than ``kink_tol * max(1, |d|)`` marks a non-differentiable point
    and raises :class:`NonDifferentiableError`. If ``analytic_grad`` is None
    the report carries only the numeric gradient (error 0).
    """
    x = np.array(point, dtype=np.float64).ravel()
    f0 = float(func(x.copy()))
    if not math.isfinite(f0):
        raise NonFiniteError("function is not finite at the base point")
    numeric = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + epsilon
        fp = float(func(x.copy()))
        x[i] = old - epsilon
        fm = float(func(x.copy()))
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"function is not finite when probing coordinate {i} by +/-{epsilon}")
        numeric[i] = (fp - fm) / (2 * epsilon)
        fwd, bwd = (fp - f0) / epsilon, (f0 - fm) / epsilon
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(numeric[i])):
            raise NonDifferentiableError(
                f"one-sided differences disagree at coordinate {i} ({fwd:.4g} vs {bwd:.4g})")
    if analytic_grad is None:
        return GradCheckReport(0.0, -1, numeric, numeric, tolerance)
    a = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if a.shape != numeric.shape:
        raise ValueError(f"analytic gradient has {a.size} entries, expected {numeric.size}")
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), worst, a, numeric, tolerance)
