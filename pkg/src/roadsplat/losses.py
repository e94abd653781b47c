"""Reconstruction losses: L1 color, windowed SSIM, masked depth L1.

Weighted combinations: the original-trajectory loss carries all three terms,
the novel-trajectory loss is depth-free. SSIM enters the losses as (1 - ssim).
All gradient returns are exact for the stated forward expressions and are
validated against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2  # images live in [0, 1]
SSIM_C2 = (0.03 * 1.0) ** 2


@dataclass(frozen=True)
class LossWeights:
    """Loss weights (RGB, depth, SSIM); all non-negative."""

    lambda_rgb: float = 0.8
    lambda_depth: float = 0.1
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.lambda_rgb, self.lambda_depth, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be >= 0")


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_HALF = SSIM_WINDOW // 2


def l1_rgb(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute per-channel difference."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def l1_rgb_with_grad(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    grad = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), grad


def depth_l1(pred_depth: np.ndarray, gt_depth: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean absolute depth difference over valid pixels; 0 when none are valid."""
    if pred_depth.shape != gt_depth.shape or pred_depth.shape != valid_mask.shape:
        raise ValueError("depth/mask shape mismatch")
    valid = valid_mask.astype(bool)
    n = int(valid.sum())
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(pred_depth - gt_depth) * valid) / n)


def depth_l1_with_grad(pred_depth, gt_depth, valid_mask):
    valid = valid_mask.astype(bool)
    n = int(valid.sum())
    grad = np.zeros_like(pred_depth)
    if n == 0:
        return 0.0, grad
    diff = pred_depth - gt_depth
    grad[valid] = np.sign(diff[valid]) / n
    return float(np.sum(np.abs(diff) * valid) / n), grad


def _filter_valid(img: np.ndarray) -> np.ndarray:
    t = correlate1d(img, _KERNEL, axis=0, mode="constant")
    t = correlate1d(t, _KERNEL, axis=1, mode="constant")
    return t[_HALF:-_HALF, _HALF:-_HALF]


def _filter_adjoint(cot: np.ndarray, shape) -> np.ndarray:
    z = np.zeros(shape)
    z[_HALF:-_HALF, _HALF:-_HALF] = cot
    t = correlate1d(z, _KERNEL, axis=0, mode="constant")
    return correlate1d(t, _KERNEL, axis=1, mode="constant")


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid windows only,
    computed per channel then averaged. Images must be at least the window size."""
    return _ssim_impl(pred, gt, want_grad=False)[0]


def ssim_with_grad(pred: np.ndarray, gt: np.ndarray):
    """SSIM value plus its gradient w.r.t. `pred`."""
    return _ssim_impl(pred, gt, want_grad=True)


def _ssim_impl(pred, gt, want_grad: bool):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[:, :, None]
        gt = gt[:, :, None]
    h, w, c = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    total = 0.0
    grad = np.zeros_like(pred) if want_grad else None
    n_valid = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    scale = 1.0 / (n_valid * c)
    for ch in range(c):
        x = pred[:, :, ch]
        y = gt[:, :, ch]
        mu_x = _filter_valid(x)
        mu_y = _filter_valid(y)
        ex2 = _filter_valid(x * x)
        ey2 = _filter_valid(y * y)
        exy = _filter_valid(x * y)
        sx2 = ex2 - mu_x * mu_x
        sy2 = ey2 - mu_y * mu_y
        sxy = exy - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + SSIM_C1
        a2 = 2 * sxy + SSIM_C2
        b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        b2 = sx2 + sy2 + SSIM_C2
        s_map = (a1 * a2) / (b1 * b2)
        total += float(np.sum(s_map))
        if want_grad:
            ds_da1 = a2 / (b1 * b2)
            ds_da2 = a1 / (b1 * b2)
            ds_db1 = -s_map / b1
            ds_db2 = -s_map / b2
            ds_dmux = (ds_da1 * 2 * mu_y + ds_db1 * 2 * mu_x
                       - ds_da2 * 2 * mu_y - ds_db2 * 2 * mu_x)
            ds_dex2 = ds_db2
            ds_dexy = ds_da2 * 2
            grad[:, :, ch] = (
                _filter_adjoint(ds_dmux * scale, (h, w))
                + _filter_adjoint(ds_dex2 * scale, (h, w)) * 2 * x
                + _filter_adjoint(ds_dexy * scale, (h, w)) * y
            )
    value = total * scale
    if want_grad:
        return value, grad
    return value, None


def loss_ori(pred, gt_frame, weights: LossWeights):
    """Original-trajectory loss: weighted L1 + depth L1 + (1 - SSIM).

    `pred` needs .color and .depth images; `gt_frame` needs .image plus
    optional .depth/.depth_valid. Returns (value, d_color, d_depth).
    """
    l1_val, l1_grad = l1_rgb_with_grad(pred.color, gt_frame.image)
    ssim_val, ssim_grad = ssim_with_grad(pred.color, gt_frame.image)
    value = weights.lambda_rgb * l1_val + weights.lambda_ssim * (1.0 - ssim_val)
    d_color = weights.lambda_rgb * l1_grad - weights.lambda_ssim * ssim_grad
    d_depth = np.zeros_like(pred.depth)
    if weights.lambda_depth > 0 and getattr(gt_frame, "depth", None) is not None:
        valid = getattr(gt_frame, "depth_valid", None)
        if valid is None:
            valid = np.ones_like(gt_frame.depth, dtype=bool)
        dval, dgrad = depth_l1_with_grad(pred.depth, gt_frame.depth, valid)
        value += weights.lambda_depth * dval
        d_depth = weights.lambda_depth * dgrad
    return value, d_color, d_depth


def loss_novel(pred, gt_frame, weights: LossWeights):
    """Depth-free novel-trajectory loss. Returns (value, d_color)."""
    l1_val, l1_grad = l1_rgb_with_grad(pred.color, gt_frame.image)
    ssim_val, ssim_grad = ssim_with_grad(pred.color, gt_frame.image)
    value = weights.lambda_rgb * l1_val + weights.lambda_ssim * (1.0 - ssim_val)
    d_color = weights.lambda_rgb * l1_grad - weights.lambda_ssim * ssim_grad
    return value, d_color


def loss_total(ori_term: float, novel_term: float) -> float:
    return ori_term + novel_term
