"""Full-reference image metrics: PSNR and SSIM."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import read_png

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("ssim takes a single image")
        img = img[0]
    if img.ndim == 3:
        if img.shape[0] == 3:
            return np.tensordot(LUMA, img, axes=(0, 0))
        if img.shape[0] == 1:
            return img[0]
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    return img


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    half = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a, b) -> np.ndarray:
    a, b = _to_gray(a), _to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    win = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5), peak 1."""
    return float(ssim_map(a, b).mean())


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)
    psnr_db: float = 0.0
    ssim: float = 0.0

    def add(self, name: str, pred, gt) -> None:
        self.per_image.append({"name": name, "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt)})
        self.psnr_db = float(np.mean([r["psnr_db"] for r in self.per_image]))
        self.ssim = float(np.mean([r["ssim"] for r in self.per_image]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate_dirs(pred_dir, gt_dir) -> MetricReport:
    """Score every PNG in ``pred_dir`` against the same-named file in ``gt_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = MetricReport()
    for path in sorted(pred_dir.glob("*.png")):
        gt_path = gt_dir / path.name
        if not gt_path.exists():
            # dataset layout: {id}_lr.png predictions scored against {id}_hr.png
            gt_path = gt_dir / path.name.replace("_lr.png", "_hr.png").replace("_pred.png", "_hr.png")
        if not gt_path.exists():
            raise FileNotFoundError(f"no ground truth for {path.name} in {gt_dir}")
        report.add(path.name, read_png(path), read_png(gt_path))
    if not report.per_image:
        raise FileNotFoundError(f"no PNG files in {pred_dir}")
    return report
