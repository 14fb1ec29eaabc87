"""Synthetic low-light, low-resolution pair generation.

Pipeline: darken -> bicubic downsample -> unprocess to RAW -> heteroscedastic
shot/read noise -> process back to sRGB. All arrays are float N x C x H x W.

Concrete ISP stages (swappable through :class:`IspParams`):
  * tone curve: smoothstep ``3u^2 - 2u^3`` and its closed-form inverse
  * color correction: a fixed white-preserving 3x3 matrix
  * white balance: red/blue gains, green 1
  * RGGB Bayer mosaic with bilinear demosaic (optional)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imageio import read_png, write_png
from .params import rng_for

log = logging.getLogger(__name__)

ALPHA_RANGE = (0.9, 1.0)
BETA_RANGE = (0.5, 1.0)
GAMMA_RANGE = (1.5, 5.0)
LOG_SHOT_RANGE = (math.log(1e-4), math.log(0.012))
READ_SLOPE = 2.18
READ_STD = 0.26
R_GAIN_RANGE = (1.9, 2.4)
B_GAIN_RANGE = (1.5, 1.9)

# rows sum to one, so gray stays gray
DEFAULT_CCM = np.array([
    [1.60, -0.40, -0.20],
    [-0.30, 1.50, -0.20],
    [-0.10, -0.50, 1.60],
])


@dataclass
class DegradeConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    sigma_s_sq: float = 0.0
    sigma_r_sq: float = 0.0
    scale: int = 2
    seed: int = 0
    mosaic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IspParams:
    r_gain: float = 1.0
    b_gain: float = 1.0
    ccm: np.ndarray = field(default_factory=lambda: DEFAULT_CCM.copy())
    crf: str = "smoothstep"
    bayer: str = "RGGB"
    mosaic: bool = False

    @property
    def ccm_inv(self) -> np.ndarray:
        return np.linalg.inv(self.ccm)

    @classmethod
    def identity(cls, mosaic: bool = False) -> IspParams:
        return cls(1.0, 1.0, np.eye(3), "identity", "RGGB", mosaic)


def sample_degrade_params(rng: np.random.Generator, scale: int = 2, seed: int = 0,
                          mosaic: bool = True) -> DegradeConfig:
    alpha = rng.uniform(*ALPHA_RANGE)
    beta = rng.uniform(*BETA_RANGE)
    gamma = rng.uniform(*GAMMA_RANGE)
    log_shot = rng.uniform(*LOG_SHOT_RANGE)
    log_read = rng.normal(READ_SLOPE * log_shot, READ_STD)
    return DegradeConfig(alpha, beta, gamma, math.exp(log_shot), math.exp(log_read), scale, seed, mosaic)


def sample_isp_params(rng: np.random.Generator, mosaic: bool = True) -> IspParams:
    return IspParams(rng.uniform(*R_GAIN_RANGE), rng.uniform(*B_GAIN_RANGE), DEFAULT_CCM.copy(),
                     "smoothstep", "RGGB", mosaic)


# -- darkening and resampling -------------------------------------------------

def darken(img: np.ndarray, alpha: float, beta: float, gamma: float) -> np.ndarray:
    return np.clip(beta * (alpha * np.asarray(img)) ** gamma, 0.0, 1.0)


def cubic_kernel(t, a: float = -0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # symmetric (edge-repeating) reflection, period 2n
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out x n_in) bicubic resampling matrix.

    Pixel-area aligned; when shrinking, the kernel is stretched by the
    reduction factor (antialiasing).
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        taps = np.arange(math.floor(center - support), math.ceil(center + support) + 1)
        wts = kscale * cubic_kernel(kscale * (center - taps))
        np.add.at(mat[i], _reflect(taps, n_in), wts)
        mat[i] /= mat[i].sum()
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    wh = resize_weights(img.shape[-2], out_h)
    ww = resize_weights(img.shape[-1], out_w)
    return np.einsum("ih,...hw,jw->...ij", wh, img, ww)


def bicubic_down(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    return resize_bicubic(img, h // scale, w // scale)


def bicubic_up(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return resize_bicubic(img, h * scale, w * scale)


# -- ISP stages ---------------------------------------------------------------------

def crf_forward(u: np.ndarray, kind: str = "smoothstep") -> np.ndarray:
    if kind == "identity":
        return u
    return 3.0 * u * u - 2.0 * u * u * u


def crf_inverse(v: np.ndarray, kind: str = "smoothstep") -> np.ndarray:
    if kind == "identity":
        return v
    return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * v) / 3.0)


def apply_ccm(img: np.ndarray, ccm: np.ndarray) -> np.ndarray:
    return np.einsum("ij,njhw->nihw", ccm, img)


def bayer_masks(h: int, w: int) -> dict:
    yy, xx = np.mgrid[0:h, 0:w]
    even_r, even_c = yy % 2 == 0, xx % 2 == 0
    return {"r": even_r & even_c, "gr": even_r & ~even_c, "gb": ~even_r & even_c, "b": ~even_r & ~even_c}


def mosaic(rgb: np.ndarray) -> np.ndarray:
    """RGGB sampling: N x 3 x H x W -> N x 1 x H x W."""
    n, _, h, w = rgb.shape
    if h % 2 or w % 2:
        raise ValueError("mosaic needs even dimensions")
    m = bayer_masks(h, w)
    out = np.where(m["r"], rgb[:, 0], np.where(m["b"], rgb[:, 2], rgb[:, 1]))
    return out[:, None]


def demosaic(bayer: np.ndarray) -> np.ndarray:
    """Bilinear RGGB demosaic; mirror padding keeps the CFA phase at borders."""
    b = bayer[:, 0]
    n, h, w = b.shape
    p = np.pad(b, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    up, down = p[:, :-2, 1:-1], p[:, 2:, 1:-1]
    left, right = p[:, 1:-1, :-2], p[:, 1:-1, 2:]
    diag = ((p[:, :-2, :-2] + p[:, :-2, 2:]) + (p[:, 2:, :-2] + p[:, 2:, 2:])) * 0.25
    cross = ((up + down) + (left + right)) * 0.25
    horiz = (left + right) * 0.5
    vert = (up + down) * 0.5
    m = bayer_masks(h, w)
    red = np.select([m["r"], m["gr"], m["gb"], m["b"]], [b, horiz, vert, diag])
    green = np.where(m["gr"] | m["gb"], b, cross)
    blue = np.select([m["b"], m["gb"], m["gr"], m["r"]], [b, horiz, vert, diag])
    return np.stack([red, green, blue], axis=1)


def _gain_map(isp: IspParams, shape: tuple) -> np.ndarray:
    n, c, h, w = shape
    if c == 3:
        return np.array([isp.r_gain, 1.0, isp.b_gain]).reshape(1, 3, 1, 1)
    m = bayer_masks(h, w)
    g = np.ones((h, w))
    g[m["r"]] = isp.r_gain
    g[m["b"]] = isp.b_gain
    return g[None, None]


def unprocess(img: np.ndarray, isp: IspParams, stats: dict | None = None) -> np.ndarray:
    """sRGB -> RAW: inverse tone curve, inverse CCM, mosaic, inverse white balance.

    Out-of-range sRGB input is clamped; RAW values are never clamped, only
    counted (``stats['raw_out_of_range']``).
    """
    img = np.asarray(img, dtype=np.float64)
    clipped = np.clip(img, 0.0, 1.0)
    lin = crf_inverse(clipped, isp.crf)
    lin = apply_ccm(lin, isp.ccm_inv)
    if isp.mosaic:
        lin = mosaic(lin)
    raw = lin / _gain_map(isp, lin.shape)
    if stats is not None:
        stats["input_clamped"] = int(np.count_nonzero(clipped != img))
        stats["raw_out_of_range"] = int(np.count_nonzero((raw < 0) | (raw > 1)))
    return raw


def add_noise(raw: np.ndarray, sigma_s_sq: float, sigma_r_sq: float,
              rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with per-pixel variance ``raw * sigma_s_sq + sigma_r_sq``."""
    if sigma_s_sq < 0 or sigma_r_sq < 0:
        raise ValueError("noise variances must be non-negative")
    raw = np.asarray(raw, dtype=np.float64)
    if sigma_s_sq == 0 and sigma_r_sq == 0:
        return raw.copy()
    std = np.sqrt(np.maximum(raw, 0.0) * sigma_s_sq + sigma_r_sq)
    return raw + std * rng.standard_normal(raw.shape)


def process(raw: np.ndarray, isp: IspParams) -> np.ndarray:
    """RAW -> sRGB: white balance, demosaic, CCM, tone curve, clamp."""
    x = np.asarray(raw, dtype=np.float64) * _gain_map(isp, raw.shape)
    if x.shape[1] == 1:
        x = demosaic(x)
    x = apply_ccm(x, isp.ccm)
    # the tone curve is only monotone on [0, 1]
    return np.clip(crf_forward(np.clip(x, 0.0, 1.0), isp.crf), 0.0, 1.0)


def degrade_pair(img_hr: np.ndarray, cfg: DegradeConfig, isp: IspParams,
                 rng: np.random.Generator) -> tuple:
    img_hr = np.asarray(img_hr, dtype=np.float64)
    squeeze = img_hr.ndim == 3
    if squeeze:
        img_hr = img_hr[None]
    h, w = img_hr.shape[-2:]
    need = cfg.scale * (2 if cfg.mosaic else 1)
    if h % need or w % need:
        raise ValueError(f"HR image {h}x{w} must be divisible by {need}")
    isp = replace(isp, mosaic=cfg.mosaic)
    dark = darken(img_hr, cfg.alpha, cfg.beta, cfg.gamma)
    small = bicubic_down(dark, cfg.scale)
    raw = unprocess(small, isp)
    noisy = add_noise(raw, cfg.sigma_s_sq, cfg.sigma_r_sq, rng)
    x_lr = process(noisy, isp)
    if squeeze:
        return x_lr[0], img_hr[0]
    return x_lr, img_hr


# -- procedural sources and dataset files -------------------------------------------

def synthetic_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A smooth, colorful 3 x h x w test scene in [0.02, 0.98]: blobs, a ramp and stripes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((3, h, w))
    base = rng.uniform(0.2, 0.8, size=3)
    ramp = rng.normal(0, 0.3, size=(3, 2))
    img += base[:, None, None] + ramp[:, :1, None] * (yy - 0.5) + ramp[:, 1:, None] * (xx - 0.5)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.08, 0.35)
        col = rng.uniform(-0.5, 0.5, size=3)
        img += col[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad))[None]
    freq = rng.uniform(2, 8)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    img += rng.uniform(0.0, 0.15) * stripes[None] * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    return np.clip(img, 0.02, 0.98)


def make_synthetic_pairs(count: int, size: int, scale: int, seed: int, mosaic: bool = True) -> tuple:
    """In-memory (x_lr, y_hr) stacks plus per-pair parameter records."""
    xs, ys, records = [], [], []
    for i in range(count):
        rng = rng_for(seed, "synthetic-pair", i)
        hr = synthetic_image(rng, size, size)
        cfg = sample_degrade_params(rng, scale=scale, seed=seed, mosaic=mosaic)
        isp = sample_isp_params(rng, mosaic=mosaic)
        x_lr, y_hr = degrade_pair(hr, cfg, isp, rng)
        xs.append(x_lr)
        ys.append(y_hr)
        records.append(_record(f"{i:05d}", cfg, isp))
    return np.stack(xs), np.stack(ys), records


def _record(pair_id: str, cfg: DegradeConfig, isp: IspParams) -> dict:
    return {"id": pair_id, "alpha": cfg.alpha, "beta": cfg.beta, "gamma": cfg.gamma,
            "sigma_s_sq": cfg.sigma_s_sq, "sigma_r_sq": cfg.sigma_r_sq, "seed": cfg.seed,
            "scale": cfg.scale, "r_gain": isp.r_gain, "b_gain": isp.b_gain, "mosaic": cfg.mosaic}


def generate_dataset(in_dir, out_dir, cfg_template: DegradeConfig, count: int, seed: int) -> dict:
    """Degrade PNGs from ``in_dir`` into ``{id}_lr.png`` / ``{id}_hr.png`` pairs.

    Sources are used in sorted order and cycled when ``count`` exceeds them.
    Each pair draws its parameters from its own stream ``(seed, "pair", index)``.
    Sources are cropped (top-left) to the nearest size the pipeline accepts.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources, skipped = [], []
    for path in sorted(in_dir.glob("*.png")):
        try:
            sources.append((path.name, read_png(path)))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable %s: %s", path, exc)
            skipped.append(path.name)
    if not sources:
        raise FileNotFoundError(f"no readable PNG files in {in_dir}")
    need = cfg_template.scale * (2 if cfg_template.mosaic else 1)
    pairs = []
    for i in range(count):
        name, img = sources[i % len(sources)]
        h, w = img.shape[1:]
        img = img[:, : h - h % need, : w - w % need]
        rng = rng_for(seed, "pair", i)
        cfg = sample_degrade_params(rng, scale=cfg_template.scale, seed=seed, mosaic=cfg_template.mosaic)
        isp = sample_isp_params(rng, mosaic=cfg_template.mosaic)
        x_lr, y_hr = degrade_pair(img, cfg, isp, rng)
        pair_id = f"{i:05d}"
        write_png(out_dir / f"{pair_id}_lr.png", x_lr)
        write_png(out_dir / f"{pair_id}_hr.png", y_hr)
        rec = _record(pair_id, cfg, isp)
        rec["source"] = name
        pairs.append(rec)
    manifest = {"seed": seed, "scale": cfg_template.scale, "mosaic": cfg_template.mosaic,
                "count": count, "skipped": skipped, "pairs": pairs}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir) -> tuple:
    """Read pairs written by :func:`generate_dataset` as lists of arrays."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    xs, ys = [], []
    for rec in manifest["pairs"]:
        xs.append(read_png(data_dir / f"{rec['id']}_lr.png"))
        ys.append(read_png(data_dir / f"{rec['id']}_hr.png"))
    return xs, ys, manifest
