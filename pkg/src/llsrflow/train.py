"""Training objective, Adam with linear warmup, the training loop and inference."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .crmap import cr_map, rearrange_to_pyramid, select_prior_mean
from .degrade import bicubic_up, load_dataset, make_synthetic_pairs
from .encoder import CondFeatures, Encoder, EncoderConfig
from .flow import FlowModel, flow_forward, flow_inverse, initialize_actnorm, nll
from .layout import FlowLayout
from .metrics import psnr
from .ndtensor import Tensor, grad, mean, no_grad, sub, tabs, upsample_nearest
from .params import ParamStore, rng_for

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    batch: int = 4
    warmup_steps: int = 500
    total_steps: int = 2000
    loss_weight_gamma: float = 1.5
    nll_weight: float = 1.0
    seed: int = 0
    precision: str = "f32"
    threads: int = 1
    scale: int = 2
    crop: int = 32
    levels: int = 3
    steps_per_level: int = 12
    hidden: int = 64
    encoder: dict = field(default_factory=lambda: dataclasses.asdict(EncoderConfig()))
    synthetic_pairs: int = 32
    gamma_range: tuple | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.gamma_range is not None:
            self.gamma_range = tuple(self.gamma_range)
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class LLSRModel:
    """Encoder + flow sharing one parameter store (``encoder/`` and ``flow/`` prefixes)."""

    def __init__(self, layout: FlowLayout, scale: int, hidden: int = 64,
                 enc_config: EncoderConfig = EncoderConfig(), seed: int = 0, dtype=np.float32):
        self.store = ParamStore(dtype)
        self.scale = scale
        self.hidden = hidden
        self.enc_config = enc_config
        self.encoder = Encoder(layout, scale, enc_config, seed, self.store)
        self.flow = FlowModel(layout, hidden, seed, self.store)

    @property
    def layout(self) -> FlowLayout:
        return self.flow.layout

    def resized(self, hr_size) -> LLSRModel:
        """A view of the same parameters for another image size."""
        other = object.__new__(LLSRModel)
        other.__dict__.update(self.__dict__)
        layout = self.layout.with_size(hr_size)
        other.encoder = object.__new__(Encoder)
        other.encoder.__dict__.update(self.encoder.__dict__)
        other.encoder.layout = layout
        other.flow = object.__new__(FlowModel)
        other.flow.__dict__.update(self.flow.__dict__)
        other.flow.layout = layout
        return other

    def manifest(self) -> dict:
        lay = self.layout
        c = self.enc_config
        return {
            "manifest/layout": np.array([lay.levels, lay.steps_per_level, lay.base_channels,
                                         lay.split_fraction.numerator, lay.split_fraction.denominator,
                                         lay.hr_size[0], lay.hr_size[1]], dtype=np.float64),
            "manifest/model": np.array([self.scale, self.hidden, c.width, c.stages, c.blocks,
                                        c.window, c.heads, c.streams], dtype=np.float64),
        }

    @classmethod
    def from_manifest(cls, entries: dict, dtype=None) -> LLSRModel:
        lay = [int(v) for v in entries["manifest/layout"]]
        mod = [int(v) for v in entries["manifest/model"]]
        layout = FlowLayout(lay[0], lay[1], lay[2], f"{lay[3]}/{lay[4]}", (lay[5], lay[6]))
        enc = EncoderConfig(*mod[2:])
        if dtype is None:
            dtype = entries["flow/L0/S0/actnorm/bias"].dtype
        model = cls(layout, mod[0], mod[1], enc, 0, dtype)
        model.store.load({k: v for k, v in entries.items() if k in model.store})
        model.flow.mark_initialized()
        return model


# -- objective ------------------------------------------------------------------

def encoder_mean_image(model: LLSRModel, cond: CondFeatures) -> Tensor:
    return upsample_nearest(cond.cr_pred, model.scale)


def l1_branch(model: LLSRModel, cond: CondFeatures, x, y) -> Tensor:
    """Mean absolute error of the inverse flow applied to the encoder's latent mode."""
    z = rearrange_to_pyramid(encoder_mean_image(model, cond), model.layout)
    y_hat = flow_inverse(z, cond, model.flow)
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=y_hat.dtype))
    return mean(tabs(sub(y_hat, y)))


def nll_branch(model: LLSRModel, cond: CondFeatures, y, rng: np.random.Generator) -> Tensor:
    y_t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=model.store.dtype))
    z, logdet = flow_forward(y_t, cond, model.flow)
    enc_mean = rearrange_to_pyramid(encoder_mean_image(model, cond), model.layout)
    cr_mean = rearrange_to_pyramid(Tensor(cr_map(y_t.data).astype(y_t.dtype)), model.layout)
    return nll(z, logdet, select_prior_mean(enc_mean, cr_mean, rng))


def total_loss(model: LLSRModel, x, y, rng: np.random.Generator,
               gamma: float = 1.5, nll_weight: float = 1.0) -> tuple:
    """``nll_weight * L_nll + gamma * L_1``; returns ``(total, {"nll", "l1"})``.

    A branch with zero weight is evaluated without the tape, for logging only.
    """
    x = np.asarray(x, dtype=model.store.dtype)
    y = np.asarray(y, dtype=model.store.dtype)
    cond = model.encoder(x)
    ctx = contextlib.nullcontext() if nll_weight else no_grad()
    with ctx:
        nll_v = nll_branch(model, cond, y, rng)
    ctx = contextlib.nullcontext() if gamma else no_grad()
    with ctx:
        l1_v = l1_branch(model, cond, x, y)
    if gamma and nll_weight:
        total = nll_v * nll_weight + l1_v * gamma if nll_weight != 1.0 else nll_v + l1_v * gamma
    elif gamma:
        total = l1_v * gamma
    else:
        total = nll_v if nll_weight == 1.0 else nll_v * nll_weight
    return total, {"nll": float(nll_v.data), "l1": float(l1_v.data)}


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` over ``warmup_steps`` (1-indexed), then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr_t: float,
              betas: tuple = (0.9, 0.99), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        p.data = (p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, model: LLSRModel, state: OptimizerState | None = None) -> None:
    entries = dict(model.manifest())
    for name, t in model.store.items():
        entries[name] = t.data
    if state is not None:
        entries["optim/step"] = np.array([state.step], dtype=np.float64)
        for name in state.m:
            entries[f"optim/m/{name}"] = state.m[name]
            entries[f"optim/v/{name}"] = state.v[name]
    checkpoint.save(path, entries)


def load_checkpoint(path) -> tuple:
    entries = checkpoint.load(path)
    model = LLSRModel.from_manifest(entries)
    state = OptimizerState()
    if "optim/step" in entries:
        state.step = int(entries["optim/step"][0])
        for key, arr in entries.items():
            if key.startswith("optim/m/"):
                state.m[key[len("optim/m/"):]] = arr
            elif key.startswith("optim/v/"):
                state.v[key[len("optim/v/"):]] = arr
    return model, state


# -- data -------------------------------------------------------------------------

def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def load_pairs(cfg: TrainConfig, data_dir=None) -> tuple:
    """Return lists of LR and HR arrays, from disk or synthesized on the fly."""
    if data_dir is None:
        xs, ys, _ = make_synthetic_pairs(cfg.synthetic_pairs, cfg.crop, cfg.scale, cfg.seed)
        return list(xs), list(ys)
    xs, ys, manifest = load_dataset(data_dir)
    if manifest["scale"] != cfg.scale:
        raise ValueError(f"dataset scale {manifest['scale']} != config scale {cfg.scale}")
    if cfg.gamma_range is not None:
        lo, hi = cfg.gamma_range
        keep = [i for i, r in enumerate(manifest["pairs"]) if lo <= r["gamma"] <= hi]
        xs, ys = [xs[i] for i in keep], [ys[i] for i in keep]
    if not xs:
        raise ValueError("no training pairs left after filtering")
    for x, y in zip(xs, ys):
        if y.shape[1] < cfg.crop or y.shape[2] < cfg.crop:
            raise ValueError(f"pair HR size {y.shape[1:]} smaller than crop {cfg.crop}")
        if y.shape[1] != cfg.scale * x.shape[1] or y.shape[2] != cfg.scale * x.shape[2]:
            raise ValueError("LR/HR sizes inconsistent with the configured scale")
    return xs, ys


def sample_batch(xs: list, ys: list, cfg: TrainConfig, step: int) -> tuple:
    """Random aligned crops for ``step``; depends only on (seed, step)."""
    rng = rng_for(cfg.seed, "batch", step)
    idx = rng.choice(len(xs), size=cfg.batch, replace=len(xs) < cfg.batch)
    s, c = cfg.scale, cfg.crop
    bx, by = [], []
    for i in idx:
        y = ys[i]
        oy = rng.integers(0, (y.shape[1] - c) // s + 1) * s
        ox = rng.integers(0, (y.shape[2] - c) // s + 1) * s
        by.append(y[:, oy:oy + c, ox:ox + c])
        bx.append(xs[i][:, oy // s:(oy + c) // s, ox // s:(ox + c) // s])
    return np.stack(bx).astype(cfg.dtype), np.stack(by).astype(cfg.dtype)


def build_model(cfg: TrainConfig) -> LLSRModel:
    layout = FlowLayout(cfg.levels, cfg.steps_per_level, 3, "1/2", (cfg.crop, cfg.crop))
    return LLSRModel(layout, cfg.scale, cfg.hidden, EncoderConfig(**cfg.encoder), cfg.seed, cfg.dtype)


LOG_FIELDS = ("step", "lr", "nll", "l1", "total")
MAX_CONSECUTIVE_SKIPS = 20


def train_loop(cfg: TrainConfig, data_dir=None, out=None, resume=None, pairs=None,
               max_steps: int | None = None) -> tuple:
    """Train; returns ``(model, state, log_rows)``.

    ``pairs`` may supply in-memory ``(xs, ys)`` lists instead of ``data_dir``.
    ``max_steps`` stops early (used to produce resumable partial runs).
    """
    with _threads(cfg.threads):
        xs, ys = pairs if pairs is not None else load_pairs(cfg, data_dir)
        if resume is not None:
            model, state = load_checkpoint(resume)
        else:
            model, state = build_model(cfg), OptimizerState()
        names = model.store.names()
        params = dict(model.store.items())
        tensors = model.store.tensors()
        rows = []
        out = Path(out) if out is not None else None
        writer = None
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            log_path = out.with_suffix(".csv")
            fh = open(log_path, "a" if resume is not None else "w", newline="")
            writer = csv.writer(fh)
            if resume is None:
                writer.writerow(LOG_FIELDS)
        t0 = time.time()
        skipped = 0
        last = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
        try:
            for step in range(state.step + 1, last + 1):
                bx, by = sample_batch(xs, ys, cfg, step)
                if not model.flow.initialized:
                    with no_grad():
                        initialize_actnorm(model.flow, by, model.encoder(bx))
                try:
                    total, comps = total_loss(model, bx, by, rng_for(cfg.seed, "prior", step),
                                              cfg.loss_weight_gamma, cfg.nll_weight)
                    grads = dict(zip(names, grad(total, tensors)))
                    bad = next((n for n, g in grads.items() if not np.all(np.isfinite(g))), None)
                    if bad is not None:
                        raise FloatingPointError(f"non-finite gradient for {bad!r}")
                except FloatingPointError as exc:
                    # an off-distribution batch can overflow the inverse pass; drop that update only
                    skipped += 1
                    log.warning("step %d skipped: %s", step, exc)
                    if skipped >= MAX_CONSECUTIVE_SKIPS:
                        raise FloatingPointError(f"{skipped} consecutive non-finite steps, last at {step}") from exc
                    state.step = step
                    continue
                skipped = 0
                lr_t = lr_at(step, cfg)
                adam_step(params, grads, state, lr_t, cfg.betas, cfg.eps)
                row = (step, lr_t, comps["nll"], comps["l1"], float(total.data))
                rows.append(row)
                if writer is not None:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
                if step % 100 == 0:
                    log.info("step %d  nll %.4f  l1 %.4f  total %.4f  (%.1fs)", step, *row[2:], time.time() - t0)
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out, model, state)
        finally:
            if writer is not None:
                fh.close()
        if out is not None:
            save_checkpoint(out, model, state)
            out.with_suffix(".config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return model, state, rows


# -- inference -------------------------------------------------------------------------

def infer(model: LLSRModel, x) -> np.ndarray:
    """Reconstruct HR images from LR inputs through the latent mode."""
    x = np.asarray(x, dtype=model.store.dtype)
    if x.ndim == 3:
        x = x[None]
    hr = (x.shape[2] * model.scale, x.shape[3] * model.scale)
    m = model if hr == model.layout.hr_size else model.resized(hr)
    with no_grad():
        cond = m.encoder(x)
        z = rearrange_to_pyramid(encoder_mean_image(m, cond), m.layout)
        y_hat = flow_inverse(z, cond, m.flow)
    return np.clip(y_hat.data, 0.0, 1.0)


def evaluate(model: LLSRModel, xs, ys) -> dict:
    """Mean PSNR of the model and of the bicubic-upsampled input."""
    model_psnr, base_psnr = [], []
    for x, y in zip(xs, ys):
        pred = infer(model, x)[0]
        model_psnr.append(psnr(pred, y))
        base_psnr.append(psnr(np.clip(bicubic_up(x, model.scale), 0, 1), y))
    return {"psnr": float(np.mean(model_psnr)), "baseline_psnr": float(np.mean(base_psnr))}


def mean_window(rows: list, key: str, first: bool, width: int = 20) -> float:
    i = LOG_FIELDS.index(key)
    sel = rows[:width] if first else rows[-width:]
    return float(np.mean([r[i] for r in sel]))


def is_finite_rows(rows) -> bool:
    return all(math.isfinite(v) for r in rows for v in r[1:])
