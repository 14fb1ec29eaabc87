"""Numerical invariant suites run by ``llsrflow selfcheck``.

Each suite returns a :class:`SuiteResult` holding the measured error and its
tolerance. The helpers (finite-difference Jacobians, perturbed models) are
reused by the test-suite.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .crmap import cr_map, nearest_downsample
from .degrade import (
    GAMMA_RANGE,
    IspParams,
    add_noise,
    process,
    sample_degrade_params,
    synthetic_image,
    unprocess,
)
from .encoder import EncoderConfig
from .flow import (
    ActNorm,
    AffineInjector,
    CondAffineCoupling,
    FlowModel,
    FlowStep,
    InvConv1x1,
    flow_forward,
    flow_inverse,
    initialize_actnorm,
)
from .layout import FlowLayout
from .metrics import psnr, ssim
from .ndtensor import Tensor, gradcheck, no_grad
from .params import ParamStore, rng_for


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    error: float
    tol: float
    detail: str = ""
    seconds: float = 0.0


# -- helpers ------------------------------------------------------------------------

def perturb(store: ParamStore, rng: np.random.Generator, scale: float) -> None:
    """Add N(0, scale^2) noise to every parameter (breaks zero/identity inits)."""
    for _, t in store.items():
        t.data = (t.data + rng.normal(0.0, scale, size=t.shape)).astype(t.dtype)


def random_cond(layout: FlowLayout, n: int, rng: np.random.Generator) -> list:
    return [Tensor(rng.normal(size=(n, layout.level_channels(l)) + layout.level_grid(l)))
            for l in range(layout.levels)]


def flat_pieces(pieces: list) -> np.ndarray:
    n = pieces[0].shape[0]
    return np.concatenate([p.data.reshape(n, -1) for p in pieces], axis=1)


def fd_logdet(fn, x: np.ndarray, eps: float = 1e-6) -> float:
    """``ln|det J|`` of ``fn`` at ``x`` (shape (1, ...)) by batched central differences.

    ``fn`` maps an (N, ...) array to an (N, D) array.
    """
    d = x.size
    basis = np.eye(d).reshape((d,) + x.shape[1:])
    batch = np.concatenate([x + eps * basis, x - eps * basis], axis=0)
    out = fn(batch)
    jac = (out[:d] - out[d:]).T / (2 * eps)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0:
        raise ArithmeticError("finite-difference Jacobian is singular")
    return float(logdet)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-12)


def _repeat(t: Tensor, n: int) -> Tensor:
    return Tensor(np.repeat(t.data, n, axis=0))


def layer_logdet_errors(seed: int = 0) -> dict:
    """Analytic vs finite-difference logdet for each layer type on 1 x 3 x 4 x 4."""
    rng = rng_for(seed, "selfcheck-layers")
    store = ParamStore(np.float64)
    layers = {
        "actnorm": ActNorm(store, "an", 3),
        "invconv": InvConv1x1(store, "ic", 3, rng),
        "coupling": CondAffineCoupling(store, "cp", 3, 2, 8, rng),
        "injector": AffineInjector(store, "ij", 3, 2, 8, rng),
    }
    layers["actnorm"].initialized = True
    perturb(store, rng, 0.3)
    x = rng.normal(size=(1, 3, 4, 4))
    cond = Tensor(rng.normal(size=(1, 2, 4, 4)))
    errors = {}
    with no_grad():
        for name, layer in layers.items():
            _, ld = layer.forward(Tensor(x), cond)
            analytic = float(np.asarray(ld.data).reshape(-1)[0])

            def fn(b, layer=layer):
                y, _ = layer.forward(Tensor(b), _repeat(cond, b.shape[0]))
                return y.data.reshape(b.shape[0], -1)

            errors[name] = _rel(analytic, fd_logdet(fn, x))
    return errors


def composite_logdet_error(seed: int = 0, hidden: int = 16, steps: int = 12) -> float:
    """Full multi-level flow on 1 x 3 x 8 x 8 (192-dim Jacobian)."""
    rng = rng_for(seed, "selfcheck-composite")
    layout = FlowLayout(3, steps, 3, "1/2", (8, 8))
    model = FlowModel(layout, hidden, seed, dtype=np.float64)
    y = rng.uniform(0.05, 0.95, size=(1, 3, 8, 8))
    cond = random_cond(layout, 1, rng)
    initialize_actnorm(model, np.repeat(y, 4, axis=0) + rng.normal(0, 0.1, size=(4, 3, 8, 8)),
                       [_repeat(c, 4) for c in cond])
    perturb(model.store, rng, 0.01)
    with no_grad():
        _, ld = flow_forward(Tensor(y), cond, model)

        def fn(b):
            pieces, _ = flow_forward(Tensor(b), [_repeat(c, b.shape[0]) for c in cond], model)
            return flat_pieces(pieces)

        return _rel(float(ld.data[0]), fd_logdet(fn, y))


def roundtrip_error(count: int = 20, size: int = 16, hidden: int = 64, seed: int = 0) -> float:
    """Max abs ``inverse(forward(y)) - y`` over ``count`` random (y, cond) pairs."""
    rng = rng_for(seed, "selfcheck-roundtrip")
    layout = FlowLayout(3, 12, 3, "1/2", (size, size))
    model = FlowModel(layout, hidden, seed, dtype=np.float64)
    y = rng.uniform(0.0, 1.0, size=(count, 3, size, size))
    cond = random_cond(layout, count, rng)
    initialize_actnorm(model, y, cond)
    perturb(model.store, rng, 0.01)
    with no_grad():
        z, _ = flow_forward(Tensor(y), cond, model)
        back = flow_inverse(z, cond, model)
    return float(np.abs(back.data - y).max())


def toy_flow_mass(seed: int = 0, lo: float = -6.0, hi: float = 6.0, step: float = 0.05) -> float:
    """Integral of the change-of-variables density of a 2-D conditional flow over a grid."""
    rng = rng_for(seed, "selfcheck-density")
    store = ParamStore(np.float64)
    steps = [FlowStep(store, f"s{i}", 2, 2, 8, rng) for i in range(2)]
    for st in steps:
        st.layers[0].initialized = True
    perturb(store, rng, 0.2)
    g = np.arange(lo, hi + step / 2, step)
    gy, gx = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([gy.ravel(), gx.ravel()], axis=1).reshape(-1, 2, 1, 1)
    cond = Tensor(np.repeat(rng.normal(size=(1, 2, 1, 1)), len(pts), axis=0))
    with no_grad():
        x, total = Tensor(pts), np.zeros(len(pts))
        for st in steps:
            x, ld = st.forward(x, cond)
            total = total + np.broadcast_to(ld.data, total.shape)
    z = x.data.reshape(len(pts), 2)
    logp = -0.5 * (z ** 2).sum(axis=1) - np.log(2 * np.pi) + total
    return float(np.exp(logp).sum() * step * step)


def loss_gradcheck(coords: int = 50, seed: int = 0, hidden: int = 16):
    """Gradcheck of the total loss through encoder, flow forward and inverse branch."""
    from .train import LLSRModel, total_loss

    rng = rng_for(seed, "selfcheck-gradcheck")
    layout = FlowLayout(3, 12, 3, "1/2", (8, 8))
    model = LLSRModel(layout, 2, hidden, EncoderConfig(width=16, stages=1, blocks=1, window=4, heads=2),
                      seed, np.float64)
    y = rng.uniform(0.05, 0.95, size=(2, 3, 8, 8))
    x = rng.uniform(0.0, 0.3, size=(2, 3, 4, 4))
    # a wider batch keeps the data-dependent init well conditioned on the 1x1 grid
    y_init = rng.uniform(0.05, 0.95, size=(16, 3, 8, 8))
    with no_grad():
        initialize_actnorm(model.flow, y_init, model.encoder(rng.uniform(0.0, 0.3, size=(16, 3, 4, 4))))
    perturb(model.store, rng, 0.02)
    tensors = model.store.tensors()
    picks = []
    for _ in range(coords):
        i = int(rng.integers(len(tensors)))
        picks.append((i, int(rng.integers(tensors[i].size))))

    def f():
        return total_loss(model, x, y, rng_for(seed, "prior", 0))[0]

    return gradcheck(f, tensors, eps=1e-5, tol=1e-4, coords=picks)


def cr_invariance_errors(count: int = 100, seed: int = 0) -> dict:
    rng = rng_for(seed, "selfcheck-cr")
    scale_err = sum_err = down_err = 0.0
    for _ in range(count):
        img = rng.uniform(0.01, 1.0, size=(1, 3, 16, 16))
        base = cr_map(img)
        for k in (0.1, 0.5, 2.0):
            scale_err = max(scale_err, float(np.abs(cr_map(k * img) - base).max()))
        sum_err = max(sum_err, float(np.abs(base.sum(axis=1) - 1.0).max()))
        down_err = max(down_err, float(np.abs(cr_map(nearest_downsample(img, 2)) - nearest_downsample(base, 2)).max()))
    return {"scale": scale_err, "sum": sum_err, "downsample": down_err}


def noise_variance_errors(seed: int = 0, size: int = 256) -> dict:
    rng = rng_for(seed, "selfcheck-noise")
    s2, r2 = 0.01, 0.001
    out = {}
    for level in (0.1, 0.5, 0.9):
        patch = np.full((1, 1, size, size), level)
        noisy = add_noise(patch, s2, r2, rng)
        expect = level * s2 + r2
        out[f"var@{level}"] = abs(float(noisy.var()) - expect) / expect
    gammas = np.array([sample_degrade_params(rng).gamma for _ in range(100_000)])
    out["gamma_mean"] = abs(float(gammas.mean()) - sum(GAMMA_RANGE) / 2)
    return out


def isp_roundtrip_errors(images=None, seed: int = 0) -> dict:
    """Mean abs error of process(unprocess(img)) with and without the mosaic."""
    rng = rng_for(seed, "selfcheck-isp")
    if images is None:
        images = [synthetic_image(rng, 64, 64) for _ in range(10)]
    errs = {"plain": 0.0, "mosaic": 0.0}
    for img in images:
        img = np.asarray(img, dtype=np.float64)[None]
        for key, mos in (("plain", False), ("mosaic", True)):
            isp = IspParams(rng.uniform(1.9, 2.4), rng.uniform(1.5, 1.9), mosaic=mos)
            errs[key] = max(errs[key], float(np.abs(process(unprocess(img, isp), isp) - img).mean()))
    return errs


def metric_oracle_errors(seed: int = 0) -> dict:
    rng = rng_for(seed, "selfcheck-metrics")
    a = rng.uniform(0.0, 0.8, size=(3, 32, 32))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    closed = (2 * 0.4 * 0.6 + c1) / (0.4 ** 2 + 0.6 ** 2 + c1)
    del c2  # variance and covariance vanish, so the contrast-structure term is exactly 1
    return {
        "psnr_offset": abs(psnr(a, a + 0.1) - 20.0),
        "ssim_self": abs(ssim(a, a) - 1.0),
        "ssim_const": abs(ssim(np.full((3, 32, 32), 0.4), np.full((3, 32, 32), 0.6)) - closed),
    }


# -- runner ------------------------------------------------------------------------------

def _suite(name, fn, tol, detail_fmt=None):
    t = time.time()
    try:
        value = fn()
    except Exception as exc:  # a crashing suite is a failing suite
        return SuiteResult(name, False, float("nan"), tol, f"{type(exc).__name__}: {exc}", time.time() - t)
    if isinstance(value, dict):
        tols = tol if isinstance(tol, dict) else {k: tol for k in value}
        passed = all(value[k] < tols[k] for k in value)
        worst = max(value, key=lambda k: value[k] / tols[k])
        detail = ", ".join(f"{k}={v:.3g}" for k, v in value.items())
        return SuiteResult(name, passed, float(value[worst]), float(tols[worst]), detail, time.time() - t)
    return SuiteResult(name, bool(value < tol), float(value), float(tol), "", time.time() - t)


def run_suites(quick: bool = False) -> list:
    n_rt = 4 if quick else 20
    return [
        _suite("invertibility", lambda: roundtrip_error(n_rt), 1e-8),
        _suite("logdet-layers", layer_logdet_errors, 1e-5),
        _suite("logdet-composite", lambda: composite_logdet_error(steps=4 if quick else 12), 1e-4),
        _suite("gradcheck", lambda: loss_gradcheck(20 if quick else 50).max_rel_err, 1e-4),
        _suite("density-normalization", lambda: abs(toy_flow_mass() - 1.0), 1e-2),
        _suite("cr-invariance", lambda: cr_invariance_errors(20 if quick else 100), 1e-6),
        _suite("noise-variance", noise_variance_errors,
               {"var@0.1": 0.1, "var@0.5": 0.1, "var@0.9": 0.1, "gamma_mean": 0.02}),
        _suite("isp-roundtrip", isp_roundtrip_errors, {"plain": 1e-5, "mosaic": 2e-2}),
        _suite("metric-oracles", metric_oracle_errors, {"psnr_offset": 1e-9, "ssim_self": 1e-9, "ssim_const": 1e-6}),
    ]


def format_table(results: list) -> str:
    lines = [f"{'suite':<24}{'status':<8}{'error':>12}{'tol':>10}{'sec':>8}"]
    for r in results:
        lines.append(f"{r.suite:<24}{'PASS' if r.passed else 'FAIL':<8}{r.error:>12.3g}{r.tol:>10.1g}{r.seconds:>8.1f}")
        if r.detail:
            lines.append(f"    {r.detail}")
    return "\n".join(lines)


def selfcheck(report_path=None, quick: bool = False, echo=print) -> int:
    """Run every suite, print a table, optionally write JSON; 0 iff all pass."""
    results = run_suites(quick)
    echo(format_table(results))
    if report_path is not None:
        with open(report_path, "w") as fh:
            json.dump([asdict(r) for r in results], fh, indent=2)
    failed = [r.suite for r in results if not r.passed]
    if failed:
        echo("failed: " + ", ".join(failed))
        return 1
    return 0
