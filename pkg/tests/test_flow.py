import math

import numpy as np
import pytest

from helpers import make_identity_flow
from llsrflow import flow as flow_mod
from llsrflow.crmap import rearrange_to_pyramid
from llsrflow.flow import (
    ActNorm,
    AffineInjector,
    CondAffineCoupling,
    FlowModel,
    InvConv1x1,
    flow_forward,
    flow_inverse,
    initialize_actnorm,
    nll,
    positive_scale,
)
from llsrflow.layout import FlowLayout
from llsrflow.ndtensor import ShapeError, Tensor, gradcheck, no_grad
from llsrflow.params import ParamStore
from llsrflow.selfcheck import (
    composite_logdet_error,
    fd_logdet,
    layer_logdet_errors,
    perturb,
    random_cond,
    roundtrip_error,
    toy_flow_mass,
)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def store():
    return ParamStore(np.float64)


def fd_layer_logdet(layer, x, cond):
    def fn(b):
        c = None if cond is None else t(np.repeat(cond.data, b.shape[0], axis=0))
        y, _ = layer.forward(t(b), c)
        return y.data.reshape(b.shape[0], -1)

    return fd_logdet(fn, x)


# -- actnorm ---------------------------------------------------------------------------

def test_actnorm_identity_and_scale():
    an = ActNorm(store(), "a", 3)
    an.initialized = True
    x = t(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    y, ld = an.forward(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert float(ld.data) == 0.0
    an.logs.data[...] = math.log(2.0)
    _, ld = an.forward(x)
    assert abs(float(ld.data) - 16 * 3 * math.log(2)) < 1e-12
    assert abs(float(ld.data) - 33.2711) < 1e-4


def test_actnorm_data_init_moments():
    an = ActNorm(store(), "a", 3)
    x = np.random.default_rng(1).normal(2.0, 3.0, size=(8, 3, 5, 5))
    y, _ = an.forward(t(x))
    assert an.initialized
    assert np.abs(y.data.mean(axis=(0, 2, 3))).max() < 1e-4
    assert np.abs(y.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4


# -- invertible 1x1 ----------------------------------------------------------------------

def test_invconv_identity():
    ic = InvConv1x1(store(), "i", 3, np.random.default_rng(0))
    ic.perm, ic.sign = np.eye(3), np.ones(3)
    ic.lower.data[...] = 0
    ic.upper.data[...] = 0
    ic.log_s.data[...] = 0
    x = t(np.random.default_rng(1).normal(size=(1, 3, 4, 4)))
    y, ld = ic.forward(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert float(ld.data) == 0.0


def test_invconv_logdet_and_roundtrip():
    rng = np.random.default_rng(2)
    st = store()
    ic = InvConv1x1(st, "i", 3, rng)
    perturb(st, rng, 0.3)
    x = rng.normal(size=(1, 3, 4, 4))
    _, ld = ic.forward(t(x))
    fd = fd_layer_logdet(ic, x, None)
    assert abs(float(ld.data) - fd) / abs(fd) < 1e-8
    np.testing.assert_allclose(ic.weight().data @ ic.inverse_weight().data, np.eye(3), atol=1e-12)
    y, _ = ic.forward(t(x))
    assert np.abs(ic.inverse(y).data - x).max() < 1e-10


# -- coupling / injector -------------------------------------------------------------------

def test_scale_is_one_at_zero():
    assert positive_scale(t(0.0)).data == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("cls", [CondAffineCoupling, AffineInjector])
def test_zero_init_is_identity(cls):
    layer = cls(store(), "l", 4, 2, 8, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = t(rng.normal(size=(2, 4, 3, 3)))
    cond = t(rng.normal(size=(2, 2, 3, 3)))
    y, ld = layer.forward(x, cond)
    np.testing.assert_array_equal(y.data, x.data)
    assert np.all(ld.data == 0.0)


def test_coupling_logdet_small_input():
    rng = np.random.default_rng(3)
    st = store()
    layer = CondAffineCoupling(st, "c", 2, 1, 8, rng)
    perturb(st, rng, 0.5)
    x = rng.normal(size=(1, 2, 2, 2))
    cond = t(rng.normal(size=(1, 1, 2, 2)))
    _, ld = layer.forward(t(x), cond)
    fd = fd_layer_logdet(layer, x, cond)
    assert abs(float(ld.data[0]) - fd) / abs(fd) < 1e-6


@pytest.mark.parametrize("cls", [CondAffineCoupling, AffineInjector])
def test_coupling_injector_roundtrip(cls):
    rng = np.random.default_rng(4)
    st = store()
    layer = cls(st, "l", 5, 3, 8, rng)
    perturb(st, rng, 0.3)
    x = t(rng.normal(size=(2, 5, 4, 4)))
    cond = t(rng.normal(size=(2, 3, 4, 4)))
    y, _ = layer.forward(x, cond)
    assert np.abs(layer.inverse(y, cond).data - x.data).max() < 1e-10


def test_injector_constant_scale_logdet(monkeypatch):
    monkeypatch.setattr(flow_mod, "positive_scale", lambda raw: raw * 0.0 + 2.0)
    layer = AffineInjector(store(), "j", 3, 2, 4, np.random.default_rng(0))
    y, ld = layer.forward(t(np.ones((1, 3, 2, 2))), t(np.zeros((1, 2, 2, 2))))
    assert abs(float(ld.data[0]) - 12 * math.log(2)) < 1e-12
    np.testing.assert_allclose(y.data, 2.0)


def test_cond_shape_mismatch():
    layer = CondAffineCoupling(store(), "c", 4, 2, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer.forward(t(np.zeros((1, 4, 4, 4))), t(np.zeros((1, 2, 2, 2))))


def test_each_layer_logdet_vs_jacobian():
    errs = layer_logdet_errors()
    assert set(errs) == {"actnorm", "invconv", "coupling", "injector"}
    assert max(errs.values()) < 1e-5, errs


# -- full model -------------------------------------------------------------------------------

def small_model(size=8, steps=2, hidden=8, seed=0):
    lay = FlowLayout(3, steps, 3, "1/2", (size, size))
    return lay, FlowModel(lay, hidden, seed, dtype=np.float64)


def test_identity_model_is_rearrangement():
    lay, model = small_model()
    make_identity_flow(model)
    rng = np.random.default_rng(0)
    y = rng.uniform(size=(2, 3, 8, 8))
    cond = random_cond(lay, 2, rng)
    z, ld = flow_forward(t(y), cond, model)
    for a, b in zip(z, rearrange_to_pyramid(y, lay)):
        np.testing.assert_array_equal(a.data, b.data)
    assert np.all(ld.data == 0.0)
    np.testing.assert_array_equal(flow_inverse(rearrange_to_pyramid(y, lay), cond, model).data, y)


def test_logdet_accounting():
    lay, model = small_model()
    rng = np.random.default_rng(1)
    y = rng.uniform(size=(2, 3, 8, 8))
    cond = random_cond(lay, 2, rng)
    initialize_actnorm(model, y, cond)
    perturb(model.store, rng, 0.05)
    terms = []
    _, total = flow_forward(t(y), cond, model, log_terms=terms)
    assert len(terms) == 3 * 2 * 4
    acc = np.zeros(2)
    for term in terms:
        acc = acc + np.broadcast_to(term.data, (2,))
    assert np.abs(acc - total.data).max() < 1e-12


def test_composite_logdet_vs_jacobian():
    assert composite_logdet_error() < 1e-5


def test_roundtrip_f64_full_model():
    assert roundtrip_error(count=3) < 1e-8


def test_roundtrip_f32():
    rng = np.random.default_rng(5)
    lay = FlowLayout(hr_size=(16, 16))
    model = FlowModel(lay, 64, 0, dtype=np.float32)
    y = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
    cond = [Tensor(c.data.astype(np.float32)) for c in random_cond(lay, 2, rng)]
    initialize_actnorm(model, y, cond)
    perturb(model.store, rng, 0.01)
    with no_grad():
        z, _ = flow_forward(Tensor(y), cond, model)
        back = flow_inverse(z, cond, model)
    assert np.abs(back.data - y).max() < 1e-3


def test_layout_and_cond_errors():
    lay, model = small_model()
    cond = random_cond(lay, 1, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        flow_forward(t(np.zeros((1, 3, 16, 16))), cond, model)
    with pytest.raises(ShapeError):
        flow_forward(t(np.zeros((1, 3, 8, 8))), cond[:2], model)
    z, _ = flow_forward(t(np.zeros((1, 3, 8, 8))) + 0.5, cond, model)
    with pytest.raises(ShapeError):
        flow_inverse(z[:2], cond, model)


# -- nll --------------------------------------------------------------------------------

def test_nll_examples():
    z = [t(np.full((1, 6, 4, 4), 0.2)), t(np.full((1, 12, 2, 2), -0.1)), t(np.ones((1, 48, 1, 1)))]
    d = sum(p.size for p in z)
    zero = t(np.zeros(1))
    base = float(nll(z, zero, z).data)
    assert abs(base - 0.5 * math.log(2 * math.pi)) < 1e-12
    delta = 3.7
    shifted = float(nll(z, t(np.full(1, delta)), z).data)
    assert abs((base - shifted) - delta / d) < 1e-12


def test_density_normalization_toy():
    assert abs(toy_flow_mass() - 1.0) < 0.01


def test_gradcheck_nll_of_flow():
    rng = np.random.default_rng(6)
    lay, model = small_model(steps=3)
    y = rng.uniform(size=(2, 3, 8, 8))
    cond = random_cond(lay, 2, rng)
    initialize_actnorm(model, rng.uniform(size=(16, 3, 8, 8)), random_cond(lay, 16, rng))
    perturb(model.store, rng, 0.05)
    mean = rearrange_to_pyramid(rng.uniform(size=(2, 3, 8, 8)), lay)
    tensors = model.store.tensors()
    coords = []
    for _ in range(50):
        i = int(rng.integers(len(tensors)))
        coords.append((i, int(rng.integers(tensors[i].size))))

    def f():
        z, ld = flow_forward(t(y), cond, model)
        return nll(z, ld, mean)

    rep = gradcheck(f, tensors, coords=coords)
    assert rep.max_rel_err < 1e-4, rep.max_rel_err


def test_flow_parameters_named_by_level_and_step():
    _, model = small_model()
    names = model.store.names()
    assert "flow/L0/S0/actnorm/logs" in names and "flow/L2/S1/injector/net/c3/w" in names
