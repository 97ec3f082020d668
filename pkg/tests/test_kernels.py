import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdpgan import autodiff as ad
from pdpgan import gan, kernels
from pdpgan.optim import AdamState, adam_step, sgd_step

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


def setup(seed, noise=7, out=9, g_hidden=(6, 5), d_hidden=(8, 4), batch=5):
    r = np.random.default_rng(seed)
    G = gan.GeneratorNet.create(r, noise, g_hidden, out)
    D = gan.DiscriminatorNet.create(r, out, d_hidden)
    # nonzero biases exercise the bias paths too
    for net in (G, D):
        net.biases = [r.normal(size=b.shape) * 0.1 for b in net.biases]
    real = r.uniform(size=(batch, out))
    z = r.normal(size=(batch, noise))
    fake = G.forward(z)
    return G, D, real, z, fake, gan.interpolate(real, fake, r)


def tape_critic(G, D, real, z, x_tilde, lam):
    with ad.Tape() as tape:
        db = D.bind()
        d_loss, _ = gan.wgan_gp_losses(G.bind(), db, real, z, lam, x_tilde=x_tilde)
        return float(d_loss.value), tape.gradient(d_loss, db.params)


def tape_generator(G, D, z):
    with ad.Tape() as tape:
        gb = G.bind()
        loss = ad.neg(ad.mean(D.bind()(gb(z))))
        return float(loss.value), tape.gradient(loss, gb.params)


def test_backend_selection():
    assert kernels.BACKEND in ("python", "cython")
    assert kernels.get_backend("python").__name__.endswith("_kernels_py")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
@given(seed=st.integers(0, 2**31), lam=st.sampled_from([0.0, 1.0, 10.0]))
def test_critic_kernel_matches_tape(backend, seed, lam):
    G, D, real, z, fake, x_tilde = setup(seed)
    k = kernels.get_backend(backend)
    loss, wdist, pen, dws, dbs = k.critic_step(D.weights, D.biases, kernels.codes(D.activations),
                                              D.alpha, real, fake, x_tilde, lam, ad.NORM_EPS)
    ref_loss, ref = tape_critic(G, D, real, z, x_tilde, lam)
    assert loss == pytest.approx(ref_loss, rel=1e-12, abs=1e-12)
    assert wdist == pytest.approx(D.forward(fake).mean() - D.forward(real).mean(), abs=1e-12)
    assert loss == pytest.approx(wdist + pen, abs=1e-12)
    for got, want in zip([g for pair in zip(dws, dbs) for g in pair], ref):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@given(seed=st.integers(0, 2**31))
def test_generator_kernel_matches_tape(backend, seed):
    G, D, real, z, fake, x_tilde = setup(seed)
    k = kernels.get_backend(backend)
    loss, dws, dbs = k.generator_step(G.weights, G.biases, kernels.codes(G.activations),
                                      D.weights, D.biases, kernels.codes(D.activations), G.alpha, z)
    ref_loss, ref = tape_generator(G, D, z)
    assert loss == pytest.approx(ref_loss, rel=1e-13, abs=1e-14)
    for got, want in zip([g for pair in zip(dws, dbs) for g in pair], ref):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_mlp_forward_matches_reference(backend, rng):
    G, D, real, z, fake, x_tilde = setup(3)
    k = kernels.get_backend(backend)
    out, cache = k.mlp_forward(G.weights, G.biases, kernels.codes(G.activations), G.alpha, z)
    np.testing.assert_allclose(out, G.forward(z), rtol=0, atol=1e-15)
    assert len(cache) == G.num_layers


def test_critic_kernel_rejects_sigmoid():
    G, D, real, z, fake, x_tilde = setup(0)
    for backend in BACKENDS:
        with pytest.raises(ValueError, match="leaky"):
            kernels.get_backend(backend).critic_step(
                G.weights, G.biases, kernels.codes(G.activations), G.alpha, z, z, z, 10.0, 1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
def test_compiled_and_python_agree_on_full_size_nets():
    r = np.random.default_rng(1)
    G = gan.GeneratorNet.create(r)
    D = gan.DiscriminatorNet.create(r)
    z = r.normal(size=(21, 100))
    real = r.uniform(size=(21, 401))
    fake = G.forward(z)
    x_tilde = gan.interpolate(real, fake, r)
    dc = kernels.codes(D.activations)
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    a = py.critic_step(D.weights, D.biases, dc, D.alpha, real, fake, x_tilde, 10.0, 1e-12)
    b = cy.critic_step(D.weights, D.biases, dc, D.alpha, real, fake, x_tilde, 10.0, 1e-12)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    for u, v in zip(a[3] + a[4], b[3] + b[4]):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_in_place_adam_matches_functional(backend, rng):
    k = kernels.get_backend(backend)
    params = [rng.normal(size=(4, 3)), rng.normal(size=3)]
    state = AdamState.zeros_like(params)
    p_ip = [p.copy() for p in params]
    m_ip = [np.zeros_like(p) for p in params]
    v_ip = [np.zeros_like(p) for p in params]
    for step in range(1, 6):
        grads = [rng.normal(size=p.shape) for p in params]
        params, state = adam_step(params, grads, state, 1e-2, 0.5, 0.9, 1e-8)
        k.adam_update(p_ip, grads, m_ip, v_ip, step, 1e-2, 0.5, 0.9, 1e-8)
    for a, b in zip(params + state.m + state.v, p_ip + m_ip + v_ip):
        np.testing.assert_allclose(a, b, rtol=1e-15, atol=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_in_place_sgd_matches_functional(backend, rng):
    k = kernels.get_backend(backend)
    params = [rng.normal(size=(4, 3)), rng.normal(size=3)]
    grads = [rng.normal(size=p.shape) for p in params]
    want = sgd_step(params, grads, 0.3)
    k.sgd_update(params, grads, 0.3)
    for a, b in zip(want, params):
        assert a.tobytes() == b.tobytes()
