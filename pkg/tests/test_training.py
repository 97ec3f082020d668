import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdpgan import gan
from pdpgan.training import (
    TrainConfig,
    TrainingDiverged,
    TrainReport,
    convergence_epoch,
    fine_tune,
    generate,
    train,
)

SMALL = dict(noise_dim=8, g_hidden=(12, 12), d_hidden=(12, 8))


def data(n=40, length=16, seed=0):
    r = np.random.default_rng(seed)
    tau = np.arange(length)
    rows = np.exp(-tau / r.uniform(2, 5, size=(n, 1))) * r.uniform(0.5, 1, size=(n, length))
    return rows / rows.max(axis=1, keepdims=True)


def cfg(**kw):
    return TrainConfig(**{**SMALL, "epochs": 5, "batch_size": 16, **kw})


def params_bytes(net):
    return b"".join(p.tobytes() for p in net.parameters())


# -- config -------------------------------------------------------------------------

def test_defaults_follow_published_setup():
    c = TrainConfig()
    assert c.epochs == 10000 and c.lam == 10.0
    assert c.g_lr == c.d_lr == 2e-4
    assert (c.beta1, c.beta2, c.adam_eps) == (0.5, 0.9, 1e-8)
    assert c.n_critic == 1 and c.noise_dim == 100


@pytest.mark.parametrize("bad", [dict(epochs=-1), dict(g_lr=-1.0), dict(n_critic=0), dict(lam=-1.0),
                                 dict(backend="gpu"), dict(batch_size=0), dict(batch_size="half")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_batch_resolution():
    c = TrainConfig()
    assert c.resolve_batch(21) == 21
    assert c.resolve_batch(64) == 64
    assert c.resolve_batch(10_000) == 64
    assert TrainConfig(batch_size="full").resolve_batch(500) == 500
    assert TrainConfig(batch_size=16).resolve_batch(10) == 10


def test_config_dict_round_trip():
    c = cfg(seed=4)
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.fingerprint() == TrainConfig.from_dict(c.to_dict()).fingerprint()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochz": 3})


def test_train_rejects_zero_epochs():
    with pytest.raises(ValueError):
        train(cfg(epochs=0), data())


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(cfg(), np.zeros((0, 16)))


# -- the loop -----------------------------------------------------------------------

def test_training_is_deterministic():
    a_ck, a_rep = train(cfg(seed=3), data())
    b_ck, b_rep = train(cfg(seed=3), data())
    assert params_bytes(a_ck.generator) == params_bytes(b_ck.generator)
    assert params_bytes(a_ck.discriminator) == params_bytes(b_ck.discriminator)
    assert a_rep.d_loss == b_rep.d_loss and a_rep.g_loss == b_rep.g_loss
    c_ck, _ = train(cfg(seed=4), data())
    assert params_bytes(a_ck.generator) != params_bytes(c_ck.generator)


def test_history_lengths_and_finiteness():
    ck, rep = train(cfg(epochs=7), data())
    assert len(rep.d_loss) == len(rep.g_loss) == len(rep.seconds) == 7
    assert all(math.isfinite(x) for x in rep.d_loss + rep.g_loss)
    assert ck.epoch == 7
    # 40 samples in batches of 16 gives 3 critic updates per epoch
    assert ck.optimizer_state["d_adam"]["step"] == 21


def test_fused_and_tape_backends_agree():
    a, ra = train(cfg(epochs=3), data())
    b, rb = train(cfg(epochs=3, backend="tape"), data())
    for p, q in zip(a.generator.parameters() + a.discriminator.parameters(),
                    b.generator.parameters() + b.discriminator.parameters()):
        np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(ra.d_loss, rb.d_loss, rtol=1e-9)


def test_updates_touch_only_their_network():
    c = cfg(seed=1)
    G0, D0 = c.build_networks(16, np.random.Generator(np.random.PCG64(np.random.SeedSequence(1).spawn(4)[0])))
    frozen_g, _ = train(dataclasses.replace(c, g_lr=0.0), data())
    assert params_bytes(frozen_g.generator) == params_bytes(G0)
    assert params_bytes(frozen_g.discriminator) != params_bytes(D0)
    frozen_d, _ = train(dataclasses.replace(c, d_lr=0.0), data())
    assert params_bytes(frozen_d.discriminator) == params_bytes(D0)
    assert params_bytes(frozen_d.generator) != params_bytes(G0)


def test_n_critic_counts_updates():
    ck, _ = train(cfg(epochs=2, n_critic=3), data())
    assert ck.optimizer_state["d_adam"]["step"] == 2 * 3 * 3


def test_divergence_aborts_with_last_good():
    with pytest.raises(TrainingDiverged, match="divergence at epoch") as err:
        train(cfg(epochs=50, d_lr=1e300, g_lr=1e300), data())
    last = err.value.last_good
    assert last.epoch == err.value.epoch
    assert all(np.all(np.isfinite(p)) for p in last.generator.parameters() + last.discriminator.parameters())
    assert len(err.value.report.d_loss) == err.value.epoch


def test_snapshots(tmp_path):
    ck, rep = train(cfg(epochs=4, snapshot_every=2), data(), snapshot_dir=tmp_path)
    assert [p.rsplit("/", 1)[-1] for p in rep.snapshots] == ["epoch-000002.ckpt", "epoch-000004.ckpt"]
    last = gan.load_checkpoint(rep.snapshots[-1])
    assert params_bytes(last.generator) == params_bytes(ck.generator)


def test_resume_from_checkpoint_continues_epoch_count():
    ck, _ = train(cfg(epochs=2), data())
    ck2, _ = train(cfg(epochs=3), data(), init=ck)
    assert ck2.epoch == 5


# -- fine-tuning ----------------------------------------------------------------------

def test_fine_tune_zero_epochs_is_identity():
    src, _ = train(cfg(), data())
    out, rep = fine_tune(cfg(epochs=0), data(seed=1), src)
    assert params_bytes(out.generator) == params_bytes(src.generator)
    assert params_bytes(out.discriminator) == params_bytes(src.discriminator)
    assert rep.epochs == 0


def test_fine_tune_zero_learning_rates_is_identity():
    src, _ = train(cfg(), data())
    out, rep = fine_tune(cfg(epochs=6, g_lr=0.0, d_lr=0.0), data(), src)
    assert params_bytes(out.generator) == params_bytes(src.generator)
    assert params_bytes(out.discriminator) == params_bytes(src.discriminator)
    assert rep.epochs == 6


def test_fine_tune_starts_fresh_optimizer_state():
    src, _ = train(cfg(epochs=3), data())
    out, _ = fine_tune(cfg(epochs=1), data(n=10), src)
    # one full batch of 10 samples: exactly one critic update since transfer
    assert out.optimizer_state["d_adam"]["step"] == 1


def test_fine_tune_architecture_mismatch():
    src, _ = train(cfg(), data())
    with pytest.raises(gan.ArchitectureMismatch) as err:
        fine_tune(cfg(g_hidden=(12, 10)), data(), src)
    assert any("generator layer 2" in d for d in err.value.differences)
    with pytest.raises(gan.ArchitectureMismatch):
        fine_tune(cfg(), data(length=20), src)


def test_generate_contract():
    ck, _ = train(cfg(), data())
    a = generate(ck, 21, seed=5)
    assert a.shape == (21, 16) and np.all((a > 0) & (a < 1))
    assert a.tobytes() == generate(ck, 21, seed=5).tobytes()


# -- reports ----------------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    ck, rep = train(cfg(epochs=4), data())
    rep.checkpoint_path = "x.ckpt"
    rep.write(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "g_loss", "d_loss", "seconds"]
    assert len(rows) == 5
    back = TrainReport.read(tmp_path / "r.csv")
    assert back.d_loss == rep.d_loss and back.g_loss == rep.g_loss
    assert back.checkpoint_path == "x.ckpt"
    assert back.config == rep.config


def test_convergence_epoch_examples():
    assert convergence_epoch([3.0] * 50, 10, 1e-9) == 0
    osc = [(-1.0) ** i for i in range(60)]
    assert convergence_epoch(osc, 10, 0.1) == 60
    with pytest.raises(ValueError):
        convergence_epoch([1.0] * 5, 10, 0.1)
    with pytest.raises(ValueError):
        convergence_epoch([1.0] * 5, 1, 0.1)


def _scan(history, window, tol):
    for e in range(len(history) - window + 1):
        if np.std(history[e:e + window]) < tol:
            return e
    return len(history)


def test_convergence_epoch_decaying_noise():
    r = np.random.default_rng(0)
    h = list(np.exp(-np.arange(400) / 60.0) * r.normal(size=400) + 2.0)
    for tol in (0.5, 0.1, 0.05, 0.01, 1e-4):
        assert convergence_epoch(h, 50, tol) == _scan(h, 50, tol)
    # amplitude exp(-e/60) drops below a std of ~0.1 near e = 60 ln 10
    assert 100 < convergence_epoch(h, 50, 0.1) < 160


@given(st.lists(st.floats(-10, 10), min_size=5, max_size=80), st.integers(2, 5), st.floats(0, 3))
def test_convergence_epoch_matches_scan(history, window, tol):
    assert convergence_epoch(history, window, tol) == _scan(history, window, tol)
