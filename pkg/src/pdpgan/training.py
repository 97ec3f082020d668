"""WGAN-GP training, fine-tuning and loss-history reporting."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import gan, kernels
from .optim import AdamState

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 10000
FULL_BATCH_LIMIT = 64


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    # "auto": whole dataset when it has <= 64 samples, else 64.
    batch_size: int | str = "auto"
    lam: float = gan.DEFAULT_LAMBDA
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    n_critic: int = 1
    seed: int = 0
    snapshot_every: int = 0
    noise_dim: int = gan.NOISE_DIM
    noise_sigma: float = 1.0
    g_hidden: tuple[int, ...] = gan.GENERATOR_HIDDEN
    d_hidden: tuple[int, ...] = gan.DISCRIMINATOR_HIDDEN
    alpha: float = gan.LEAKY_SLOPE
    convergence_window: int = 100
    # "fused" runs the hand-derived kernels, "tape" the generic autodiff.
    backend: str = "fused"

    def __post_init__(self) -> None:
        self.g_hidden = tuple(int(w) for w in self.g_hidden)
        self.d_hidden = tuple(int(w) for w in self.d_hidden)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (self.g_lr >= 0 and self.d_lr >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.backend not in ("fused", "tape"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if isinstance(self.batch_size, str):
            if self.batch_size not in ("auto", "full"):
                raise ValueError(f"batch_size must be an int, 'auto' or 'full', got {self.batch_size!r}")
        elif self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["g_hidden"] = list(self.g_hidden)
        d["d_hidden"] = list(self.d_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolve_batch(self, n: int) -> int:
        if self.batch_size == "full":
            return n
        if self.batch_size == "auto":
            return n if n <= FULL_BATCH_LIMIT else FULL_BATCH_LIMIT
        return min(int(self.batch_size), n)

    def build_networks(self, pdp_length: int, rng: np.random.Generator):
        g = gan.GeneratorNet.create(rng, self.noise_dim, self.g_hidden, pdp_length, self.alpha)
        d = gan.DiscriminatorNet.create(rng, pdp_length, self.d_hidden, self.alpha)
        return g, d

    def architecture(self, pdp_length: int) -> dict:
        return {
            "generator": {
                "role": "generator",
                "widths": [self.noise_dim, *self.g_hidden, pdp_length],
                "activations": ["leaky_relu"] * len(self.g_hidden) + ["sigmoid"],
                "alpha": self.alpha,
            },
            "discriminator": {
                "role": "discriminator",
                "widths": [pdp_length, *self.d_hidden, 1],
                "activations": ["leaky_relu"] * len(self.d_hidden) + ["linear"],
                "alpha": self.alpha,
            },
        }


@dataclass
class TrainReport:
    g_loss: list[float] = field(default_factory=list)
    d_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    convergence_epoch: int | None = None
    checkpoint_path: str | None = None
    snapshots: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.d_loss)

    def summary(self) -> dict:
        return {
            "epochs": self.epochs,
            "final_g_loss": self.g_loss[-1] if self.g_loss else None,
            "final_d_loss": self.d_loss[-1] if self.d_loss else None,
            "total_seconds": float(sum(self.seconds)),
            "convergence_epoch": self.convergence_epoch,
            "checkpoint": self.checkpoint_path,
            "snapshots": list(self.snapshots),
            "config": self.config,
        }

    def write(self, csv_path, json_path=None) -> None:
        """Loss history as CSV (epoch, g_loss, d_loss, seconds) plus JSON summary."""
        csv_path = os.fspath(csv_path)
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "g_loss", "d_loss", "seconds"])
            for i, (g, d, s) in enumerate(zip(self.g_loss, self.d_loss, self.seconds)):
                w.writerow([i, repr(g), repr(d), f"{s:.6f}"])
        if json_path is None:
            json_path = os.path.splitext(csv_path)[0] + ".json"
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, csv_path) -> "TrainReport":
        rep = cls()
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.g_loss.append(float(row["g_loss"]))
                rep.d_loss.append(float(row["d_loss"]))
                rep.seconds.append(float(row["seconds"]))
        json_path = os.path.splitext(os.fspath(csv_path))[0] + ".json"
        if os.path.exists(json_path):
            with open(json_path) as fh:
                s = json.load(fh)
            rep.convergence_epoch = s.get("convergence_epoch")
            rep.checkpoint_path = s.get("checkpoint")
            rep.snapshots = s.get("snapshots", [])
            rep.config = s.get("config", {})
        return rep


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: gan.Checkpoint, report: TrainReport):
        super().__init__(f"divergence at epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good
        self.report = report


def convergence_epoch(history, window: int, tol: float) -> int:
    """First epoch ``e`` where ``std(d_loss[e:e+window]) < tol``.

    Returns the history length when no window qualifies.
    """
    losses = history.d_loss if isinstance(history, TrainReport) else history
    x = np.asarray(losses, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be >= 2")
    if window > x.size:
        raise ValueError(f"window {window} exceeds history length {x.size}")
    windows = np.lib.stride_tricks.sliding_window_view(x, window)
    hits = np.flatnonzero(windows.std(axis=1) < tol)
    return int(hits[0]) if hits.size else int(x.size)


def _estimate_convergence(d_loss: Sequence[float], window: int) -> int | None:
    # Tolerance: 1.5x the spread of the final window.
    if window < 2 or len(d_loss) < 2 * window:
        return None
    tol = 1.5 * float(np.std(d_loss[-window:]))
    return convergence_epoch(d_loss, window, tol)


def as_matrix(dataset) -> np.ndarray:
    """Stack PDPs (arrays or objects with ``.powers``) into a 2-D array."""
    if isinstance(dataset, np.ndarray):
        data = np.asarray(dataset, dtype=np.float64)
    else:
        rows = [getattr(p, "powers", p) for p in dataset]
        if hasattr(dataset, "rows"):
            rows = dataset.rows
        data = np.asarray(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty list of equal-length PDPs")
    return data


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "shuffle", "noise", "mix")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, children)}


def _optimizer_state(d_state: AdamState, g_lr: float) -> dict:
    return {"d_adam": {"m": d_state.m, "v": d_state.v, "step": d_state.step},
            "g_sgd": {"lr": g_lr}}


def _check_state(params, state: AdamState) -> None:
    for what, arrays in (("first moments", state.m), ("second moments", state.v)):
        if [a.shape for a in arrays] != [p.shape for p in params]:
            raise ValueError(f"optimizer {what} do not match discriminator parameters")


def _tape_losses(G: gan.Mlp, D: gan.Mlp, real, z, x_tilde, lam):
    with ad.Tape() as tape:
        gb, db = G.bind(), D.bind()
        d_loss, g_loss = gan.wgan_gp_losses(gb, db, real, z, lam, x_tilde=x_tilde)
        return tape, gb, db, d_loss, g_loss


def train(
    config: TrainConfig,
    dataset,
    init: gan.Checkpoint | None = None,
    snapshot_dir=None,
    reset_optimizer: bool = False,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[gan.Checkpoint, TrainReport]:
    """Alternate critic (Adam) and generator (SGD) updates for ``config.epochs``.

    Each epoch shuffles the data and, per batch, runs ``n_critic`` critic
    updates followed by one generator update.  The run is a pure function
    of ``(config, dataset, init)``.
    """
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    data = as_matrix(dataset)
    n, length = data.shape
    rngs = _streams(config.seed)

    if init is None:
        G, D = config.build_networks(length, rngs["init"])
        d_state = AdamState.zeros_like(D.parameters())
        start_epoch = 0
    else:
        diffs = _arch_diffs(config.architecture(length), init.architecture())
        if diffs:
            raise gan.ArchitectureMismatch("checkpoint does not match configured architecture", diffs)
        G, D = init.generator.copy(), init.discriminator.copy()
        saved = init.optimizer_state.get("d_adam")
        if saved and not reset_optimizer:
            d_state = AdamState.from_dict(saved)
            d_state = AdamState([np.array(m, dtype=np.float64) for m in d_state.m],
                                [np.array(v, dtype=np.float64) for v in d_state.v], d_state.step)
        else:
            d_state = AdamState.zeros_like(D.parameters())
        start_epoch = init.epoch

    # Parameters and moments are updated in place from here on.
    d_params, g_params = D.parameters(), G.parameters()
    _check_state(d_params, d_state)
    batch = config.resolve_batch(n)
    noise = gan.NoiseSpec(config.noise_dim, config.noise_sigma)
    g_codes = kernels.codes(G.activations)
    d_codes = kernels.codes(D.activations)
    fingerprint = config.fingerprint()
    report = TrainReport(config=config.to_dict())

    def checkpoint(epoch: int) -> gan.Checkpoint:
        return gan.Checkpoint(
            G.copy(), D.copy(),
            _optimizer_state(AdamState([m.copy() for m in d_state.m],
                                       [v.copy() for v in d_state.v], d_state.step),
                             config.g_lr),
            epoch, fingerprint,
        )

    last_good = checkpoint(start_epoch)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rngs["shuffle"].permutation(n)
        d_sum = g_sum = 0.0
        steps = 0
        for lo in range(0, n, batch):
            real = data[perm[lo:lo + batch]]
            b = real.shape[0]
            for _ in range(config.n_critic):
                z = gan.sample_noise(noise, b, rngs["noise"])
                fake = kernels.mlp_forward(G.weights, G.biases, g_codes, G.alpha, z)
                x_tilde = gan.interpolate(real, fake, rngs["mix"])
                if config.backend == "fused":
                    d_loss, _, _, dws, dbs = kernels.critic_step(
                        D.weights, D.biases, d_codes, D.alpha, real, fake, x_tilde,
                        config.lam, ad.NORM_EPS)
                    grads = [g for pair in zip(dws, dbs) for g in pair]
                else:
                    tape, _, db, dl, _ = _tape_losses(G, D, real, z, x_tilde, config.lam)
                    grads = tape.gradient(dl, db.params)
                    d_loss = float(dl.value)
                d_state.step += 1
                kernels.adam_update(d_params, grads, d_state.m, d_state.v, d_state.step,
                                    config.d_lr, config.beta1, config.beta2, config.adam_eps)
            z = gan.sample_noise(noise, b, rngs["noise"])
            if config.backend == "fused":
                g_loss, gws, gbs = kernels.generator_step(
                    G.weights, G.biases, g_codes, D.weights, D.biases, d_codes, G.alpha, z)
                grads = [g for pair in zip(gws, gbs) for g in pair]
            else:
                with ad.Tape() as tape:
                    gb = G.bind()
                    gl = ad.neg(ad.mean(D.bind()(gb(z))))
                    grads = tape.gradient(gl, gb.params)
                g_loss = float(gl.value)
            kernels.sgd_update(g_params, grads, config.g_lr)
            d_sum += d_loss
            g_sum += g_loss
            steps += 1

        d_mean, g_mean = d_sum / steps, g_sum / steps
        if not (math.isfinite(d_mean) and math.isfinite(g_mean)):
            raise TrainingDiverged(start_epoch + epoch, last_good, report)
        report.d_loss.append(d_mean)
        report.g_loss.append(g_mean)
        report.seconds.append(time.perf_counter() - t0)
        last_good = checkpoint(start_epoch + epoch + 1)
        if on_epoch is not None:
            on_epoch(epoch, g_mean, d_mean)
        if snapshot_dir is not None and config.snapshot_every and (epoch + 1) % config.snapshot_every == 0:
            path = os.path.join(os.fspath(snapshot_dir), f"epoch-{start_epoch + epoch + 1:06d}.ckpt")
            gan.save_checkpoint(last_good, path)
            report.snapshots.append(path)

    report.convergence_epoch = _estimate_convergence(report.d_loss, config.convergence_window)
    log.info("trained %d epochs, final d_loss %.4g g_loss %.4g",
             config.epochs, report.d_loss[-1], report.g_loss[-1])
    return last_good, report


def _arch_diffs(expected: dict, actual: dict) -> list[str]:
    return (gan.architecture_diff(expected["generator"], actual["generator"])
            + gan.architecture_diff(expected["discriminator"], actual["discriminator"]))


def fine_tune(
    config: TrainConfig,
    target_dataset,
    source: gan.Checkpoint,
    snapshot_dir=None,
) -> tuple[gan.Checkpoint, TrainReport]:
    """Continue training both networks from ``source`` on a target dataset.

    Only parameters transfer; optimizer state starts fresh.  Zero epochs
    returns a copy of ``source``.
    """
    data = as_matrix(target_dataset)
    diffs = _arch_diffs(config.architecture(data.shape[1]), source.architecture())
    if diffs:
        raise gan.ArchitectureMismatch("source checkpoint does not match configured architecture", diffs)
    if config.epochs == 0:
        return source.copy(), TrainReport(config=config.to_dict())
    return train(config, data, init=source, snapshot_dir=snapshot_dir, reset_optimizer=True)


def generate(ckpt: gan.Checkpoint, count: int, seed: int, sigma: float = 1.0) -> np.ndarray:
    """``count`` generator outputs from seeded noise."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    noise = gan.NoiseSpec(ckpt.generator.in_width, sigma)
    z = gan.sample_noise(noise, count, rng)
    return ckpt.generator.forward(z)
