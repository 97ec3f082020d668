"""Dense generator/critic networks, WGAN-GP losses and checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

NOISE_DIM = 100
PDP_LENGTH = 401
GENERATOR_HIDDEN = (128, 128, 128, 128)
DISCRIMINATOR_HIDDEN = (512, 256, 128, 64)
LEAKY_SLOPE = 0.2
DEFAULT_LAMBDA = 10.0

ACTIVATIONS = ("linear", "leaky_relu", "sigmoid")


class ArchitectureMismatch(ValueError):
    """Parameters or checkpoints that do not fit the expected layer layout."""

    def __init__(self, message: str, differences: Sequence[str] = ()):
        self.differences = list(differences)
        if self.differences:
            message = message + ": " + "; ".join(self.differences)
        super().__init__(message)


@dataclass
class Mlp:
    """Fully connected network computing ``act(x @ W + b)`` layer by layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    alpha: float = LEAKY_SLOPE
    role: str = "mlp"

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.activations = tuple(self.activations)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if len(self.activations) != self.num_layers:
            raise ValueError(
                f"{self.num_layers} layers but {len(self.activations)} activations"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        diffs = _shape_diffs(self.descriptor(), self.weights, self.biases)
        if diffs:
            raise ArchitectureMismatch(f"{self.role} parameters do not match widths", diffs)

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    @classmethod
    def initialized(cls, widths, activations, rng: np.random.Generator,
                    alpha: float = LEAKY_SLOPE, role: str = "mlp") -> "Mlp":
        """Weights uniform in +-1/sqrt(fan_in), zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(widths), tuple(activations), weights, biases, alpha, role)

    @classmethod
    def zeros(cls, widths, activations, alpha: float = LEAKY_SLOPE, role: str = "mlp") -> "Mlp":
        weights = [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(b) for b in widths[1:]]
        return cls(tuple(widths), tuple(activations), weights, biases, alpha, role)

    def descriptor(self) -> dict:
        return {
            "role": self.role,
            "widths": list(self.widths),
            "activations": list(self.activations),
            "alpha": self.alpha,
        }

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in declared order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        self.weights = [np.asarray(p, dtype=np.float64) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=np.float64) for p in params[1::2]]
        diffs = _shape_diffs(self.descriptor(), self.weights, self.biases)
        if diffs:
            raise ArchitectureMismatch(f"{self.role} parameters do not match widths", diffs)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return type(self)(
            self.widths,
            self.activations,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.alpha,
            self.role,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def _check_input(self, x_shape) -> None:
        if len(x_shape) != 2 or x_shape[1] != self.in_width:
            raise ValueError(
                f"{self.role} expects input of width {self.in_width}, got shape {tuple(x_shape)}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Plain array forward pass."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x.shape)
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _activate(h @ w + b, act, self.alpha)
        return h

    __call__ = forward

    def bind(self) -> "BoundMlp":
        """Wrap the parameters as gradient-tracking tensors (shared storage)."""
        return BoundMlp(self, ad.tensors(self.parameters()))


class GeneratorNet(Mlp):
    @classmethod
    def create(cls, rng: np.random.Generator, noise_dim: int = NOISE_DIM,
               hidden: Sequence[int] = GENERATOR_HIDDEN, out_dim: int = PDP_LENGTH,
               alpha: float = LEAKY_SLOPE) -> "GeneratorNet":
        widths = (noise_dim, *hidden, out_dim)
        acts = ("leaky_relu",) * len(hidden) + ("sigmoid",)
        return cls.initialized(widths, acts, rng, alpha, "generator")


class DiscriminatorNet(Mlp):
    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int = PDP_LENGTH,
               hidden: Sequence[int] = DISCRIMINATOR_HIDDEN,
               alpha: float = LEAKY_SLOPE) -> "DiscriminatorNet":
        widths = (in_dim, *hidden, 1)
        acts = ("leaky_relu",) * len(hidden) + ("linear",)
        return cls.initialized(widths, acts, rng, alpha, "discriminator")


def _activate(a, act: str, alpha: float):
    if act == "leaky_relu":
        return ad.leaky_relu(a, alpha)
    if act == "sigmoid":
        return ad.sigmoid(a)
    return a


def _shape_diffs(desc: dict, weights, biases) -> list[str]:
    widths = desc["widths"]
    n = len(widths) - 1
    diffs = []
    if len(weights) != n or len(biases) != n:
        diffs.append(f"expected {n} layers, got {len(weights)} weights and {len(biases)} biases")
        return diffs
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if np.shape(weights[i]) != (a, b):
            diffs.append(f"layer {i + 1} weight {np.shape(weights[i])} != {(a, b)}")
        if np.shape(biases[i]) != (b,):
            diffs.append(f"layer {i + 1} bias {np.shape(biases[i])} != {(b,)}")
    return diffs


def architecture_diff(expected: dict, actual: dict) -> list[str]:
    """Human-readable differences between two architecture descriptors."""
    diffs = []
    ew, aw = expected["widths"], actual["widths"]
    if len(ew) != len(aw):
        diffs.append(f"{expected.get('role', 'net')}: {len(ew) - 1} layers vs {len(aw) - 1}")
    for i, (a, b) in enumerate(zip(zip(ew[:-1], ew[1:]), zip(aw[:-1], aw[1:]))):
        if a != b:
            diffs.append(f"{expected.get('role', 'net')} layer {i + 1}: {a[0]}->{a[1]} vs {b[0]}->{b[1]}")
    if list(expected["activations"]) != list(actual["activations"]):
        diffs.append(f"{expected.get('role', 'net')} activations differ")
    if expected.get("alpha") != actual.get("alpha"):
        diffs.append(f"{expected.get('role', 'net')} leaky slope {expected.get('alpha')} vs {actual.get('alpha')}")
    return diffs


@dataclass
class BoundMlp:
    net: Mlp
    params: list[ad.Tensor]

    @property
    def weights(self) -> list[ad.Tensor]:
        return self.params[0::2]

    @property
    def biases(self) -> list[ad.Tensor]:
        return self.params[1::2]

    def __call__(self, x):
        xv = x.value if isinstance(x, ad.Tensor) else np.asarray(x)
        self.net._check_input(xv.shape)
        h = x
        for w, b, act in zip(self.weights, self.biases, self.net.activations):
            h = _activate(ad.add(ad.matmul(h, w), b), act, self.net.alpha)
        return h


def parameter_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


# -- noise -------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    dim: int = NOISE_DIM
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("noise dim must be >= 1")
        if not self.sigma > 0:
            raise ValueError("noise sigma must be > 0")


def sample_noise(spec: NoiseSpec, batch: int, rng: np.random.Generator) -> np.ndarray:
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return rng.normal(0.0, spec.sigma, size=(batch, spec.dim))


def generator_forward(net: Mlp, z) -> np.ndarray:
    return net.forward(z)


def discriminator_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


# -- losses --------------------------------------------------------------------

def interpolate(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample uniform mix ``e * real + (1 - e) * fake``."""
    e = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1))
    return e * x_real + (1.0 - e) * x_fake


def wgan_gp_losses(G, D, x_real, z, lam: float = DEFAULT_LAMBDA,
                   rng: np.random.Generator | None = None, x_tilde=None):
    """Critic and generator losses, both to be minimized.

    ``G`` and ``D`` are :class:`BoundMlp` (or plain :class:`Mlp`, bound on
    the fly).  Must run inside an active :class:`~pdpgan.autodiff.Tape`.
    ``x_tilde`` overrides the random interpolates, for tests.
    """
    if lam < 0:
        raise ValueError(f"penalty weight must be >= 0, got {lam}")
    G = G.bind() if isinstance(G, Mlp) else G
    D = D.bind() if isinstance(D, Mlp) else D
    x_real = np.asarray(x_real, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x_real.shape[0] != z.shape[0]:
        raise ValueError(f"batch sizes differ: real {x_real.shape[0]}, noise {z.shape[0]}")
    fake = G(z)
    score_fake = ad.mean(D(fake))
    score_real = ad.mean(D(x_real))
    if x_tilde is None:
        if rng is None:
            raise ValueError("rng is required to draw interpolation weights")
        x_tilde = interpolate(x_real, fake.value, rng)
    penalty = ad.grad_norm_penalty(D, x_tilde, lam)
    d_loss = ad.add(ad.sub(score_fake, score_real), penalty)
    g_loss = ad.neg(score_fake)
    return d_loss, g_loss


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"PDPGANCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    generator: Mlp
    discriminator: Mlp
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    config_fingerprint: str = ""
    metadata: dict = field(default_factory=dict)

    def architecture(self) -> dict:
        return {
            "generator": self.generator.descriptor(),
            "discriminator": self.discriminator.descriptor(),
        }

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.generator.copy(),
            self.discriminator.copy(),
            _copy_state(self.optimizer_state),
            self.epoch,
            self.config_fingerprint,
            dict(self.metadata),
        )


def _copy_state(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict):
            out[key] = _copy_state(val)
        elif isinstance(val, list):
            out[key] = [np.array(v, copy=True) if isinstance(v, np.ndarray) else v for v in val]
        else:
            out[key] = val
    return out


def _state_arrays(state: dict) -> list[tuple[str, np.ndarray]]:
    """Optimizer slot arrays as (name, array), e.g. ``d.m.3``."""
    items = []
    for opt_name in sorted(state):
        slots = state[opt_name]
        for slot in sorted(slots):
            val = slots[slot]
            if isinstance(val, list):
                for i, arr in enumerate(val):
                    items.append((f"{opt_name}.{slot}.{i}", np.asarray(arr)))
    return items


def _state_scalars(state: dict) -> dict:
    return {
        opt: {k: v for k, v in slots.items() if not isinstance(v, list)}
        for opt, slots in state.items()
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the binary checkpoint container atomically.

    Layout: 8-byte magic ``PDPGANCK``, uint32 LE format version, uint64 LE
    header length, UTF-8 JSON header, then every array listed in
    ``header["arrays"]`` as packed little-endian float64 in row-major order.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, net in (("generator", ckpt.generator), ("discriminator", ckpt.discriminator)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays.append((f"{prefix}.W{i + 1}", w))
            arrays.append((f"{prefix}.b{i + 1}", b))
    arrays.extend(_state_arrays(ckpt.optimizer_state))

    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format": "pdpgan-checkpoint",
        "version": CHECKPOINT_VERSION,
        "architecture": ckpt.architecture(),
        "epoch": int(ckpt.epoch),
        "config_fingerprint": ckpt.config_fingerprint,
        "optimizer_scalars": _state_scalars(ckpt.optimizer_state),
        "metadata": ckpt.metadata,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(head)), head]
    chunks.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    body = memoryview(blob)[start + hlen:]

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + count * 8
        if end > len(body):
            raise ValueError(f"{path}: truncated at array {entry['name']}")
        arr = np.frombuffer(body[entry["offset"]:end], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(shape)

    nets = {}
    for role, cls in (("generator", GeneratorNet), ("discriminator", DiscriminatorNet)):
        desc = header["architecture"][role]
        n = len(desc["widths"]) - 1
        try:
            weights = [arrays[f"{role}.W{i + 1}"] for i in range(n)]
            biases = [arrays[f"{role}.b{i + 1}"] for i in range(n)]
        except KeyError as exc:
            raise ArchitectureMismatch(f"{path}: missing array {exc.args[0]}") from None
        nets[role] = cls(tuple(desc["widths"]), tuple(desc["activations"]), weights, biases,
                         desc["alpha"], role)

    state: dict = {k: dict(v) for k, v in header.get("optimizer_scalars", {}).items()}
    for name, arr in arrays.items():
        if name.startswith(("generator.", "discriminator.")):
            continue
        opt, slot, idx = name.split(".")
        state.setdefault(opt, {}).setdefault(slot, {})[int(idx)] = arr
    for opt, slots in state.items():
        for slot, val in list(slots.items()):
            if isinstance(val, dict):
                slots[slot] = [val[i] for i in sorted(val)]

    return Checkpoint(
        nets["generator"],
        nets["discriminator"],
        state,
        header["epoch"],
        header["config_fingerprint"],
        header.get("metadata", {}),
    )


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
