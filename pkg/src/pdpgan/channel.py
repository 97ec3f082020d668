"""Channel impulse responses, power delay profiles and delay statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
DEFAULT_NUM_POINTS = 401
DEFAULT_SPACING = 1e-9


@dataclass(frozen=True)
class MultipathComponent:
    delay: float
    gain: float
    phase: float = 0.0

    def __post_init__(self) -> None:
        if not self.delay >= 0:
            raise ValueError(f"path delay must be >= 0, got {self.delay}")
        if not self.gain >= 0:
            raise ValueError(f"path gain must be >= 0, got {self.gain}")
        if not 0 <= self.phase < TWO_PI:
            # canonical representative, so callers may pass e.g. -pi/2
            object.__setattr__(self, "phase", float(np.mod(self.phase, TWO_PI)))


@dataclass(frozen=True)
class DelayGrid:
    num_points: int = DEFAULT_NUM_POINTS
    spacing: float = DEFAULT_SPACING

    def __post_init__(self) -> None:
        if self.num_points < 2:
            raise ValueError("a delay grid needs at least 2 points")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be > 0")

    @property
    def span(self) -> float:
        return self.num_points * self.spacing

    def delays(self) -> np.ndarray:
        return np.arange(self.num_points) * self.spacing


@dataclass(frozen=True)
class Cir:
    paths: tuple[MultipathComponent, ...]
    grid: DelayGrid = DelayGrid()

    def __post_init__(self) -> None:
        object.__setattr__(self, "paths", tuple(self.paths))
        for i, p in enumerate(self.paths):
            if p.delay >= self.grid.span:
                raise ValueError(
                    f"path {i} delay {p.delay:.6g} s is outside the grid span {self.grid.span:.6g} s"
                )

    @classmethod
    def from_arrays(cls, delays, gains, phases, grid: DelayGrid = DelayGrid()) -> "Cir":
        return cls(
            tuple(MultipathComponent(float(d), float(g), float(p))
                  for d, g, p in zip(delays, gains, phases)),
            grid,
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = np.array([p.delay for p in self.paths], dtype=np.float64)
        g = np.array([p.gain for p in self.paths], dtype=np.float64)
        ph = np.array([p.phase for p in self.paths], dtype=np.float64)
        return d, g, ph


@dataclass(frozen=True)
class NormParams:
    min: float
    max: float
    degenerate: bool = False


@dataclass
class Pdp:
    powers: np.ndarray
    grid: DelayGrid = DelayGrid()
    normalized: bool = False

    def __post_init__(self) -> None:
        self.powers = np.asarray(self.powers, dtype=np.float64)
        if self.powers.shape != (self.grid.num_points,):
            raise ValueError(
                f"PDP has {self.powers.size} values but the grid has {self.grid.num_points} points"
            )
        if np.any(self.powers < 0) or not np.all(np.isfinite(self.powers)):
            raise ValueError("PDP powers must be finite and non-negative")

    def __len__(self) -> int:
        return self.powers.size

    def total_power(self) -> float:
        return float(self.powers.sum())


@dataclass(frozen=True)
class ChannelTransferFunction:
    samples: np.ndarray = field(repr=False)
    start_frequency: float
    frequency_spacing: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.complex128).ravel())
        if self.samples.size == 0:
            raise ValueError("a transfer function needs at least one sample")
        if not self.frequency_spacing > 0:
            raise ValueError("frequency spacing must be > 0")

    @property
    def stop_frequency(self) -> float:
        return self.start_frequency + (self.samples.size - 1) * self.frequency_spacing

    def frequencies(self) -> np.ndarray:
        return self.start_frequency + np.arange(self.samples.size) * self.frequency_spacing


def delay_bins(delays: np.ndarray, grid: DelayGrid) -> np.ndarray:
    """Nearest grid index for each delay (the last half-bin maps to the last bin)."""
    idx = np.floor(np.asarray(delays) / grid.spacing + 0.5).astype(np.int64)
    return np.minimum(idx, grid.num_points - 1)


def cir_to_pdp(cir: Cir) -> Pdp:
    """Per-bin power of the coherent sum of the paths falling in each bin."""
    delays, gains, phases = cir.arrays()
    grid = cir.grid
    bad = np.flatnonzero(delays >= grid.span)
    if bad.size:
        raise ValueError(f"path {bad[0]} delay {delays[bad[0]]:.6g} s is outside the grid")
    amps = np.zeros(grid.num_points, dtype=np.complex128)
    np.add.at(amps, delay_bins(delays, grid), gains * np.exp(1j * phases))
    return Pdp(amps.real ** 2 + amps.imag ** 2, grid, normalized=False)


def minmax_normalize(pdp: Pdp) -> tuple[Pdp, NormParams]:
    """Affine map onto [0, 1].  A constant PDP maps to zeros, flagged degenerate."""
    lo, hi = float(pdp.powers.min()), float(pdp.powers.max())
    if hi == lo:
        return Pdp(np.zeros_like(pdp.powers), pdp.grid, True), NormParams(lo, hi, True)
    return Pdp((pdp.powers - lo) / (hi - lo), pdp.grid, True), NormParams(lo, hi, False)


def denormalize(pdp: Pdp, params: NormParams) -> Pdp:
    if params.degenerate:
        return Pdp(np.full_like(pdp.powers, params.min), pdp.grid, False)
    return Pdp(pdp.powers * (params.max - params.min) + params.min, pdp.grid, False)


def _moments(pdp: Pdp) -> tuple[np.ndarray, np.ndarray, float]:
    p = pdp.powers
    total = float(p.sum())
    if not total > 0:
        raise ValueError("zero total power")
    return pdp.grid.delays(), p, total


def mean_delay(pdp: Pdp) -> float:
    tau, p, total = _moments(pdp)
    return float(np.dot(tau, p) / total)


def rms_delay_spread(pdp: Pdp) -> float:
    tau, p, total = _moments(pdp)
    mu = float(np.dot(tau, p) / total)
    return float(np.sqrt(np.dot((tau - mu) ** 2, p) / total))


def ctf_to_pdp(
    ctf: ChannelTransferFunction,
    band_start: float,
    band_width: float,
    window: Callable[[int], np.ndarray] | None = None,
) -> Pdp:
    """Delay-domain power of an inverse DFT over a contiguous sub-band.

    Samples at ``band_start + k * df`` for ``0 <= k*df <= band_width`` are
    selected (K of them); the output grid has K points spaced ``1 / (K df)``.
    ``window`` optionally maps K to taper weights.
    """
    df = ctf.frequency_spacing
    tol = 1e-6 * df
    if band_width <= 0:
        raise ValueError("band width must be > 0")
    if band_start < ctf.start_frequency - tol or band_start + band_width > ctf.stop_frequency + tol:
        raise ValueError(
            f"band [{band_start:.6g}, {band_start + band_width:.6g}] Hz is outside the "
            f"transfer function span [{ctf.start_frequency:.6g}, {ctf.stop_frequency:.6g}] Hz"
        )
    first = int(np.ceil((band_start - ctf.start_frequency) / df - 1e-6))
    count = int(np.floor(band_width / df + 1e-6)) + 1
    count = min(count, ctf.samples.size - first)
    if count < 2:
        raise ValueError(f"band selects {count} sample(s); at least 2 are needed")
    h = ctf.samples[first:first + count]
    if window is not None:
        h = h * np.asarray(window(count), dtype=np.float64)
    impulse = np.fft.ifft(h)
    return Pdp(impulse.real ** 2 + impulse.imag ** 2, DelayGrid(count, 1.0 / (count * df)), False)


def synthesize_ctf(
    paths: Sequence[MultipathComponent],
    start_frequency: float,
    frequency_spacing: float,
    count: int,
) -> ChannelTransferFunction:
    """Frequency response ``sum_l a_l e^{j phi_l} e^{-j 2 pi f tau_l}`` of a path set."""
    f = start_frequency + np.arange(count) * frequency_spacing
    h = np.zeros(count, dtype=np.complex128)
    for p in paths:
        h += p.gain * np.exp(1j * p.phase) * np.exp(-2j * np.pi * f * p.delay)
    return ChannelTransferFunction(h, start_frequency, frequency_spacing)
