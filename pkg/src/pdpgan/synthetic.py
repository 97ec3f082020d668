"""Stochastic exponential-decay multipath generator and its moment fit.

Paths arrive as a Poisson process (exponential inter-arrival times) and
their mean power decays exponentially with delay, with optional log-normal
shadowing per path.  This stands in for a standardized clustered channel
model when building the large simulated training set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import Cir, DelayGrid, NormParams, Pdp, cir_to_pdp, minmax_normalize

FLOOR_DB = -40.0
GENERATOR_RECIPE = "poisson-arrivals/exponential-decay/lognormal-shadowing"


@dataclass(frozen=True)
class StochasticChannelParams:
    num_paths_mean: float = 30.0
    delay_rate: float = 1e8         # 1/s
    power_decay: float = 30e-9      # s
    shadow_sigma_db: float = 3.0
    max_delay: float = 400e-9       # s
    label: str = "default"

    def __post_init__(self) -> None:
        if not self.num_paths_mean >= 1:
            raise ValueError("num_paths_mean must be >= 1")
        if not self.delay_rate > 0:
            raise ValueError("delay_rate must be > 0")
        if not self.power_decay > 0:
            raise ValueError("power_decay must be > 0")
        if not self.shadow_sigma_db >= 0:
            raise ValueError("shadow_sigma_db must be >= 0")
        if not self.max_delay >= 0:
            raise ValueError("max_delay must be >= 0")

    def check_grid(self, grid: DelayGrid) -> None:
        if self.max_delay >= grid.span:
            raise ValueError(
                f"max_delay {self.max_delay:.6g} s must lie inside the grid span {grid.span:.6g} s"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StochasticChannelParams":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class DatasetSpec:
    params: StochasticChannelParams
    count: int
    grid: DelayGrid = DelayGrid()
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        self.params.check_grid(self.grid)


@dataclass
class SimulatedDataset:
    pdps: list[Pdp]
    norm: list[NormParams]
    spec: DatasetSpec
    recipe: str = GENERATOR_RECIPE

    def __len__(self) -> int:
        return len(self.pdps)

    def __iter__(self):
        return iter(self.pdps)

    def __getitem__(self, i):
        return self.pdps[i]

    def matrix(self) -> np.ndarray:
        return np.stack([p.powers for p in self.pdps])


def sample_cir(
    params: StochasticChannelParams,
    rng: np.random.Generator,
    grid: DelayGrid = DelayGrid(),
) -> Cir:
    """Draw one channel; gains are scaled so that the path powers sum to 1."""
    params.check_grid(grid)
    n = max(1, int(rng.poisson(params.num_paths_mean)))
    delays = np.cumsum(rng.exponential(1.0 / params.delay_rate, size=n))
    shadow_db = rng.normal(0.0, params.shadow_sigma_db, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)

    keep = delays <= params.max_delay
    if not keep.any():
        # first arrival beyond max_delay: keep it, clipped to the limit
        keep[0] = True
        delays[0] = params.max_delay
    delays, shadow_db, phases = delays[keep], shadow_db[keep], phases[keep]

    powers = np.exp(-delays / params.power_decay) * 10.0 ** (shadow_db / 10.0)
    gains = np.sqrt(powers / powers.sum())
    return Cir.from_arrays(delays, gains, phases, grid)


def _channel_rngs(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def generate_dataset(spec: DatasetSpec) -> SimulatedDataset:
    """``spec.count`` normalized PDPs, one independent random stream each."""
    pdps, norms = [], []
    for rng in _channel_rngs(spec.rng_seed, spec.count):
        pdp, norm = minmax_normalize(cir_to_pdp(sample_cir(spec.params, rng, spec.grid)))
        pdps.append(pdp)
        norms.append(norm)
    return SimulatedDataset(pdps, norms, spec)


@dataclass(frozen=True)
class FitBounds:
    min_power_decay: float = 1e-10
    max_power_decay: float = 1e-6
    min_delay_rate: float = 1e6
    max_delay_rate: float = 1e10
    floor_db: float = FLOOR_DB


def fit_params(pdps, grid: DelayGrid | None = None,
               bounds: FitBounds = FitBounds(), label: str = "fitted") -> StochasticChannelParams:
    """Method-of-moments estimate of generator parameters from PDPs.

    * decay constant: least-squares slope of log mean power against delay
      over the mean-PDP bins above the floor (bin 0 is excluded; it only
      collects half a bin width under nearest-bin assignment);
    * arrival rate: above-floor bins per unit of occupied delay span;
    * mean path count: above-floor bins per PDP;
    * shadowing: spread of per-bin dB residuals around the fitted trend.
    """
    rows = [getattr(p, "powers", p) for p in pdps]
    if not rows:
        raise ValueError("cannot fit an empty PDP list")
    if grid is None:
        grid = getattr(pdps[0], "grid", None) or DelayGrid(len(rows[0]))
    P = np.asarray(rows, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != grid.num_points:
        raise ValueError("PDPs must share the grid length")
    floor = 10.0 ** (bounds.floor_db / 10.0)
    dt = grid.spacing
    tau = grid.delays()

    peaks = P.max(axis=1, keepdims=True)
    above = (P > floor * peaks) & (peaks > 0)
    if not above.any():
        raise ValueError("empty fit support")

    counts = above.sum(axis=1)
    idx = np.arange(grid.num_points)
    first = np.where(above, idx, grid.num_points).min(axis=1)
    last = np.where(above, idx, -1).max(axis=1)
    occupied = counts > 0
    span = float(((last - first)[occupied]).sum()) * dt
    arrivals = float((counts[occupied] - 1).sum())
    rate = arrivals / span if span > 0 else np.inf
    rate = float(np.clip(rate, bounds.min_delay_rate, bounds.max_delay_rate))

    mean_pdp = P.mean(axis=0)
    support = mean_pdp > floor * mean_pdp.max()
    support[0] = False
    if support.sum() >= 2:
        slope = np.polyfit(tau[support], np.log(mean_pdp[support]), 1)[0]
        decay = -1.0 / slope if slope < 0 else np.inf
    else:
        decay = 0.0
    decay = float(np.clip(decay, bounds.min_power_decay, bounds.max_power_decay))

    # dB residuals about the fitted decay, with a per-PDP offset removed
    trend_db = -10.0 / np.log(10.0) * tau / decay
    with np.errstate(divide="ignore"):
        resid = np.where(above, 10.0 * np.log10(np.where(above, P, 1.0)) - trend_db, np.nan)
    resid = resid[occupied]
    resid = resid - np.nanmean(resid, axis=1, keepdims=True)
    dof = int(np.sum(~np.isnan(resid))) - int(occupied.sum())
    sigma = float(np.sqrt(np.nansum(resid ** 2) / dof)) if dof > 0 else 0.0

    max_delay = min(float(last[occupied].max()) * dt, (grid.num_points - 1) * dt)
    return StochasticChannelParams(
        num_paths_mean=max(1.0, float(counts.mean())),
        delay_rate=rate,
        power_decay=decay,
        shadow_sigma_db=sigma,
        max_delay=max_delay,
        label=label,
    )
