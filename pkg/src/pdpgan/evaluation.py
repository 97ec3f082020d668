"""Set-level comparison of generated and reference PDPs."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .channel import DelayGrid, Pdp, rms_delay_spread

SSIM_WINDOW = 11
SSIM_THRESHOLD = 0.6
DB_FLOOR = 1e-10


def _grid_of(pdps) -> DelayGrid | None:
    first = pdps[0]
    return getattr(first, "grid", None)


def _matrix(pdps, what: str = "PDP set") -> np.ndarray:
    if len(pdps) == 0:
        raise ValueError(f"{what} is empty")
    rows = [getattr(p, "powers", p) for p in pdps]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"{what} mixes PDP lengths {sorted(lengths)}")
    grids = {getattr(p, "grid", None) for p in pdps} - {None}
    if len(grids) > 1:
        raise ValueError(f"{what} mixes delay grids")
    return np.asarray(rows, dtype=np.float64)


def _check_grids(a, b) -> None:
    ga, gb = getattr(a, "grid", None), getattr(b, "grid", None)
    la = len(getattr(a, "powers", a))
    lb = len(getattr(b, "powers", b))
    if la != lb or (ga is not None and gb is not None and ga != gb):
        raise ValueError(f"grid mismatch: {ga or la} vs {gb or lb}")


def average_pdp(pdps) -> Pdp:
    """Per-bin arithmetic mean of a PDP set."""
    m = _matrix(pdps)
    grid = _grid_of(pdps) or DelayGrid(m.shape[1])
    return Pdp(m.mean(axis=0), grid, all(getattr(p, "normalized", True) for p in pdps))


def rmse(reference_avg, generated_avg, domain: str = "linear") -> float:
    """Root-mean-square difference of two average PDPs.

    ``domain="db"`` compares ``10 log10(max(P, 1e-10))`` instead of powers.
    """
    _check_grids(reference_avg, generated_avg)
    a = np.asarray(getattr(reference_avg, "powers", reference_avg), dtype=np.float64)
    b = np.asarray(getattr(generated_avg, "powers", generated_avg), dtype=np.float64)
    if domain == "db":
        a = 10.0 * np.log10(np.maximum(a, DB_FLOOR))
        b = 10.0 * np.log10(np.maximum(b, DB_FLOOR))
    elif domain != "linear":
        raise ValueError(f"domain must be 'linear' or 'db', got {domain!r}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _ssim_rows(a: np.ndarray, b: np.ndarray, window: int, dynamic_range: float) -> np.ndarray:
    """Mean windowed SSIM for each row pair of two equal-shape matrices."""
    if a.shape[-1] < window:
        raise ValueError(f"PDP length {a.shape[-1]} is shorter than the SSIM window {window}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, window, axis=-1)
    wb = np.lib.stride_tricks.sliding_window_view(b, window, axis=-1)
    mu_a = wa.mean(axis=-1)
    mu_b = wb.mean(axis=-1)
    var_a = (wa * wa).mean(axis=-1) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=-1) - mu_b * mu_b
    cov = (wa * wb).mean(axis=-1) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=-1)


def ssim_1d(a, b, window: int = SSIM_WINDOW, dynamic_range: float = 1.0) -> float:
    """Structural similarity of two equal-length profiles.

    Uniform window of ``window`` samples, stride 1; constants
    ``C1 = (0.01 R)^2`` and ``C2 = (0.03 R)^2``.
    """
    x = np.asarray(getattr(a, "powers", a), dtype=np.float64)
    y = np.asarray(getattr(b, "powers", b), dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"SSIM needs equal-length vectors, got {x.shape} and {y.shape}")
    return float(_ssim_rows(x, y, window, dynamic_range))


@dataclass
class SsimCdf:
    values: np.ndarray          # sorted ascending
    probabilities: np.ndarray   # empirical CDF at each value
    threshold: float
    fraction_above: float

    def fraction_above_threshold(self, threshold: float) -> float:
        return float(np.mean(self.values > threshold))


def empirical_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return v, np.arange(1, v.size + 1) / v.size


def ssim_cdf(reference_set, generated_set, pairing: str = "random", seed: int = 0,
             threshold: float = SSIM_THRESHOLD, window: int = SSIM_WINDOW) -> SsimCdf:
    """SSIM of each generated PDP against a reference partner, as an empirical CDF.

    ``pairing="random"`` draws each partner uniformly (seeded);
    ``"identity"`` pairs index ``i`` with ``i``.
    """
    ref = _matrix(reference_set, "reference set")
    gen = _matrix(generated_set, "generated set")
    if ref.shape[1] != gen.shape[1]:
        raise ValueError(f"grid mismatch: {ref.shape[1]} vs {gen.shape[1]} points")
    if pairing == "random":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        partners = ref[rng.integers(0, ref.shape[0], size=gen.shape[0])]
    elif pairing == "identity":
        if ref.shape[0] != gen.shape[0]:
            raise ValueError("identity pairing needs equally sized sets")
        partners = ref
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    values, probs = empirical_cdf(_ssim_rows(gen, partners, window, 1.0))
    return SsimCdf(values, probs, threshold, float(np.mean(values > threshold)))


def delay_spread_cdf(pdps) -> np.ndarray:
    """RMS delay spread of each PDP, sorted ascending (seconds)."""
    if len(pdps) == 0:
        raise ValueError("PDP set is empty")
    out = np.empty(len(pdps))
    for i, p in enumerate(pdps):
        if not isinstance(p, Pdp):
            p = Pdp(np.asarray(p, dtype=np.float64), DelayGrid(len(p)))
        try:
            out[i] = rms_delay_spread(p)
        except ValueError:
            raise ValueError(f"PDP {i} has zero total power") from None
    return np.sort(out)


def wasserstein_1d(samples_a, samples_b) -> float:
    """First Wasserstein distance between two empirical distributions.

    Both quantile functions are evaluated on the merged grid of their
    breakpoints, where each is piecewise constant, so the result is exact.
    """
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    u = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate(([0.0], u)))
    mid = u - widths / 2.0
    qa = a[np.minimum((mid * a.size).astype(np.int64), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(np.int64), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def total_power(pdps) -> np.ndarray:
    """Per-PDP power summed over the delay window, per unit of window length.

    For normalized PDPs this is the mean bin power, a value in [0, 1].
    """
    return _matrix(pdps).mean(axis=1)


@dataclass
class EvalReport:
    rmse_linear: float
    rmse_db_of_db: float
    ssim_values: list[float]
    ssim_cdf: dict
    delay_spread_cdf: dict
    wasserstein_total_power: float
    average_pdp: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> None:
        """``report.json`` plus plottable CSVs for the three comparisons."""
        out_dir = os.fspath(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        avg = self.average_pdp
        with open(os.path.join(out_dir, "average_pdp.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delay_s", "reference", "generated"])
            for row in zip(avg["delay_s"], avg["reference"], avg["generated"]):
                w.writerow([repr(float(x)) for x in row])
        with open(os.path.join(out_dir, "ssim_cdf.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ssim", "cdf"])
            for row in zip(self.ssim_cdf["values"], self.ssim_cdf["probabilities"]):
                w.writerow([repr(float(x)) for x in row])
        with open(os.path.join(out_dir, "delay_spread_cdf.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", "delay_spread_s", "cdf"])
            for name in ("reference", "generated"):
                vals, probs = empirical_cdf(self.delay_spread_cdf[name])
                for v, p in zip(vals, probs):
                    w.writerow([name, repr(float(v)), repr(float(p))])


def evaluate(reference_set, generated_set, seed: int = 0,
             threshold: float = SSIM_THRESHOLD, pairing: str = "random") -> EvalReport:
    ref = _matrix(reference_set, "reference set")
    gen = _matrix(generated_set, "generated set")
    if ref.shape[1] != gen.shape[1]:
        raise ValueError(f"grid mismatch: {ref.shape[1]} vs {gen.shape[1]} points")
    rg, gg = _grid_of(reference_set), _grid_of(generated_set)
    if rg is not None and gg is not None and rg != gg:
        raise ValueError(f"grid mismatch: {rg} vs {gg}")
    grid = rg or gg or DelayGrid(ref.shape[1])
    ref_avg, gen_avg = ref.mean(axis=0), gen.mean(axis=0)
    cdf = ssim_cdf(ref, gen, pairing=pairing, seed=seed, threshold=threshold)
    keep_ref = ref.sum(axis=1) > 0
    keep_gen = gen.sum(axis=1) > 0
    ds_ref = delay_spread_cdf([Pdp(r, grid) for r in ref[keep_ref]]) if keep_ref.any() else np.array([])
    ds_gen = delay_spread_cdf([Pdp(g, grid) for g in gen[keep_gen]]) if keep_gen.any() else np.array([])
    return EvalReport(
        rmse_linear=rmse(ref_avg, gen_avg, "linear"),
        rmse_db_of_db=rmse(ref_avg, gen_avg, "db"),
        ssim_values=[float(v) for v in cdf.values],
        ssim_cdf={
            "values": cdf.values.tolist(),
            "probabilities": cdf.probabilities.tolist(),
            "threshold": threshold,
            "fraction_above": cdf.fraction_above,
        },
        delay_spread_cdf={"reference": ds_ref.tolist(), "generated": ds_gen.tolist()},
        wasserstein_total_power=wasserstein_1d(total_power(ref), total_power(gen)),
        average_pdp={
            "delay_s": grid.delays().tolist(),
            "reference": ref_avg.tolist(),
            "generated": gen_avg.tolist(),
        },
        settings={"seed": seed, "pairing": pairing, "ssim_window": SSIM_WINDOW,
                  "db_floor": DB_FLOOR, "num_reference": int(ref.shape[0]),
                  "num_generated": int(gen.shape[0])},
    )
