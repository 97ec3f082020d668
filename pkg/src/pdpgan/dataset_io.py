"""On-disk PDP datasets, transfer-function import and experiment manifests.

A dataset is a body file plus a JSON header in ``<body>.json``.  The body
is either CSV (one PDP per line, ``%.17g`` decimals) or, for ``.bin``
bodies, packed little-endian float64 in row-major order.
"""

from __future__ import annotations

import glob
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelTransferFunction, DelayGrid, NormParams, Pdp, ctf_to_pdp, minmax_normalize

FORMAT = "pdpgan-pdp-dataset"
VERSION = 1
CTF_FORMAT = "pdpgan-ctf"


class DatasetFormatError(ValueError):
    """Unreadable or inconsistent dataset file."""

    def __init__(self, message: str, path=None, line: int | None = None, offset: int | None = None):
        self.path = os.fspath(path) if path is not None else None
        self.line = line
        self.offset = offset
        where = []
        if self.path:
            where.append(self.path)
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")


class UnsupportedVersionError(DatasetFormatError):
    pass


class MalformedHeaderError(DatasetFormatError):
    pass


class RowLengthError(DatasetFormatError):
    def __init__(self, message: str, row: int, **kw):
        self.row = row
        super().__init__(message, **kw)


@dataclass
class PdpDataset:
    rows: np.ndarray
    spacing: float = 1e-9
    normalized: bool = True
    provenance: str = ""
    params_fingerprint: str | None = None
    seed: int | None = None
    norm_params: list[NormParams] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("dataset rows must form a 2-D array")

    @property
    def num_points(self) -> int:
        return int(self.rows.shape[1])

    @property
    def grid(self) -> DelayGrid:
        return DelayGrid(self.num_points, self.spacing)

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def pdps(self) -> list[Pdp]:
        grid = self.grid
        return [Pdp(r, grid, self.normalized) for r in self.rows]

    def header(self, encoding: str) -> dict:
        h = {
            "format": FORMAT,
            "version": VERSION,
            "encoding": encoding,
            "count": len(self),
            "num_points": self.num_points,
            "grid_spacing": self.spacing,
            "normalized": self.normalized,
            "provenance": self.provenance,
            "params_fingerprint": self.params_fingerprint,
            "seed": self.seed,
        }
        if self.norm_params is not None:
            h["norm_params"] = [[n.min, n.max, n.degenerate] for n in self.norm_params]
        if self.extra:
            h["extra"] = self.extra
        return h

    @classmethod
    def from_pdps(cls, pdps, **kw) -> "PdpDataset":
        pdps = list(pdps)
        if not pdps:
            raise ValueError("cannot build a dataset from no PDPs")
        grid = pdps[0].grid
        if any(p.grid != grid for p in pdps):
            raise ValueError("PDPs use different delay grids")
        kw.setdefault("normalized", all(p.normalized for p in pdps))
        return cls(np.stack([p.powers for p in pdps]), grid.spacing, **kw)


def header_path(path) -> str:
    return os.fspath(path) + ".json"


def _atomic_write(path: str, data: bytes) -> None:
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


def save_dataset(ds: PdpDataset, path, binary: bool | None = None) -> None:
    path = os.fspath(path)
    if binary is None:
        binary = path.endswith(".bin")
    if binary:
        body = np.ascontiguousarray(ds.rows, dtype="<f8").tobytes()
        encoding = "f64le"
    else:
        lines = [",".join(format(v, ".17g") for v in row) for row in ds.rows]
        body = ("\n".join(lines) + "\n").encode("ascii") if lines else b""
        encoding = "csv"
    _atomic_write(path, body)
    head = json.dumps(ds.header(encoding), indent=2, sort_keys=True) + "\n"
    _atomic_write(header_path(path), head.encode("utf-8"))


def _read_header(path: str) -> dict:
    hpath = header_path(path)
    try:
        with open(hpath, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise MalformedHeaderError("missing header sidecar", path=hpath) from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"invalid JSON: {exc.msg}", path=hpath, line=exc.lineno) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise MalformedHeaderError(f"not a {FORMAT} header", path=hpath)
    if header.get("version") != VERSION:
        raise UnsupportedVersionError(f"unsupported version {header.get('version')!r}", path=hpath)
    for key, kind in (("num_points", int), ("grid_spacing", (int, float)), ("count", int),
                      ("normalized", bool), ("encoding", str)):
        if not isinstance(header.get(key), kind) or isinstance(header.get(key), bool) != (kind is bool):
            raise MalformedHeaderError(f"field {key!r} missing or of wrong type", path=hpath)
    if header["num_points"] < 2 or not header["grid_spacing"] > 0 or header["count"] < 0:
        raise MalformedHeaderError("grid or count out of range", path=hpath)
    return header


def load_dataset(path) -> PdpDataset:
    """Read and re-validate a dataset; corrupt files raise, never repair."""
    path = os.fspath(path)
    header = _read_header(path)
    n, count = header["num_points"], header["count"]
    if header["encoding"] == "f64le":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) != n * count * 8:
            row = min(len(blob) // (n * 8), count)
            raise RowLengthError(
                f"body has {len(blob)} bytes, expected {n * count * 8}",
                row=row, path=path, offset=row * n * 8)
        rows = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(count, n)
    elif header["encoding"] == "csv":
        rows_list = []
        with open(path, encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    vals = [float(v) for v in line.split(",")]
                except ValueError:
                    raise DatasetFormatError("non-numeric value", path=path, line=lineno) from None
                if len(vals) != n:
                    raise RowLengthError(
                        f"row {len(rows_list)} has {len(vals)} values, expected {n}",
                        row=len(rows_list), path=path, line=lineno)
                rows_list.append(vals)
        if len(rows_list) != count:
            raise DatasetFormatError(f"{len(rows_list)} rows but header declares {count}", path=path)
        rows = np.asarray(rows_list, dtype=np.float64).reshape(count, n)
    else:
        raise MalformedHeaderError(f"unknown encoding {header['encoding']!r}", path=header_path(path))

    bad = np.argwhere(~np.isfinite(rows) | (rows < 0))
    if bad.size:
        r = int(bad[0][0])
        raise DatasetFormatError(f"row {r} has a negative or non-finite power", path=path,
                                 line=r + 1 if header["encoding"] == "csv" else None)
    if header["normalized"] and rows.size and rows.max() > 1.0:
        r = int(np.argmax(rows.max(axis=1) > 1.0))
        raise DatasetFormatError(f"row {r} exceeds 1 in a normalized dataset", path=path)

    norm = header.get("norm_params")
    return PdpDataset(
        rows,
        float(header["grid_spacing"]),
        header["normalized"],
        header.get("provenance", ""),
        header.get("params_fingerprint"),
        header.get("seed"),
        [NormParams(float(a), float(b), bool(c)) for a, b, c in norm] if norm is not None else None,
        header.get("extra", {}),
    )


# -- transfer functions ------------------------------------------------------

def save_ctf(ctf: ChannelTransferFunction, path, channel_id: str = "") -> None:
    """Write a transfer function as ``real,imag`` CSV plus JSON sidecar."""
    path = os.fspath(path)
    lines = [f"{format(v.real, '.17g')},{format(v.imag, '.17g')}" for v in ctf.samples]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
    head = {"format": CTF_FORMAT, "version": VERSION, "start_frequency_hz": ctf.start_frequency,
            "spacing_hz": ctf.frequency_spacing, "channel_id": channel_id}
    _atomic_write(header_path(path), (json.dumps(head, indent=2, sort_keys=True) + "\n").encode())


def load_ctf(path) -> tuple[ChannelTransferFunction, str]:
    path = os.fspath(path)
    hpath = header_path(path)
    try:
        with open(hpath) as fh:
            head = json.load(fh)
    except FileNotFoundError:
        raise MalformedHeaderError("missing header sidecar", path=hpath) from None
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"invalid JSON: {exc.msg}", path=hpath, line=exc.lineno) from None
    try:
        start = float(head["start_frequency_hz"])
        spacing = float(head["spacing_hz"])
    except (KeyError, TypeError, ValueError):
        raise MalformedHeaderError("needs start_frequency_hz and spacing_hz", path=hpath) from None
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.lower().startswith("real"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DatasetFormatError("expected 'real,imag'", path=path, line=lineno)
            try:
                samples.append(complex(float(parts[0]), float(parts[1])))
            except ValueError:
                raise DatasetFormatError("non-numeric value", path=path, line=lineno) from None
    if not samples:
        raise DatasetFormatError("no samples", path=path)
    return ChannelTransferFunction(np.asarray(samples), start, spacing), str(head.get("channel_id", ""))


def ctf_files(path) -> list[str]:
    path = os.fspath(path)
    if os.path.isdir(path):
        files = sorted(f for f in glob.glob(os.path.join(path, "*.csv")))
        if not files:
            raise FileNotFoundError(f"no transfer-function CSV files in {path}")
        return files
    return [path]


def import_ctf(path, band_start: float, band_width: float) -> PdpDataset:
    """Normalized PDPs from one transfer-function file or a directory of them."""
    pdps, norms, ids = [], [], []
    for f in ctf_files(path):
        ctf, cid = load_ctf(f)
        pdp, norm = minmax_normalize(ctf_to_pdp(ctf, band_start, band_width))
        pdps.append(pdp)
        norms.append(norm)
        ids.append(cid or os.path.basename(f))
    ds = PdpDataset.from_pdps(pdps, provenance="ctf-import", norm_params=norms)
    ds.extra = {"channel_ids": ids, "band_start_hz": band_start, "band_width_hz": band_width}
    return ds


# -- manifests -----------------------------------------------------------------

@dataclass
class ExperimentManifest:
    """A pretrain / fine-tune / generate / evaluate experiment.

    Dataset sections are either ``{"dataset": path}`` or a simulation
    recipe ``{"params": {...} | "params_file": path, "count": N, "seed": S}``.
    Relative paths resolve against the manifest's directory.
    """

    name: str
    run_dir: str
    grid: DelayGrid
    source: dict
    target: dict
    pretrain: dict
    finetune: dict
    generate: dict
    eval: dict
    base_dir: str = "."
    raw: dict = field(default_factory=dict)

    def resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def referenced_files(self) -> list[str]:
        files = []
        for section in (self.source, self.target):
            for key in ("dataset", "params_file"):
                if key in section:
                    files.append(self.resolve(section[key]))
        return files

    def check_files(self) -> None:
        missing = [f for f in self.referenced_files() if not os.path.exists(f)]
        if missing:
            raise FileNotFoundError(f"manifest references missing file(s): {', '.join(missing)}")


def load_manifest(path) -> ExperimentManifest:
    path = os.fspath(path)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedHeaderError(f"invalid JSON: {exc.msg}", path=path, line=exc.lineno) from None
    required = ("source", "target", "pretrain", "finetune")
    missing = [k for k in required if k not in raw]
    if missing:
        raise MalformedHeaderError(f"manifest lacks {', '.join(missing)}", path=path)
    g = raw.get("grid", {})
    base = os.path.dirname(os.path.abspath(path))
    m = ExperimentManifest(
        name=raw.get("name", os.path.splitext(os.path.basename(path))[0]),
        run_dir=raw.get("run_dir", os.path.join("runs", os.path.splitext(os.path.basename(path))[0])),
        grid=DelayGrid(int(g.get("num_points", 401)), float(g.get("spacing_s", 1e-9))),
        source=raw["source"],
        target=raw["target"],
        pretrain=raw["pretrain"],
        finetune=raw["finetune"],
        generate=raw.get("generate", {"count": 100, "seed": 0}),
        eval=raw.get("eval", {"seed": 0}),
        base_dir=base,
        raw=raw,
    )
    m.check_files()
    return m
