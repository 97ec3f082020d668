"""Command-line front end: simulate, train, generate, eval, pipeline and report.

Exit codes: 0 success, 2 usage or validation error, 3 numeric divergence,
1 any other runtime failure.  Failures also print one JSON line to stderr
with the keys ``error``, ``exit_code`` and ``message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import dataset_io, evaluation, gan, synthetic, training
from .channel import DelayGrid

log = logging.getLogger("pdpgan")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


class Diverged(Exception):
    def __init__(self, message: str, last_good: str):
        super().__init__(message)
        self.last_good = last_good


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our error line
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------

def _positive(name):
    def conv(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {s!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _non_negative(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _need_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _read_json(path: str, what: str) -> dict:
    _need_file(path, what)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{what} {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None


def _load_dataset(path: str, what: str) -> dataset_io.PdpDataset:
    _need_file(path, what)
    if not os.path.isfile(dataset_io.header_path(path)):
        raise UsageError(f"{what} header not found: {dataset_io.header_path(path)}")
    return dataset_io.load_dataset(path)


def _params_from(d: dict) -> synthetic.StochasticChannelParams:
    try:
        return synthetic.StochasticChannelParams.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad channel parameters: {exc}") from None


def _simulate(params, count: int, seed: int, grid: DelayGrid) -> dataset_io.PdpDataset:
    sim = synthetic.generate_dataset(synthetic.DatasetSpec(params, count, grid, seed))
    return dataset_io.PdpDataset(
        sim.matrix(), grid.spacing, True,
        provenance=f"simulated:{params.label}",
        params_fingerprint=params.fingerprint(),
        seed=seed,
        norm_params=sim.norm,
        extra={"params": params.to_dict(), "recipe": sim.recipe},
    )


def _train_config(overrides: dict | None, **fixed) -> training.TrainConfig:
    d = dict(overrides or {})
    d.update({k: v for k, v in fixed.items() if v is not None})
    try:
        return training.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from None


def _arch_overrides(ckpt: gan.Checkpoint) -> dict:
    g, d = ckpt.generator, ckpt.discriminator
    return {"noise_dim": g.widths[0], "g_hidden": list(g.widths[1:-1]),
            "d_hidden": list(d.widths[1:-1]), "alpha": g.alpha}


def _report_paths(out: str) -> tuple[str, str]:
    stem = os.path.splitext(out)[0]
    return stem + ".train.csv", stem + ".train.json"


def _run_training(config, data: dataset_io.PdpDataset, out: str, init: gan.Checkpoint | None,
                  snapshot_dir: str | None = None) -> tuple[gan.Checkpoint, training.TrainReport]:
    try:
        if init is None:
            ckpt, report = training.train(config, data.rows, snapshot_dir=snapshot_dir)
        else:
            ckpt, report = training.fine_tune(config, data.rows, init, snapshot_dir=snapshot_dir)
    except training.TrainingDiverged as exc:
        last = os.path.splitext(out)[0] + ".last-good.ckpt"
        gan.save_checkpoint(exc.last_good, last)
        raise Diverged(f"training diverged at epoch {exc.epoch}", last) from None
    if init is None or config.epochs > 0:
        ckpt.metadata.update({"grid_spacing": data.spacing, "num_points": data.num_points})
    gan.save_checkpoint(ckpt, out)
    report.checkpoint_path = out
    csv_path, json_path = _report_paths(out)
    report.write(csv_path, json_path)
    return ckpt, report


def _generate(ckpt: gan.Checkpoint, count: int, seed: int, spacing: float | None,
              sigma: float = 1.0) -> dataset_io.PdpDataset:
    rows = training.generate(ckpt, count, seed, sigma)
    if spacing is None:
        spacing = float(ckpt.metadata.get("grid_spacing", DelayGrid().spacing))
    return dataset_io.PdpDataset(rows, spacing, True, provenance="generated", seed=seed,
                                 extra={"checkpoint_epoch": ckpt.epoch,
                                        "config_fingerprint": ckpt.config_fingerprint})


def _evaluate(reference: dataset_io.PdpDataset, generated: dataset_io.PdpDataset, out_dir: str,
              seed: int, threshold: float, pairing: str) -> evaluation.EvalReport:
    if reference.grid != generated.grid:
        raise UsageError(f"grid mismatch: reference {reference.grid} vs generated {generated.grid}")
    report = evaluation.evaluate(reference.pdps(), generated.pdps(), seed=seed,
                                 threshold=threshold, pairing=pairing)
    report.write(out_dir)
    return report


# -- commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.fit_from:
        source = _load_dataset(args.fit_from, "dataset")
        params = synthetic.fit_params(source.rows, source.grid, label=args.label or "fitted")
        grid = source.grid
    else:
        params = _params_from(_read_json(args.params, "parameter file")) if args.params \
            else synthetic.StochasticChannelParams()
        grid = DelayGrid(args.num_points, args.spacing)
    try:
        params.check_grid(grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = _simulate(params, args.count, args.seed, grid)
    dataset_io.save_dataset(ds, args.out)
    if args.params_out:
        with open(args.params_out, "w") as fh:
            json.dump(params.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps({"out": args.out, "count": len(ds), "num_points": ds.num_points,
                      "params": params.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_dataset(args.data, "dataset")
    overrides = _read_json(args.config, "training config") if args.config else {}
    init = None
    if args.init:
        _need_file(args.init, "checkpoint")
        init = gan.load_checkpoint(args.init)
        overrides = {**_arch_overrides(init), **overrides}
    config = _train_config(overrides, epochs=args.epochs, seed=args.seed,
                           snapshot_every=args.snapshot_every)
    snap = args.snapshot_dir or (os.path.splitext(args.out)[0] + ".snapshots" if args.snapshot_every else None)
    ckpt, report = _run_training(config, data, args.out, init, snap)
    print(json.dumps({"checkpoint": args.out, **{k: v for k, v in report.summary().items()
                                                if k != "config"}}, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    _need_file(args.ckpt, "checkpoint")
    ckpt = gan.load_checkpoint(args.ckpt)
    if args.num_points is not None and ckpt.generator.out_width != args.num_points:
        expected = dict(ckpt.generator.descriptor())
        expected["widths"] = list(ckpt.generator.widths[:-1]) + [args.num_points]
        raise gan.ArchitectureMismatch("checkpoint does not produce the requested PDP length",
                                       gan.architecture_diff(expected, ckpt.generator.descriptor()))
    ds = _generate(ckpt, args.count, args.seed, args.spacing, args.sigma)
    dataset_io.save_dataset(ds, args.out)
    print(json.dumps({"out": args.out, "count": len(ds), "num_points": ds.num_points}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = _load_dataset(args.reference, "reference dataset")
    gen = _load_dataset(args.generated, "generated dataset")
    report = _evaluate(ref, gen, args.out, args.seed, args.threshold, args.pairing)
    print(json.dumps({"out": args.out, "rmse_linear": report.rmse_linear,
                      "rmse_db_of_db": report.rmse_db_of_db,
                      "ssim_fraction_above": report.ssim_cdf["fraction_above"],
                      "wasserstein_total_power": report.wasserstein_total_power}, sort_keys=True))
    return EXIT_OK


def _manifest_dataset(m: dataset_io.ExperimentManifest, section: dict, what: str) -> dataset_io.PdpDataset:
    if "dataset" in section:
        ds = dataset_io.load_dataset(m.resolve(section["dataset"]))
        if ds.grid != m.grid:
            raise UsageError(f"{what} dataset grid {ds.grid} differs from manifest grid {m.grid}")
        return ds
    if "params" in section:
        params = _params_from(section["params"])
    elif "params_file" in section:
        params = _params_from(_read_json(m.resolve(section["params_file"]), "parameter file"))
    else:
        raise UsageError(f"manifest {what} needs 'dataset', 'params' or 'params_file'")
    for key in ("count", "seed"):
        if key not in section:
            raise UsageError(f"manifest {what} simulation needs {key!r}")
    try:
        return _simulate(params, int(section["count"]), int(section["seed"]), m.grid)
    except ValueError as exc:
        raise UsageError(f"manifest {what}: {exc}") from None


def cmd_pipeline(args) -> int:
    _need_file(args.manifest, "manifest")
    try:
        m = dataset_io.load_manifest(args.manifest)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    for what, section in (("pretrain", m.pretrain), ("finetune", m.finetune)):
        if "seed" not in section:
            raise UsageError(f"manifest {what} section needs an explicit 'seed'")
    for what, section in (("generate", m.generate), ("eval", m.eval)):
        if "seed" not in section:
            raise UsageError(f"manifest {what} section needs an explicit 'seed'")
    pre_cfg = _train_config(m.pretrain)
    ft_cfg = _train_config({**{k: v for k, v in m.pretrain.items() if k in _ARCH_KEYS}, **m.finetune})

    run_dir = os.path.abspath(args.run_dir or m.resolve(m.run_dir))
    os.makedirs(run_dir, exist_ok=True)
    shutil.copyfile(args.manifest, os.path.join(run_dir, "manifest.json"))
    path = lambda name: os.path.join(run_dir, name)  # noqa: E731

    source = _manifest_dataset(m, m.source, "source")
    target = _manifest_dataset(m, m.target, "target")
    dataset_io.save_dataset(source, path("source.csv"))
    dataset_io.save_dataset(target, path("target.csv"))
    log.info("pretraining %d epochs on %d source PDPs", pre_cfg.epochs, len(source))
    pre, _ = _run_training(pre_cfg, source, path("pretrain.ckpt"), None)
    log.info("fine-tuning %d epochs on %d target PDPs", ft_cfg.epochs, len(target))
    ft, _ = _run_training(ft_cfg, target, path("finetune.ckpt"), pre)
    gen = _generate(ft, int(m.generate.get("count", len(target))), int(m.generate["seed"]),
                    m.grid.spacing, float(m.generate.get("sigma", 1.0)))
    dataset_io.save_dataset(gen, path("generated.csv"))
    reference = target
    if "reference" in m.eval:
        reference = dataset_io.load_dataset(m.resolve(m.eval["reference"]))
    report = _evaluate(reference, gen, path("eval"), int(m.eval["seed"]),
                       float(m.eval.get("threshold", evaluation.SSIM_THRESHOLD)),
                       m.eval.get("pairing", "random"))
    print(json.dumps({"run_dir": run_dir, "rmse_linear": report.rmse_linear,
                      "ssim_fraction_above": report.ssim_cdf["fraction_above"],
                      "wasserstein_total_power": report.wasserstein_total_power}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    out = {}
    if args.train:
        _need_file(args.train, "training report")
        rep = training.TrainReport.read(args.train)
        summary = rep.summary()
        if rep.d_loss and len(rep.d_loss) >= 2 * args.window:
            tol = float(np.std(rep.d_loss[-args.window:]))
            summary["convergence_epoch_final_std"] = training.convergence_epoch(rep.d_loss, args.window, tol)
        summary.pop("config", None)
        out["train"] = summary
    if args.eval:
        path = os.path.join(args.eval, "report.json")
        ev = _read_json(path, "evaluation report")
        out["eval"] = {k: ev[k] for k in ("rmse_linear", "rmse_db_of_db", "wasserstein_total_power")}
        out["eval"]["ssim_fraction_above"] = ev["ssim_cdf"]["fraction_above"]
        out["eval"]["ssim_threshold"] = ev["ssim_cdf"]["threshold"]
    if not out:
        raise UsageError("report needs --train and/or --eval")
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


_ARCH_KEYS = ("noise_dim", "noise_sigma", "g_hidden", "d_hidden", "alpha", "backend")


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pdpgan", description="Power-delay-profile GAN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a simulated PDP dataset")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--params", help="JSON file of channel generator parameters")
    src.add_argument("--fit-from", help="dataset to fit generator parameters from")
    s.add_argument("--count", type=_positive("--count"), required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="dataset path (.csv or .bin)")
    s.add_argument("--num-points", type=_positive("--num-points"), default=401)
    s.add_argument("--spacing", type=float, default=1e-9, help="delay bin width in seconds")
    s.add_argument("--label", help="label for fitted parameters")
    s.add_argument("--params-out", help="also write the parameters used as JSON")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train (or fine-tune with --init) a GAN")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=_non_negative, default=training.DEFAULT_EPOCHS)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--init", help="checkpoint to fine-tune from")
    t.add_argument("--config", help="JSON file of training options")
    t.add_argument("--snapshot-every", type=_non_negative, default=None)
    t.add_argument("--snapshot-dir")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample PDPs from a checkpoint")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--count", type=_positive("--count"), required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--num-points", type=_positive("--num-points"),
                   help="expected PDP length; mismatching checkpoints are rejected")
    g.add_argument("--spacing", type=float, help="delay bin width (default: from the checkpoint)")
    g.add_argument("--sigma", type=float, default=1.0, help="noise standard deviation")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="compare generated PDPs with a reference set")
    e.add_argument("--reference", required=True)
    e.add_argument("--generated", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--seed", type=int, required=True, help="seed for SSIM pairing")
    e.add_argument("--threshold", type=float, default=evaluation.SSIM_THRESHOLD)
    e.add_argument("--pairing", choices=("random", "identity"), default="random")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="run a pretrain / fine-tune / evaluate manifest")
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--run-dir", help="override the manifest's run directory")
    pl.set_defaults(func=cmd_pipeline)

    r = sub.add_parser("report", help="summarize a training history and/or evaluation report")
    r.add_argument("--train", help="training CSV written by train")
    r.add_argument("--eval", help="report directory written by eval")
    r.add_argument("--window", type=_positive("--window"), default=100)
    r.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, code: int, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message, **extra}, sort_keys=True),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Diverged as exc:
        return _fail("diverged", EXIT_DIVERGED, str(exc), last_good=exc.last_good)
    except gan.ArchitectureMismatch as exc:
        return _fail("architecture_mismatch", EXIT_USAGE, str(exc), differences=exc.differences)
    except (UsageError, dataset_io.DatasetFormatError) as exc:
        return _fail("validation", EXIT_USAGE, str(exc))
    except ValueError as exc:
        return _fail("validation", EXIT_USAGE, str(exc))
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
