"""Command-line entry point ``nleq``.

Exit codes: 0 success, 2 configuration error, 3 numerical or convergence
failure, 4 required SNR not bracketed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .. import nnbp, noisefig
from ..montecarlo import RangeError
from . import experiments as ex
from . import svg
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_RANGE = 0, 2, 3, 4


def _u64(v: str) -> int:
    n = int(v, 0)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return n


def _say(msg: str):
    print(msg, file=sys.stderr, flush=True)


def cmd_calibrate(cfg: ExperimentConfig, out: Path, args) -> int:
    res = ex.calibrate_nonlinearity(cfg, log=_say)
    ex.write_text(out / "calibration.ini", res.dumps())
    print(f"nl_amplitude = {res.nl_amplitude:.6g}  ratio = {res.ratio:.5f}  (band {res.band[0]}..{res.band[1]})")
    if not res.in_band:
        _say("calibrated ratio lies outside the band")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fit_volterra(cfg: ExperimentConfig, out: Path, args) -> int:
    model = ex.fit_volterra(cfg)
    ex.write_text(out / "volterra.txt", model.dumps())
    print(f"Volterra L={model.L} trained at {model.train_snr_db:g} dB -> {out / 'volterra.txt'}")
    return EXIT_OK


def cmd_train_nn(cfg: ExperimentConfig, out: Path, args) -> int:
    res = ex.train_nn(cfg, log=_say)
    out.mkdir(parents=True, exist_ok=True)
    nnbp.save(out / "nnbp.txt", res.stages, res.schedule)
    rows = ((k + 1, e, v) for k, tr in enumerate(res.trace) for e, v in enumerate(tr))
    ex.write_text(out / "nn_loss.csv", ex.csv_text(("stage", "epoch", "validation_loss"), rows))
    series = [(f"stage {k + 1}", np.arange(len(tr)), tr) for k, tr in enumerate(res.trace)]
    ex.write_text(out / "nn_loss.svg", svg.line_chart(series, "NN-BP validation loss", "epoch", "loss"))
    print(f"{len(res.stages)}-stage NN-BP -> {out / 'nnbp.txt'}")
    return EXIT_OK


def cmd_waterfall(cfg: ExperimentConfig, out: Path, args) -> int:
    curve = ex.run_waterfall(cfg, workers=args.workers, log=_say)
    ex.write_text(out / "waterfall.csv", ex.waterfall_csv([curve]))
    ex.write_text(out / "waterfall.svg", svg.waterfall_chart([curve]))
    print(f"{len(curve.points)} points -> {out / 'waterfall.csv'}")
    return EXIT_OK


def _write_sweep(res: ex.SweepResult, out: Path, stem: str):
    ex.write_text(out / f"{stem}.csv", ex.csv_text(ex.SWEEP_COLUMNS, res.rows()))
    ex.write_text(out / f"{stem}_detail.csv", ex.csv_text(ex.SWEEP_DETAIL_COLUMNS, res.detail_rows()))
    ex.write_text(out / f"{stem}_curves.csv", ex.waterfall_csv(res.curves))
    t = res.train_snrs
    series = [("NE", t, [r.ne_penalty_db for r in res.reports]), ("NL", t, [r.nl_penalty_db for r in res.reports]),
              ("total", t, [r.total_db for r in res.reports]), ("noise figure", t, [r.nf_db for r in res.reports])]
    ex.write_text(out / f"{stem}.svg", svg.line_chart(series, "SNR penalty at BER 1e-4", "training SNR [dB]",
                                                      "penalty [dB]"))
    for r in res.reports:
        print(f"train {r.train_snr_db:g} dB: NE {r.ne_penalty_db:.3f} NL {r.nl_penalty_db:.3f} "
              f"total {r.total_db:.3f} NF {r.nf_db:.3f}")


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    res = ex.run_training_snr_sweep(cfg, workers=args.workers, log=_say)
    _write_sweep(res, out, "sweep")
    print(f"optimal training SNR {res.optimal_train_snr_db:g} dB")
    return EXIT_OK


def cmd_penalty(cfg: ExperimentConfig, out: Path, args) -> int:
    _write_sweep(ex.run_penalty(cfg, workers=args.workers, log=_say), out, "penalty")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out: Path, args) -> int:
    res = ex.run_final_comparison(cfg, workers=args.workers, log=_say)
    ex.write_text(out / "comparison.csv", ex.waterfall_csv(res.curves))
    ex.write_text(out / "required_snr.csv", ex.required_csv(res))
    ex.write_text(out / "comparison.txt", res.report())
    ex.write_text(out / "comparison.svg", svg.waterfall_chart(res.curves, "post-BP BER by receiver"))
    print(res.report(), end="")
    return EXIT_OK


COMMANDS = {
    "calibrate": (cmd_calibrate, "fit the nonlinearity drive level to the target Volterra ratio"),
    "fit-volterra": (cmd_fit_volterra, "train a Volterra equalizer and write its weights"),
    "train-nn": (cmd_train_nn, "train the NN-BP equalizer stages"),
    "waterfall": (cmd_waterfall, "BER against SNR for the configured receiver"),
    "sweep-train-snr": (cmd_sweep, "NE/NL penalty split across Volterra training SNRs"),
    "penalty": (cmd_penalty, "NE/NL penalty split at one training SNR"),
    "compare": (cmd_compare, "required SNR of every receiver and their ordering"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nleq", description="Nonlinear equalization link experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="INI configuration (defaults apply when omitted)")
        s.add_argument("--seed", type=_u64, help="master seed (overrides [run] seed)")
        s.add_argument("--out", help="output directory (overrides [run] output_dir)")
        s.add_argument("--workers", type=int, default=None, help="worker processes per SNR point")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        if args.out is not None:
            cfg = cfg.with_(output_dir=args.out)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command][0](cfg, Path(cfg.output_dir), args)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except RangeError as exc:
        _say(f"range error: {exc}")
        return EXIT_RANGE
    except (nnbp.TrainingDivergedError, noisefig.DegenerateModelError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        _say(f"numerical error: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
