"""Command-line entry point: ``st-sam <generate|train|eval|predict>``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import dataio, evaluation, numerics, plotting, training
from .dataio import DataError, Sample
from .evaluation import ModelPredictor
from .model import init_params
from .training import CheckpointError, DivergenceError

logger = logging.getLogger("stsam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(cfg) -> Path:
    out = Path(cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg):
    return dataio.load_flow_csv(cfg["paths"]["data_csv"], cfg["paths"]["meta"])


def _partitions(cfg, data, k):
    s = cfg["split"]
    return dataio.split(data, s["train_days"], s["val_fraction"], k, s["disallow_overlap"])


def _write_train_report(report, path, note):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {note}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for e in report.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), f"{e.seconds:.3f}"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_generate(cfg, args) -> int:
    if not cfg.get("synthetic"):
        raise UsageError("generate needs a 'synthetic' section in the config")
    spec = cfgmod.synthetic_spec(cfg)
    data = dataio.generate_synthetic(spec)
    csv_path, meta_path = Path(cfg["paths"]["data_csv"]), Path(cfg["paths"]["meta"])
    for p in (csv_path, meta_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_flow_csv(data, csv_path, meta_path, cfgmod.provenance(cfg))
    print(
        f"generated {data.n_regions} regions x {data.n_slots} slots "
        f"({data.n_slots * data.n_regions} rows), seed {spec.seed} -> {csv_path}"
    )
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    data = _load_data(cfg)
    hp = cfgmod.hyperparams(cfg, data.meta)
    tc = cfgmod.train_config(cfg)
    parts = _partitions(cfg, data, hp.k)
    stats = dataio.fit_normalizer(data, np.arange(parts.train[-1] + 1)) if cfg["normalize"] else None
    train = dataio.make_samples(data, hp.k, parts.train, stats)
    val = dataio.make_samples(data, hp.k, parts.val, stats)
    params = init_params(hp, cfg["seed"])
    note = cfgmod.provenance(cfg)
    extra = {"config_sha256": cfgmod.config_hash(cfg), "seed": cfg["seed"]}
    out = _output_dir(cfg)
    ckpt_path = Path(cfg["paths"]["checkpoint"])
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        report, ckpt = training.fit(params, train, val, hp, tc, data.meta, stats, extra)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            training.save_checkpoint(exc.checkpoint, ckpt_path)
        if exc.report is not None:
            _write_train_report(exc.report, out / "train_report.csv", note)
        print(f"training diverged: {exc}; last good checkpoint at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    training.save_checkpoint(ckpt, ckpt_path)
    _write_train_report(report, out / "train_report.csv", note)
    plotting.plot_training(report, out / "train_loss.png", note)
    print(
        f"trained {len(report.epochs)} epochs (k={hp.k}, heads={hp.M}, d={hp.d}); "
        f"best epoch {report.best_epoch} val loss {report.best_val_loss:.6f}; "
        f"{report.mean_epoch_seconds:.2f}s/epoch -> {ckpt_path}"
    )
    return EXIT_OK


def _load_model(cfg):
    ckpt = training.load_checkpoint(cfg["paths"]["checkpoint"])
    data = _load_data(cfg)
    if ckpt.meta_fingerprint is not None and ckpt.meta_fingerprint != data.meta.fingerprint():
        raise DataError(
            f"checkpoint was trained on meta {ckpt.meta_fingerprint}, data has {data.meta.fingerprint()}"
        )
    return ckpt, data


def cmd_eval(cfg, args) -> int:
    ckpt, data = _load_model(cfg)
    hp, stats = ckpt.hp, ckpt.stats
    parts = _partitions(cfg, data, hp.k)
    slots = {"train": parts.train, "val": parts.val, "test": parts.test}[args.partition]
    samples = dataio.make_samples(data, hp.k, slots, stats)
    threshold = cfg["mape_threshold"]
    predictors = {
        "model": ModelPredictor(ckpt.tensors(requires_grad=False), hp, data.meta),
        "historical_average": evaluation.baseline_historical_average(
            data, np.arange(parts.train[-1] + 1), stats
        ),
        "last_value": evaluation.baseline_last_value,
    }
    note = cfgmod.provenance(cfg)
    out = _output_dir(cfg)
    reports = []
    for name, predictor in predictors.items():
        report = evaluation.evaluate(predictor, samples, stats, threshold, name)
        evaluation.write_report_csv([report], out / f"metrics_{name}_{args.partition}.csv", note)
        reports.append(report)
    print(evaluation.format_table(reports))
    plotting.plot_metrics(reports, out / f"metrics_{args.partition}.png", note)
    return EXIT_OK


def history_sample(data, t: int, k: int, stats=None) -> Sample:
    """Sample whose history ends at slot t; targets are zero when t+1 is unobserved."""
    if t < k - 1 or t >= data.n_slots:
        raise DataError(f"slot {t} needs history slots [{t - k + 1}, {t}] inside [0, {data.n_slots - 1}]")
    scale = stats.apply if stats is not None else np.asarray
    hin = scale(data.inflow[t - k + 1 : t + 1]).T
    hout = scale(data.outflow[t - k + 1 : t + 1]).T
    if t + 1 < data.n_slots:
        tin, tout = scale(data.inflow[t + 1]), scale(data.outflow[t + 1])
    else:
        tin = tout = np.zeros(data.n_regions)
    return Sample(np.array(hin), np.array(hout), t, np.array(tin), np.array(tout))


def cmd_predict(cfg, args) -> int:
    if args.time_index is None:
        raise UsageError("predict needs --time-index")
    ckpt, data = _load_model(cfg)
    t = args.time_index
    sample = history_sample(data, t, ckpt.hp.k, ckpt.stats)
    predictor = ModelPredictor(ckpt.tensors(requires_grad=False), ckpt.hp, data.meta)
    raw = evaluation.to_raw(predictor([sample]), ckpt.stats)[0]
    out = _output_dir(cfg)
    path = Path(args.output) if args.output else out / f"forecast_t{t + 1}.csv"
    note = cfgmod.provenance(cfg)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {note} forecast_slot={t + 1}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region_index", "inflow_pred", "outflow_pred"])
        for r in range(raw.shape[0]):
            writer.writerow([r, repr(float(raw[r, 0])), repr(float(raw[r, 1]))])
    truth = None
    if t + 1 < data.n_slots:
        truth = np.stack([data.inflow[t + 1], data.outflow[t + 1]], axis=-1)
    plotting.plot_forecast(np.arange(raw.shape[0]), raw, path.with_suffix(".png"), truth, note)
    print(f"wrote {raw.shape[0]} region forecasts for slot {t + 1} -> {path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="st-sam", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config leaf, e.g. model.d=32")
    parser.add_argument("--partition", choices=("train", "val", "test"), default="test",
                        help="eval: partition to score (default test)")
    parser.add_argument("--time-index", type=int, help="predict: last observed slot t")
    parser.add_argument("--output", help="predict: forecast CSV path")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = cfgmod.load_config(args.config, args.overrides)
        numerics.set_default_dtype(cfg["precision"])
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"st-sam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (cfgmod.ConfigError, DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"st-sam: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"st-sam: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        numerics.set_default_dtype("float64")


if __name__ == "__main__":
    sys.exit(main())
