"""Command-line entry point: generate / train / eval / predict / stream.

One binary, five subcommands, one configuration story: flat ``key = value``
files layered under command-line ``--set key=value`` overrides (command line
beats file, file beats built-in defaults).  ``--show-config`` prints the
effective merged configuration without running anything.

Exit codes: 0 success, 2 configuration error (including unknown flags),
3 data error, 4 training or other runtime error.  The ``INTENT_LOG``
environment variable (``debug`` | ``info`` | ``error``) sets log verbosity;
logs go to stderr so machine-readable stdout stays clean.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .config import layer_configs, parse_kv_file, render_kv
from .dataset import (
    LabeledDataset,
    SynthSpec,
    load_stats,
    pad_traces,
    parse_synth_spec,
    parse_trace_csv,
    save_stats,
    standardize_apply,
    synth_generate,
    write_trace_csv,
)
from .errors import ConfigError, DataError, ExperimentError, IntentCnnError
from .evaluation import (
    DEFAULT_RATIOS,
    parse_experiment_config,
    render_report,
    run_experiment,
    write_experiment_outputs,
)
from .model import NetworkConfig, TrainSpec, load_model, save_model
from .streaming import (
    DEFAULT_HOP_FRAMES,
    DEFAULT_WINDOW_FRAMES,
    StreamPrediction,
    WindowConfig,
    format_error_record,
    format_prediction,
    open_line_source,
    stream_classify,
)

log = logging.getLogger(__name__)

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "error": logging.ERROR}


def _configure_logging() -> None:
    name = os.environ.get("INTENT_LOG", "error").lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        level = logging.ERROR
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# defaults, layering, shared plumbing
# ---------------------------------------------------------------------------

def _generate_defaults() -> dict[str, str]:
    spec = SynthSpec()
    return {
        "num_classes": str(spec.num_classes),
        "trials_per_class": str(spec.trials_per_class),
        "channels": str(spec.channels),
        "frame_min": str(spec.frame_range[0]),
        "frame_max": str(spec.frame_range[1]),
        "noise_std": str(spec.noise_std),
        "seed": str(spec.seed),
        "sample_rate_hz": str(spec.sample_rate_hz),
        "class_prefix": spec.class_prefix,
    }


def _experiment_defaults() -> dict[str, str]:
    net = NetworkConfig()
    spec = TrainSpec()
    return {
        "experiment.seed": "0",
        "experiment.block_frames": "1000",
        "experiment.ratios": ", ".join("/".join(f"{f:g}" for f in r)
                                       for r in DEFAULT_RATIOS),
        "model.channels": str(net.channels),
        "model.input_frames": str(net.input_frames),
        "model.conv_filters": ", ".join(map(str, net.conv_filters)),
        "model.kernel_width": str(net.kernel_width),
        "model.pool": str(net.pool),
        "model.pool_stride": str(net.pool_stride),
        "model.fc_sizes": ", ".join(map(str, net.fc_sizes)),
        "model.num_classes": str(net.num_classes),
        "model.batchnorm_position": net.batchnorm_position,
        "train.epochs": str(spec.epochs),
        "train.batch_size": str(spec.batch_size),
        "train.learning_rate": f"{spec.learning_rate:g}",
        "train.optimizer": spec.optimizer,
        "train.patience": str(spec.patience),
        "train.seed": str(spec.seed),
    }


def _parse_set_items(items) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs[key] = value
    return pairs


def _effective_pairs(args, defaults: dict[str, str], seed_key: str,
                     config_path: str | None = None) -> dict[str, str]:
    """defaults < config file < --set < dedicated flags."""
    path = config_path if config_path is not None else getattr(args, "config", None)
    file_pairs = parse_kv_file(path) if path else {}
    flag_pairs: dict[str, str] = {}
    if getattr(args, "seed", None) is not None:
        flag_pairs[seed_key] = str(args.seed)
    return layer_configs(defaults, file_pairs, _parse_set_items(args.set), flag_pairs)


def _read_labels(path: str | None) -> tuple[str, ...] | None:
    if path is None:
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read labels file {path!r}: {exc}") from exc
    if not names:
        raise ConfigError(f"labels file {path!r} is empty")
    return tuple(names)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    pairs = _effective_pairs(args, _generate_defaults(), seed_key="seed")
    if args.show_config:
        sys.stdout.write(render_kv(pairs))
        return 0
    spec = parse_synth_spec(pairs, origin=args.config or "<defaults>")
    data = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest_rows = []
    trial_counter = [0] * len(data.vocab)
    for trace, label in zip(data.traces, data.labels):
        trial_counter[label] += 1
        filename = f"task{label + 1}_trial{trial_counter[label]:02d}.csv"
        write_trace_csv(trace, os.path.join(args.out, filename))
        manifest_rows.append((filename, data.vocab[label], trace.frames))
    manifest_path = os.path.join(args.out, "manifest.csv")
    with open(manifest_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("filename", "class_name", "frames"))
        writer.writerows(manifest_rows)
    print(f"wrote {len(data.traces)} trace files and manifest.csv to {args.out}")
    return 0


def _cmd_train(args) -> int:
    pairs = _effective_pairs(args, _experiment_defaults(), seed_key="experiment.seed")
    if args.show_config:
        sys.stdout.write(render_kv(pairs))
        return 0
    pairs.setdefault("experiment.id", "train")
    spec = parse_experiment_config(pairs)
    spec = replace(spec, ratios=(spec.ratios[0],))
    report = run_experiment(spec)
    outcome = report.outcomes[0]
    os.makedirs(args.out, exist_ok=True)
    save_model(outcome.network, os.path.join(args.out, "model.intc"))
    save_stats(outcome.stats, report.channel_names, os.path.join(args.out, "stats.csv"))
    history_lines = ["epoch,train_loss,val_loss,val_macro_f1"]
    history_lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_macro_f1!r}"
                      for r in outcome.history]
    _write_text(os.path.join(args.out, "history.csv"),
                "\n".join(history_lines) + "\n")
    _write_text(os.path.join(args.out, "labels.txt"),
                "".join(f"{name}\n" for name in report.vocab))
    for name in ("model.intc", "stats.csv", "history.csv", "labels.txt"):
        print(name)
    print(f"trained {spec.experiment_id}: epochs_run={len(outcome.history)} "
          f"best_epoch={outcome.best_epoch} test_macro_f1={outcome.macro_f1:.6f}")
    return 0


def _cmd_eval(args) -> int:
    defaults = _experiment_defaults()
    all_pairs = [_effective_pairs(args, defaults, seed_key="experiment.seed",
                                  config_path=path) for path in args.config]
    if args.show_config:
        for path, pairs in zip(args.config, all_pairs):
            print(f"# {path}")
            sys.stdout.write(render_kv(pairs))
        return 0
    specs = [parse_experiment_config(pairs) for pairs in all_pairs]
    jobs = max(1, args.jobs)
    if jobs == 1:
        reports = [run_experiment(spec) for spec in specs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_experiment, specs))
    os.makedirs(args.out, exist_ok=True)
    for report in reports:                      # spec order, regardless of --jobs
        write_experiment_outputs(report, args.out)
        sys.stdout.write(render_report(report, args.format))
    return 0


def _cmd_predict(args) -> int:
    network = load_model(args.model)
    stats, _ = load_stats(args.stats)
    class_names = _read_labels(args.labels)
    if class_names is not None and len(class_names) != network.num_classes:
        raise ConfigError(f"{len(class_names)} class names for "
                          f"{network.num_classes} classes")
    trace = parse_trace_csv(args.trace)
    dataset = LabeledDataset(traces=[trace], labels=np.array([0]), vocab=("trace",))
    dataset = standardize_apply(dataset, stats)
    input_frames = network.config.input_frames
    dataset = pad_traces(dataset, block_frames=input_frames,
                         target_frames=input_frames)
    probs = network.predict_proba(dataset.traces[0].values[None, :, :])[0]
    label = int(np.argmax(probs))
    name = class_names[label] if class_names is not None else f"class{label}"
    rendered = ",".join(f"{float(p):.9g}" for p in probs)
    print(f"{label},{name},{rendered}")
    return 0


def _cmd_stream(args) -> int:
    network = load_model(args.model)
    stats, _ = load_stats(args.stats)
    cfg = WindowConfig(network=network, stats=stats, window_frames=args.window,
                       hop_frames=args.hop, class_names=_read_labels(args.labels))
    lines = open_line_source(args.source)
    for event in stream_classify(lines, cfg):
        if isinstance(event, StreamPrediction):
            print(format_prediction(event, cfg), flush=True)
        else:
            print(format_error_record(event), flush=True)
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentcnn",
        description="Train and run intent classifiers over multichannel "
                    "robot-arm traces.")
    sub = parser.add_subparsers(dest="subcommand")

    def add_common(p, seed=True):
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--show-config", action="store_true",
                       help="print the effective merged config and exit")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the experiment/generation seed")

    p = sub.add_parser("generate", help="write a synthetic trace dataset as CSVs")
    p.add_argument("--config", help="key=value generation recipe")
    p.add_argument("--out", default="generated", help="output directory")
    add_common(p)

    p = sub.add_parser("train", help="train one model and save its artifacts")
    p.add_argument("--config", help="key=value experiment description")
    p.add_argument("--out", default="trained", help="output directory")
    add_common(p)

    p = sub.add_parser("eval", help="run experiments and write report files")
    p.add_argument("--config", nargs="+", required=True,
                   help="one or more experiment config files")
    p.add_argument("--out", default="reports", help="output directory")
    p.add_argument("--format", choices=("text", "csv"), default="text",
                   help="report format echoed to stdout")
    p.add_argument("--jobs", type=int, default=1,
                   help="experiments to run concurrently")
    add_common(p)

    p = sub.add_parser("predict", help="classify one trace CSV")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--stats", required=True, help="standardization stats CSV")
    p.add_argument("--trace", required=True, help="trace CSV to classify")
    p.add_argument("--labels", help="class-name file (one per line)")
    add_common(p, seed=False)
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for interface uniformity; prediction is "
                        "deterministic")

    p = sub.add_parser("stream", help="classify a live frame stream per hop")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--stats", required=True, help="standardization stats CSV")
    p.add_argument("--labels", help="class-name file (one per line)")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW_FRAMES,
                   help="window length in frames")
    p.add_argument("--hop", type=int, default=DEFAULT_HOP_FRAMES,
                   help="hop length in frames")
    p.add_argument("--source", default="-",
                   help="'-' for standard input or tcp:HOST:PORT")
    add_common(p, seed=False)
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for interface uniformity; streaming is "
                        "deterministic")
    return parser


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "stream": _cmd_stream,
}


def main(argv=None) -> int:
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # argparse already printed usage
        return int(exc.code) if exc.code is not None else 0
    if args.subcommand is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.subcommand](args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ConfigError):
            return 2
        if isinstance(exc.cause, DataError):
            return 3
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except BrokenPipeError:
        return 0                     # downstream consumer closed the pipe
    except (IntentCnnError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:         # truly unexpected: still map to runtime
        print(f"error: {exc!r}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
