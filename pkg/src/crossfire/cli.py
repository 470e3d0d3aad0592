"""``crossfire`` command line: simulate, train, detect, sweep, report.

Exit codes: 0 success, 2 config or input error, 3 model/dataset
incompatibility (L mismatch), 4 runtime failure (including a sweep that
finished with failed points).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import detectors as det
from . import evaluation as ev
from . import nn
from .config import (
    ConfigError, ScenarioConfig, dump_sections, parse_value, read_config_file,
    scenario_from_mapping, scenario_section,
)
from .fileio import atomic_write_text, csv_text
from .simulation import DatasetError, read_dataset, run_scenario, samples_to_arrays, write_dataset

EXIT_OK, EXIT_INPUT, EXIT_SHAPE, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("crossfire")

_TRAIN_KEYS = ("max_epochs", "batch_size", "patience", "validation_fraction", "learning_rate")


class InputError(Exception):
    """Bad input data (e.g. a single-class training set)."""


# -- config resolution -------------------------------------------------------

def _split_overrides(items: Sequence[str] | None, default_section: str) -> dict[str, dict[str, str]]:
    """``key=value`` goes to ``default_section``; ``section.key=value`` is explicit."""
    out: dict[str, dict[str, str]] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (p.strip() for p in item.split("=", 1))
        section, _, name = key.rpartition(".")
        out.setdefault(section or default_section, {})[name] = value
    return out


def _sections(path: str | None, overrides: Sequence[str] | None, default_section: str) -> dict[str, dict[str, str]]:
    merged: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = read_config_file(path)
        for name in parser.sections():
            merged[name] = dict(parser[name])
    for name, values in _split_overrides(overrides, default_section).items():
        merged.setdefault(name, {}).update(values)
    return merged


def _scenario(sections: dict[str, dict[str, str]], source: str | None) -> ScenarioConfig:
    try:
        return scenario_from_mapping(sections.get("scenario", {}))
    except ConfigError as exc:
        raise ConfigError(f"{source or 'overrides'}: [scenario] {exc}") from None


def _train_config(section: dict[str, str], seed: int) -> nn.TrainConfig:
    unknown = set(section) - set(_TRAIN_KEYS) - {"seed"}
    if unknown:
        raise ConfigError(f"[train] unknown keys: {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {"seed": seed}
    try:
        for key in _TRAIN_KEYS:
            if key in section:
                kwargs[key] = float(section[key]) if key in ("validation_fraction", "learning_rate") else int(section[key])
        return nn.TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None


def _model_options(section: dict[str, str], arch: str) -> tuple[dict[str, int], float]:
    hyper: dict[str, int] = {}
    threshold = 0.5
    for key, raw in section.items():
        try:
            if key == "threshold":
                threshold = float(raw)
            elif key in det.DEFAULT_HYPER[arch]:
                hyper[key] = int(raw)
            else:
                raise ConfigError(f"[model] key {key!r} does not apply to {arch}")
        except ValueError as exc:
            raise ConfigError(f"[model] {key}: {exc}") from None
    if not 0.0 < threshold < 1.0:
        raise ConfigError("[model] threshold must lie in (0, 1)")
    return hyper, threshold


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _meta_path(out: str | Path) -> Path:
    return Path(f"{out}.meta")


def _write_meta(out: str | Path, sections: dict[str, dict[str, Any]]) -> None:
    atomic_write_text(_meta_path(out), dump_sections(sections))


def _load_samples(path: str):
    if not Path(path).is_file():
        raise InputError(f"dataset not found: {path}")
    return read_dataset(path)


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    sections = _sections(args.config, args.override, "scenario")
    if args.seed is not None:
        sections.setdefault("scenario", {})["seed"] = str(args.seed)
    config = _scenario(sections, args.config)
    samples = run_scenario(config)
    write_dataset(samples, args.out)
    _write_meta(args.out, {
        "run": {"command": "simulate", "output": args.out},
        "scenario": scenario_section(config),
    })
    n_attack = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({n_attack} attack) to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    sections = _sections(args.config, args.override, "train")
    seed = args.seed if args.seed is not None else int(sections.get("train", {}).get("seed", 0))
    train_config = _train_config(sections.get("train", {}), seed)
    hyper, threshold = _model_options(sections.get("model", {}), args.arch)
    samples = _load_samples(args.dataset)
    if not samples:
        raise InputError(f"{args.dataset}: dataset has no samples")
    model = det.build_detector(args.arch, len(samples[0].flows), seed=seed, **hyper)
    model.threshold = threshold
    _, _, y = samples_to_arrays(samples)
    wy = det.window_labels(y, model.window)
    if len(np.unique(wy)) < 2:
        raise InputError(f"{args.dataset}: training needs both classes, "
                         f"found only {'attack' if wy.size and wy[0] else 'normal'} windows")
    t0 = time.perf_counter()
    result = det.fit_detector(model, samples, train_config)
    train_s = time.perf_counter() - t0
    det.save_model(model, args.out)
    history = Path(f"{args.out}.history.csv")
    atomic_write_text(history, csv_text(
        ["epoch", "train_loss", "val_loss"],
        [[r.epoch, repr(r.train_loss), repr(r.val_loss)] for r in result.history]))
    _write_meta(args.out, {
        "run": {"command": "train", "arch": args.arch, "dataset": args.dataset,
                "dataset_sha256": _sha256(args.dataset), "output": args.out},
        "train": {**{k: getattr(train_config, k) for k in _TRAIN_KEYS}, "seed": seed},
        "model": {**model.hyper, "threshold": model.threshold},
        "result": {"epochs": len(result.history), "best_epoch": result.best_epoch,
                   "train_s": round(train_s, 2)},
    })
    print(f"trained {args.arch} for {len(result.history)} epochs (best {result.best_epoch}) "
          f"in {train_s:.2f} s; model written to {args.out}")
    return EXIT_OK


def detection_summary(records: Sequence[det.DetectionRecord], labels: np.ndarray) -> dict[str, Any]:
    """First alarm time plus per-window metrics for a detection run."""
    verdicts = [r.verdict for r in records]
    report = ev.MetricsReport.from_predictions(verdicts, labels)
    alarms = [r.timestamp for r in records if r.state is det.NetworkState.UNDER_ATTACK]
    c = report.counts
    return {
        "windows": len(records),
        "first_alarm_t": alarms[0] if alarms else None,
        "alarm_windows": len(alarms),
        "accuracy": report.accuracy, "precision": report.precision,
        "recall": report.recall, "f1": report.f1,
        "true_positive": c.true_positive, "false_positive": c.false_positive,
        "true_negative": c.true_negative, "false_negative": c.false_negative,
    }


def cmd_detect(args: argparse.Namespace) -> int:
    if not Path(args.model).is_file():
        raise InputError(f"model not found: {args.model}")
    model = det.load_model(args.model)
    if args.threshold is not None:
        if not 0.0 < args.threshold < 1.0:
            raise ConfigError("--threshold must lie in (0, 1)")
        model.threshold = args.threshold
    samples = _load_samples(args.dataset)
    if samples and len(samples[0].flows) != model.n_links:
        raise nn.ShapeError(f"model {args.model} monitors L={model.n_links} links but dataset "
                            f"{args.dataset} has L={len(samples[0].flows)}")
    scores = det.score_stream(model, samples)
    records = scores.records(args.alpha)
    rows = [[f"{r.timestamp:.3f}", repr(r.probability), "attack" if r.verdict else "normal", r.state.value]
            for r in records]
    atomic_write_text(args.out, csv_text(["t", "probability", "verdict", "state"], rows))
    summary = detection_summary(records, scores.labels)
    _write_meta(args.out, {
        "run": {"command": "detect", "model": args.model, "model_sha256": _sha256(args.model),
                "dataset": args.dataset, "dataset_sha256": _sha256(args.dataset),
                "alpha": args.alpha, "threshold": model.threshold, "output": args.out},
        "summary": summary,
    })
    print("[summary]")
    for key, value in summary.items():
        print(f"{key} = {'NA' if value is None else value}")
    return EXIT_OK


def _sweep_values(variable: str, raw: str) -> list:
    if variable == "alpha":
        return [int(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    name = ev.VARIABLE_FIELDS.get(variable, variable)
    sep = ";" if ";" in raw or name in ("speed_range",) else ","
    return [parse_value(name, item) for item in raw.split(sep) if item.strip()]


def load_sweep_spec(path: str | None, overrides: Sequence[str] | None = None) -> ev.SweepSpec:
    sections = _sections(path, overrides, "sweep")
    sweep = sections.get("sweep")
    if not sweep or "variable" not in sweep or "values" not in sweep:
        raise ConfigError(f"{path or 'overrides'}: [sweep] needs 'variable' and 'values'")
    template = _scenario(sections, path)
    allowed = {"variable", "values", "archs", "seeds", "alpha", "train_fraction"}
    unknown = set(sweep) - allowed
    if unknown:
        raise ConfigError(f"[sweep] unknown keys: {', '.join(sorted(unknown))}")
    try:
        kwargs: dict[str, Any] = {
            "variable": sweep["variable"].strip(),
            "values": _sweep_values(sweep["variable"].strip(), sweep["values"]),
            "template": template,
            "train": _train_config(sections.get("train", {}), 0),
        }
        if "archs" in sweep:
            kwargs["archs"] = tuple(a.strip() for a in sweep["archs"].split(",") if a.strip())
        if "seeds" in sweep:
            kwargs["seeds"] = tuple(int(s) for s in sweep["seeds"].split(",") if s.strip())
        if "alpha" in sweep:
            kwargs["alpha"] = int(sweep["alpha"])
        if "train_fraction" in sweep:
            kwargs["train_fraction"] = float(sweep["train_fraction"])
        return ev.SweepSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'overrides'}: [sweep] {exc}") from None


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = load_sweep_spec(args.config, args.override)
    changes: dict[str, Any] = {}
    if args.seed is not None:
        changes["seeds"] = tuple(args.seed + i for i in range(len(spec.seeds)))
    if args.arch is not None:
        changes["archs"] = (args.arch,)
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if changes:
        spec = dataclasses.replace(spec, **changes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rows: list[ev.SweepRow]) -> None:
        if rows:
            logger.info("finished %s rep %d (%d rows)", rows[0].arch, rows[0].rep, len(rows))

    rows = ev.run_sweep(spec, jobs=args.jobs, artifact_dir=out / "points", on_unit=progress)
    ev.write_results(rows, out / "results.csv")
    _write_meta(out / "results.csv", {
        "run": {"command": "sweep", "jobs": args.jobs, "output": str(out / "results.csv")},
        "sweep": {"variable": spec.variable,
                  "values": "; ".join(ev.format_sweep_value(v) for v in spec.values),
                  "archs": ", ".join(spec.archs), "seeds": ", ".join(map(str, spec.seeds)),
                  "alpha": spec.alpha, "train_fraction": spec.train_fraction},
        "train": {k: getattr(spec.train, k) for k in _TRAIN_KEYS},
        "scenario": scenario_section(spec.template),
    })
    failed = sum(row.status != "ok" for row in rows)
    print(f"wrote {len(rows)} rows to {out / 'results.csv'} ({failed} failed)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if not Path(args.results).is_file():
        raise InputError(f"results table not found: {args.results}")
    records = ev.read_results(args.results)
    missing = set(ev.RESULT_COLUMNS[:12]) - set(records[0] if records else ev.RESULT_COLUMNS)
    if missing:
        raise InputError(f"{args.results}: missing columns {', '.join(sorted(missing))}")
    summary = ev.summarize([r for r in records if r.get("status", "ok") == "ok"])
    header = ["variable", "value", "arch", "reps", "accuracy", "precision", "recall", "f1",
              "latency_s", "train_s", "detect_s", "false_alarms"]
    text = csv_text(header, [[row[c] for c in header] for row in summary])
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {len(summary)} summary rows to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossfire", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            p.add_argument("--config", help="sectioned key = value config file")
            p.add_argument("--override", action="append", metavar="K=V",
                           help="override a config value; [section.]key=value, repeatable")

    p = sub.add_parser("simulate", help="generate a labelled traffic dataset")
    common(p)
    p.add_argument("--seed", type=int, help="scenario seed (overrides the config)")
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("dataset")
    common(p)
    p.add_argument("--arch", choices=det.ARCHS, required=True)
    p.add_argument("--seed", type=int, help="initialization and shuffling seed")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a trained detector over a dataset")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--alpha", type=int, default=6, help="consecutive attack verdicts before alarm")
    p.add_argument("--threshold", type=float, help="override the model's decision threshold")
    p.add_argument("--out", required=True, help="detection CSV to write")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", help="run a vehicles, speed_range or alpha experiment sweep")
    common(p)
    p.add_argument("--arch", choices=det.ARCHS, help="restrict to one architecture")
    p.add_argument("--alpha", type=int, help="alpha used for non-alpha sweeps")
    p.add_argument("--seed", type=int, help="first repetition seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="per-point means of a sweep result table")
    p.add_argument("results")
    p.add_argument("--out", help="summary CSV to write (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "alpha", None) is not None and args.alpha < 1:
        parser.error("--alpha must be >= 1")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except nn.ShapeError as exc:
        print(f"crossfire: incompatible input: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ConfigError, DatasetError, det.ModelFormatError, InputError) as exc:
        print(f"crossfire: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level guard
        logger.debug("unhandled error", exc_info=True)
        print(f"crossfire: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
