"""Command-line interface: synth, preprocess, train, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Epoch progress goes to standard error; machine-readable metrics live in
the run directory. All commands are deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ica as ica_mod
from . import synth as synth_mod
from .pipeline import LOSS_MODES, TrainConfig, run_experiment
from .report import RunReport, ReportConflictError
from .signals import (
    ICA_COMPONENTS,
    PREPROCESSED_EEG,
    common_average_reference,
    design_fir_bandpass,
    extract_epochs,
    filter_zero_phase,
    zscore_normalize,
)
from .store import (
    KIND_TRIALS,
    StoreError,
    load_recording_store,
    load_trial_store,
    save_recording_store,
    save_trial_store,
    store_kind,
)

logger = logging.getLogger("airscribe")

FEATURE_FLAGS = {"eeg": PREPROCESSED_EEG, "ica": ICA_COMPONENTS}


def _load_config_section(path: str, section: str) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path} not found")
    if section not in parser:
        return {}
    return dict(parser[section])


def _apply_config_defaults(parser: argparse.ArgumentParser, argv, section: str):
    """Let an INI section provide defaults; explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    raw = _load_config_section(known.config, section)
    defaults = {}
    for action in parser._actions:
        key = action.dest.replace("_", "-")
        if key in raw or action.dest in raw:
            value = raw.get(key, raw.get(action.dest))
            if action.type is not None:
                value = action.type(value)
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                value = value.lower() in ("1", "true", "yes", "on")
            defaults[action.dest] = value
    parser.set_defaults(**defaults)


def cmd_synth(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="airscribe synth",
        description="Generate a synthetic continuous-EEG recording store.",
    )
    parser.add_argument("--out", required=True, help="output store directory")
    parser.add_argument("--subjects", type=int, default=5)
    parser.add_argument("--trials-per-class", type=int, default=10)
    parser.add_argument("--classes", type=int, default=26)
    parser.add_argument("--snr-db", type=float, default=6.0)
    parser.add_argument("--blink-rate", type=float, default=12.0,
                        help="blink events per minute")
    parser.add_argument("--emg-rate", type=float, default=5.0,
                        help="EMG bursts per minute")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--force", action="store_true",
                        help="overwrite a non-empty output directory")
    parser.add_argument("--config", help="INI file with a [synth] section")
    _apply_config_defaults(parser, argv, "synth")
    args = parser.parse_args(argv)

    try:
        spec = synth_mod.SynthSpec(
            subjects=args.subjects,
            trials_per_class=args.trials_per_class,
            classes=args.classes,
            snr_db=args.snr_db,
            blink_rate_per_min=args.blink_rate,
            emg_rate_per_min=args.emg_rate,
            seed=args.seed,
        )
    except ValueError as exc:
        parser.error(str(exc))
    try:
        recordings = [
            generate_and_log(spec, i) for i in range(spec.subjects)
        ]
        out = save_recording_store(args.out, recordings, force=args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot write store: {exc}", file=sys.stderr)
        return 1
    n_trials = sum(len(r.events) for r in recordings)
    n_bytes = sum(p.stat().st_size for p in Path(out).iterdir())
    print(f"wrote {spec.subjects} subject(s), {n_trials} trials, {n_bytes} bytes to {out}")
    return 0


def generate_and_log(spec: synth_mod.SynthSpec, index: int):
    rec, _ = synth_mod.generate_subject(spec, index)
    logger.info("generated subject %s: %d events, %d samples",
                rec.subject, len(rec.events), rec.n_samples)
    return rec


def cmd_preprocess(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="airscribe preprocess",
        description="Reference, filter, clean, epoch, and normalize a recording store.",
    )
    parser.add_argument("--in", dest="input", required=True,
                        help="continuous recording store directory")
    parser.add_argument("--out", required=True, help="output directory root")
    parser.add_argument("--low", type=float, default=0.5)
    parser.add_argument("--high", type=float, default=45.0)
    parser.add_argument("--skip-ica", action="store_true",
                        help="skip source separation and component features")
    parser.add_argument("--ica-seed", type=int, default=0)
    parser.add_argument("--ica-max-iter", type=int, default=500)
    parser.add_argument("--artifact-threshold", type=float, default=0.8)
    parser.add_argument("--force", action="store_true")
    parser.add_argument("--config", help="INI file with a [preprocess] section")
    _apply_config_defaults(parser, argv, "preprocess")
    args = parser.parse_args(argv)

    if not (0 < args.low < args.high):
        parser.error(f"invalid band: low {args.low} must be below high {args.high}")

    try:
        recordings = load_recording_store(args.input)
    except (StoreError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not (0 < args.low < args.high < recordings[0].fs / 2):
        parser.error(
            f"band ({args.low}, {args.high}) outside (0, fs/2) for fs={recordings[0].fs}"
        )

    out_root = Path(args.out)
    fir = design_fir_bandpass(args.low, args.high, recordings[0].fs)
    eeg_trials = []
    ica_trials = []
    decompositions = []
    try:
        for rec in recordings:
            logger.info("preprocessing subject %s", rec.subject)
            filtered = filter_zero_phase(common_average_reference(rec), fir)
            if args.skip_ica:
                cleaned = filtered
            else:
                dec = ica_mod.ica_decompose(
                    filtered, seed=args.ica_seed, max_iter=args.ica_max_iter
                )
                scores = ica_mod.score_components(dec, filtered)
                cleaned = ica_mod.remove_and_reconstruct(
                    filtered, dec, scores, threshold=args.artifact_threshold
                )
                removed = scores.artifact_indices(args.artifact_threshold)
                logger.info("subject %s: removed %d component(s)",
                            rec.subject, len(removed))
                components = ica_mod.components_as_features(dec, filtered)
                ica_trials.append(
                    zscore_normalize(
                        extract_epochs(components, feature_kind=ICA_COMPONENTS)
                    )
                )
                decompositions.append((rec.subject, dec))
            eeg_trials.append(
                zscore_normalize(
                    extract_epochs(cleaned, feature_kind=PREPROCESSED_EEG)
                )
            )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        merged = _merge_trialsets(eeg_trials)
        save_trial_store(out_root / PREPROCESSED_EEG, merged, force=args.force)
        if not args.skip_ica:
            merged_ica = _merge_trialsets(ica_trials)
            ica_dir = save_trial_store(
                out_root / ICA_COMPONENTS, merged_ica, force=args.force
            )
            for subject, dec in decompositions:
                ica_mod.save_decomposition(ica_dir, subject, dec)
    except (FileExistsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    kinds = 1 if args.skip_ica else 2
    print(f"wrote {kinds} feature store(s) under {out_root}")
    return 0


def _merge_trialsets(trialsets):
    from dataclasses import replace

    base = trialsets[0]
    trials = [t for ts in trialsets for t in ts.trials]
    return replace(base, trials=trials)


def cmd_train(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="airscribe train",
        description="Run subject-dependent cross-validation for one configuration.",
    )
    parser.add_argument("--data", required=True,
                        help="trial store, or preprocess output root")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--arch", choices=["eegnet", "deepconvnet"], default="eegnet")
    parser.add_argument("--loss", choices=list(LOSS_MODES), default="ce")
    parser.add_argument("--features", choices=list(FEATURE_FLAGS), default="eeg")
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--tau", type=float, default=0.07)
    parser.add_argument("--patience", type=int, default=20)
    parser.add_argument("--max-epochs", type=int, default=200)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--val-fraction", type=float, default=0.125)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--subjects", nargs="*", default=None,
                        help="subset of subject ids (default: all)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel (subject, fold) workers")
    parser.add_argument("--config", help="INI file with a [train] section")
    _apply_config_defaults(parser, argv, "train")
    args = parser.parse_args(argv)

    feature_kind = FEATURE_FLAGS[args.features]
    data_dir = _resolve_store(Path(args.data), feature_kind, parser)
    try:
        ts = load_trial_store(data_dir)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if ts.feature_kind != feature_kind:
        parser.error(
            f"store {data_dir} holds {ts.feature_kind}, not {feature_kind}"
        )
    try:
        cfg = TrainConfig(
            arch=args.arch,
            loss_mode=args.loss,
            feature_kind=feature_kind,
            batch_size=args.batch,
            patience=args.patience,
            max_epochs=args.max_epochs,
            tau=args.tau,
            lr=args.lr,
            val_fraction=args.val_fraction,
            folds=args.folds,
            seed=args.seed,
        )
    except ValueError as exc:
        parser.error(str(exc))
    try:
        report = run_experiment(ts, cfg, args.out, subjects=args.subjects, jobs=args.jobs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(report.render_text())
    return 0


def _resolve_store(path: Path, feature_kind: str, parser) -> Path:
    """Accept either a trial store or a root containing per-kind stores."""
    if (path / "manifest.json").is_file():
        try:
            if store_kind(path) == KIND_TRIALS:
                return path
        except StoreError:
            pass
    candidate = path / feature_kind
    if (candidate / "manifest.json").is_file():
        return candidate
    parser.error(f"no {feature_kind} trial store found under {path}")


def cmd_report(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="airscribe report",
        description="Merge run reports into one table across the configuration grid.",
    )
    parser.add_argument("--runs", nargs="+", required=True, help="run directories")
    parser.add_argument("--format", choices=["text", "json"], default="text")
    args = parser.parse_args(argv)

    loaded = []
    for run in args.runs:
        path = Path(run) / "report.json"
        if not path.is_file():
            print(f"error: {path} not found", file=sys.stderr)
            return 1
        loaded.append((RunReport.load_json(path), str(run)))
    try:
        merged = RunReport.merge(loaded)
    except ReportConflictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.format == "json":
        print(json.dumps(merged.to_dict(), indent=2, sort_keys=True))
    else:
        print(merged.render_text())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s"
    )
    np.seterr(over="raise", invalid="raise")
    parser = argparse.ArgumentParser(
        prog="airscribe",
        description="EEG air-writing recognition pipeline.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("args", nargs=argparse.REMAINDER)
    if not argv:
        parser.print_help(sys.stderr)
        return 2
    ns = parser.parse_args(argv[:1])
    try:
        return COMMANDS[ns.command](argv[1:])
    except SystemExit as exc:  # argparse error paths
        code = exc.code if isinstance(exc.code, int) else 2
        return code


if __name__ == "__main__":
    sys.exit(main())
