"""On-disk stores for continuous recordings and fixed-shape trial sets.

Both store kinds share one layout: a ``manifest.json`` plus one binary blob
per subject holding IEEE-754 32-bit little-endian values. Trial blobs are
channel-major within each trial, with trials concatenated in manifest
order. Round trips are bit-exact for float32 payloads.
"""

from __future__ import annotations

import json
import re
import shutil
from pathlib import Path

import numpy as np

from .signals import Event, FEATURE_KINDS, MultichannelRecording, Trial, TrialSet

MANIFEST_NAME = "manifest.json"
KIND_CONTINUOUS = "continuous"
KIND_TRIALS = "trials"

_SUBJECT_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


class StoreError(ValueError):
    """Malformed store directory or manifest."""


def _check_subject_id(subject: str) -> str:
    if not _SUBJECT_RE.match(subject):
        raise StoreError(f"subject id {subject!r} is not filesystem-safe")
    return subject


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists():
        if any(path.iterdir()):
            if not force:
                raise FileExistsError(
                    f"output directory {path} is not empty (use force to overwrite)"
                )
            shutil.rmtree(path)
            path.mkdir(parents=True)
    else:
        path.mkdir(parents=True)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(manifest: dict, field: str, expected_type: type):
    if field not in manifest:
        raise StoreError(f"manifest missing field '{field}'")
    value = manifest[field]
    if not isinstance(value, expected_type):
        raise StoreError(
            f"manifest field '{field}' has type {type(value).__name__}, "
            f"expected {expected_type.__name__}"
        )
    return value


def _read_manifest(dirpath: Path, kind: str) -> dict:
    mpath = dirpath / MANIFEST_NAME
    if not mpath.is_file():
        raise StoreError(f"no {MANIFEST_NAME} in {dirpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"manifest is not valid JSON: {exc}") from exc
    got = _require(manifest, "kind", str)
    if got != kind:
        raise StoreError(f"manifest field 'kind' is {got!r}, expected {kind!r}")
    return manifest


def _read_blob(path: Path, count: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != count:
        raise StoreError(f"blob {path.name} holds {data.size} values, expected {count}")
    return data


def save_recording_store(
    dirpath: str | Path, recordings: list[MultichannelRecording], force: bool = False
) -> Path:
    """Write continuous recordings plus their events as one store directory."""
    if not recordings:
        raise ValueError("no recordings to save")
    dirpath = Path(dirpath)
    first = recordings[0]
    for rec in recordings:
        if rec.n_channels != first.n_channels or rec.fs != first.fs:
            raise ValueError("all recordings in a store must share channels and fs")
        _check_subject_id(rec.subject)
    subjects = [rec.subject for rec in recordings]
    if len(set(subjects)) != len(subjects):
        raise ValueError("duplicate subject ids in recording list")

    _prepare_dir(dirpath, force)
    try:
        manifest = {
            "kind": KIND_CONTINUOUS,
            "channels": first.n_channels,
            "fs": first.fs,
            "channel_labels": list(first.channel_labels),
            "subjects": subjects,
            "n_samples": {rec.subject: rec.n_samples for rec in recordings},
            "events": {
                rec.subject: [[ev.onset, ev.offset, ev.label] for ev in rec.events]
                for rec in recordings
            },
        }
        for rec in recordings:
            blob = np.ascontiguousarray(rec.data, dtype="<f4")
            blob.tofile(dirpath / f"{rec.subject}.f32")
        _write_json(dirpath / MANIFEST_NAME, manifest)
    except Exception:
        shutil.rmtree(dirpath, ignore_errors=True)
        raise
    return dirpath


def load_recording_store(dirpath: str | Path) -> list[MultichannelRecording]:
    dirpath = Path(dirpath)
    manifest = _read_manifest(dirpath, KIND_CONTINUOUS)
    channels = _require(manifest, "channels", int)
    fs = float(_require(manifest, "fs", (int, float)))
    labels = _require(manifest, "channel_labels", list)
    subjects = _require(manifest, "subjects", list)
    n_samples = _require(manifest, "n_samples", dict)
    events = _require(manifest, "events", dict)
    recordings = []
    for subject in subjects:
        if subject not in n_samples:
            raise StoreError(f"manifest field 'n_samples' missing subject {subject!r}")
        count = int(n_samples[subject])
        data = _read_blob(dirpath / f"{subject}.f32", channels * count)
        recordings.append(
            MultichannelRecording(
                data=data.reshape(channels, count).astype(np.float64),
                fs=fs,
                channel_labels=list(labels),
                events=[Event(*e) for e in events.get(subject, [])],
                subject=subject,
            )
        )
    return recordings


def save_trial_store(dirpath: str | Path, ts: TrialSet, force: bool = False) -> Path:
    """Write a trial set as manifest + one float32 blob per subject."""
    if not ts.trials:
        raise ValueError("no trials to save")
    dirpath = Path(dirpath)
    subjects = ts.subjects
    for subject in subjects:
        _check_subject_id(subject)

    _prepare_dir(dirpath, force)
    try:
        manifest = {
            "kind": KIND_TRIALS,
            "feature_kind": ts.feature_kind,
            "channels": ts.n_channels,
            "fs": ts.fs,
            "n_samples": ts.n_samples,
            "channel_labels": list(ts.channel_labels or []),
            "subjects": subjects,
            "trials": [
                {"subject": t.subject, "label": t.label, "pad_len": t.pad_len}
                for t in ts.trials
            ],
            "provenance": ts.provenance,
        }
        for subject in subjects:
            stack = np.stack(
                [t.data for t in ts.trials if t.subject == subject]
            )
            np.ascontiguousarray(stack, dtype="<f4").tofile(dirpath / f"{subject}.f32")
        _write_json(dirpath / MANIFEST_NAME, manifest)
    except Exception:
        shutil.rmtree(dirpath, ignore_errors=True)
        raise
    return dirpath


def load_trial_store(dirpath: str | Path) -> TrialSet:
    dirpath = Path(dirpath)
    manifest = _read_manifest(dirpath, KIND_TRIALS)
    feature_kind = _require(manifest, "feature_kind", str)
    if feature_kind not in FEATURE_KINDS:
        raise StoreError(f"manifest field 'feature_kind' invalid: {feature_kind!r}")
    channels = _require(manifest, "channels", int)
    fs = float(_require(manifest, "fs", (int, float)))
    n_samples = _require(manifest, "n_samples", int)
    subjects = _require(manifest, "subjects", list)
    index = _require(manifest, "trials", list)

    per_subject: dict[str, np.ndarray] = {}
    counts = {s: sum(1 for t in index if t.get("subject") == s) for s in subjects}
    for subject in subjects:
        blob = _read_blob(
            dirpath / f"{subject}.f32", counts[subject] * channels * n_samples
        )
        per_subject[subject] = blob.reshape(counts[subject], channels, n_samples)

    cursor = {s: 0 for s in subjects}
    trials = []
    for i, entry in enumerate(index):
        for fieldname in ("subject", "label", "pad_len"):
            if fieldname not in entry:
                raise StoreError(f"manifest trial {i} missing field '{fieldname}'")
        subject = entry["subject"]
        if subject not in per_subject:
            raise StoreError(f"manifest trial {i} names unknown subject {subject!r}")
        k = cursor[subject]
        cursor[subject] += 1
        trials.append(
            Trial(
                data=per_subject[subject][k],
                label=int(entry["label"]),
                subject=subject,
                pad_len=int(entry["pad_len"]),
            )
        )
    return TrialSet(
        trials=trials,
        feature_kind=feature_kind,
        fs=fs,
        channel_labels=list(manifest.get("channel_labels", [])) or None,
        provenance=dict(manifest.get("provenance", {})),
    )


def store_kind(dirpath: str | Path) -> str:
    """Return the 'kind' field of a store directory's manifest."""
    mpath = Path(dirpath) / MANIFEST_NAME
    if not mpath.is_file():
        raise StoreError(f"no {MANIFEST_NAME} in {dirpath}")
    manifest = json.loads(mpath.read_text())
    return _require(manifest, "kind", str)
