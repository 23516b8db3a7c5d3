"""Deterministic preprocessing of continuous multichannel EEG.

Covers common-average referencing, zero-phase FIR bandpass filtering,
epoch extraction around movement events, and per-trial z-score
normalization. All operations are pure: they return new objects and never
mutate their inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import fftconvolve

logger = logging.getLogger(__name__)

N_CLASSES = 26

PREPROCESSED_EEG = "preprocessed_eeg"
ICA_COMPONENTS = "ica_components"
FEATURE_KINDS = (PREPROCESSED_EEG, ICA_COMPONENTS)

# 31-electrode subset of the extended 10-20 montage used by the default
# recording geometry and the synthetic generator.
DEFAULT_CHANNEL_LABELS = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "FC5", "FC1", "FC2", "FC6",
    "T7", "C3", "Cz", "C4", "T8",
    "CP5", "CP1", "CP2", "CP6",
    "TP9", "TP10",
    "P7", "P3", "Pz", "P4", "P8",
    "PO3", "PO4", "O1", "O2",
]

CONFORMANT_CHANNELS = 31
CONFORMANT_FS = 500.0


class Event(NamedTuple):
    """Movement event: [onset, offset) in samples plus a class id."""

    onset: int
    offset: int
    label: int


@dataclass
class MultichannelRecording:
    """Continuous channels x samples signal with acquisition metadata.

    data is microvolts for EEG, arbitrary units for derived component
    recordings. events mark movement intervals in sample indices.
    """

    data: np.ndarray
    fs: float
    channel_labels: list[str] | None = None
    events: list[Event] = field(default_factory=list)
    subject: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"recording data must be 2-D, got shape {self.data.shape}")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        n_ch, n_samp = self.data.shape
        if self.channel_labels is None:
            self.channel_labels = [f"CH{i + 1:02d}" for i in range(n_ch)]
        if len(self.channel_labels) != n_ch:
            raise ValueError(
                f"{len(self.channel_labels)} channel labels for {n_ch} channels"
            )
        self.events = [Event(int(o), int(f), int(l)) for (o, f, l) in self.events]
        for ev in self.events:
            if not (0 <= ev.onset < n_samp):
                raise ValueError(f"event onset {ev.onset} outside [0, {n_samp})")
            if not (ev.onset < ev.offset <= n_samp):
                raise ValueError(
                    f"event offset {ev.offset} must lie in ({ev.onset}, {n_samp}]"
                )
            if not (0 <= ev.label < N_CLASSES):
                raise ValueError(f"event label {ev.label} outside [0, {N_CLASSES})")
        if n_ch != CONFORMANT_CHANNELS:
            logger.debug("recording has %d channels (standard geometry is %d)",
                         n_ch, CONFORMANT_CHANNELS)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def conformant(self) -> bool:
        """True when the geometry matches the 31-channel, 500 Hz setup."""
        return self.n_channels == CONFORMANT_CHANNELS and self.fs == CONFORMANT_FS


@dataclass
class FirFilter:
    """Linear-phase FIR filter designed by the windowed-sinc method."""

    coefficients: np.ndarray
    band: tuple[float, float]
    design_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 1 or self.coefficients.size % 2 == 0:
            raise ValueError("FIR taps must be a 1-D array of odd length")

    @property
    def order(self) -> int:
        return self.coefficients.size - 1

    def frequency_response(self, freqs_hz: np.ndarray, fs: float) -> np.ndarray:
        """Complex response at the given frequencies, by direct evaluation."""
        f = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        n = np.arange(self.coefficients.size)
        phase = np.exp(-2j * np.pi * np.outer(f, n) / fs)
        return phase @ self.coefficients


@dataclass
class Trial:
    """Fixed-length epoch: channels x samples, z-scored, zero-padded tail."""

    data: np.ndarray
    label: int
    subject: str = ""
    pad_len: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"trial data must be 2-D, got shape {self.data.shape}")
        if not (0 <= self.label < N_CLASSES):
            raise ValueError(f"trial label {self.label} outside [0, {N_CLASSES})")
        if not (0 <= self.pad_len <= self.data.shape[1]):
            raise ValueError(f"pad_len {self.pad_len} outside trial length")


@dataclass
class TrialSet:
    """Ordered collection of equally shaped labeled trials."""

    trials: list[Trial]
    feature_kind: str
    fs: float
    channel_labels: list[str] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(
                f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}"
            )
        shapes = {t.data.shape for t in self.trials}
        if len(shapes) > 1:
            raise ValueError(f"trials have inconsistent shapes: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return self.trials[0].data.shape[0] if self.trials else 0

    @property
    def n_samples(self) -> int:
        return self.trials[0].data.shape[1] if self.trials else 0

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.trials:
            seen.setdefault(t.subject)
        return list(seen)

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "TrialSet":
        return replace(self, trials=[self.trials[i] for i in indices])

    def for_subject(self, subject: str) -> "TrialSet":
        return replace(self, trials=[t for t in self.trials if t.subject == subject])


def common_average_reference(rec: MultichannelRecording) -> MultichannelRecording:
    """Subtract the instantaneous mean across channels from every channel.

    Requires at least two channels; the reference is undefined otherwise.
    """
    if rec.n_channels < 2:
        raise ValueError("common average reference needs >= 2 channels")
    data = rec.data - rec.data.mean(axis=0, keepdims=True)
    return replace(rec, data=data)


def design_fir_bandpass(low: float, high: float, fs: float) -> FirFilter:
    """Design a Hamming-windowed sinc bandpass filter.

    The bandpass is the difference of two unit-DC-gain lowpass kernels with
    cutoffs at the band edges, so the DC gain is zero to rounding error.
    Transition bandwidth is max(0.25*low, 1 Hz) at the low edge and
    0.25*high at the high edge; the order follows the 3.3/df Hamming rule
    and is rounded up to the next even integer for a symmetric odd-length
    kernel.
    """
    if not (0 < low < high < fs / 2):
        raise ValueError(
            f"band edges must satisfy 0 < low < high < fs/2, got ({low}, {high}) at fs={fs}"
        )
    trans_low = max(0.25 * low, 1.0)
    trans_high = 0.25 * high
    df = min(trans_low, trans_high)
    order = int(math.ceil(3.3 * fs / df))
    order += order % 2
    n = np.arange(order + 1) - order // 2
    window = np.hamming(order + 1)

    def lowpass(cutoff: float) -> np.ndarray:
        h = 2.0 * cutoff / fs * np.sinc(2.0 * cutoff / fs * n) * window
        return h / h.sum()

    taps = lowpass(high) - lowpass(low)
    meta = {
        "window": "hamming",
        "order": order,
        "transition_low_hz": trans_low,
        "transition_high_hz": trans_high,
    }
    return FirFilter(coefficients=taps, band=(low, high), design_meta=meta)


def filter_zero_phase(rec: MultichannelRecording, f: FirFilter) -> MultichannelRecording:
    """Apply a linear-phase FIR filter with zero net delay.

    Single-pass convolution with group-delay compensation of order/2
    samples; the signal is reflect-padded by order/2 on both ends so output
    length equals input length and start-up transients stay outside the
    data.
    """
    if rec.n_samples <= f.order:
        raise ValueError(
            f"signal length {rec.n_samples} must exceed filter order {f.order}"
        )
    delay = f.order // 2
    padded = np.pad(rec.data, ((0, 0), (delay, delay)), mode="reflect")
    out = fftconvolve(padded, f.coefficients[np.newaxis, :], mode="valid")
    return replace(rec, data=out)


def extract_epochs(
    rec: MultichannelRecording,
    pre_s: float = 1.0,
    post_s: float = 2.0,
    feature_kind: str = PREPROCESSED_EEG,
) -> TrialSet:
    """Cut fixed-length trials around each event onset.

    Each trial spans [onset - pre_s, onset + post_s). Samples recorded
    after the event offset are replaced by zeros and counted in pad_len,
    so shorter movements yield a zero-padded tail. Events without enough
    pre-onset context are skipped with a warning.
    """
    pre_n = round(pre_s * rec.fs)
    total = round((pre_s + post_s) * rec.fs)
    trials = []
    skipped = 0
    for ev in rec.events:
        start = ev.onset - pre_n
        if start < 0:
            skipped += 1
            continue
        end = start + total
        copy_end = min(ev.offset, end, rec.n_samples)
        seg = np.zeros((rec.n_channels, total), dtype=rec.data.dtype)
        seg[:, : copy_end - start] = rec.data[:, start:copy_end]
        trials.append(
            Trial(data=seg, label=ev.label, subject=rec.subject, pad_len=end - copy_end)
        )
    if skipped:
        logger.warning(
            "skipped %d event(s) with less than %.3g s of pre-onset context",
            skipped, pre_s,
        )
    provenance = {"pre_s": pre_s, "post_s": post_s, "fs": rec.fs}
    return TrialSet(
        trials=trials,
        feature_kind=feature_kind,
        fs=rec.fs,
        channel_labels=list(rec.channel_labels),
        provenance=provenance,
    )


def _zscore_channels(data: np.ndarray, n_valid: int) -> np.ndarray:
    """Z-score each channel over its first n_valid samples; keep the tail zero."""
    out = np.zeros_like(data, dtype=np.float64)
    seg = data[:, :n_valid].astype(np.float64)
    mean = seg.mean(axis=1, keepdims=True)
    var = seg.var(axis=1, keepdims=True)  # population variance
    constant = (seg == seg[:, :1]).all(axis=1) | (var[:, 0] <= 0)
    scale = np.sqrt(np.where(var > 0, var, 1.0))
    normed = (seg - mean) / scale
    normed[constant] = 0.0
    out[:, :n_valid] = normed
    return out


def zscore_normalize(ts: TrialSet) -> TrialSet:
    """Per-trial, per-channel z-scoring over the non-padded segment.

    Padded zeros stay zero and constant channels map to all-zeros.
    """
    trials = []
    for t in ts.trials:
        n_valid = t.data.shape[1] - t.pad_len
        trials.append(replace(t, data=_zscore_channels(t.data, n_valid)))
    return replace(ts, trials=trials)
