"""Synthetic multichannel EEG with known ground truth.

Each subject is an exact linear mixture of per-source time series: one
blink source projected to frontal channels, one broadband EMG source on
temporal channels, and bursty pink-noise brain sources of which a few
carry class-specific oscillation bursts during movement events. Because
the forward model is exactly rank complete, source-recovery and
artifact-removal behaviour can be checked against the generating truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import DEFAULT_CHANNEL_LABELS, Event, MultichannelRecording

BLINK_TOPOGRAPHY = {
    "Fp1": 1.0, "Fp2": 0.95, "F7": 0.5, "F8": 0.5, "F3": 0.4, "F4": 0.4, "Fz": 0.3,
}
EMG_TOPOGRAPHY = {
    "T7": 1.0, "T8": 0.9, "TP9": 0.7, "TP10": 0.65,
    "CP5": 0.35, "CP6": 0.35, "P7": 0.25, "P8": 0.25,
}

BLINK_SOURCE = 0
EMG_SOURCE = 1
FIRST_TASK_SOURCE = 2


@dataclass
class SynthSpec:
    subjects: int = 5
    trials_per_class: int = 100
    classes: int = 26
    channels: int = 31
    fs: float = 500.0
    snr_db: float = 6.0
    blink_rate_per_min: float = 12.0
    emg_rate_per_min: float = 5.0
    trial_duration_s: tuple[float, float] = (1.2, 2.2)
    trial_gap_s: tuple[float, float] = (1.0, 1.5)
    n_task_sources: int = 4
    blink_gain: float = 20.0
    emg_gain: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if not (2 <= self.classes <= 26):
            raise ValueError(f"classes must be in [2, 26], got {self.classes}")
        if self.subjects < 1 or self.trials_per_class < 1:
            raise ValueError("subjects and trials_per_class must be >= 1")
        if self.channels < self.n_task_sources + 2:
            raise ValueError(
                f"need at least {self.n_task_sources + 2} channels for "
                f"{self.n_task_sources} task sources plus artifact sources"
            )
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.blink_rate_per_min < 0 or self.emg_rate_per_min < 0:
            raise ValueError("artifact rates must be nonnegative")
        lo, hi = self.trial_duration_s
        if not (0.3 <= lo <= hi):
            raise ValueError("trial duration range must satisfy 0.3 <= lo <= hi")


@dataclass
class SynthTruth:
    """Generating quantities for oracle checks, one subject's worth."""

    mixing: np.ndarray
    sources: np.ndarray
    clean: np.ndarray
    blink_spans: list[tuple[int, int]] = field(default_factory=list)
    emg_spans: list[tuple[int, int]] = field(default_factory=list)
    class_frequencies: np.ndarray | None = None
    template_corr_max: float = 0.0


def subject_ids(spec: SynthSpec) -> list[str]:
    return [f"s{i + 1:02d}" for i in range(spec.subjects)]


def class_frequencies(spec: SynthSpec) -> np.ndarray:
    """Distinct oscillation frequency per class, spread over 4..25 Hz."""
    if spec.classes == 1:
        return np.array([10.0])
    return 4.0 + 21.0 * np.arange(spec.classes) / (spec.classes - 1)


def _channel_labels(n: int) -> list[str]:
    if n <= len(DEFAULT_CHANNEL_LABELS):
        return DEFAULT_CHANNEL_LABELS[:n]
    extra = [f"EX{i + 1:02d}" for i in range(n - len(DEFAULT_CHANNEL_LABELS))]
    return DEFAULT_CHANNEL_LABELS + extra


def _schedule(spec: SynthSpec, rng: np.random.Generator) -> tuple[list[Event], int]:
    """Shuffled class sequence with jittered durations and gaps."""
    labels = np.repeat(np.arange(spec.classes), spec.trials_per_class)
    rng.shuffle(labels)
    fs = spec.fs
    cursor = int(round(1.25 * fs))  # pre-onset context for every trial
    events = []
    for label in labels:
        duration = rng.uniform(*spec.trial_duration_s)
        gap = rng.uniform(*spec.trial_gap_s)
        onset = cursor
        offset = onset + int(round(duration * fs))
        events.append(Event(onset, offset, int(label)))
        cursor = offset + int(round(gap * fs))
    n_samples = cursor + int(round(1.5 * fs))
    return events, n_samples


def _shaped_noise(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    """Unit-variance pink-ish noise with a bursty lognormal envelope."""
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    pink = np.fft.irfft(
        np.fft.rfft(rng.standard_normal(n)) / np.sqrt(np.maximum(freqs, 1.0)), n=n
    )
    pink /= pink.std()
    slow_spec = np.fft.rfft(rng.standard_normal(n))
    slow_spec[freqs >= 0.6] = 0.0
    slow = np.fft.irfft(slow_spec, n=n)
    sd = slow.std()
    if sd > 0:
        slow /= sd
    out = pink * np.exp(0.7 * slow)
    return out / out.std()


def _event_times(
    rng: np.random.Generator, n: int, fs: float, rate_per_min: float
) -> list[int]:
    duration_min = n / fs / 60.0
    count = int(round(rate_per_min * duration_min))
    if count < 1:
        return []
    margin = int(round(1.5 * fs))
    usable = n - 2 * margin
    if usable <= 0 or count > usable:
        return []
    grid = np.linspace(margin, n - margin, count, endpoint=False)
    jitter = rng.uniform(-0.3, 0.3, size=count) * (usable / max(count, 1))
    return sorted(int(t) for t in np.clip(grid + jitter, margin, n - margin - 1))


def _blink_source(
    rng: np.random.Generator, n: int, fs: float, rate_per_min: float
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    source = np.zeros(n)
    spans = []
    width = int(round(0.55 * fs))
    pulse = np.hanning(width)
    for start in _event_times(rng, n, fs, rate_per_min):
        end = min(start + width, n)
        source[start:end] += pulse[: end - start] * rng.uniform(0.85, 1.15)
        spans.append((start, end))
    return source, spans


def _emg_source(
    rng: np.random.Generator, n: int, fs: float, rate_per_min: float
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    source = np.zeros(n)
    spans = []
    high = min(90.0, 0.45 * fs)
    for start in _event_times(rng, n, fs, rate_per_min):
        width = int(round(rng.uniform(0.3, 0.7) * fs))
        end = min(start + width, n)
        burst = rng.standard_normal(end - start)
        freqs = np.fft.rfftfreq(end - start, d=1.0 / fs)
        spec = np.fft.rfft(burst)
        spec[(freqs < 30.0) | (freqs > high)] = 0.0
        burst = np.fft.irfft(spec, n=end - start)
        sd = burst.std()
        if sd > 0:
            source[start:end] += burst / sd
            spans.append((start, end))
    return source, spans


def _topography(labels: list[str], weights: dict[str, float]) -> np.ndarray:
    vec = np.array([weights.get(lab, 0.0) for lab in labels])
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec = np.zeros(len(labels))
        vec[: min(2, len(labels))] = 1.0
        norm = np.linalg.norm(vec)
    return vec / norm


def _mixing_matrix(
    spec: SynthSpec, rng: np.random.Generator, labels: list[str]
) -> np.ndarray:
    k = spec.channels
    blink_col = _topography(labels, BLINK_TOPOGRAPHY) * spec.blink_gain
    emg_col = _topography(labels, EMG_TOPOGRAPHY) * spec.emg_gain
    for _ in range(20):
        base = rng.standard_normal((k, k))
        u, _, vt = np.linalg.svd(base)
        mixing = u @ np.diag(np.linspace(1.0, 3.0, k)) @ vt
        mixing[:, BLINK_SOURCE] = blink_col
        mixing[:, EMG_SOURCE] = emg_col
        if np.linalg.cond(mixing) < 50.0:
            return mixing
    raise RuntimeError("could not draw a well-conditioned mixing matrix")


def _template_corr_max(
    spec: SynthSpec, weights: np.ndarray, freqs: np.ndarray
) -> float:
    """Largest pairwise correlation between canonical class templates."""
    n = int(round(1.5 * spec.fs))
    t = np.arange(n) / spec.fs
    env = np.hanning(n)
    templates = np.stack(
        [
            np.concatenate(
                [weights[c, k] * env * np.sin(2 * np.pi * freqs[c] * t)
                 for k in range(spec.n_task_sources)]
            )
            for c in range(spec.classes)
        ]
    )
    corr = np.corrcoef(templates)
    off = np.abs(corr - np.diag(np.diag(corr)))
    return float(off.max())


def generate_subject(
    spec: SynthSpec, index: int
) -> tuple[MultichannelRecording, SynthTruth]:
    """Deterministically synthesize one subject's continuous recording."""
    if not (0 <= index < spec.subjects):
        raise ValueError(f"subject index {index} outside [0, {spec.subjects})")
    seed_seq = np.random.SeedSequence(spec.seed).spawn(spec.subjects)[index]
    rng = np.random.default_rng(seed_seq)
    labels = _channel_labels(spec.channels)
    events, n = _schedule(spec, rng)

    sources = np.zeros((spec.channels, n))
    sources[BLINK_SOURCE], blink_spans = _blink_source(
        rng, n, spec.fs, spec.blink_rate_per_min
    )
    sources[EMG_SOURCE], emg_spans = _emg_source(
        rng, n, spec.fs, spec.emg_rate_per_min
    )
    for row in range(FIRST_TASK_SOURCE, spec.channels):
        sources[row] = _shaped_noise(rng, n, spec.fs)

    freqs = class_frequencies(spec)
    weights = rng.uniform(0.6, 1.4, size=(spec.classes, spec.n_task_sources))
    burst_gain = 10.0 ** (spec.snr_db / 20.0)
    max_jitter = int(round(0.1 * spec.fs))
    for ev in events:
        start = ev.onset + int(rng.integers(0, max_jitter + 1))
        start = min(start, ev.offset - int(0.3 * spec.fs))
        length = ev.offset - start
        t = np.arange(start, ev.offset) / spec.fs
        envelope = np.hanning(length)
        amp_jitter = rng.uniform(0.8, 1.2)
        for k in range(spec.n_task_sources):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = envelope * np.sin(2 * np.pi * freqs[ev.label] * t + phase)
            rms = np.sqrt((wave**2).mean())
            if rms > 0:
                sources[FIRST_TASK_SOURCE + k, start : ev.offset] += (
                    burst_gain * weights[ev.label, k] * amp_jitter * wave / rms
                )

    mixing = _mixing_matrix(spec, rng, labels)
    scale = 10.0  # microvolt-ish units
    data = scale * (mixing @ sources)
    clean_sources = sources.copy()
    clean_sources[BLINK_SOURCE] = 0.0
    clean_sources[EMG_SOURCE] = 0.0
    clean = scale * (mixing @ clean_sources)

    rec = MultichannelRecording(
        data=data,
        fs=spec.fs,
        channel_labels=labels,
        events=events,
        subject=subject_ids(spec)[index],
    )
    truth = SynthTruth(
        mixing=mixing,
        sources=sources,
        clean=clean,
        blink_spans=blink_spans,
        emg_spans=emg_spans,
        class_frequencies=freqs,
        template_corr_max=_template_corr_max(spec, weights, freqs),
    )
    if truth.template_corr_max >= 0.9:
        raise RuntimeError(
            f"class templates not distinguishable (max corr {truth.template_corr_max:.3f})"
        )
    return rec, truth


def generate_synthetic(
    spec: SynthSpec,
) -> list[tuple[MultichannelRecording, SynthTruth]]:
    """All subjects of a spec; prefer generate_subject for streaming use."""
    return [generate_subject(spec, i) for i in range(spec.subjects)]
