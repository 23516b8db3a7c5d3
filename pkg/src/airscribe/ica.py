"""Blind source separation and heuristic artifact removal.

PCA whitening followed by symmetric fixed-point ICA with the tanh
contrast. Components are scored with three statistics (low-frequency power
fraction, high-frequency power fraction, frontal projection mass) to label
ocular and muscular artifacts, which are removed by zeroing their columns
of the mixing matrix before reconstruction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signals import MultichannelRecording

logger = logging.getLogger(__name__)

FRONTAL_PREFIXES = ("Fp", "AF", "F")

LABEL_BRAIN = "brain"
LABEL_OCULAR = "ocular"
LABEL_MUSCULAR = "muscular"


@dataclass
class Whitener:
    """Affine transform mapping centered data to unit covariance."""

    mean: np.ndarray
    matrix: np.ndarray
    eigenvalues: np.ndarray
    inverse_matrix: np.ndarray

    def apply(self, data: np.ndarray) -> np.ndarray:
        return self.matrix @ (data - self.mean[:, None])

    def invert(self, whitened: np.ndarray) -> np.ndarray:
        return self.inverse_matrix @ whitened + self.mean[:, None]


@dataclass
class IcaDecomposition:
    """Rotation found by ICA in the whitened basis, plus the sources.

    unmixing has orthonormal rows; mixing is its transpose, so
    mixing @ unmixing is the identity. sources = unmixing @ whitened data.
    """

    unmixing: np.ndarray
    mixing: np.ndarray
    sources: np.ndarray
    converged: bool
    iterations: int
    whitener: Whitener | None = None

    @property
    def n_components(self) -> int:
        return self.unmixing.shape[0]

    @property
    def channel_mixing(self) -> np.ndarray:
        """Scalp topographies: column j is component j's channel pattern."""
        if self.whitener is None:
            raise ValueError("decomposition has no whitener attached")
        return self.whitener.inverse_matrix @ self.mixing


@dataclass
class ScoringConfig:
    low_freq_hz: float = 3.0
    high_freq_hz: float = 25.0
    low_ratio_min: float = 0.6
    frontal_ratio_min: float = 0.5
    high_ratio_min: float = 0.5


@dataclass
class ComponentScores:
    """Per-component statistics, labels, and confidences."""

    kurtosis: np.ndarray
    low_freq_power_ratio: np.ndarray
    high_freq_power_ratio: np.ndarray
    frontal_projection_ratio: np.ndarray
    labels: list[str]
    confidence: np.ndarray
    config: ScoringConfig = field(default_factory=ScoringConfig)

    def artifact_indices(self, threshold: float = 0.8) -> list[int]:
        if not (0 < threshold <= 1):
            raise ValueError(f"threshold must be in (0, 1], got {threshold}")
        return [
            i
            for i, lab in enumerate(self.labels)
            if lab != LABEL_BRAIN and self.confidence[i] > threshold
        ]


def whiten(rec: MultichannelRecording) -> tuple[Whitener, np.ndarray]:
    """Center and decorrelate a recording to unit covariance.

    Rank-deficient covariances are ridge-regularized by 1e-9 * trace / k on
    the diagonal, which keeps the transform finite at the cost of exact
    unit variance along the deficient directions.
    """
    x = np.asarray(rec.data, dtype=np.float64)
    k, n = x.shape
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    cov = centered @ centered.T / n
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= max(evals.max(), 1.0) * 1e-12:
        ridge = 1e-9 * np.trace(cov) / k
        if ridge <= 0:
            ridge = 1e-9
        cov = cov + ridge * np.eye(k)
        evals, evecs = np.linalg.eigh(cov)
    matrix = (evecs / np.sqrt(evals)).T
    inverse = evecs * np.sqrt(evals)
    whitener = Whitener(
        mean=mean, matrix=matrix, eigenvalues=evals, inverse_matrix=inverse
    )
    return whitener, matrix @ centered


def _symmetric_orthogonalize(w: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(w @ w.T)
    return (evecs / np.sqrt(evals)) @ evecs.T @ w


def fastica(
    whitened: np.ndarray,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> IcaDecomposition:
    """Symmetric fixed-point ICA with the tanh nonlinearity.

    Deterministic for a fixed seed: the unmixing matrix starts from a
    seeded random rotation and every update is followed by symmetric
    orthogonalization. Stops when the largest change in any row direction
    falls below tol; otherwise the best (final) iterate is returned with
    converged=False.
    """
    z = np.asarray(whitened, dtype=np.float64)
    k, n = z.shape
    if n < 10 * k:
        logger.warning("fastica: only %d samples for %d components", n, k)
    rng = np.random.default_rng(seed)
    w, _ = np.linalg.qr(rng.standard_normal((k, k)))
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        wz = w @ z
        g = np.tanh(wz)
        g_prime_mean = 1.0 - (g * g).mean(axis=1)
        w_new = (g @ z.T) / n - g_prime_mean[:, None] * w
        w_new = _symmetric_orthogonalize(w_new)
        delta = np.max(np.abs(1.0 - np.abs(np.sum(w_new * w, axis=1))))
        w = w_new
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("fastica did not converge in %d iterations", max_iter)
    return IcaDecomposition(
        unmixing=w,
        mixing=w.T.copy(),
        sources=w @ z,
        converged=converged,
        iterations=iterations,
    )


def ica_decompose(
    rec: MultichannelRecording,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> IcaDecomposition:
    """Whiten a recording and run fastica, keeping the whitener attached."""
    whitener, z = whiten(rec)
    dec = fastica(z, seed=seed, max_iter=max_iter, tol=tol)
    dec.whitener = whitener
    return dec


def _excess_kurtosis(rows: np.ndarray) -> np.ndarray:
    centered = rows - rows.mean(axis=1, keepdims=True)
    m2 = (centered**2).mean(axis=1)
    m4 = (centered**4).mean(axis=1)
    safe = np.where(m2 > 0, m2, 1.0)
    return np.where(m2 > 0, m4 / safe**2 - 3.0, 0.0)


def score_components(
    dec: IcaDecomposition,
    rec: MultichannelRecording,
    config: ScoringConfig | None = None,
) -> ComponentScores:
    """Label each component brain / ocular / muscular from simple statistics.

    Ocular: low-frequency power fraction and frontal projection mass both
    above threshold, confidence = the smaller of the two fractions.
    Muscular: high-frequency power fraction above threshold, confidence =
    that fraction. Everything else is brain with zero confidence. All
    statistics are invariant to component sign flips.
    """
    cfg = config or ScoringConfig()
    sources = dec.sources
    n = sources.shape[1]
    spectrum = np.abs(np.fft.rfft(sources, axis=1)) ** 2
    freqs = np.fft.rfftfreq(n, d=1.0 / rec.fs)
    total = spectrum.sum(axis=1)
    total = np.where(total > 0, total, 1.0)
    low_ratio = spectrum[:, freqs < cfg.low_freq_hz].sum(axis=1) / total
    high_ratio = spectrum[:, freqs > cfg.high_freq_hz].sum(axis=1) / total

    topographies = np.abs(dec.channel_mixing)
    frontal = np.array(
        [lab.startswith(FRONTAL_PREFIXES) for lab in rec.channel_labels]
    )
    mass = topographies.sum(axis=0)
    mass = np.where(mass > 0, mass, 1.0)
    frontal_ratio = topographies[frontal].sum(axis=0) / mass

    labels = []
    confidence = np.zeros(dec.n_components)
    for j in range(dec.n_components):
        if low_ratio[j] > cfg.low_ratio_min and frontal_ratio[j] > cfg.frontal_ratio_min:
            labels.append(LABEL_OCULAR)
            confidence[j] = min(low_ratio[j], frontal_ratio[j])
        elif high_ratio[j] > cfg.high_ratio_min:
            labels.append(LABEL_MUSCULAR)
            confidence[j] = high_ratio[j]
        else:
            labels.append(LABEL_BRAIN)
    confidence = np.clip(confidence, 0.0, 1.0)
    return ComponentScores(
        kurtosis=_excess_kurtosis(sources),
        low_freq_power_ratio=low_ratio,
        high_freq_power_ratio=high_ratio,
        frontal_projection_ratio=frontal_ratio,
        labels=labels,
        confidence=confidence,
        config=cfg,
    )


def remove_and_reconstruct(
    rec: MultichannelRecording,
    dec: IcaDecomposition,
    scores: ComponentScores,
    threshold: float = 0.8,
) -> MultichannelRecording:
    """Rebuild the recording with confident artifact components zeroed out.

    The flagged columns of the mixing matrix are zeroed and the remaining
    components are recombined, then mapped back through the inverse
    whitener plus mean. With nothing flagged this is the identity up to
    rounding.
    """
    if dec.whitener is None:
        raise ValueError("decomposition has no whitener attached")
    removed = scores.artifact_indices(threshold)
    if len(removed) == dec.n_components:
        raise ValueError(
            "all components flagged as artifacts; reconstruction would be the mean signal"
        )
    mixing = dec.mixing.copy()
    mixing[:, removed] = 0.0
    cleaned = dec.whitener.invert(mixing @ dec.sources)
    if removed:
        logger.info(
            "removed %d component(s) [%s] for subject %s",
            len(removed),
            ",".join(str(i) for i in removed),
            rec.subject or "<unnamed>",
        )
    return replace(rec, data=cleaned)


def components_as_features(
    dec: IcaDecomposition, rec: MultichannelRecording
) -> MultichannelRecording:
    """Expose component time series as an IC01..ICkk pseudo-recording.

    Events, sampling rate, and subject are carried over from the source
    recording so the result feeds the same epoching path as channel EEG.
    """
    labels = [f"IC{i + 1:02d}" for i in range(dec.n_components)]
    return MultichannelRecording(
        data=dec.sources.copy(),
        fs=rec.fs,
        channel_labels=labels,
        events=list(rec.events),
        subject=rec.subject,
    )


def amari_index(p: np.ndarray) -> float:
    """Permutation- and scale-invariant distance of p from a permutation.

    For p = estimated_unmixing @ true_mixing this is 0 exactly when the
    sources were recovered up to order and sign, and at most 1.
    """
    q = np.abs(np.asarray(p, dtype=np.float64))
    n = q.shape[0]
    if q.shape != (n, n):
        raise ValueError(f"amari index needs a square matrix, got {q.shape}")
    row = (q.sum(axis=1) / q.max(axis=1) - 1.0).sum()
    col = (q.sum(axis=0) / q.max(axis=0) - 1.0).sum()
    return float((row + col) / (2.0 * n * (n - 1)))


def save_decomposition(dirpath: str | Path, subject: str, dec: IcaDecomposition) -> Path:
    """Write W and A as a float64 sidecar blob plus JSON metadata."""
    if dec.whitener is None:
        raise ValueError("decomposition has no whitener attached")
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    k = dec.n_components
    meta = {
        "subject": subject,
        "components": k,
        "converged": dec.converged,
        "iterations": dec.iterations,
        "whitener": {
            "mean": dec.whitener.mean.tolist(),
            "matrix": dec.whitener.matrix.tolist(),
            "eigenvalues": dec.whitener.eigenvalues.tolist(),
            "inverse_matrix": dec.whitener.inverse_matrix.tolist(),
        },
    }
    blob = np.concatenate([dec.unmixing.ravel(), dec.mixing.ravel()])
    np.ascontiguousarray(blob, dtype="<f8").tofile(dirpath / f"{subject}_ica.f64")
    (dirpath / f"{subject}_ica.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return dirpath


def load_decomposition(
    dirpath: str | Path, subject: str, rec: MultichannelRecording | None = None
) -> IcaDecomposition:
    """Load a sidecar decomposition; recompute sources if a recording is given."""
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / f"{subject}_ica.json").read_text())
    k = int(meta["components"])
    blob = np.fromfile(dirpath / f"{subject}_ica.f64", dtype="<f8")
    if blob.size != 2 * k * k:
        raise ValueError(f"sidecar blob holds {blob.size} values, expected {2 * k * k}")
    unmixing = blob[: k * k].reshape(k, k)
    mixing = blob[k * k :].reshape(k, k)
    wmeta = meta["whitener"]
    whitener = Whitener(
        mean=np.array(wmeta["mean"]),
        matrix=np.array(wmeta["matrix"]),
        eigenvalues=np.array(wmeta["eigenvalues"]),
        inverse_matrix=np.array(wmeta["inverse_matrix"]),
    )
    sources = np.zeros((k, 0))
    if rec is not None:
        sources = unmixing @ whitener.apply(rec.data)
    return IcaDecomposition(
        unmixing=unmixing,
        mixing=mixing,
        sources=sources,
        converged=bool(meta["converged"]),
        iterations=int(meta["iterations"]),
        whitener=whitener,
    )
