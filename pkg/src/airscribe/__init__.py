"""EEG air-writing recognition pipeline.

Preprocessing (referencing, zero-phase FIR filtering, epoching,
normalization), ICA-based artifact removal and component features, compact
CNN encoders with interchangeable heads, supervised contrastive and
cross-entropy training, and a subject-dependent cross-validation harness.
"""

__version__ = "0.1.0"

from .signals import (  # noqa: F401
    Event,
    FirFilter,
    MultichannelRecording,
    Trial,
    TrialSet,
    common_average_reference,
    design_fir_bandpass,
    extract_epochs,
    filter_zero_phase,
    zscore_normalize,
)
