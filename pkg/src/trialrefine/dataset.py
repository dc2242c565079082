"""Trial datasets: synthetic generation, label-noise injection, exponential
moving standardization, subject-wise splits, and a bit-exact binary format.

A dataset is an ordered list of trials, each a ``[n_channels, n_timepoints]``
float32 matrix with a class label and a subject id. Synthetic datasets carry a
boolean ``noise_mask`` recording which labels were reassigned by
:func:`inject_label_noise` (ground truth for recovery metrics).

Binary file layout (little-endian), extension ``.eegd``::

    magic           4 bytes  b"EEGD"
    version         u32      1
    n_trials        u32
    n_channels      u32
    n_timepoints    u32
    n_classes       u32
    has_noise_mask  u8       0 or 1
    per trial:      subject_id u32, label u32, data f32[n_channels*n_timepoints]
                    (channel-major)
    if has_noise_mask: n_trials bytes, each 0 or 1
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataFormatError,
    DataValidationError,
    DimOverflowError,
    FormatVersionError,
    TruncatedPayloadError,
)

MAGIC = b"EEGD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")

# Hard cap on the in-memory size implied by a file header; anything larger is
# treated as a corrupt header rather than attempted.
_MAX_PAYLOAD_BYTES = 1 << 40

# Leading rng-stream tags keep seed-derived generators from colliding across
# unrelated purposes (see also model/trainer/uncertainty).
_GEN_STREAM = 11
_NOISE_STREAM = 12

_NOISE_STD = 1.0
_SUBJECT_OFFSET_STD = 0.5


def round_half_up(x: float) -> int:
    """round() with ties away from zero, used for all count-from-ratio rules."""
    return int(math.floor(x + 0.5))


@dataclass
class Trial:
    """One labeled multi-channel recording.

    data : float array of shape (n_channels, n_timepoints); float32 as read
        from or written to files, float64 after preprocessing
    label : class index, validated against the parent dataset's n_classes
    subject_id : non-negative recording-subject identifier
    """

    data: np.ndarray
    label: int
    subject_id: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float64)
        if self.data.ndim != 2:
            raise DataValidationError(
                f"trial data must be 2-D [channels, timepoints], got shape {self.data.shape}"
            )
        if not np.isfinite(self.data).all():
            raise DataValidationError("trial data contains NaN or Inf")
        self.label = int(self.label)
        self.subject_id = int(self.subject_id)
        if self.label < 0:
            raise DataValidationError(f"negative label {self.label}")
        if self.subject_id < 0:
            raise DataValidationError(f"negative subject_id {self.subject_id}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]


@dataclass
class Dataset:
    """Ordered collection of trials sharing dimensions and a label alphabet."""

    trials: list[Trial]
    n_classes: int
    noise_mask: np.ndarray | None = None

    def __post_init__(self):
        self.n_classes = int(self.n_classes)
        if self.n_classes < 1:
            raise DataValidationError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.trials:
            c, t = self.trials[0].data.shape
            for i, tr in enumerate(self.trials):
                if tr.data.shape != (c, t):
                    raise DataValidationError(
                        f"trial {i} has shape {tr.data.shape}, expected {(c, t)}"
                    )
                if tr.label >= self.n_classes:
                    raise DataValidationError(
                        f"trial {i} label {tr.label} out of range [0, {self.n_classes})"
                    )
        if self.noise_mask is not None:
            self.noise_mask = np.asarray(self.noise_mask, dtype=bool)
            if self.noise_mask.shape != (len(self.trials),):
                raise DataValidationError(
                    f"noise_mask length {self.noise_mask.shape} does not match "
                    f"{len(self.trials)} trials"
                )

    @property
    def n(self) -> int:
        return len(self.trials)

    @property
    def n_channels(self) -> int:
        return self.trials[0].n_channels if self.trials else 0

    @property
    def n_timepoints(self) -> int:
        return self.trials[0].n_timepoints if self.trials else 0

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def subject_ids(self) -> np.ndarray:
        return np.array([t.subject_id for t in self.trials], dtype=np.int64)

    def subjects(self) -> list[int]:
        """Distinct subject ids in ascending order."""
        return sorted(set(int(t.subject_id) for t in self.trials))

    def features(self) -> np.ndarray:
        """Float64 matrix (n, n_channels * n_timepoints) of flattened trials."""
        if not self.trials:
            return np.zeros((0, 0))
        return np.stack([t.data.reshape(-1) for t in self.trials]).astype(np.float64)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic multi-subject dataset.

    Classes are sinusoids whose frequency and amplitude spread apart as
    ``class_separation`` grows (separation 0 makes all classes identically
    distributed). Each subject adds a constant offset to every sample, giving
    leave-one-subject-out splits a real distribution shift, and every sample
    gets i.i.d. Gaussian noise.
    """

    n_subjects: int
    trials_per_subject: int
    n_channels: int
    n_timepoints: int
    n_classes: int
    class_separation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "trials_per_subject", "n_channels", "n_timepoints"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build a deterministic synthetic dataset from ``spec``.

    Trials are ordered subject-major; within a subject, labels cycle through
    the classes so each subject sees a balanced class mix. The returned
    noise_mask is all-False (no labels have been tampered with).
    """
    rng = np.random.default_rng([_GEN_STREAM, spec.seed])
    n = spec.n_subjects * spec.trials_per_subject
    sep = spec.class_separation

    subject_offsets = rng.normal(0.0, _SUBJECT_OFFSET_STD, spec.n_subjects)
    noise = rng.normal(0.0, _NOISE_STD, (n, spec.n_channels, spec.n_timepoints))

    # Class templates: frequency in cycles per window and amplitude both walk
    # away from the base values as separation * class index grows.
    time = np.arange(spec.n_timepoints) / spec.n_timepoints
    chan_phase = 2.0 * np.pi * np.arange(spec.n_channels) / spec.n_channels
    templates = np.empty((spec.n_classes, spec.n_channels, spec.n_timepoints))
    for c in range(spec.n_classes):
        freq = 3.0 + 1.0 * sep * c
        amp = 1.0 + 0.25 * sep * c
        templates[c] = amp * np.sin(
            2.0 * np.pi * freq * time[None, :] + chan_phase[:, None]
        )

    trials: list[Trial] = []
    i = 0
    for s in range(spec.n_subjects):
        for j in range(spec.trials_per_subject):
            label = j % spec.n_classes
            data = templates[label] + subject_offsets[s] + noise[i]
            # Quantize once at the source so file roundtrips are bit-exact.
            trials.append(Trial(data=data.astype(np.float32), label=label, subject_id=s))
            i += 1
    return Dataset(trials=trials, n_classes=spec.n_classes, noise_mask=np.zeros(n, dtype=bool))


def inject_label_noise(d: Dataset, ratio: float, seed: int = 0) -> Dataset:
    """Return a copy of ``d`` with ``round(ratio * n)`` labels reassigned.

    Affected trials are drawn uniformly without replacement; each gets a new
    label drawn uniformly from the other classes (never its own). The
    returned dataset's noise_mask marks the reassigned trials, OR-ed with any
    pre-existing mask. ``d`` itself is left untouched.
    """
    if d.n < 1:
        raise ValueError("cannot inject label noise into an empty dataset")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng([_NOISE_STREAM, seed])
    k = round_half_up(ratio * d.n)
    chosen = rng.choice(d.n, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    # Uniform over the other n_classes - 1 labels: shift by 1..n_classes-1.
    shifts = rng.integers(1, d.n_classes, size=k)

    flipped = np.zeros(d.n, dtype=bool)
    trials = list(d.trials)
    for idx, shift in zip(chosen, shifts):
        old = trials[idx]
        new_label = (old.label + int(shift)) % d.n_classes
        trials[idx] = Trial(data=old.data, label=new_label, subject_id=old.subject_id)
        flipped[idx] = True
    mask = flipped if d.noise_mask is None else (d.noise_mask | flipped)
    return Dataset(trials=trials, n_classes=d.n_classes, noise_mask=mask)


@dataclass(frozen=True)
class EmsConfig:
    """Exponential moving standardization parameters.

    The running mean starts at the channel's first sample and the running
    variance at ``init_var``; ``eps`` floors the variance before the square
    root so the output stays finite.
    """

    alpha: float = 0.999
    eps: float = 1e-8
    init_mean_mode: str = "first-sample"
    init_var: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.init_mean_mode != "first-sample":
            raise ValueError(f"unknown init_mean_mode {self.init_mean_mode!r}")
        if self.init_var <= 0:
            raise ValueError("init_var must be > 0")


def ems_standardize(t: Trial, cfg: EmsConfig = EmsConfig()) -> Trial:
    """Standardize a trial per channel by exponentially weighted running stats.

    For each channel, with m[-1] = x[0] and s2[-1] = init_var:

        m[k]  = (1 - alpha) * x[k] + alpha * m[k-1]
        s2[k] = (1 - alpha) * (x[k] - m[k])**2 + alpha * s2[k-1]
        out[k] = (x[k] - m[k]) / sqrt(max(s2[k], eps))

    The mean update is evaluated in the increment form
    m + (1 - alpha) * (x - m), which is algebraically identical and keeps a
    constant channel at exactly zero output for any alpha.
    """
    x = t.data.astype(np.float64)
    if x.size == 0:
        raise ValueError("cannot standardize an empty trial")
    if not np.isfinite(x).all():
        raise DataValidationError("trial data contains NaN or Inf")
    a = cfg.alpha
    mean = x[:, 0].copy()
    var = np.full(x.shape[0], cfg.init_var)
    out = np.empty_like(x)
    for k in range(x.shape[1]):
        mean += (1.0 - a) * (x[:, k] - mean)
        var = (1.0 - a) * (x[:, k] - mean) ** 2 + a * var
        out[:, k] = (x[:, k] - mean) / np.sqrt(np.maximum(var, cfg.eps))
    return Trial(data=out, label=t.label, subject_id=t.subject_id)


def ems_standardize_dataset(d: Dataset, cfg: EmsConfig = EmsConfig()) -> Dataset:
    """Apply :func:`ems_standardize` to every trial, preserving the mask."""
    trials = [ems_standardize(t, cfg) for t in d.trials]
    mask = None if d.noise_mask is None else d.noise_mask.copy()
    return Dataset(trials=trials, n_classes=d.n_classes, noise_mask=mask)


def split_loso(d: Dataset, held_out_subject: int) -> tuple[Dataset, Dataset]:
    """Leave-one-subject-out split: (train, test) with original order kept.

    ``test`` holds every trial of ``held_out_subject``; ``train`` holds the
    rest. Noise masks are sliced alongside. Raises KeyError for an unknown
    subject id.
    """
    ids = d.subject_ids()
    test_sel = ids == held_out_subject
    if not test_sel.any():
        raise KeyError(f"subject {held_out_subject} not present in dataset")
    mask = d.noise_mask

    def subset(sel: np.ndarray) -> Dataset:
        trials = [d.trials[i] for i in np.flatnonzero(sel)]
        sub_mask = None if mask is None else mask[sel].copy()
        return Dataset(trials=trials, n_classes=d.n_classes, noise_mask=sub_mask)

    return subset(~test_sel), subset(test_sel)


def take_indices(d: Dataset, indices: np.ndarray) -> Dataset:
    """Dataset restricted to ``indices`` (in the given order), mask included."""
    indices = np.asarray(indices, dtype=np.int64)
    trials = [d.trials[i] for i in indices]
    mask = None if d.noise_mask is None else d.noise_mask[indices].copy()
    return Dataset(trials=trials, n_classes=d.n_classes, noise_mask=mask)


def save_dataset(d: Dataset, path: str | Path) -> None:
    """Write ``d`` in the binary format documented in the module docstring.

    Sample values are stored as float32; float64-backed trials (e.g. after
    standardization) are quantized on write.
    """
    has_mask = d.noise_mask is not None
    buf = bytearray()
    buf += _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        d.n,
        d.n_channels,
        d.n_timepoints,
        d.n_classes,
        1 if has_mask else 0,
    )
    for t in d.trials:
        buf += struct.pack("<II", t.subject_id, t.label)
        buf += t.data.astype("<f4", copy=False).tobytes(order="C")
    if has_mask:
        buf += d.noise_mask.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`, validating strictly.

    Raises BadMagicError / FormatVersionError / TruncatedPayloadError /
    DimOverflowError (each naming the byte offset) on malformed input.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedPayloadError("file shorter than the 4-byte magic", len(buf))
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("incomplete header", len(buf))
    _, version, n_trials, n_channels, n_timepoints, n_classes, has_mask = _HEADER.unpack_from(
        buf, 0
    )
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}", 4
        )
    if has_mask not in (0, 1):
        raise DataFormatError("has_noise_mask byte must be 0 or 1", _HEADER.size - 1)

    points = n_channels * n_timepoints
    trial_bytes = 8 + 4 * points
    payload = n_trials * trial_bytes + (n_trials if has_mask else 0)
    if payload > _MAX_PAYLOAD_BYTES:
        raise DimOverflowError(
            f"header implies {payload} payload bytes (dims {n_trials} x "
            f"{n_channels} x {n_timepoints})",
            8,
        )

    offset = _HEADER.size
    trials: list[Trial] = []
    for i in range(n_trials):
        if len(buf) < offset + trial_bytes:
            raise TruncatedPayloadError(
                f"file ends inside trial {i} (need {trial_bytes} bytes)", len(buf)
            )
        subject_id, label = struct.unpack_from("<II", buf, offset)
        if label >= n_classes:
            raise DataFormatError(
                f"trial {i} label {label} out of range [0, {n_classes})", offset + 4
            )
        data = np.frombuffer(
            buf, dtype="<f4", count=points, offset=offset + 8
        ).reshape(n_channels, n_timepoints)
        trials.append(Trial(data=data.copy(), label=label, subject_id=subject_id))
        offset += trial_bytes

    mask = None
    if has_mask:
        if len(buf) < offset + n_trials:
            raise TruncatedPayloadError("file ends inside the noise mask", len(buf))
        raw = np.frombuffer(buf, dtype=np.uint8, count=n_trials, offset=offset)
        bad = np.flatnonzero((raw != 0) & (raw != 1))
        if bad.size:
            raise DataFormatError(
                f"noise mask byte {int(raw[bad[0]])} is not 0/1", offset + int(bad[0])
            )
        mask = raw.astype(bool)
        offset += n_trials
    if offset != len(buf):
        raise DataFormatError(f"{len(buf) - offset} trailing bytes", offset)
    return Dataset(trials=trials, n_classes=n_classes, noise_mask=mask)
