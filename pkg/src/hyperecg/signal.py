"""ECG preprocessing: trim, Butterworth bandpass, R-peak detection,
heartbeat segmentation and per-index standardization."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import find_peaks, lfilter

from .errors import InsufficientData, InvalidSpec, NoPeaksFound, RecordingTooShort, ShapeMismatch

HYPER_THRESHOLD_MGDL = 100.0
STD_FLOOR = 1e-8
UNLABELED = -1


def hyperglycemia_label(glucose_mgdl: float | None) -> int:
    """1 iff glucose strictly exceeds 100 mg/dL; -1 when no reading exists."""
    if glucose_mgdl is None:
        return UNLABELED
    return int(glucose_mgdl > HYPER_THRESHOLD_MGDL)


@dataclass(frozen=True)
class EcgRecording:
    subject_id: str
    session_id: int
    fs: float
    samples: np.ndarray = field(repr=False)
    glucose_mgdl: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.fs <= 0:
            raise InvalidSpec(f"sampling rate must be positive, got {self.fs}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidSpec("recording samples must be a non-empty 1-d sequence")
        if self.glucose_mgdl is not None and not self.glucose_mgdl > 0:
            raise InvalidSpec(f"glucose must be positive, got {self.glucose_mgdl}")

    @property
    def label(self) -> int:
        return hyperglycemia_label(self.glucose_mgdl)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass(frozen=True)
class FilterSpec:
    """Bandpass design request; ``order`` is the total (even) filter order."""

    order: int = 4
    low_hz: float = 1.0
    high_hz: float = 40.0
    fs: float = 1000.0

    def validate(self) -> None:
        if self.order < 2 or self.order % 2:
            raise InvalidSpec(f"bandpass order must be a positive even integer, got {self.order}")
        if not 0 < self.low_hz < self.high_hz < self.fs / 2:
            raise InvalidSpec(
                f"need 0 < low ({self.low_hz}) < high ({self.high_hz}) < fs/2 ({self.fs / 2})")


@dataclass(frozen=True)
class SegmentSpec:
    t1_ms: float = 200.0
    t0_ms: float = 400.0
    fs: float = 1000.0

    def __post_init__(self):
        if self.t1_ms <= 0 or self.t0_ms <= 0:
            raise InvalidSpec("segment offsets must be positive")
        if self.fs <= 0:
            raise InvalidSpec("sampling rate must be positive")

    @property
    def before(self) -> int:
        return int(round(self.t1_ms * self.fs / 1000.0))

    @property
    def width(self) -> int:
        return int(round((self.t1_ms + self.t0_ms) * self.fs / 1000.0))


@dataclass(frozen=True)
class Segment:
    subject_id: str
    values: np.ndarray = field(repr=False)
    label: int
    session_id: int = 0
    r_index: int = -1


@dataclass
class SegmentSet:
    """Columnar batch of equal-width segments."""

    values: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        self.values = values if values.ndim == 2 else values.reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=object)
        if not len(self.values) == len(self.labels) == len(self.subjects):
            raise ShapeMismatch("segment values, labels and subjects must have one row each")
        if self.sessions is None:
            self.sessions = np.zeros(len(self.labels), dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_segments(cls, segments: list[Segment], width: int | None = None) -> "SegmentSet":
        if not segments:
            return cls.empty(width or 0)
        return cls(
            np.stack([s.values for s in segments]),
            np.array([s.label for s in segments]),
            np.array([s.subject_id for s in segments], dtype=object),
            np.array([s.session_id for s in segments]),
        )

    @classmethod
    def empty(cls, width: int) -> "SegmentSet":
        return cls(np.zeros((0, width)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=object))

    @classmethod
    def concat(cls, parts: list["SegmentSet"]) -> "SegmentSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise InsufficientData("nothing to concatenate")
        return cls(
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.subjects for p in parts]),
            np.concatenate([p.sessions for p in parts]),
        )

    def take(self, idx) -> "SegmentSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SegmentSet(self.values[idx], self.labels[idx], self.subjects[idx], self.sessions[idx])

    def select_subjects(self, subjects) -> "SegmentSet":
        keep = np.isin(self.subjects, np.asarray(list(subjects), dtype=object))
        return self.take(np.flatnonzero(keep))

    def unique_subjects(self) -> list[str]:
        return sorted(set(self.subjects.tolist()))


def subject_hash(subject_id: str) -> int:
    """Stable 64-bit identifier used in binary segment caches."""
    return int.from_bytes(hashlib.sha256(str(subject_id).encode()).digest()[:8], "little")


# ---------------------------------------------------------------- trimming


def trim_edges(rec: EcgRecording, seconds: float = 2.0) -> EcgRecording:
    if seconds < 0:
        raise InvalidSpec("trim duration must be non-negative")
    n = int(round(seconds * rec.fs))
    if n == 0:
        return rec
    if rec.samples.size <= 2 * n:
        raise RecordingTooShort(
            f"{rec.subject_id}/{rec.session_id}: {rec.samples.size} samples cannot lose 2x{n}")
    return replace(rec, samples=rec.samples[n:-n].copy())


# ---------------------------------------------------------------- bandpass


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, one row ``(b0, b1, b2, 1, a1, a2)`` each."""

    sos: np.ndarray
    fs: float

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sos])

    def is_stable(self, margin: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * np.tan(np.pi * f_hz / fs)


def design_bandpass(spec: FilterSpec) -> BiquadCascade:
    """Butterworth bandpass via analog prototype, LP->BP map and bilinear transform.

    A total order of ``2n`` comes from an ``n``-pole lowpass prototype; each
    prototype pole yields two bandpass poles.  Band edges are pre-warped so
    the -3 dB points land exactly on ``low_hz`` and ``high_hz``.
    """
    spec.validate()
    n = spec.order // 2
    fs2 = 2.0 * spec.fs
    wl, wh = _prewarp(spec.low_hz, spec.fs), _prewarp(spec.high_hz, spec.fs)
    bw, w0sq = wh - wl, wl * wh

    proto = np.exp(1j * np.pi * (2 * np.arange(n) + n + 1) / (2 * n))
    half = proto * bw / 2
    disc = np.sqrt(half * half - w0sq + 0j)
    analog = np.concatenate([half + disc, half - disc])

    digital = (fs2 + analog) / (fs2 - analog)
    # n zeros at s=0 map to z=+1, n zeros at s=inf map to z=-1
    gain = np.real(bw ** n * fs2 ** n / np.prod(fs2 - analog))

    upper = sorted((p for p in digital if p.imag > 1e-12), key=lambda p: (abs(p), p.real))
    real = sorted(p.real for p in digital if abs(p.imag) <= 1e-12)
    pairs = [(p, np.conj(p)) for p in upper]
    if len(real) % 2:
        raise InvalidSpec("unpaired real pole in bandpass design")
    pairs += [(real[i], real[i + 1]) for i in range(0, len(real), 2)]
    if len(pairs) != n:
        raise InvalidSpec("pole pairing failed")

    sos = np.zeros((n, 6))
    section_gain = abs(gain) ** (1.0 / n)
    for i, (p1, p2) in enumerate(pairs):
        a = np.real(np.poly([p1, p2]))
        sos[i, :3] = section_gain * np.array([1.0, 0.0, -1.0])
        sos[i, 3:] = a
    sos[0, :3] *= np.sign(gain)
    return BiquadCascade(sos, spec.fs)


def filter_forward(cascade: BiquadCascade, x) -> np.ndarray:
    """Causal pass through every section (direct form II transposed, zero state)."""
    y = np.asarray(x, dtype=np.float64)
    if y.size == 0:
        raise InsufficientData("cannot filter an empty sequence")
    for row in cascade.sos:
        y = lfilter(row[:3], row[3:], y)
    return y


def filter_zero_phase(cascade: BiquadCascade, x) -> np.ndarray:
    """Forward then time-reversed pass; squares the magnitude, cancels phase."""
    y = filter_forward(cascade, x)
    return filter_forward(cascade, y[::-1])[::-1].copy()


# ---------------------------------------------------------------- R peaks

REFRACTORY_S = 0.200
REFINE_S = 0.050
MWI_S = 0.150


def _hill_climb(x: np.ndarray, i: int, half: int) -> int:
    for _ in range(64):
        lo, hi = max(0, i - half), min(x.size, i + half + 1)
        j = lo + int(np.argmax(x[lo:hi]))
        if j == i:
            break
        i = j
    return i


def detect_r_peaks(x, fs: float) -> np.ndarray:
    """Pan-Tompkins style detector on an already bandpassed signal.

    derivative -> square -> 150 ms moving-window integral -> adaptive
    signal/noise threshold with search-back -> each detection moved to the
    local maximum of ``x`` within +/-50 ms.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 * fs:
        raise RecordingTooShort(f"R-peak detection needs >= 2 s of signal, got {x.size / fs:.2f} s")
    refractory = int(round(REFRACTORY_S * fs))
    half = int(round(REFINE_S * fs))

    # centred slope over +/-5 ms, i.e. the classic 5-point derivative at 200 Hz
    step = max(1, int(round(fs / 200)))
    kernel = np.concatenate([np.ones(step), [0.0], -np.ones(step)]) / (2 * step)
    deriv = np.convolve(x, kernel, mode="same")
    energy = deriv * deriv
    mwi_len = max(1, int(round(MWI_S * fs)))
    mwi = np.convolve(energy, np.ones(mwi_len) / mwi_len, mode="same")
    if not np.any(mwi > 0):
        raise NoPeaksFound("signal carries no slope energy")

    cand, _ = find_peaks(mwi, distance=refractory)
    if cand.size < 2:
        raise NoPeaksFound(f"only {cand.size} candidate peaks")
    heights = mwi[cand]

    learn = cand < 2 * fs
    spki = 0.25 * (heights[learn].max() if learn.any() else heights.max())
    npki = 0.5 * float(np.mean(mwi[: int(2 * fs)]))
    accepted: list[int] = []
    rr: list[int] = []
    for idx, (pos, h) in enumerate(zip(cand, heights)):
        thr = npki + 0.25 * (spki - npki)
        if accepted and rr:
            limit = 1.66 * float(np.mean(rr[-8:]))
            if pos - accepted[-1] > limit:
                # search back for a missed beat among the skipped candidates
                gap = (cand > accepted[-1] + refractory) & (cand < pos - refractory)
                if gap.any():
                    best = int(np.argmax(np.where(gap, heights, -np.inf)))
                    if heights[best] > 0.5 * thr:
                        rr.append(int(cand[best]) - accepted[-1])
                        accepted.append(int(cand[best]))
                        spki = 0.25 * heights[best] + 0.75 * spki
        if h > thr and (not accepted or pos - accepted[-1] >= refractory):
            if accepted:
                rr.append(int(pos) - accepted[-1])
            accepted.append(int(pos))
            spki = 0.125 * h + 0.875 * spki
        else:
            npki = 0.125 * h + 0.875 * npki

    peaks: list[int] = []
    for pos in sorted(_hill_climb(x, p, half) for p in accepted):
        if peaks and pos - peaks[-1] < refractory:
            if x[pos] > x[peaks[-1]]:
                peaks[-1] = pos
            continue
        peaks.append(pos)
    if len(peaks) < 2:
        raise NoPeaksFound(f"only {len(peaks)} R peaks detected")
    return np.asarray(peaks, dtype=np.int64)


# ---------------------------------------------------------------- segmentation


def segment(rec: EcgRecording, peaks, spec: SegmentSpec, signal=None) -> list[Segment]:
    """Cut ``[r - t1, r + t0)`` windows around each peak; partial windows are dropped.

    ``signal`` defaults to the recording's own samples (pass the filtered
    trace to cut from it instead).
    """
    x = rec.samples if signal is None else np.asarray(signal, dtype=np.float64)
    before, width = spec.before, spec.width
    out = []
    for r in np.asarray(peaks, dtype=np.int64):
        start = int(r) - before
        if start < 0 or start + width > x.size:
            continue
        out.append(Segment(rec.subject_id, x[start:start + width].copy(), rec.label, rec.session_id, int(r)))
    return out


def concat_consecutive(segments: list[Segment], count: int = 5) -> list[Segment]:
    """Join runs of ``count`` consecutive beats into one wide segment."""
    out = []
    for i in range(0, len(segments) - count + 1, count):
        group = segments[i:i + count]
        first = group[0]
        out.append(Segment(first.subject_id, np.concatenate([g.values for g in group]), first.label,
                           first.session_id, first.r_index))
    return out


# ---------------------------------------------------------------- standardizing


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values) -> np.ndarray:
        return apply_standardizer(self, values)


def fit_standardizer(train_values, eps: float = STD_FLOOR) -> Standardizer:
    """Per-time-index mean and (population) std over training segments."""
    v = np.asarray(train_values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise InsufficientData("standardizer needs at least two training segments")
    return Standardizer(v.mean(axis=0), np.maximum(v.std(axis=0), eps))


def apply_standardizer(s: Standardizer, values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] != s.mean.size:
        raise InvalidSpec(f"segment width {v.shape[-1]} does not match standardizer width {s.mean.size}")
    return (v - s.mean) / s.std


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class PreprocessConfig:
    trim_s: float = 2.0
    filter: FilterSpec = FilterSpec()
    segment: SegmentSpec = SegmentSpec()
    zero_phase: bool = False
    min_peaks: int = 20
    max_amplitude_ratio: float = 10.0


@dataclass
class Preprocessed:
    segments: list[Segment]
    peaks: np.ndarray
    filtered: np.ndarray
    accepted: bool
    reason: str = ""


def quality_gate(filtered: np.ndarray, peaks: np.ndarray, min_peaks: int = 20,
                 max_amplitude_ratio: float = 10.0) -> tuple[bool, str]:
    if peaks.size < min_peaks:
        return False, f"{peaks.size} peaks < {min_peaks}"
    amps = filtered[peaks]
    if amps.min() <= 0 or amps.max() / amps.min() > max_amplitude_ratio:
        return False, "R amplitude varies by more than %gx" % max_amplitude_ratio
    return True, ""


def preprocess_recording(rec: EcgRecording, cfg: PreprocessConfig = PreprocessConfig()) -> Preprocessed:
    """Trim, filter, detect, gate and segment one recording (no standardization)."""
    if rec.fs != cfg.filter.fs or rec.fs != cfg.segment.fs:
        cfg = replace(cfg, filter=replace(cfg.filter, fs=rec.fs), segment=replace(cfg.segment, fs=rec.fs))
    trimmed = trim_edges(rec, cfg.trim_s)
    cascade = design_bandpass(cfg.filter)
    # start from the first sample so a DC offset does not ring through the highpass
    x = trimmed.samples - trimmed.samples[0]
    filtered = filter_zero_phase(cascade, x) if cfg.zero_phase else filter_forward(cascade, x)
    try:
        peaks = detect_r_peaks(filtered, rec.fs)
    except NoPeaksFound as exc:
        return Preprocessed([], np.zeros(0, dtype=np.int64), filtered, False, str(exc))
    ok, reason = quality_gate(filtered, peaks, cfg.min_peaks, cfg.max_amplitude_ratio)
    segs = segment(trimmed, peaks, cfg.segment, signal=filtered) if ok else []
    return Preprocessed(segs, peaks, filtered, ok, reason)
