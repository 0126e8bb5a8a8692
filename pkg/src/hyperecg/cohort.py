"""Cohorts: labeling, subject-disjoint and mixed splits, and a synthetic
ECG cohort generator standing in for the private glucose database."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyManifest, InvalidSpec
from .signal import EcgRecording, SegmentSet, hyperglycemia_label

ROLES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.65, 0.15, 0.20)


def label(rec: EcgRecording) -> int:
    return hyperglycemia_label(rec.glucose_mgdl)


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    session_id: int
    path: str
    glucose_mgdl: float | None


@dataclass
class CohortManifest:
    records: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.session_id)
            if key in seen:
                raise InvalidSpec(f"duplicate recording {key} in manifest")
            seen.add(key)
            if r.glucose_mgdl is not None and not r.glucose_mgdl > 0:
                raise InvalidSpec(f"non-positive glucose for {key}")

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitAssignment:
    roles: dict[str, str]
    seed: int
    fractions: tuple[float, float, float]

    def subjects(self, role: str) -> list[str]:
        return sorted(s for s, r in self.roles.items() if r == role)

    def counts(self) -> dict[str, int]:
        return {role: len(self.subjects(role)) for role in ROLES}

    def assert_disjoint(self) -> None:
        sets = [set(self.subjects(r)) for r in ROLES]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise AssertionError("split roles share subjects")
        if sum(len(s) for s in sets) != len(self.roles):
            raise AssertionError("a subject holds more than one role")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "fractions": list(self.fractions), "roles": dict(sorted(self.roles.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(dict(d["roles"]), int(d["seed"]), tuple(d["fractions"]))


def split_subjects(manifest, fractions=DEFAULT_FRACTIONS, seed: int = 0,
                   strata: dict[str, int] | None = None) -> SplitAssignment:
    """Seeded subject-level train/val/test assignment.

    ``manifest`` may be a :class:`CohortManifest` or any iterable of subject
    ids; every session of a subject therefore lands in the same role.  With
    ``strata`` (subject -> class) each class is spread over the roles in
    proportion, within one subject; role totals are unchanged.
    """
    ids = manifest.subjects() if isinstance(manifest, CohortManifest) else sorted(set(manifest))
    if not ids:
        raise EmptyManifest("no subjects to split")
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise InvalidSpec(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ids)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
    else:
        # systematic interleave: member k of a class of size m sits at (k + u) / m,
        # so every prefix of the order holds each class in proportion
        cls = np.array([strata[s] for s in ids])
        keys = np.empty(n)
        for c in np.unique(cls):
            members = np.flatnonzero(cls == c)
            keys[members[rng.permutation(members.size)]] = (np.arange(members.size) + rng.uniform()) / members.size
        order = np.lexsort((cls, keys))
    roles = {}
    for rank, i in enumerate(order):
        roles[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    split = SplitAssignment(roles, int(seed), tuple(float(f) for f in fr))
    split.assert_disjoint()
    return split


def split_segments_mixed(segments: SegmentSet, train_fraction: float = 0.85,
                         seed: int = 0) -> tuple[SegmentSet, SegmentSet]:
    """Per-subject random segment split, pooled across subjects.

    This is the identity-leaking protocol: every subject with two or more
    segments contributes to both sides.
    """
    if not 0 < train_fraction < 1:
        raise InvalidSpec("train_fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for k, subj in enumerate(segments.unique_subjects()):
        idx = np.flatnonzero(segments.subjects == subj)
        rng = np.random.default_rng([seed, k])
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        if idx.size >= 2:
            n_train = min(max(n_train, 1), idx.size - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    return (segments.take(np.sort(np.concatenate(train_idx))),
            segments.take(np.sort(np.concatenate(test_idx))))


def balance_by_undersampling(segments: SegmentSet, seed: int = 0) -> SegmentSet:
    """Randomly drop majority-class segments until both classes are equal."""
    pos = np.flatnonzero(segments.labels == 1)
    neg = np.flatnonzero(segments.labels == 0)
    if not pos.size or not neg.size or pos.size == neg.size:
        return segments
    rng = np.random.default_rng(seed)
    big, small = (pos, neg) if pos.size > neg.size else (neg, pos)
    keep = np.concatenate([small, rng.choice(big, size=small.size, replace=False)])
    return segments.take(np.sort(keep))


def cap_per_subject(segments: SegmentSet, limit: int | None, seed: int = 0) -> SegmentSet:
    """Keep at most ``limit`` randomly chosen segments per subject (order kept)."""
    if not limit:
        return segments
    keep = []
    for k, subj in enumerate(segments.unique_subjects()):
        idx = np.flatnonzero(segments.subjects == subj)
        if idx.size > limit:
            idx = np.sort(np.random.default_rng([seed, k]).choice(idx, size=limit, replace=False))
        keep.append(idx)
    return segments.take(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic cohort knobs; amplitudes are relative to a unit R wave."""

    n_subjects: int = 40
    hyper_fraction: float = 0.5
    fs: float = 1000.0
    duration_s: float = 60.0
    sessions: int = 2
    hr_range_bpm: tuple[float, float] = (60.0, 80.0)
    hrv_jitter: float = 0.02
    white_noise: float = 0.02
    baseline_wander: float = 0.10
    em_burst_rate: float = 0.02
    em_amplitude: float = 0.10
    delta_bpm: float = 8.0
    delta_qt_ms: float = 25.0
    morphology_jitter: float = 1.0
    idiosyncrasy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hr_range_bpm", tuple(float(v) for v in self.hr_range_bpm))
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 1 or self.sessions < 1:
            raise InvalidSpec("need at least one subject and one session")
        if not 0 <= self.hyper_fraction <= 1:
            raise InvalidSpec("hyper_fraction must lie in [0, 1]")
        if self.fs <= 0 or self.duration_s <= 0:
            raise InvalidSpec("fs and duration must be positive")
        lo, hi = self.hr_range_bpm
        if not 20 <= lo <= hi <= 200:
            raise InvalidSpec(f"implausible heart-rate range {self.hr_range_bpm}")
        amps = (self.hrv_jitter, self.white_noise, self.baseline_wander, self.em_burst_rate,
                self.em_amplitude, self.morphology_jitter, self.idiosyncrasy)
        if min(amps) < 0:
            raise InvalidSpec("noise levels, jitters and rates must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hr_range_bpm"] = list(self.hr_range_bpm)
        return d


# Template beat relative to the R wave: (name, centre ms, width sigma ms, amplitude).
WAVES = (
    ("P", -170.0, 22.0, 0.12),
    ("Q", -28.0, 8.0, -0.12),
    ("R", 0.0, 10.0, 1.0),
    ("S", 28.0, 9.0, -0.22),
    ("T", 280.0, 40.0, 0.30),
)
# Per-subject morphology jitter at morphology_jitter=1: centre sd (ms), relative width sd, relative amp sd.
CENTER_SD = {"P": 5.0, "Q": 2.0, "R": 0.0, "S": 2.0, "T": 8.0}
WIDTH_SD = 0.08
AMP_SD = 0.08
GAIN_SD = 0.10
# Beat-to-beat variation inside one recording.
BEAT_AMP_SD = 0.03
BEAT_T_SD_MS = 3.0
SESSION_HR_SD = 1.5
# At idiosyncrasy=1: extra per-subject T-wave offset (ms) on top of the fingerprint bumps.
IDIO_T_SD_MS = 12.0
# Glucose draws (mg/dL): normoglycemic and hyperglycemic modes.
NORMAL_GLUCOSE = (88.0, 6.0, 65.0, 100.0)
HYPER_GLUCOSE = (145.0, 25.0, 101.0, 300.0)


@dataclass
class SubjectTruth:
    subject_id: str
    hyper: bool
    bpm: float
    qt_offset_ms: float
    morphology: list


@dataclass
class SynthCohort:
    spec: SynthSpec
    recordings: list[EcgRecording]
    truth: list[dict]  # per recording: r_samples, label, bpm, qt_offset_ms

    def manifest(self, paths: list[str] | None = None) -> CohortManifest:
        paths = paths or [f"recordings/{r.subject_id}_s{r.session_id}.ecg" for r in self.recordings]
        return CohortManifest([ManifestEntry(r.subject_id, r.session_id, p, r.glucose_mgdl)
                               for r, p in zip(self.recordings, paths)])


def _subject_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _truncated_normal(rng, mean, sd, lo, hi) -> float:
    for _ in range(1000):
        v = rng.normal(mean, sd)
        if lo <= v <= hi:
            return float(v)
    return float(np.clip(mean, lo, hi))


def _subject_morphology(rng, spec: SynthSpec, hyper: bool) -> list[tuple[float, float, float]]:
    m = spec.morphology_jitter
    gain = 1.0 + m * GAIN_SD * rng.standard_normal()
    waves = []
    for name, center, width, amp in WAVES:
        c = center + m * CENTER_SD[name] * rng.standard_normal()
        w = width * max(0.3, 1.0 + m * WIDTH_SD * rng.standard_normal())
        a = amp * gain * (1.0 + m * AMP_SD * rng.standard_normal())
        if name == "T":
            c += spec.idiosyncrasy * IDIO_T_SD_MS * rng.standard_normal()
            if hyper:
                c += spec.delta_qt_ms
        waves.append((c, w, a))
    if spec.idiosyncrasy > 0:
        # subject fingerprint: extra bumps unrelated to the label
        for _ in range(2):
            c = rng.uniform(-150.0, 380.0)
            w = rng.uniform(8.0, 20.0)
            a = spec.idiosyncrasy * rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 0.15)
            waves.append((c, w, a))
    return waves


def synth_recording(rng, spec: SynthSpec, subject_id: str, session_id: int, bpm: float,
                    waves, glucose: float) -> tuple[EcgRecording, np.ndarray]:
    fs = spec.fs
    n = int(round(spec.duration_s * fs))
    t_ms = np.arange(n) * 1000.0 / fs
    x = np.zeros(n)

    rr_mean = 60.0 / bpm
    r_times = []
    t = rng.uniform(0.3, 0.3 + rr_mean)
    while t < spec.duration_s:
        r_times.append(t)
        t += rr_mean * max(0.5, 1.0 + spec.hrv_jitter * rng.standard_normal())
    r_times = np.asarray(r_times)

    reach = 4.0
    for rt in r_times:
        beat_amp = 1.0 + BEAT_AMP_SD * rng.standard_normal()
        t_shift = BEAT_T_SD_MS * rng.standard_normal()
        for k, (c, w, a) in enumerate(waves):
            centre = rt * 1000.0 + c + (t_shift if k == 4 else 0.0)
            lo = max(0, int((centre - reach * w) * fs / 1000.0))
            hi = min(n, int((centre + reach * w) * fs / 1000.0) + 2)
            if lo >= hi:
                continue
            tt = t_ms[lo:hi]
            x[lo:hi] += beat_amp * a * np.exp(-0.5 * ((tt - centre) / w) ** 2)

    if spec.white_noise:
        x += spec.white_noise * rng.standard_normal(n)
    if spec.baseline_wander:
        f1, f2 = rng.uniform(0.15, 0.35), rng.uniform(0.03, 0.08)
        ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
        secs = t_ms / 1000.0
        x += spec.baseline_wander * (np.sin(2 * np.pi * f1 * secs + ph1) + 0.5 * np.sin(2 * np.pi * f2 * secs + ph2))
    if spec.em_burst_rate and spec.em_amplitude:
        for _ in range(rng.poisson(spec.em_burst_rate * spec.duration_s)):
            length = int(rng.uniform(0.1, 0.4) * fs)
            start = int(rng.integers(0, max(1, n - length)))
            seg = slice(start, min(n, start + length))
            span = seg.stop - seg.start
            x[seg] += spec.em_amplitude * np.hanning(span) * rng.standard_normal(span)

    r_samples = np.round(r_times * fs).astype(np.int64)
    r_samples = r_samples[r_samples < n]
    rec = EcgRecording(subject_id, session_id, fs, x, glucose)
    return rec, r_samples


def synth_subject(spec: SynthSpec, index: int, hyper: bool) -> tuple[list[EcgRecording], list[dict]]:
    rng = _subject_seed(spec.seed, index)
    subject_id = f"S{index:04d}"
    lo, hi = spec.hr_range_bpm
    base_bpm = rng.uniform(lo, hi) + (spec.delta_bpm if hyper else 0.0)
    waves = _subject_morphology(rng, spec, hyper)
    recs, truth = [], []
    for session in range(spec.sessions):
        g = HYPER_GLUCOSE if hyper else NORMAL_GLUCOSE
        glucose = round(_truncated_normal(rng, *g), 1)
        bpm = base_bpm + SESSION_HR_SD * rng.standard_normal()
        rec, r = synth_recording(rng, spec, subject_id, session, bpm, waves, glucose)
        recs.append(rec)
        truth.append({
            "subject_id": subject_id,
            "session_id": session,
            "r_samples": r.tolist(),
            "label": rec.label,
            "bpm": float(bpm),
            "qt_offset_ms": float(spec.delta_qt_ms if hyper else 0.0),
            "t_wave_center_ms": float(waves[4][0]),
        })
    return recs, truth


def assign_hyper(spec: SynthSpec) -> np.ndarray:
    n_hyper = int(round(spec.hyper_fraction * spec.n_subjects))
    flags = np.zeros(spec.n_subjects, dtype=bool)
    flags[:n_hyper] = True
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed)])).permutation(flags)


def synth_cohort(spec: SynthSpec) -> SynthCohort:
    """Generate every subject's recordings plus ground truth.

    Each subject draws from its own seed derived from ``(spec.seed, index)``,
    so subjects can be generated in any order or in parallel.
    """
    spec.validate()
    recordings, truth = [], []
    for i, hyper in enumerate(assign_hyper(spec)):
        r, t = synth_subject(spec, i, bool(hyper))
        recordings.extend(r)
        truth.extend(t)
    return SynthCohort(spec, recordings, truth)
