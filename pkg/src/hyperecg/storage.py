"""On-disk formats: recordings, cohort manifests, ground-truth sidecars,
segment caches.  All binary numbers are little-endian."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cohort import CohortManifest, ManifestEntry, SynthCohort
from .errors import FormatError
from .signal import UNLABELED, EcgRecording, SegmentSet, subject_hash

REC_MAGIC = b"HGECGREC"
REC_VERSION = 1
SEG_MAGIC = b"HGSEGS01"


def write_recording(rec: EcgRecording, path) -> None:
    """16-byte header (magic, u32 version, u32 reserved), f64 fs, u64 count, f64 samples."""
    with open(path, "wb") as f:
        f.write(REC_MAGIC + struct.pack("<II", REC_VERSION, 0))
        f.write(struct.pack("<dQ", float(rec.fs), rec.samples.size))
        f.write(rec.samples.astype("<f8").tobytes())


def read_recording(path, subject_id: str = "", session_id: int = 0,
                   glucose_mgdl: float | None = None) -> EcgRecording:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise FormatError(f"{path}: truncated recording header")
    if raw[:8] != REC_MAGIC:
        raise FormatError(f"{path}: not a recording file")
    version, _ = struct.unpack("<II", raw[8:16])
    if version != REC_VERSION:
        raise FormatError(f"{path}: unsupported recording version {version}")
    fs, count = struct.unpack("<dQ", raw[16:32])
    if len(raw) != 32 + 8 * count:
        raise FormatError(f"{path}: expected {count} samples, file holds {(len(raw) - 32) // 8}")
    samples = np.frombuffer(raw[32:], dtype="<f8").astype(np.float64)
    return EcgRecording(subject_id, session_id, fs, samples, glucose_mgdl)


def write_manifest(manifest: CohortManifest, path) -> None:
    with open(path, "w") as f:
        for r in manifest.records:
            f.write(json.dumps({"subject_id": r.subject_id, "session_id": r.session_id,
                                "path": r.path, "glucose_mgdl": r.glucose_mgdl}, sort_keys=True) + "\n")


def read_manifest(path) -> CohortManifest:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ManifestEntry(str(d["subject_id"]), int(d["session_id"]), str(d["path"]),
                                             None if d.get("glucose_mgdl") is None else float(d["glucose_mgdl"])))
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from None
    return CohortManifest(records)


def load_recordings(manifest_path) -> list[EcgRecording]:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    return [read_recording(manifest_path.parent / r.path, r.subject_id, r.session_id, r.glucose_mgdl)
            for r in manifest.records]


def write_cohort(cohort: SynthCohort, out_dir) -> Path:
    """Write recordings, ``manifest.jsonl``, truth sidecars and the spec echo."""
    out = Path(out_dir)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    paths = []
    for rec, truth in zip(cohort.recordings, cohort.truth):
        stem = f"{rec.subject_id}_s{rec.session_id}"
        rel = f"recordings/{stem}.ecg"
        write_recording(rec, out / rel)
        (out / "truth" / f"{stem}.json").write_text(json.dumps(truth, sort_keys=True) + "\n")
        paths.append(rel)
    manifest_path = out / "manifest.jsonl"
    write_manifest(cohort.manifest(paths), manifest_path)
    (out / "synth_spec.json").write_text(json.dumps(cohort.spec.to_dict(), sort_keys=True, indent=2) + "\n")
    return manifest_path


def write_segments(segments: SegmentSet, path) -> None:
    """Magic, u32 width, u64 count; then per segment u64 subject hash, u8 label, f64[width]."""
    w = segments.width
    rec = np.dtype([("subject", "<u8"), ("label", "u1"), ("values", "<f8", (w,))])
    arr = np.zeros(len(segments), dtype=rec)
    arr["subject"] = [subject_hash(s) for s in segments.subjects]
    arr["label"] = np.where(segments.labels == UNLABELED, 255, segments.labels).astype(np.uint8)
    arr["values"] = segments.values
    with open(path, "wb") as f:
        f.write(SEG_MAGIC + struct.pack("<IQ", w, len(segments)))
        f.write(arr.tobytes())


def read_segments(path) -> SegmentSet:
    """Subjects come back as 16-digit hex strings of their 64-bit hashes."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != SEG_MAGIC:
        raise FormatError(f"{path}: not a segment cache")
    w, count = struct.unpack("<IQ", raw[8:20])
    rec = np.dtype([("subject", "<u8"), ("label", "u1"), ("values", "<f8", (w,))])
    if len(raw) != 20 + rec.itemsize * count:
        raise FormatError(f"{path}: truncated segment cache")
    arr = np.frombuffer(raw[20:], dtype=rec)
    labels = arr["label"].astype(np.int64)
    labels[labels == 255] = UNLABELED
    subjects = np.array([f"{h:016x}" for h in arr["subject"]], dtype=object)
    return SegmentSet(arr["values"].astype(np.float64), labels, subjects)


def hashed_id(subject_id: str) -> str:
    """The name a subject carries after a segment-cache round trip."""
    return f"{subject_hash(subject_id):016x}"
