import numpy as np
import pytest

from hyperecg.cohort import SynthSpec, synth_cohort
from hyperecg.errors import FormatError, InvalidSpec
from hyperecg.signal import EcgRecording, SegmentSet
from hyperecg.storage import (hashed_id, load_recordings, read_manifest, read_recording, read_segments,
                              write_cohort, write_recording, write_segments)


def test_recording_round_trip(tmp_path, rng):
    rec = EcgRecording("a", 1, 500.0, rng.standard_normal(1234), 120.0)
    write_recording(rec, tmp_path / "r.ecg")
    back = read_recording(tmp_path / "r.ecg", "a", 1, 120.0)
    assert back.fs == 500.0
    np.testing.assert_array_equal(back.samples, rec.samples)
    raw = (tmp_path / "r.ecg").read_bytes()
    assert raw[:8] == b"HGECGREC" and len(raw) == 32 + 8 * 1234


def test_recording_rejects_damage(tmp_path):
    write_recording(EcgRecording("a", 0, 1000.0, np.zeros(10), None), tmp_path / "r.ecg")
    raw = (tmp_path / "r.ecg").read_bytes()
    for bad in (raw[:20], raw[:-3], b"XXXXXXXX" + raw[8:], raw[:8] + b"\x09" + raw[9:]):
        (tmp_path / "b.ecg").write_bytes(bad)
        with pytest.raises(FormatError):
            read_recording(tmp_path / "b.ecg")


def test_cohort_directory_round_trip(tmp_path):
    cohort = synth_cohort(SynthSpec(n_subjects=3, duration_s=4.0, seed=2))
    manifest = write_cohort(cohort, tmp_path)
    m = read_manifest(manifest)
    assert len(m) == 6 and m.subjects() == ["S0000", "S0001", "S0002"]
    recs = load_recordings(manifest)
    for a, b in zip(recs, cohort.recordings):
        assert (a.subject_id, a.session_id, a.glucose_mgdl, a.label) == (b.subject_id, b.session_id,
                                                                           b.glucose_mgdl, b.label)
        np.testing.assert_array_equal(a.samples, b.samples)
    assert (tmp_path / "truth" / "S0000_s0.json").exists()


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"subject_id": "a"}\n')
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text('{"subject_id": "a", "session_id": 0, "path": "x", "glucose_mgdl": 90}\n' * 2)
    with pytest.raises(InvalidSpec):
        read_manifest(p)


def test_segment_cache_round_trip(tmp_path, rng):
    seg = SegmentSet(rng.standard_normal((7, 11)), [0, 1, 1, 0, -1, 1, 0], ["a", "b", "a", "c", "c", "b", "a"])
    write_segments(seg, tmp_path / "s.seg")
    back = read_segments(tmp_path / "s.seg")
    np.testing.assert_array_equal(back.values, seg.values)
    assert back.labels.tolist() == seg.labels.tolist()
    assert back.subjects.tolist() == [hashed_id(s) for s in seg.subjects]
    raw = (tmp_path / "s.seg").read_bytes()
    assert len(raw) == 20 + 7 * (8 + 1 + 8 * 11)
    (tmp_path / "t.seg").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_segments(tmp_path / "t.seg")
