import filecmp
import hashlib
import json
import os

import numpy as np
import pytest

from synclab import synth_world as sw
from synclab.audio_dsp import EnvelopeSeries, onset_envelope, pick_peaks
from synclab.diffcore import Rng


def make_script(times, class_id=1, lead=0.0, lag=0.0, amp=0.8, duration=2.0):
    return sw.EventScript(
        duration,
        [sw.Event(t, class_id, motion_lead_s=lead, motion_lag_s=lag, amplitude=amp) for t in times],
    )


class TestEventScript:
    def test_sorted_and_validated(self):
        s = make_script([1.5, 0.5])
        assert [e.time_s for e in s.events] == [0.5, 1.5]
        with pytest.raises(ValueError, match="outside"):
            make_script([3.0])
        with pytest.raises(ValueError, match="amplitude"):
            make_script([1.0], amp=0.0)
        with pytest.raises(ValueError, match="lead/lag"):
            sw.EventScript(2.0, [sw.Event(1.0, 1, motion_lead_s=-0.1)])

    def test_json_roundtrip(self):
        s = make_script([0.5, 1.5], lead=0.1, lag=0.2, amp=0.7)
        back = sw.EventScript.from_json(s.to_json())
        assert back == s


class TestGenAudio:
    def test_empty_script_noise_floor_only(self):
        w = sw.gen_audio(sw.EventScript(2.0, []), Rng(3))
        assert len(pick_peaks(onset_envelope(w))) == 0

    def test_event_train_detected_within_10ms(self):
        w = sw.gen_audio(make_script([0.25, 0.75, 1.25]), Rng(4))
        peaks = pick_peaks(onset_envelope(w)).times_s
        assert len(peaks) == 3
        for got, want in zip(peaks, (0.25, 0.75, 1.25)):
            assert abs(got - want) <= 0.010 + 1e-9

    def test_near_zero_amplitude_like_empty(self):
        w = sw.gen_audio(make_script([0.5, 1.0], amp=1e-9), Rng(5))
        assert len(pick_peaks(onset_envelope(w))) == 0

    def test_clipping_counter(self):
        before = sw.clipped_sample_count
        script = sw.EventScript(2.0, [sw.Event(0.5, 1, amplitude=1.0) for _ in range(8)])
        sw.gen_audio(script, Rng(6))
        assert sw.clipped_sample_count > before


class TestGenLatents:
    def test_empty_script_drift_only_no_peaks(self):
        lat = sw.gen_latents(sw.EventScript(2.0, []), Rng(7))
        m = sw.motion_magnitude(lat.latents)
        env = EnvelopeSeries(m, hop_s=1 / 24, start_s=0.5 / 24)
        assert len(pick_peaks(env)) == 0

    def test_zero_leadlag_argmax_at_event_frame(self):
        lat = sw.gen_latents(make_script([1.0]), Rng(8))
        m = sw.motion_magnitude(lat.latents)
        l_star = int(np.argmax(m)) + 1  # series index j is the step into frame j+1
        assert abs(l_star - round(24 * 1.0)) <= 1

    def test_lead_moves_motion_onset(self):
        lat = sw.gen_latents(make_script([1.0], lead=0.2, amp=1.0), Rng(9))
        m = sw.motion_magnitude(lat.latents)
        onset_idx = int(np.argmax(m > 0.1 * m.max()))
        onset_t = (onset_idx + 0.5) / 24
        assert abs(onset_t - 0.8) <= 1.0 / 24 + 1e-9

    def test_frame_count(self):
        lat = sw.gen_latents(sw.EventScript(2.5, []), Rng(10))
        assert lat.n_frames == round(2.5 * 24)
        assert lat.latents.shape[1] == sw.LATENT_CHANNELS

    def test_micro_motion_adds_peaks(self):
        counts = []
        for i in range(10):
            lat = sw.gen_latents(sw.EventScript(2.0, []), Rng(100 + i), micro_motion_rate_hz=1.0)
            env = EnvelopeSeries(sw.motion_magnitude(lat.latents), hop_s=1 / 24, start_s=0.5 / 24)
            counts.append(len(pick_peaks(env)))
        assert sum(counts) > 0


class TestGenAudioFeatures:
    def test_silence_constant_rows(self):
        feats = sw.gen_audio_features(sw.Waveform(np.zeros(32000), 16000))
        assert np.allclose(feats.features, feats.features[0], atol=1e-12)

    def test_alpha_is_exactly_four(self):
        w = sw.gen_audio(make_script([0.5]), Rng(11))
        feats = sw.gen_audio_features(w)
        lat = sw.gen_latents(make_script([0.5]), Rng(12))
        assert feats.features.shape[0] / lat.n_frames == 4.0
        assert feats.features.shape == (192, sw.FEATURE_DIM)

    def test_identical_clips_identical_features(self):
        w = sw.gen_audio(make_script([0.5, 1.2]), Rng(13))
        a = sw.gen_audio_features(w).features
        b = sw.gen_audio_features(w).features
        assert np.array_equal(a, b)

    def test_wrong_rate_rejected(self):
        with pytest.raises(ValueError, match="16000"):
            sw.gen_audio_features(sw.Waveform(np.zeros(8000), 8000))


class TestOracleV2A:
    def test_zero_motion_gives_silence(self):
        lat = sw.LatentSequence(np.ones((48, 8)))
        recon = sw.OracleV2A().reconstruct(lat)
        assert np.array_equal(recon.samples, np.zeros_like(recon.samples))
        assert len(pick_peaks(onset_envelope(recon))) == 0

    def test_round_trip_peaks_within_one_frame(self):
        script = make_script([0.5, 1.0])
        lat = sw.gen_latents(script, Rng(14))
        recon = sw.OracleV2A().reconstruct(lat)
        peaks = pick_peaks(onset_envelope(recon)).times_s
        assert len(peaks) == 2
        for got, want in zip(peaks, (0.5, 1.0)):
            assert abs(got - want) <= 1 / 24 + 1e-9

    def test_shifted_latents_shift_reconstruction(self):
        script = make_script([0.75])
        lat = sw.gen_latents(script, Rng(15))
        shifted = np.concatenate([np.repeat(lat.latents[:1], 3, axis=0), lat.latents[:-3]], axis=0)
        p0 = pick_peaks(onset_envelope(sw.OracleV2A().reconstruct(lat))).times_s
        p1 = pick_peaks(onset_envelope(sw.OracleV2A().reconstruct(sw.LatentSequence(shifted)))).times_s
        assert len(p0) == len(p1) == 1
        assert abs((p1[0] - p0[0]) - 3 / 24) <= 1 / 24 + 1e-9

    def test_determinism(self):
        lat = sw.gen_latents(make_script([0.6, 1.4]), Rng(16))
        a = sw.OracleV2A().reconstruct(lat).samples
        b = sw.OracleV2A().reconstruct(lat).samples
        assert np.array_equal(a, b)


def _dir_digest(path):
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


class TestGenDataset:
    def test_reproducible_byte_identical(self, tmp_path):
        m1 = sw.gen_dataset(tmp_path / "a", seed=7, n_clips=6)
        m2 = sw.gen_dataset(tmp_path / "b", seed=7, n_clips=6)
        assert open(m1).read() == open(m2).read()
        assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        sw.gen_dataset(tmp_path / "a", seed=7, n_clips=4)
        sw.gen_dataset(tmp_path / "b", seed=8, n_clips=4)
        assert _dir_digest(tmp_path / "a") != _dir_digest(tmp_path / "b")

    def test_manifest_rows_and_paths(self, tmp_path):
        man = sw.gen_dataset(tmp_path / "d", seed=5, n_clips=64)
        rows = [json.loads(line) for line in open(man)]
        assert len(rows) == 64
        for row in rows:
            assert set(row) == {"id", "wav", "latents", "features", "script"}
            for key in ("wav", "latents", "features", "script"):
                assert (tmp_path / "d" / row[key]).exists()

    def test_zero_lag_alignment_aggregate(self, tmp_path):
        man = sw.gen_dataset(tmp_path / "z", seed=3, n_clips=24, lead_range=(0, 0), lag_range=(0, 0))
        frame_s = 1.0 / 24
        errs = []
        for rec in sw.load_manifest(man):
            audio_pk = pick_peaks(onset_envelope(rec.load_wav())).times_s
            m = sw.motion_magnitude(rec.load_latents().latents)
            motion_pk = pick_peaks(EnvelopeSeries(m, hop_s=frame_s, start_s=0.5 * frame_s)).times_s
            for t in audio_pk:
                if len(motion_pk):
                    errs.append(np.min(np.abs(motion_pk - t)))
        assert np.mean(errs) < frame_s

    def test_bad_n_clips(self, tmp_path):
        with pytest.raises(ValueError, match="n_clips"):
            sw.gen_dataset(tmp_path / "x", seed=1, n_clips=0)

    def test_load_manifest_roundtrip(self, tmp_path):
        man = sw.gen_dataset(tmp_path / "r", seed=2, n_clips=3)
        recs = sw.load_manifest(man)
        assert len(recs) == 3
        lat = recs[0].load_latents()
        feats = recs[0].load_features()
        wav = recs[0].load_wav()
        assert lat.n_frames == 48 and feats.features.shape[0] == 192
        assert abs(wav.duration_s - 2.0) < 1e-9
