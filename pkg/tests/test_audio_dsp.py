import struct

import numpy as np
import pytest

from synclab.audio_dsp import (
    EnvelopeSeries,
    OnsetPeaks,
    Waveform,
    WavFormatError,
    load_wav,
    onset_envelope,
    pick_peaks,
    resample,
    save_wav,
    shift_audio,
)
from synclab.diffcore import Rng
from synclab.synth_world import Event, EventScript, gen_audio

RATE = 16000


def burst_wave(times, amps=None, rng_seed=1, noise_db=-40.0, duration=2.0):
    amps = amps or [0.8] * len(times)
    script = EventScript(duration, [Event(t, 1, amplitude=a) for t, a in zip(times, amps)])
    return gen_audio(script, Rng(rng_seed), noise_db=noise_db)


def write_wav_raw(path, n_channels, bits, rate, payload: bytes):
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, n_channels, rate,
        rate * n_channels * (bits // 8), n_channels * (bits // 8), bits,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


class TestWavIO:
    def test_mono_16k_two_seconds(self, tmp_path):
        path = tmp_path / "a.wav"
        save_wav(path, Waveform(np.zeros(32000), RATE))
        w = load_wav(path)
        assert len(w.samples) == 32000 and w.rate_hz == RATE

    def test_8bit_stereo_averages_to_mono(self, tmp_path):
        # left channel 0.5, right channel -0.5 -> exact zero average
        left = np.full(100, 192, dtype=np.uint8)   # (192-128)/128 = +0.5
        right = np.full(100, 64, dtype=np.uint8)   # (64-128)/128 = -0.5
        payload = np.column_stack([left, right]).ravel().tobytes()
        path = tmp_path / "s.wav"
        write_wav_raw(path, 2, 8, 8000, payload)
        w = load_wav(path)
        assert len(w.samples) == 100
        assert np.allclose(w.samples, 0.0, atol=1e-12)
        assert w.rate_hz == 8000  # rate preserved

    def test_24bit_roundtrip(self, tmp_path):
        vals = np.array([0.0, 0.25, -0.25, 0.999], dtype=np.float64)
        ints = np.round(vals * (1 << 23)).astype(np.int64)
        raw = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in ints)
        path = tmp_path / "b24.wav"
        write_wav_raw(path, 1, 24, RATE, raw)
        w = load_wav(path)
        assert np.allclose(w.samples, vals, atol=1e-6)

    def test_truncated_header_is_format_error(self, tmp_path):
        path = tmp_path / "t.wav"
        path.write_bytes(b"RIFF\x10\x00")
        with pytest.raises(WavFormatError, match="truncated"):
            load_wav(path)

    def test_non_pcm_names_fmt_chunk(self, tmp_path):
        payload = np.zeros(10, dtype="<i2").tobytes()
        header = struct.pack(
            "<4sI4s4sIHHIIHH4sI",
            b"RIFF", 36 + len(payload), b"WAVE",
            b"fmt ", 16, 3, 1, RATE, RATE * 2, 2, 16,  # format 3 = float, unsupported
            b"data", len(payload),
        )
        path = tmp_path / "f.wav"
        path.write_bytes(header + payload)
        with pytest.raises(WavFormatError, match="fmt"):
            load_wav(path)

    def test_missing_data_chunk(self, tmp_path):
        header = struct.pack(
            "<4sI4s4sIHHIIHH", b"RIFF", 24, b"WAVE", b"fmt ", 16, 1, 1, RATE, RATE * 2, 2, 16
        )
        path = tmp_path / "m.wav"
        path.write_bytes(header)
        with pytest.raises(WavFormatError, match="data"):
            load_wav(path)

    def test_resample_linear(self):
        w = Waveform(np.sin(2 * np.pi * 440 * np.arange(8000) / 8000.0), 8000)
        up = resample(w, RATE)
        assert len(up.samples) == 16000 and up.rate_hz == RATE

    def test_waveform_validation(self):
        with pytest.raises(ValueError, match="finite"):
            Waveform(np.array([0.0, np.nan]), RATE)
        with pytest.raises(ValueError, match="rate_hz"):
            Waveform(np.zeros(4), 0)


class TestOnsetEnvelope:
    def test_length_formula(self):
        w = Waveform(np.zeros(32000), RATE)
        env = onset_envelope(w, n_fft=512, hop=128)
        assert len(env.values) == (32000 - 512) // 128 + 1

    def test_silence_is_all_zero(self):
        env = onset_envelope(Waveform(np.zeros(RATE), RATE))
        assert np.array_equal(env.values, np.zeros_like(env.values))

    def test_click_argmax_within_one_hop(self):
        w = burst_wave([0.5], [0.9])
        env = onset_envelope(w)
        t_peak = env.start_s + np.argmax(env.values) * env.hop_s
        assert abs(t_peak - 0.5) <= env.hop_s + 1e-9

    def test_steady_sine_near_zero_after_onset(self):
        # a click's flux peaks above 100; a held tone, already sounding at
        # frame 0, stays orders of magnitude below
        t = np.arange(RATE) / RATE
        env = onset_envelope(Waveform(0.5 * np.sin(2 * np.pi * 880 * t), RATE))
        assert env.values[2:].max() < 0.1

    def test_clip_shorter_than_frame_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            onset_envelope(Waveform(np.zeros(100), RATE))


class TestPickPeaks:
    def test_all_zero_envelope_empty(self):
        env = EnvelopeSeries(np.zeros(50), hop_s=0.008)
        assert len(pick_peaks(env)) == 0

    def test_impulse_train_within_10ms(self):
        w = burst_wave([0.25, 0.75, 1.25])
        peaks = pick_peaks(onset_envelope(w))
        assert len(peaks) == 3
        for got, want in zip(peaks.times_s, (0.25, 0.75, 1.25)):
            assert abs(got - want) <= 0.010 + 1e-9

    def test_two_impulses_10ms_apart_merge(self):
        w = burst_wave([0.5, 0.51])
        peaks = pick_peaks(onset_envelope(w), wait_s=0.03)
        assert len(peaks) == 1

    def test_refractory_spacing(self):
        rng = Rng(17)
        env = EnvelopeSeries(np.abs(rng.normal((300,))), hop_s=0.008)
        times = pick_peaks(env, wait_s=0.03).times_s
        if len(times) > 1:
            assert np.all(np.diff(times) >= 0.03 - 1e-12)

    def test_empty_envelope_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pick_peaks(EnvelopeSeries(np.empty(0), hop_s=0.008))

    def test_determinism(self):
        w = burst_wave([0.4, 1.1], rng_seed=5)
        a = pick_peaks(onset_envelope(w)).times_s
        b = pick_peaks(onset_envelope(w)).times_s
        assert np.array_equal(a, b)


class TestShiftAudio:
    def test_zero_delay_identity(self):
        w = burst_wave([0.5])
        assert np.array_equal(shift_audio(w, 0.0).samples, w.samples)

    def test_positive_delay_zero_pads_head(self):
        w = burst_wave([0.5])
        out = shift_audio(w, 0.1)
        assert np.array_equal(out.samples[:1600], np.zeros(1600))
        assert np.array_equal(out.samples[1600:], w.samples[:-1600])
        assert len(out.samples) == len(w.samples)

    def test_delay_beyond_clip_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            shift_audio(Waveform(np.zeros(100), RATE), 1.0)

    def test_shift_equivariance_of_peaks(self):
        # spec invariant: peaks(shift(w, d)) == peaks(w) + d within one hop
        hop_s = 128 / RATE
        for k in range(12):
            r = np.random.default_rng(40 + k)
            times = [0.3, 0.3 + float(r.uniform(0.35, 0.6))]
            w = burst_wave(times, [float(r.uniform(0.5, 1.0)) for _ in times], rng_seed=60 + k)
            d = float(r.uniform(0.0, 0.5))
            p0 = pick_peaks(onset_envelope(w)).times_s
            p1 = pick_peaks(onset_envelope(shift_audio(w, d))).times_s
            for t in p0:
                if t + d > w.duration_s - 0.2:
                    continue
                assert len(p1) and np.min(np.abs(p1 - (t + d))) <= hop_s + 1e-9


class TestTypes:
    def test_onset_peaks_strictly_increasing(self):
        with pytest.raises(ValueError, match="increasing"):
            OnsetPeaks(np.array([0.5, 0.5]))

    def test_envelope_nonnegative(self):
        with pytest.raises(ValueError, match="nonnegative"):
            EnvelopeSeries(np.array([-1.0]), hop_s=0.01)
