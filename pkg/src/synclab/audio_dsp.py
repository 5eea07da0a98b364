"""Audio ingestion, onset-strength envelopes, peak picking, temporal shifting.

The onset path is a fixed log-mel spectral flux: uncentered Hann frames,
magnitude (not power) mel bands, a -35 dBFS noise gate, log offset 1e-6,
half-wave-rectified first difference summed over bands. Flux at frame f
reflects content entering the window's newest hop [f*hop + n_fft - hop,
f*hop + n_fft), so peak times use that hop's start; this bounds the timing
error of an abrupt synthetic burst to one hop regardless of alignment.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Waveform",
    "OnsetPeaks",
    "EnvelopeSeries",
    "WavFormatError",
    "load_wav",
    "save_wav",
    "resample",
    "onset_envelope",
    "pick_peaks",
    "shift_audio",
]

DEFAULT_RATE_HZ = 16000
LOG_OFFSET = 1e-6


class WavFormatError(ValueError):
    """Unreadable or non-PCM WAV; the message names the offending chunk."""


@dataclass
class Waveform:
    """Mono samples in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    rate_hz: int = DEFAULT_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"Waveform: samples must be 1-D, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError("Waveform: samples must be finite")
        if self.rate_hz <= 0:
            raise ValueError(f"Waveform: rate_hz must be positive, got {self.rate_hz}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz


@dataclass
class EnvelopeSeries:
    """Nonnegative strength values on a uniform grid: value i sits at
    start_s + i * hop_s."""

    values: np.ndarray
    hop_s: float
    start_s: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.hop_s <= 0:
            raise ValueError(f"EnvelopeSeries: hop_s must be positive, got {self.hop_s}")
        if self.values.size and self.values.min() < 0:
            raise ValueError("EnvelopeSeries: values must be nonnegative")

    def times(self) -> np.ndarray:
        return self.start_s + np.arange(len(self.values)) * self.hop_s


@dataclass
class OnsetPeaks:
    """Strictly increasing peak times in seconds."""

    times_s: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=np.float64)
        if self.times_s.size > 1 and not np.all(np.diff(self.times_s) > 0):
            raise ValueError("OnsetPeaks: times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times_s)


# -- WAV i/o -----------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Decode a RIFF PCM WAV (8/16/24-bit, mono or stereo) to floats in
    [-1, 1]. Stereo is averaged to mono; the file's rate is preserved."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise WavFormatError("RIFF: truncated header")
    tag, _size, wave_tag = struct.unpack("<4sI4s", raw[:12])
    if tag != b"RIFF" or wave_tag != b"WAVE":
        raise WavFormatError(f"RIFF: not a WAVE file (got {tag!r}/{wave_tag!r})")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, csize = struct.unpack("<4sI", raw[pos : pos + 8])
        body = raw[pos + 8 : pos + 8 + csize]
        if len(body) < csize:
            raise WavFormatError(f"{cid.decode('latin1')}: truncated chunk")
        if cid == b"fmt ":
            if csize < 16:
                raise WavFormatError("fmt : chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + csize + (csize & 1)
    if fmt is None:
        raise WavFormatError("fmt : chunk missing")
    if data is None:
        raise WavFormatError("data: chunk missing")

    audio_format, n_channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise WavFormatError(f"fmt : unsupported audio format {audio_format} (PCM only)")
    if n_channels < 1:
        raise WavFormatError(f"fmt : bad channel count {n_channels}")
    if bits == 8:
        x = np.frombuffer(data, dtype=np.uint8).astype(np.float64)
        x = (x - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        usable = len(data) - len(data) % 3
        b = np.frombuffer(data[:usable], dtype=np.uint8).reshape(-1, 3).astype(np.int64)
        val = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        val = np.where(val >= 1 << 23, val - (1 << 24), val)
        x = val.astype(np.float64) / float(1 << 23)
    else:
        raise WavFormatError(f"fmt : unsupported bit depth {bits} (8/16/24 PCM only)")

    frames = len(x) // n_channels
    x = x[: frames * n_channels].reshape(frames, n_channels).mean(axis=1)
    return Waveform(np.clip(x, -1.0, 1.0), rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, w.rate_hz, w.rate_hz * 2, 2, 16,
        b"data", len(data),
    )
    with open(path, "wb") as fh:
        fh.write(header + data)


def resample(w: Waveform, rate_hz: int) -> Waveform:
    """Linear-interpolation resample (used to bring foreign rates to 16 kHz)."""
    if w.rate_hz == rate_hz:
        return w
    n_out = int(round(len(w.samples) * rate_hz / w.rate_hz))
    t_out = np.arange(n_out) / rate_hz
    t_in = np.arange(len(w.samples)) / w.rate_hz
    return Waveform(np.interp(t_out, t_in, w.samples), rate_hz)


# -- onset strength ------------------------------------------------------------


def _mel_filterbank(n_mels: int, n_fft: int, rate_hz: int, fmin: float, fmax: float) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * rate_hz / n_fft
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        # slaney-style area normalization keeps bands comparable
        fb[m] *= 2.0 / max(hi - lo, 1e-12) * (rate_hz / n_fft)
    return fb


def onset_envelope(
    w: Waveform,
    n_fft: int = 512,
    hop: int = 128,
    n_mels: int = 64,
    fmin: float = 60.0,
    fmax: float = 7600.0,
    gate_db: float = -35.0,
) -> EnvelopeSeries:
    """Log-mel spectral flux of a clip.

    Frames are uncentered (frame f covers samples [f*hop, f*hop + n_fft)), so
    the series has floor((len - n_fft)/hop) + 1 values. Mel magnitudes are
    normalized to full scale and bands below gate_db are zeroed before the
    log, which makes stationary noise floors contribute exactly no flux.
    """
    x = w.samples
    if len(x) < n_fft:
        raise ValueError(f"onset_envelope: clip of {len(x)} samples shorter than one {n_fft}-sample frame")
    n_frames = (len(x) - n_fft) // hop + 1
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    spec = np.abs(np.fft.rfft(frames, axis=1)) / (n_fft / 2.0)
    fb = _mel_filterbank(n_mels, n_fft, w.rate_hz, fmin, min(fmax, w.rate_hz / 2.0))
    mel = spec @ fb.T
    mel[mel < 10.0 ** (gate_db / 20.0)] = 0.0
    logmel = np.log(mel + LOG_OFFSET)
    flux = np.zeros(n_frames)
    if n_frames > 1:
        flux[1:] = np.maximum(0.0, np.diff(logmel, axis=0)).sum(axis=1)
    return EnvelopeSeries(flux, hop_s=hop / w.rate_hz, start_s=(n_fft - hop) / w.rate_hz)


def pick_peaks(
    env: EnvelopeSeries,
    pre_max: int = 3,
    post_max: int = 3,
    delta: float = 0.07,
    wait_s: float = 0.03,
) -> OnsetPeaks:
    """Local-maximum picking: a peak must dominate the +-(pre/post) window,
    exceed the window's moving mean by delta, and fall at least wait_s after
    the previously kept peak (scan in time order)."""
    v = env.values
    if v.size == 0:
        raise ValueError("pick_peaks: empty envelope")
    times: list[float] = []
    last = -np.inf
    for i in range(len(v)):
        lo = max(0, i - pre_max)
        hi = min(len(v), i + post_max + 1)
        seg = v[lo:hi]
        if v[i] < seg.max() or (v[i] == seg.max() and np.argmax(seg) + lo != i):
            continue
        if v[i] < seg.mean() + delta:
            continue
        t = env.start_s + i * env.hop_s
        if t - last < wait_s:
            continue
        times.append(t)
        last = t
    return OnsetPeaks(np.asarray(times))


def shift_audio(w: Waveform, delay_s: float) -> Waveform:
    """Delay content by round(delay_s * rate) samples, zero-padding the head
    (or the tail for negative delays); length is preserved."""
    n = int(round(delay_s * w.rate_hz))
    if abs(n) >= len(w.samples):
        raise ValueError(f"shift_audio: delay {delay_s}s exceeds clip of {w.duration_s}s")
    out = np.zeros_like(w.samples)
    if n >= 0:
        out[n:] = w.samples[: len(w.samples) - n]
    else:
        out[:n] = w.samples[-n:]
    return Waveform(out, w.rate_hz)
