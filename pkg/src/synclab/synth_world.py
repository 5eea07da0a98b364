"""Paired synthetic audio + latent "video" with controllable motion lead/lag,
plus the oracle video-to-audio backend that closes the CycleSync loop.

Events drive both modalities from one script: the audio gets a class-carrier
burst at each event time; the latents step smoothly on the event's class
channels, with the steepest change (the motion peak) at the event time and
the motion spread over [time - lead, time + lag]. Background channels carry a
slow seeded drift.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio_dsp import (
    DEFAULT_RATE_HZ,
    EnvelopeSeries,
    LOG_OFFSET,
    Waveform,
    _mel_filterbank,
    pick_peaks,
    save_wav,
)
from .diffcore import Rng, read_sptn, write_sptn

__all__ = [
    "Event",
    "EventScript",
    "LatentSequence",
    "AudioFeatureSequence",
    "gen_audio",
    "gen_latents",
    "gen_audio_features",
    "OracleV2A",
    "gen_dataset",
    "load_manifest",
    "ClipRecord",
]

FRAME_RATE_HZ = 24
LATENT_CHANNELS = 8
FEATURE_RATE_HZ = 96   # 4 audio features per latent frame
FEATURE_DIM = 16
BURST_DECAY_S = 0.03
BURST_LEN_S = 0.15
# half a motion bump always exists on each side of an event, so zero-lead/lag
# events still move (total intrinsic width 1.5 frames)
BUMP_HALF_WIDTH_S = 0.75 / FRAME_RATE_HZ
STEP_SCALE = 2.0

clipped_sample_count = 0


def class_carrier_hz(class_id: int) -> float:
    return 440.0 * 2.0 ** ((class_id - 1) % 4)


@dataclass
class Event:
    time_s: float
    class_id: int
    motion_lead_s: float = 0.0
    motion_lag_s: float = 0.0
    amplitude: float = 1.0


@dataclass
class EventScript:
    """Ground-truth event list; generates both modalities and serves as
    evaluation truth."""

    duration_s: float
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.time_s)
        for e in self.events:
            if not 0.0 <= e.time_s <= self.duration_s:
                raise ValueError(f"EventScript: event time {e.time_s} outside [0, {self.duration_s}]")
            if e.motion_lead_s < 0 or e.motion_lag_s < 0:
                raise ValueError("EventScript: lead/lag must be nonnegative")
            if not 0.0 < e.amplitude <= 1.0:
                raise ValueError(f"EventScript: amplitude {e.amplitude} outside (0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "duration_s": self.duration_s,
                "events": [
                    {
                        "time_s": e.time_s,
                        "class_id": e.class_id,
                        "motion_lead_s": e.motion_lead_s,
                        "motion_lag_s": e.motion_lag_s,
                        "amplitude": e.amplitude,
                    }
                    for e in self.events
                ],
            },
            separators=(",", ":"),
        )

    @staticmethod
    def from_json(text: str) -> "EventScript":
        obj = json.loads(text)
        return EventScript(obj["duration_s"], [Event(**e) for e in obj["events"]])


@dataclass
class LatentSequence:
    """Per-frame toy video latents, T x C."""

    latents: np.ndarray
    frame_rate_hz: int = FRAME_RATE_HZ

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2:
            raise ValueError(f"LatentSequence: latents must be T x C, got {self.latents.shape}")
        if not np.isfinite(self.latents).all():
            raise ValueError("LatentSequence: latents must be finite")

    @property
    def n_frames(self) -> int:
        return self.latents.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz


@dataclass
class AudioFeatureSequence:
    """Synthetic stand-in for a pretrained audio encoder: L x D feature rows."""

    features: np.ndarray
    rate_hz: int = FEATURE_RATE_HZ

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"AudioFeatureSequence: features must be L x D, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("AudioFeatureSequence: features must be finite")


def gen_audio(script: EventScript, rng: Rng, noise_db: float = -40.0) -> Waveform:
    """Class-carrier bursts (30 ms exponential decay) at event times over a
    white-noise floor. Overlap is hard-clipped to [-1, 1] and counted."""
    global clipped_sample_count
    rate = DEFAULT_RATE_HZ
    n = int(round(script.duration_s * rate))
    x = rng.normal((n,)) * 10.0 ** (noise_db / 20.0) if noise_db is not None else np.zeros(n)
    for e in script.events:
        s0 = int(round(e.time_s * rate))
        length = min(int(BURST_LEN_S * rate), n - s0)
        if length <= 0:
            continue
        t = np.arange(length) / rate
        x[s0 : s0 + length] += e.amplitude * np.exp(-t / BURST_DECAY_S) * np.sin(
            2.0 * np.pi * class_carrier_hz(e.class_id) * t
        )
    clipped = np.abs(x) > 1.0
    if clipped.any():
        clipped_sample_count += int(clipped.sum())
        x = np.clip(x, -1.0, 1.0)
    return Waveform(x, rate)


def class_channels(class_id: int, n_channels: int = LATENT_CHANNELS) -> tuple[int, int]:
    base = (2 * (class_id - 1)) % n_channels
    return base, base + 1


def _step_displacement(frame_times: np.ndarray, e: Event, step: float | None = None) -> np.ndarray:
    """Closed-form integral of a half-sine motion bump supported on
    [time - lead - half, time + lag + half] with its peak at the event time.
    Half-sine halves keep the 10%-of-peak motion onset close to the bump's
    left support edge, unlike raised-cosine halves."""
    s0 = e.time_s - e.motion_lead_s - BUMP_HALF_WIDTH_S
    s1 = e.time_s + e.motion_lag_s + BUMP_HALF_WIDTH_S
    t_pk = e.time_s
    if step is None:
        step = STEP_SCALE * e.amplitude
    rise, fall = t_pk - s0, s1 - t_pk
    h = np.pi * step / (2.0 * (rise + fall))

    out = np.zeros_like(frame_times)
    tt = frame_times
    in_rise = (tt > s0) & (tt <= t_pk)
    u = (tt[in_rise] - s0) / rise
    out[in_rise] = h * rise * (2.0 / np.pi) * (1.0 - np.cos(0.5 * np.pi * u))
    in_fall = (tt > t_pk) & (tt < s1)
    v = (tt[in_fall] - t_pk) / fall
    out[in_fall] = h * rise * (2.0 / np.pi) + h * fall * (2.0 / np.pi) * np.sin(0.5 * np.pi * v)
    out[tt >= s1] = step
    return out


def gen_latents(
    script: EventScript,
    rng: Rng,
    n_channels: int = LATENT_CHANNELS,
    frame_rate_hz: int = FRAME_RATE_HZ,
    drift_scale: float = 0.25,
    drift_hz: tuple[float, float] = (0.1, 0.5),
    micro_motion_rate_hz: float = 0.0,
) -> LatentSequence:
    """Event-class channels follow smooth steps (motion peaks at event times);
    the remaining channels follow a slow seeded sinusoid drift.

    micro_motion_rate_hz > 0 sprinkles small audio-less motion bumps at random
    times (the "incidental motion" texture of real footage: hovering, residual
    wobble). These never touch the audio, only the latents.
    """
    n_frames = int(round(script.duration_s * frame_rate_hz))
    times = np.arange(n_frames) / frame_rate_hz
    z = np.zeros((n_frames, n_channels))

    used: set[int] = set()
    for k, e in enumerate(script.events):
        c0, c1 = class_channels(e.class_id, n_channels)
        used.update((c0, c1))
        disp = _step_displacement(times, e)
        sign = 1.0 if k % 2 == 0 else -1.0
        z[:, c0] += sign * disp
        z[:, c1] += sign * 0.6 * disp

    for c in range(n_channels):
        if c in used:
            continue
        # 3 slow sinusoids per background channel
        freqs = rng.uniform(drift_hz[0], drift_hz[1], (3,))
        amps = drift_scale * rng.uniform(0.3, 1.0, (3,)) / 3.0
        phases = rng.uniform(0.0, 2.0 * np.pi, (3,))
        z[:, c] = (amps[None, :] * np.sin(2.0 * np.pi * times[:, None] * freqs[None, :] + phases[None, :])).sum(axis=1)
        z[:, c] -= z[0, c]

    if micro_motion_rate_hz > 0.0:
        n_micro = int(rng.integers(0, max(1, int(round(2.0 * micro_motion_rate_hz * script.duration_s))) + 1))
        for k in range(n_micro):
            t0 = float(rng.uniform(0.15, script.duration_s - 0.15))
            width = float(rng.uniform(0.02, 0.08))
            pseudo = Event(time_s=t0, class_id=1, motion_lead_s=width, motion_lag_s=width, amplitude=1.0)
            disp = _step_displacement(times, pseudo, step=float(rng.uniform(0.5, 1.1)))
            c = int(rng.integers(0, n_channels))
            sign = 1.0 if k % 2 == 0 else -1.0
            z[:, c] += sign * disp
    return LatentSequence(z, frame_rate_hz)


def gen_audio_features(w: Waveform, n_mels: int = 32, n_fft: int = 512, dim: int = FEATURE_DIM) -> AudioFeatureSequence:
    """Gated log-mel frames on the 96 Hz grid, projected to `dim` dims with a
    fixed seeded random matrix. Deterministic given the waveform."""
    if w.rate_hz != DEFAULT_RATE_HZ:
        raise ValueError(f"gen_audio_features: expected {DEFAULT_RATE_HZ} Hz audio, got {w.rate_hz}")
    n_feat = int(round(w.duration_s * FEATURE_RATE_HZ))
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    fb = _mel_filterbank(n_mels, n_fft, w.rate_hz, 60.0, 7600.0)
    x = np.concatenate([w.samples, np.zeros(n_fft)])
    starts = np.round(np.arange(n_feat) * w.rate_hz / FEATURE_RATE_HZ).astype(int)
    frames = x[starts[:, None] + np.arange(n_fft)[None, :]] * window
    spec = np.abs(np.fft.rfft(frames, axis=1)) / (n_fft / 2.0)
    mel = spec @ fb.T
    mel[mel < 10.0 ** (-35.0 / 20.0)] = 0.0
    logmel = (np.log(mel + LOG_OFFSET) - np.log(LOG_OFFSET)) / 10.0
    proj = Rng(0x5EED_FEA7).normal((n_mels, dim)) / np.sqrt(n_mels)
    return AudioFeatureSequence(logmel @ proj, FEATURE_RATE_HZ)


def motion_magnitude(latents: np.ndarray) -> np.ndarray:
    """Per-transition motion magnitude ||z_l - z_{l-1}||_2, length T - 1."""
    return np.linalg.norm(np.diff(latents, axis=0), axis=1)


class OracleV2A:
    """Motion-driven synthesizer standing in for a pretrained V2A model.

    Reconstruction: peak-pick the latent motion-magnitude series and emit a
    decaying burst at each motion-peak time. Deterministic per input; mirrors
    how gen_latents encodes events, so the cycle closes for aligned data.
    """

    name = "oracle"

    def __init__(self, carrier_hz: float = 1000.0, amplitude: float = 0.7):
        self.carrier_hz = carrier_hz
        self.amplitude = amplitude

    def reconstruct(self, v: LatentSequence) -> Waveform:
        rate = DEFAULT_RATE_HZ
        n = int(round(v.duration_s * rate))
        x = np.zeros(n)
        m = motion_magnitude(v.latents)
        if m.size:
            env = EnvelopeSeries(m, hop_s=1.0 / v.frame_rate_hz, start_s=0.5 / v.frame_rate_hz)
            for t0 in pick_peaks(env).times_s:
                s0 = int(round(t0 * rate))
                length = min(int(BURST_LEN_S * rate), n - s0)
                if length <= 0:
                    continue
                t = np.arange(length) / rate
                x[s0 : s0 + length] += self.amplitude * np.exp(-t / BURST_DECAY_S) * np.sin(
                    2.0 * np.pi * self.carrier_hz * t
                )
        return Waveform(np.clip(x, -1.0, 1.0), rate)


@dataclass
class ClipRecord:
    clip_id: str
    wav_path: str
    latents_path: str
    features_path: str
    script: EventScript

    def load_wav(self) -> Waveform:
        from .audio_dsp import load_wav

        return load_wav(self.wav_path)

    def load_latents(self) -> LatentSequence:
        return LatentSequence(read_sptn(self.latents_path))

    def load_features(self) -> AudioFeatureSequence:
        return AudioFeatureSequence(read_sptn(self.features_path))


def random_script(
    rng: Rng,
    duration_s: float,
    events_range: tuple[int, int] = (1, 4),
    lead_range: tuple[float, float] = (0.0, 0.3),
    lag_range: tuple[float, float] = (0.0, 0.3),
    amp_range: tuple[float, float] = (0.4, 1.0),
    n_classes: int = 3,
    margin_s: float = 0.35,
    min_gap_s: float = 0.3,
) -> EventScript:
    """One clip's ground truth: a single class, 1..4 events with a minimum gap."""
    class_id = int(rng.integers(1, n_classes + 1))
    n_events = int(rng.integers(events_range[0], events_range[1] + 1))
    times: list[float] = []
    for _ in range(32):
        if len(times) >= n_events:
            break
        t = float(rng.uniform(margin_s, duration_s - margin_s))
        if all(abs(t - u) >= min_gap_s for u in times):
            times.append(t)
    events = [
        Event(
            time_s=t,
            class_id=class_id,
            motion_lead_s=float(rng.uniform(*lead_range)),
            motion_lag_s=float(rng.uniform(*lag_range)),
            amplitude=float(rng.uniform(*amp_range)),
        )
        for t in sorted(times)
    ]
    return EventScript(duration_s, events)


def gen_dataset(
    out_dir,
    seed: int,
    n_clips: int,
    duration_s: float = 2.0,
    events_range: tuple[int, int] = (1, 4),
    lead_range: tuple[float, float] = (0.0, 0.3),
    lag_range: tuple[float, float] = (0.0, 0.3),
    amp_range: tuple[float, float] = (0.4, 1.0),
    n_classes: int = 3,
    drift_scale: float = 0.25,
    drift_hz: tuple[float, float] = (0.1, 0.5),
    micro_motion_rate_hz: float = 0.0,
    noise_db: float = -40.0,
    margin_s: float = 0.35,
) -> str:
    """Write n_clips of (wav, latents, features, script) plus a JSON-lines
    manifest. Fully reproducible from the seed: clip i uses stream
    Rng(seed).split(i), so parallel generation cannot reorder results."""
    if n_clips <= 0:
        raise ValueError(f"gen_dataset: n_clips must be positive, got {n_clips}")
    os.makedirs(out_dir, exist_ok=True)
    root = Rng(seed)
    rows = []
    for i in range(n_clips):
        crng = root.split(i)
        script = random_script(
            crng, duration_s, events_range, lead_range, lag_range, amp_range, n_classes, margin_s
        )
        wave = gen_audio(script, crng.split(1), noise_db=noise_db)
        latents = gen_latents(
            script,
            crng.split(2),
            drift_scale=drift_scale,
            drift_hz=drift_hz,
            micro_motion_rate_hz=micro_motion_rate_hz,
        )
        feats = gen_audio_features(wave)

        cid = f"clip_{i:05d}"
        names = {
            "wav": f"{cid}.wav",
            "latents": f"{cid}.latents.sptn",
            "features": f"{cid}.features.sptn",
            "script": f"{cid}.script.json",
        }
        save_wav(os.path.join(out_dir, names["wav"]), wave)
        write_sptn(os.path.join(out_dir, names["latents"]), latents.latents)
        write_sptn(os.path.join(out_dir, names["features"]), feats.features)
        with open(os.path.join(out_dir, names["script"]), "w") as fh:
            fh.write(script.to_json())
        rows.append(json.dumps({"id": cid, **names}, separators=(",", ":")))

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest_path


def load_manifest(manifest_path) -> list[ClipRecord]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            with open(os.path.join(base, row["script"])) as sf:
                script = EventScript.from_json(sf.read())
            records.append(
                ClipRecord(
                    clip_id=row["id"],
                    wav_path=os.path.join(base, row["wav"]),
                    latents_path=os.path.join(base, row["latents"]),
                    features_path=os.path.join(base, row["features"]),
                    script=script,
                )
            )
    return records
