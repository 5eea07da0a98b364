"""Synchronization metrics over a pluggable video-to-audio backend.

CycleSync reconstructs audio from the video latents, extracts onset peaks on
both sides, and scores symmetric peak correspondence within a tolerance.
Two normalizations ship: `f1` (default; matched counts over set sizes, max 1
for full within-tolerance matching) and `paper` (matched counts over twice
the distinct-time union, whose maximum is 0.5 whenever matched peaks have
unequal times). AV-Align is the direct audio-peak/motion-peak baseline,
reimplemented as an IoU over greedy nearest matching.
"""
from __future__ import annotations

import shlex
import subprocess
import tempfile
import os
from dataclasses import dataclass, field

import numpy as np

from .audio_dsp import EnvelopeSeries, OnsetPeaks, Waveform, onset_envelope, pick_peaks
from .synth_world import ClipRecord, LatentSequence, OracleV2A
from .diffcore import sptn_bytes

__all__ = [
    "MatchResult",
    "SyncReport",
    "match_peaks",
    "cyclesync_score",
    "cyclesync",
    "motion_series",
    "motion_peaks",
    "av_align",
    "delay_sweep",
    "make_backend",
    "ExternalV2A",
    "AV_ALIGN_DELTA_S",
]

# AV-Align's conventional operating point: one frame at 6 fps
AV_ALIGN_DELTA_S = 1.0 / 6.0


@dataclass(frozen=True)
class MatchResult:
    matched_a: int
    matched_b: int
    n_a: int
    n_b: int
    delta_s: float
    n_union: int  # distinct times across both sets (paper-mode denominator)

    def __post_init__(self):
        if not (0 <= self.matched_a <= self.n_a and 0 <= self.matched_b <= self.n_b):
            raise ValueError("MatchResult: matched counts exceed set sizes")


def match_peaks(a: OnsetPeaks, b: OnsetPeaks, delta_s: float) -> MatchResult:
    """Symmetric tolerance matching by a sorted two-pointer scan: matched_a
    counts peaks of A with any partner in B within delta_s, and vice versa."""
    if delta_s < 0:
        raise ValueError(f"match_peaks: delta_s must be >= 0, got {delta_s}")
    ta, tb = a.times_s, b.times_s

    def one_side(xs: np.ndarray, ys: np.ndarray) -> int:
        # the match predicate is literally |x - y| <= delta so boundary floats
        # agree exactly with the quadratic definition
        count = 0
        j = 0
        for x in xs:
            while j < len(ys) and ys[j] < x and abs(x - ys[j]) > delta_s:
                j += 1
            if j < len(ys) and abs(x - ys[j]) <= delta_s:
                count += 1
        return count

    union = np.union1d(ta, tb)
    return MatchResult(
        matched_a=one_side(ta, tb),
        matched_b=one_side(tb, ta),
        n_a=len(ta),
        n_b=len(tb),
        delta_s=delta_s,
        n_union=len(union),
    )


def cyclesync_score(m: MatchResult, mode: str = "f1") -> float:
    """Normalize a MatchResult. Empty-set conventions: both sides empty is a
    perfect 1.0 (silence against silence), exactly one empty is 0.0."""
    if m.n_a == 0 and m.n_b == 0:
        return 1.0
    if m.n_a == 0 or m.n_b == 0:
        return 0.0
    if mode == "f1":
        return (m.matched_a + m.matched_b) / (m.n_a + m.n_b)
    if mode == "paper":
        return (m.matched_a + m.matched_b) / (2.0 * m.n_union)
    raise ValueError(f"cyclesync_score: unknown mode {mode!r} (use 'f1' or 'paper')")


def motion_series(v: LatentSequence) -> EnvelopeSeries:
    """Per-transition motion magnitude ||z_l - z_{l-1}||_2; value l-1 sits at
    the transition midpoint (l - 0.5) / frame_rate."""
    if v.n_frames < 2:
        raise ValueError(f"motion_series: need at least 2 frames, got {v.n_frames}")
    m = np.linalg.norm(np.diff(v.latents, axis=0), axis=1)
    return EnvelopeSeries(m, hop_s=1.0 / v.frame_rate_hz, start_s=0.5 / v.frame_rate_hz)


def motion_peaks(v: LatentSequence) -> OnsetPeaks:
    return pick_peaks(motion_series(v))


def cyclesync(
    audio: Waveform,
    video: LatentSequence,
    backend,
    delta_s: float = 0.05,
    mode: str = "f1",
) -> float:
    """Reconstruct audio from the video via the backend and score onset-peak
    correspondence against the original audio."""
    if abs(audio.duration_s - video.duration_s) > 1.0 / video.frame_rate_hz + 1e-9:
        raise ValueError(
            f"cyclesync: audio ({audio.duration_s:.3f}s) and video ({video.duration_s:.3f}s) "
            "durations differ by more than one frame"
        )
    recon = backend.reconstruct(video)
    peaks_ref = pick_peaks(onset_envelope(audio))
    peaks_rec = pick_peaks(onset_envelope(recon))
    return cyclesync_score(match_peaks(peaks_ref, peaks_rec, delta_s), mode=mode)


def av_align(audio_peaks: OnsetPeaks, motion_pk: OnsetPeaks, delta_s: float) -> float:
    """IoU of greedily nearest-matched peak pairs within delta_s:
    matched / (n_a + n_b - matched). Symmetric in its arguments."""
    if delta_s < 0:
        raise ValueError(f"av_align: delta_s must be >= 0, got {delta_s}")
    ta, tb = audio_peaks.times_s, motion_pk.times_s
    if len(ta) == 0 and len(tb) == 0:
        return 1.0
    if len(ta) == 0 or len(tb) == 0:
        return 0.0
    pairs = [
        (abs(x - y), i, j)
        for i, x in enumerate(ta)
        for j, y in enumerate(tb)
        if abs(x - y) <= delta_s
    ]
    pairs.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matched = 0
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matched += 1
    return matched / (len(ta) + len(tb) - matched)


# -- backends ------------------------------------------------------------------


class ExternalV2A:
    """Pipes SPTN latents into an external command and reads WAV from its
    stdout, so a real V2A model can replace the oracle."""

    def __init__(self, command: str):
        self.command = command
        self.name = f"external:{command}"

    def reconstruct(self, v: LatentSequence) -> Waveform:
        from .audio_dsp import load_wav

        proc = subprocess.run(
            shlex.split(self.command),
            input=sptn_bytes(v.latents),
            stdout=subprocess.PIPE,
            check=True,
        )
        with tempfile.NamedTemporaryFile(suffix=".wav", delete=False) as fh:
            fh.write(proc.stdout)
            path = fh.name
        try:
            return load_wav(path)
        finally:
            os.unlink(path)


def make_backend(name: str):
    """'oracle' or 'external:<command>'."""
    if name == "oracle":
        return OracleV2A()
    if name.startswith("external:"):
        return ExternalV2A(name.split(":", 1)[1])
    raise ValueError(f"make_backend: unknown backend {name!r} (use 'oracle' or 'external:<cmd>')")


# -- delay sweep -----------------------------------------------------------------


@dataclass
class SyncReport:
    """Per-clip metric rows plus per-(metric, delay) aggregates. The 95% CI
    half-width convention is 1.96 * sample std / sqrt(n)."""

    rows: list = field(default_factory=list)        # dicts: clip_id, metric, delay_s, score
    aggregates: list = field(default_factory=list)  # dicts: metric, delay_s, mean, std, ci95, pct_change

    def to_csv(self) -> str:
        lines = ["clip_id,metric,delay_s,score_x100"]
        for r in self.rows:
            lines.append(f"{r['clip_id']},{r['metric']},{r['delay_s']:.3f},{100.0 * r['score']:.4f}")
        return "\n".join(lines) + "\n"

    def aggregate_json(self) -> list:
        return self.aggregates


def _aggregate(scores: np.ndarray) -> tuple[float, float, float]:
    mean = float(np.mean(scores))
    std = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    return mean, std, 1.96 * std / np.sqrt(len(scores))


def delay_sweep(
    records: list[ClipRecord],
    backend,
    delays: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    metrics: tuple = ("cyclesync", "av_align"),
    delta_s: float = 0.05,
    av_delta_s: float = AV_ALIGN_DELTA_S,
    mode: str = "f1",
    window_start_s: float = 0.5,
    window_duration_s: float = 2.0,
    threads: int = 1,
) -> SyncReport:
    """Controlled delay-shift protocol: the audio window is fixed at
    [window_start_s, window_start_s + duration); for each delay d the video
    latents are windowed d earlier, i.e. the video runs d late relative to
    its audio. Clips must carry window_start_s of head margin; delay 0 on
    exactly window-sized clips needs none."""
    if not records:
        raise ValueError("delay_sweep: no clips")
    max_delay = max(delays)

    def eval_clip(rec: ClipRecord):
        wav = rec.load_wav()
        lat = rec.load_latents()
        fr = lat.frame_rate_hz
        rate = wav.rate_hz
        n_frames = int(round(window_duration_s * fr))
        head_frames = int(round(window_start_s * fr))
        if head_frames - int(round(max_delay * fr)) < 0 and max_delay > 0:
            raise ValueError(
                f"delay_sweep: clip {rec.clip_id} has {window_start_s}s head margin, "
                f"cannot shift by {max_delay}s"
            )
        if lat.n_frames < head_frames + n_frames:
            raise ValueError(f"delay_sweep: clip {rec.clip_id} shorter than window + margin")
        s0 = int(round(window_start_s * rate))
        audio_win = Waveform(wav.samples[s0 : s0 + int(round(window_duration_s * rate))], rate)
        audio_pk = pick_peaks(onset_envelope(audio_win))
        out = []
        for d in delays:
            f0 = head_frames - int(round(d * fr))
            lat_win = LatentSequence(lat.latents[f0 : f0 + n_frames], fr)
            for metric in metrics:
                try:
                    if metric == "cyclesync":
                        score = cyclesync(audio_win, lat_win, backend, delta_s=delta_s, mode=mode)
                    elif metric == "av_align":
                        score = av_align(audio_pk, motion_peaks(lat_win), av_delta_s)
                    else:
                        raise ValueError(f"delay_sweep: unknown metric {metric!r}")
                except Exception as exc:
                    raise RuntimeError(f"delay_sweep: clip {rec.clip_id}: {exc}") from exc
                out.append({"clip_id": rec.clip_id, "metric": metric, "delay_s": d, "score": score})
        return out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_clip = list(pool.map(eval_clip, records))
    else:
        per_clip = [eval_clip(r) for r in records]

    report = SyncReport()
    for rows in per_clip:  # ordered fold by clip
        report.rows.extend(rows)

    base: dict[str, float] = {}
    for metric in metrics:
        for d in delays:
            scores = np.array(
                [r["score"] for r in report.rows if r["metric"] == metric and r["delay_s"] == d]
            )
            mean, std, ci = _aggregate(scores)
            if d == min(delays):
                base[metric] = mean
            pct = 0.0 if base[metric] == 0 else 100.0 * (mean - base[metric]) / base[metric]
            report.aggregates.append(
                {
                    "metric": metric,
                    "delay_s": d,
                    "mean": mean,
                    "std": std,
                    "ci95": ci,
                    "pct_change": pct,
                }
            )
    return report
