"""Deterministic Euler flow-matching sampler with Classifier-Free Guidance and
Audio Sync Guidance composed additively.

Every step evaluates three branches of the same network: full (audio layers
on), off-sync (audio layers bypassed), and null (class 0, no audio); the
guided velocity is

    v = v_full + w_audio * (v_full - v_offsync) + w_text * (v_full - v_null).

The text weight uses w_text_first on the first denoising step only (the
one-chunk analog of the backbone's per-latent schedule); the audio weight is
constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Rng, ShapeError, Tensor, no_grad
from .synth_world import AudioFeatureSequence, LatentSequence
from .toy_model import Model, _forward_batch

__all__ = [
    "GuidanceConfig",
    "SampleRequest",
    "guided_prediction",
    "sample",
    "sample_with_trace",
    "sample_offsync",
    "sample_batch",
    "skip_block_probe",
]


@dataclass(frozen=True)
class GuidanceConfig:
    w_audio: float = 2.0
    w_text: float = 4.0
    w_text_first: float = 7.0
    steps: int = 30

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"GuidanceConfig: steps must be >= 1, got {self.steps}")
        for name in ("w_audio", "w_text", "w_text_first"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"GuidanceConfig: {name} must be finite")


@dataclass
class SampleRequest:
    model: Model
    init_latent: np.ndarray          # first-frame latent (C,)
    audio: AudioFeatureSequence
    class_id: int
    seed: int
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    skip_blocks: frozenset = frozenset()

    def __post_init__(self):
        self.init_latent = np.asarray(self.init_latent, dtype=np.float64)
        if self.init_latent.shape != (self.model.config.latent_channels,):
            raise ValueError(
                f"SampleRequest: init_latent shape {self.init_latent.shape} != "
                f"({self.model.config.latent_channels},)"
            )

    @property
    def n_frames(self) -> int:
        return self.audio.features.shape[0] // self.model.config.alpha


def guided_prediction(pred_full, pred_offsync, pred_null, w_audio: float, w_text: float):
    """Additive composition of sync guidance and CFG. Pure arithmetic: with
    both weights zero the full prediction is returned untouched."""
    arrays = [np.asarray(getattr(p, "data", p), dtype=np.float64) for p in (pred_full, pred_offsync, pred_null)]
    if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
        raise ShapeError(
            f"guided_prediction: shapes {arrays[0].shape}, {arrays[1].shape}, {arrays[2].shape} must match"
        )
    if w_audio == 0.0 and w_text == 0.0:
        return pred_full
    full, off, null = arrays
    out = full + w_audio * (full - off) + w_text * (full - null)
    return Tensor(out) if isinstance(pred_full, Tensor) else out


def _euler_loop(reqs: list[SampleRequest], full_use_audio: bool, w_audio_override: float | None):
    """Shared Euler integration for a group of requests with identical
    geometry and guidance. Returns (latents (B,T,C), per-step norm traces)."""
    model = reqs[0].model
    cfg = model.config
    g = reqs[0].guidance
    steps = g.steps
    t_frames = reqs[0].n_frames
    c = cfg.latent_channels
    b = len(reqs)

    eps0 = np.stack([Rng(r.seed, stream=101).normal((t_frames, c)) for r in reqs])
    init = np.stack([r.init_latent for r in reqs])
    audio = Tensor(np.stack([r.audio.features for r in reqs]))
    cls = np.array([r.class_id for r in reqs], dtype=np.intp)
    null_cls = np.zeros(b, dtype=np.intp)
    skip = reqs[0].skip_blocks
    w_audio = g.w_audio if w_audio_override is None else w_audio_override

    x = eps0.copy()  # t = 0: the first-frame path starts at its own noise row
    norms = []
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t_k = k / steps
            tb = np.full(b, t_k)
            xt = Tensor(x)
            pred_full = _forward_batch(model, xt, tb, cls, audio, full_use_audio, skip).data
            pred_off = _forward_batch(model, xt, tb, cls, audio, False, skip).data
            pred_null = _forward_batch(model, xt, tb, null_cls, audio, False, skip).data
            w_t = g.w_text_first if k == 0 else g.w_text
            v = guided_prediction(pred_full, pred_off, pred_null, w_audio, w_t)
            x = x + dt * v
            if not np.isfinite(x).all():
                raise FloatingPointError(f"sample: non-finite state at step {k}")
            t_next = (k + 1) / steps
            x[:, 0, :] = (1.0 - t_next) * eps0[:, 0, :] + t_next * init
            norms.append([float(np.linalg.norm(v[i])) for i in range(b)])
    return x, norms


def sample(req: SampleRequest) -> LatentSequence:
    """Guided sample: Euler integration from seeded noise at t=0 to t=1, three
    branch evaluations per step, first latent clamped to the request's
    init_latent. Deterministic given the seed."""
    out, _ = _euler_loop([req], True, None)
    return LatentSequence(out[0])


def sample_with_trace(req: SampleRequest) -> tuple[LatentSequence, dict]:
    out, norms = _euler_loop([req], True, None)
    trace = {
        "seed": req.seed,
        "class_id": req.class_id,
        "steps": req.guidance.steps,
        "w_audio": req.guidance.w_audio,
        "w_text": req.guidance.w_text,
        "w_text_first": req.guidance.w_text_first,
        "skip_blocks": sorted(req.skip_blocks),
        "step_norms": [n[0] for n in norms],
    }
    return LatentSequence(out[0]), trace


def sample_offsync(req: SampleRequest) -> LatentSequence:
    """The off-sync branch replaces the full branch and w_audio is forced to
    zero; output is exactly independent of the request's audio features."""
    out, _ = _euler_loop([req], False, 0.0)
    return LatentSequence(out[0])


def sample_batch(reqs: list[SampleRequest], offsync: bool = False) -> list[LatentSequence]:
    """Batched sampling for the experiment harness: all requests must share
    guidance, skip set, and geometry. Same semantics as per-request calls."""
    if not reqs:
        return []
    g0, s0, n0 = reqs[0].guidance, reqs[0].skip_blocks, reqs[0].n_frames
    if any(r.guidance != g0 or r.skip_blocks != s0 or r.n_frames != n0 for r in reqs[1:]):
        raise ValueError("sample_batch: requests must share guidance, skip_blocks, and length")
    out, _ = _euler_loop(reqs, not offsync, 0.0 if offsync else None)
    return [LatentSequence(out[i]) for i in range(len(reqs))]


def skip_block_probe(req: SampleRequest, block_index: int | None) -> LatentSequence:
    """Sample with one transformer block bypassed (None = no skip baseline)."""
    n_blocks = req.model.config.n_blocks
    if block_index is None:
        return sample(req)
    if not 0 <= block_index < n_blocks:
        raise ValueError(f"skip_block_probe: block {block_index} outside [0, {n_blocks})")
    probe = replace_skip(req, frozenset({block_index}))
    return sample(probe)


def skip_block_divergence(req: SampleRequest) -> tuple[list[dict], LatentSequence]:
    """Probe every block: one row per block with the Frobenius divergence from
    the unskipped baseline, plus an early-frame divergence (frames 1-4, the
    appearance region; frame 0 is clamped to the request's init latent)."""
    baseline = sample(req)
    rows = []
    for b in range(req.model.config.n_blocks):
        out = skip_block_probe(req, b)
        diff = out.latents - baseline.latents
        rows.append(
            {
                "block": b,
                "is_audio_block": b in req.model.config.audio_blocks,
                "divergence": float(np.linalg.norm(diff)),
                "early_frame_divergence": float(np.linalg.norm(diff[1:5])),
            }
        )
    return rows, baseline


def skip_divergence_csv(rows: list[dict]) -> str:
    lines = ["block,is_audio_block,divergence,early_frame_divergence"]
    for r in rows:
        lines.append(
            f"{r['block']},{int(r['is_audio_block'])},{r['divergence']:.6f},{r['early_frame_divergence']:.6f}"
        )
    return "\n".join(lines) + "\n"


def replace_skip(req: SampleRequest, skip: frozenset) -> SampleRequest:
    return SampleRequest(
        model=req.model,
        init_latent=req.init_latent,
        audio=req.audio,
        class_id=req.class_id,
        seed=req.seed,
        guidance=req.guidance,
        skip_blocks=skip,
    )
