"""A small flow-matching diffusion transformer: joint self-attention over a
class token plus per-frame latents, with audio cross-attention (shared rotary
positional embedder over video queries and audio keys) in the later blocks.

Conventions fixed here:
  * velocity prediction: t ~ U[0,1], x_t = (1-t)*eps + t*z, target v = z - eps;
  * the motion-aware loss acts on the one-step latent reconstruction
    x_t + (1-t)*v_hat, so its motion weighting lives in latent space;
  * audio features are zeroed (not absent) for the null condition; with
    bias-free key/value projections that is exactly a bypassed audio layer.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import (
    Rng,
    ShapeError,
    Tensor,
    cat,
    no_grad,
    read_sptn_stream,
    softmax,
    sptn_bytes,
)

__all__ = [
    "ModelConfig",
    "PositionIndex",
    "Model",
    "rope_rotate",
    "audio_segment",
    "audio_cross_attention",
    "forward",
    "motion_aware_loss",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"SCKP"


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 6
    d_model: int = 64
    n_heads: int = 4
    audio_blocks: tuple = (3, 4, 5)
    rope_base: float = 10000.0
    alpha: int = 4                 # audio features per latent frame
    delta_window: int = 1          # +- frames of audio visible per latent
    class_vocab: int = 4           # id 0 reserved for the null condition
    latent_channels: int = 8
    audio_dim: int = 16
    use_audio_rope: bool = True
    mlp_ratio: int = 4
    cond_dropout: float = 0.1

    def __post_init__(self):
        if not set(self.audio_blocks) <= set(range(self.n_blocks)):
            raise ValueError(f"audio_blocks {self.audio_blocks} outside [0, {self.n_blocks})")
        if self.d_model % (2 * self.n_heads) != 0:
            raise ValueError(f"d_model {self.d_model} must be divisible by 2*n_heads={2 * self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class PositionIndex:
    """3-D rotary coordinate (l, h, w); the toy's one-vector-per-frame latents
    pin h = w = 0, but the embedder accepts all three so a spatial extension
    is a config change."""

    l: float
    h: float = 0.0
    w: float = 0.0

    def __post_init__(self):
        if self.l < 0:
            raise ValueError(f"PositionIndex: l must be >= 0, got {self.l}")


# -- rotary embedding ----------------------------------------------------------


def _pair_freqs(n_pairs: int, base: float) -> np.ndarray:
    if n_pairs == 0:
        return np.empty(0)
    return base ** (-np.arange(n_pairs) / n_pairs)


def _rope3d_angles(positions: np.ndarray, head_dim: int, base: float) -> np.ndarray:
    """Per-pair rotation angles for 3-D coordinates (..., 3) -> (..., head_dim/2).
    Pairs split (time, h, w) = (hd/2 - 2*(hd/8), hd/8, hd/8)."""
    pos = np.asarray(positions, dtype=np.float64)
    n_pairs = head_dim // 2
    ph = pw = head_dim // 8
    pt = n_pairs - ph - pw
    ang = [pos[..., 0:1] * _pair_freqs(pt, base)]
    if ph:
        ang.append(pos[..., 1:2] * _pair_freqs(ph, base))
    if pw:
        ang.append(pos[..., 2:3] * _pair_freqs(pw, base))
    return np.concatenate(ang, axis=-1)


def _rope_tables(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape positions.shape[:-1] + (head_dim,), rotate-half
    pair layout (dim k pairs with dim k + head_dim/2)."""
    ang = _rope3d_angles(positions, head_dim, base)
    return np.concatenate([np.cos(ang)] * 2, axis=-1), np.concatenate([np.sin(ang)] * 2, axis=-1)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    rotated = cat([-x2, x1], axis=-1)
    return x * Tensor(cos) + rotated * Tensor(sin)


def rope_rotate(x: Tensor, position, base: float = 10000.0) -> Tensor:
    """Rotate a d-vector by a position: pair k turns by position / base^(2k/d).

    `position` may be a float (all pairs use it) or a 3-component coordinate
    (pairs split between l, h, w as in the model)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope_rotate: last dim must be even, got {d}")
    if isinstance(position, PositionIndex):
        pos = np.array([position.l, position.h, position.w])
        ang = _rope3d_angles(pos, d, base)
    elif np.ndim(position) == 0:
        ang = float(position) * base ** (-np.arange(d // 2) * 2.0 / d)
    else:
        pos = np.asarray(position, dtype=np.float64)
        ang = _rope3d_angles(pos, d, base)
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1)
    return _apply_rope(x, cos, sin)


# -- audio segment windows -------------------------------------------------------


def _segment_geometry(alpha: int, delta_window: int) -> tuple[int, np.ndarray, np.ndarray]:
    """Index offsets and positional offsets of one window. The half-width is
    max(alpha*Delta, alpha/2): Delta >= 1 matches the [alpha*(l-Delta),
    alpha*(l+Delta)] window; Delta = 0 degenerates to a single-frame window of
    alpha+1 features spanning [l-0.5, l+0.5]."""
    half = max(alpha * delta_window, alpha // 2)
    rel = np.arange(-half, half + 1)
    pos = rel * (delta_window + 0.5) / half if half > 0 else np.zeros(1)
    return half, rel, pos


def audio_segment(l: int, alpha: int, delta_window: int, l_audio: int) -> tuple[np.ndarray, np.ndarray]:
    """Audio indices attending to latent frame l, with their interpolated
    temporal positions t_i (the segment center keeps position exactly l).
    Out-of-range indices at the clip edges are dropped."""
    if l < 0:
        raise ValueError(f"audio_segment: l must be >= 0, got {l}")
    _, rel, pos = _segment_geometry(alpha, delta_window)
    idx = alpha * l + rel
    keep = (idx >= 0) & (idx < l_audio)
    return idx[keep], (l + pos)[keep]


def _segment_table(n_frames: int, alpha: int, delta_window: int, l_audio: int):
    """Batched form: clamped index table (T, K), position table (T, K, 3) and
    an additive attention bias masking the out-of-range slots."""
    _, rel, pos = _segment_geometry(alpha, delta_window)
    ls = np.arange(n_frames)[:, None]
    idx = alpha * ls + rel[None, :]
    valid = (idx >= 0) & (idx < l_audio)
    idx = np.clip(idx, 0, l_audio - 1)
    positions = np.zeros((n_frames, len(rel), 3))
    positions[:, :, 0] = ls + pos[None, :]
    bias = np.where(valid, 0.0, -1e30)
    return idx, positions, bias


# -- parameters ------------------------------------------------------------------


def _init_params(cfg: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    d, da, hidden = cfg.d_model, cfg.audio_dim, cfg.mlp_ratio * cfg.d_model
    p: dict[str, np.ndarray] = {}

    def nrm(*shape):
        return rng.normal(shape) * 0.02

    p["embed_in.w"] = nrm(cfg.latent_channels, d)
    p["embed_in.b"] = np.zeros(d)
    p["class_emb"] = nrm(cfg.class_vocab, d)
    p["t_emb.w1"] = nrm(16, d)
    p["t_emb.b1"] = np.zeros(d)
    p["t_emb.w2"] = nrm(d, d)
    p["t_emb.b2"] = np.zeros(d)
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}"
        if i in cfg.audio_blocks:
            p[f"{pre}.xnorm.g"] = np.ones(d)
            p[f"{pre}.xattn.wq"] = nrm(d, d)
            p[f"{pre}.xattn.wk"] = nrm(da, d)
            p[f"{pre}.xattn.wv"] = nrm(da, d)
            # zero output head: an untrained audio layer is an exact no-op
            p[f"{pre}.xattn.wo"] = np.zeros((d, d))
        p[f"{pre}.norm1.g"] = np.ones(d)
        p[f"{pre}.attn.wq"] = nrm(d, d)
        p[f"{pre}.attn.wk"] = nrm(d, d)
        p[f"{pre}.attn.wv"] = nrm(d, d)
        p[f"{pre}.attn.wo"] = nrm(d, d)
        p[f"{pre}.norm2.g"] = np.ones(d)
        p[f"{pre}.mlp.w1"] = nrm(d, hidden)
        p[f"{pre}.mlp.b1"] = np.zeros(hidden)
        p[f"{pre}.mlp.w2"] = nrm(hidden, d)
        p[f"{pre}.mlp.b2"] = np.zeros(d)
    p["final.norm.g"] = np.ones(d)
    p["head.w"] = nrm(d, cfg.latent_channels)
    p["head.b"] = np.zeros(cfg.latent_channels)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


class Model:
    """Config + named parameters + cached rope/segment tables. Forward passes
    never mutate the model, so concurrent inference is safe."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], train_step: int = 0, seed: int = 0):
        self.config = config
        self.params = params
        self.train_step = train_step
        self.seed = seed
        for name, t in params.items():
            if not np.isfinite(t.data).all():
                raise ValueError(f"Model: parameter {name} contains non-finite values")
        self._cache: dict = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config, _init_params(config, Rng(seed)), train_step=0, seed=seed)

    # cached constants, keyed by sequence geometry

    def _self_rope(self, n_tokens: int):
        key = ("self", n_tokens)
        if key not in self._cache:
            pos = np.zeros((n_tokens, 3))
            pos[1:, 0] = np.arange(n_tokens - 1)  # class token sits at l = 0
            cos, sin = _rope_tables(pos, self.config.head_dim, self.config.rope_base)
            self._cache[key] = (cos[None, :, None, :], sin[None, :, None, :])
        return self._cache[key]

    def _audio_tables(self, n_frames: int, l_audio: int):
        key = ("audio", n_frames, l_audio)
        if key not in self._cache:
            cfg = self.config
            idx, positions, bias = _segment_table(n_frames, cfg.alpha, cfg.delta_window, l_audio)
            qpos = np.zeros((n_frames, 3))
            qpos[:, 0] = np.arange(n_frames)
            qcos, qsin = _rope_tables(qpos, cfg.head_dim, cfg.rope_base)
            kcos, ksin = _rope_tables(positions, cfg.head_dim, cfg.rope_base)
            self._cache[key] = (
                idx,
                bias[None, :, None, None, :],
                (qcos[None, :, None, :], qsin[None, :, None, :]),
                (kcos[None, :, :, None, :], ksin[None, :, :, None, :]),
            )
        return self._cache[key]


def _rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + 1e-6) ** -0.5) * gain


def _t_features(t: np.ndarray) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), 8))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _self_attention(model: Model, block: str, x: Tensor) -> Tensor:
    cfg = model.config
    p = model.params
    b, s, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim
    y = _rmsnorm(x, p[f"{block}.norm1.g"])
    cos, sin = model._self_rope(s)

    def heads(v: Tensor) -> Tensor:
        return v.reshape(b, s, h, hd)

    q = _apply_rope(heads(y @ p[f"{block}.attn.wq"]), cos, sin).swapaxes(1, 2)
    k = _apply_rope(heads(y @ p[f"{block}.attn.wk"]), cos, sin).swapaxes(1, 2)
    v = heads(y @ p[f"{block}.attn.wv"]).swapaxes(1, 2)
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    out = softmax(logits, axis=-1) @ v
    out = out.swapaxes(1, 2).reshape(b, s, d)
    return out @ p[f"{block}.attn.wo"]


def audio_cross_attention(
    model: Model,
    block: str,
    x_tokens: Tensor,
    audio: Tensor,
) -> Tensor:
    """Per-frame cross-attention from latent tokens to their audio windows.
    Queries rotate at (l, 0, 0), keys at (t_i, 0, 0) through the same
    embedder; values are projected audio features. Returns the residual
    contribution for the latent tokens (class token receives zero)."""
    cfg = model.config
    p = model.params
    b, s, d = x_tokens.shape
    t_frames = s - 1
    h, hd = cfg.n_heads, cfg.head_dim
    l_audio = audio.shape[1]
    idx, bias, (qcos, qsin), (kcos, ksin) = model._audio_tables(t_frames, l_audio)
    k_slots = idx.shape[1]

    y = _rmsnorm(x_tokens, p[f"{block}.xnorm.g"])[:, 1:, :]
    q = (y @ p[f"{block}.xattn.wq"]).reshape(b, t_frames, h, hd)
    k_all = (audio @ p[f"{block}.xattn.wk"]).take(idx, axis=1).reshape(b, t_frames, k_slots, h, hd)
    v_all = (audio @ p[f"{block}.xattn.wv"]).take(idx, axis=1).reshape(b, t_frames, k_slots, h, hd)
    if cfg.use_audio_rope:
        q = _apply_rope(q, qcos, qsin)
        k_all = _apply_rope(k_all, kcos, ksin)

    q5 = q.reshape(b, t_frames, h, 1, hd)
    k5 = k_all.swapaxes(2, 3)
    v5 = v_all.swapaxes(2, 3)
    logits = (q5 @ k5.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd)) + Tensor(bias)
    out = (softmax(logits, axis=-1) @ v5).reshape(b, t_frames, d) @ p[f"{block}.xattn.wo"]
    return cat([Tensor(np.zeros((b, 1, d))), out], axis=1)


def _mlp(model: Model, block: str, x: Tensor) -> Tensor:
    p = model.params
    y = _rmsnorm(x, p[f"{block}.norm2.g"])
    y = (y @ p[f"{block}.mlp.w1"] + p[f"{block}.mlp.b1"]).silu()
    return y @ p[f"{block}.mlp.w2"] + p[f"{block}.mlp.b2"]


def _forward_batch(
    model: Model,
    x: Tensor,
    t: np.ndarray,
    class_ids: np.ndarray,
    audio: Tensor | None,
    use_audio: bool,
    skip_blocks: frozenset = frozenset(),
) -> Tensor:
    """Velocity prediction for a batch: x (B, T, C), t (B,), audio (B, L, Da)."""
    cfg = model.config
    p = model.params
    b, t_frames, _ = x.shape

    tokens = x @ p["embed_in.w"] + p["embed_in.b"]
    cls = p["class_emb"].take(np.asarray(class_ids, dtype=np.intp), axis=0).reshape(b, 1, cfg.d_model)
    seq = cat([cls, tokens], axis=1)
    temb = Tensor(_t_features(t))
    temb = (temb @ p["t_emb.w1"] + p["t_emb.b1"]).silu() @ p["t_emb.w2"] + p["t_emb.b2"]
    seq = seq + temb.reshape(b, 1, cfg.d_model)

    for i in range(cfg.n_blocks):
        if i in skip_blocks:
            continue
        block = f"blocks.{i}"
        if i in cfg.audio_blocks and use_audio and audio is not None:
            seq = seq + audio_cross_attention(model, block, seq, audio)
        seq = seq + _self_attention(model, block, seq)
        seq = seq + _mlp(model, block, seq)

    out = _rmsnorm(seq, p["final.norm.g"]) @ p["head.w"] + p["head.b"]
    return out[:, 1:, :]


def forward(model: Model, noised_latents, t: float, cond: dict) -> Tensor:
    """Single-clip velocity prediction.

    cond keys: class_id (int), audio (AudioFeatureSequence | array | None),
    use_audio (bool), skip_blocks (iterable of block indices). With
    use_audio=False the audio layers are bypassed entirely: this is the
    off-sync model, exactly invariant to the audio argument.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"forward: t must be in [0, 1], got {t}")
    skip = frozenset(cond.get("skip_blocks") or ())
    if not skip <= set(range(model.config.n_blocks)):
        raise ValueError(f"forward: skip_blocks {sorted(skip)} outside [0, {model.config.n_blocks})")
    use_audio = bool(cond.get("use_audio", True))
    audio = cond.get("audio")
    if use_audio and audio is None:
        raise ValueError("forward: use_audio=True requires cond['audio']")

    x = noised_latents if isinstance(noised_latents, Tensor) else Tensor(noised_latents)
    xb = x.reshape(1, *x.shape)
    audio_t = None
    if use_audio:
        a = getattr(audio, "features", audio)
        a = a if isinstance(a, Tensor) else Tensor(a)
        audio_t = a.reshape(1, *a.shape)
    out = _forward_batch(
        model,
        xb,
        np.array([t]),
        np.array([int(cond.get("class_id", 0))]),
        audio_t,
        use_audio,
        skip,
    )
    return out.reshape(out.shape[1], out.shape[2])


def motion_aware_loss(pred: Tensor, gt, gt_prev, lam: float = 1.0) -> Tensor:
    """Mean-squared residual plus lam times the mean-squared residual weighted
    by the ground-truth inter-frame difference. lam = 0 is plain MSE; static
    frames (gt == gt_prev) contribute nothing to the motion term."""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    gt_prev = gt_prev if isinstance(gt_prev, Tensor) else Tensor(gt_prev)
    if pred.shape != gt.shape or gt.shape != gt_prev.shape:
        raise ShapeError(f"motion_aware_loss: shapes {pred.shape}, {gt.shape}, {gt_prev.shape} must match")
    r = pred - gt
    mse = (r * r).mean()
    if lam == 0.0:
        return mse
    weighted = r * (gt - gt_prev)
    return mse + float(lam) * (weighted * weighted).mean()


def _loss_terms(pred_z: Tensor, gt: np.ndarray, gt_prev: np.ndarray, lam: float) -> tuple[Tensor, float, float]:
    r = pred_z - Tensor(gt)
    mse = (r * r).mean()
    weighted = r * Tensor(gt - gt_prev)
    motion = (weighted * weighted).mean()
    total = mse + float(lam) * motion if lam != 0.0 else mse
    return total, float(mse.data), float(motion.data)


class _Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for k, t in self.params.items():
            if t.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * t.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * t.grad ** 2
            t.data = t.data - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def train(
    config: ModelConfig,
    manifest_path,
    steps: int = 2000,
    lr: float = 1e-3,
    batch: int = 8,
    lam: float = 1.0,
    seed: int = 0,
    loss_csv_path=None,
) -> Model:
    """Flow-matching training with the motion-aware weighting.

    Per step: t ~ U[0,1], eps ~ N(0,1), x_t = (1-t)*eps + t*z; the model
    predicts v = z - eps and the loss is applied to x_t + (1-t)*v_hat. 10% of
    samples drop to the null condition (class 0, zeroed audio). Deterministic
    given the seed. Aborts on a non-finite loss, naming the step.
    """
    from .synth_world import load_manifest

    records = load_manifest(manifest_path)
    if not records:
        raise ValueError(f"train: dataset manifest {manifest_path} is empty")
    latents = np.stack([r.load_latents().latents for r in records])
    feats = np.stack([r.load_features().features for r in records])
    class_ids = np.array(
        [r.script.events[0].class_id if r.script.events else 0 for r in records], dtype=np.intp
    )

    model = Model.init(config, seed=seed)
    model.seed = seed
    if steps == 0:
        if loss_csv_path:
            with open(loss_csv_path, "w") as fh:
                fh.write("step,loss,mse_term,motion_term\n")
        return model

    gt_prev_all = np.concatenate([latents[:, :1], latents[:, :-1]], axis=1)
    opt = _Adam(model.params, lr)
    rng = Rng(seed, stream=7)
    rows = ["step,loss,mse_term,motion_term"]

    for step in range(1, steps + 1):
        pick = rng.integers(0, len(records), (batch,))
        z = latents[pick]
        gt_prev = gt_prev_all[pick]
        a = feats[pick].copy()
        cls = class_ids[pick].copy()
        t = rng.uniform(0.0, 1.0, (batch,))
        eps = rng.normal(z.shape)
        drop = rng.uniform(0.0, 1.0, (batch,)) < config.cond_dropout
        cls[drop] = 0
        a[drop] = 0.0

        x_t = (1.0 - t)[:, None, None] * eps + t[:, None, None] * z
        pred = _forward_batch(model, Tensor(x_t), t, cls, Tensor(a), True)
        z_hat = Tensor(x_t) + Tensor((1.0 - t)[:, None, None]) * pred
        loss, mse_term, motion_term = _loss_terms(z_hat, z, gt_prev, lam)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"train: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append(f"{step},{float(loss.data):.8f},{mse_term:.8f},{motion_term:.8f}")
        model.train_step = step

    if loss_csv_path:
        with open(loss_csv_path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
    return model


# -- checkpoint i/o ----------------------------------------------------------------
#
# Single file: magic "SCKP", u32 header length, JSON header (config, step,
# seed, parameter order), then one SPTN blob per parameter in that order.


def save_checkpoint(model: Model, path) -> None:
    names = sorted(model.params)
    header = json.dumps(
        {
            "config": asdict(model.config),
            "train_step": model.train_step,
            "seed": model.seed,
            "params": names,
        },
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for name in names:
            fh.write(sptn_bytes(model.params[name].data))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        cfg_dict = dict(header["config"])
        cfg_dict["audio_blocks"] = tuple(cfg_dict["audio_blocks"])
        config = ModelConfig(**cfg_dict)
        params = {name: Tensor(read_sptn_stream(fh), requires_grad=True) for name in header["params"]}
    return Model(config, params, train_step=header["train_step"], seed=header["seed"])
