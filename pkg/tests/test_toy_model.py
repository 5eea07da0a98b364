import numpy as np
import pytest

from synclab import toy_model as tm
from synclab.diffcore import Rng, ShapeError, Tensor, cat, finite_diff_check, no_grad, softmax
from synclab.synth_world import gen_dataset
from synclab.toy_model import Model, ModelConfig, PositionIndex, audio_segment, motion_aware_loss, rope_rotate

TINY = ModelConfig(
    n_blocks=2,
    d_model=8,
    n_heads=2,
    audio_blocks=(1,),
    alpha=2,
    delta_window=1,
    class_vocab=3,
    latent_channels=2,
    audio_dim=4,
    mlp_ratio=2,
)

# compatible with gen_dataset's native geometry (8 channels, 16-dim features)
TRAIN_CFG = ModelConfig(
    n_blocks=2,
    d_model=16,
    n_heads=2,
    audio_blocks=(1,),
    alpha=4,
    delta_window=1,
    class_vocab=4,
    latent_channels=8,
    audio_dim=16,
    mlp_ratio=2,
)


class TestRope:
    def test_position_zero_is_identity(self):
        x = Tensor(Rng(1).normal((16,)))
        assert np.allclose(rope_rotate(x, 0.0).data, x.data, atol=1e-15)

    def test_norm_preserved(self):
        for seed in range(10):
            x = Tensor(Rng(seed).normal((16,)))
            p = float(Rng(seed + 50).uniform(0, 60))
            out = rope_rotate(x, p)
            assert abs(np.linalg.norm(out.data) - np.linalg.norm(x.data)) < 1e-12

    def test_relative_shift_invariance(self):
        for seed in range(20):
            r = Rng(seed + 200)
            q, k = Tensor(r.normal((16,))), Tensor(r.normal((16,)))
            pq, pk, s = (float(v) for v in r.uniform(0, 40, (3,)))
            base_dot = float((rope_rotate(q, pq).data * rope_rotate(k, pk).data).sum())
            shifted = float((rope_rotate(q, pq + s).data * rope_rotate(k, pk + s).data).sum())
            assert abs(shifted - base_dot) < 1e-9

    def test_odd_dim_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            rope_rotate(Tensor(np.ones(5)), 1.0)

    def test_3d_position_accepted(self):
        x = Tensor(Rng(2).normal((16,)))
        out = rope_rotate(x, PositionIndex(3.0, 0.0, 0.0))
        assert abs(np.linalg.norm(out.data) - np.linalg.norm(x.data)) < 1e-12

    def test_position_index_validation(self):
        with pytest.raises(ValueError, match="l must be"):
            PositionIndex(-1.0)


class TestAudioSegment:
    def test_spec_example_l2(self):
        idx, pos = audio_segment(2, alpha=4, delta_window=1, l_audio=192)
        assert idx.min() == 4 and idx.max() == 12 and len(idx) == 9
        assert pos.min() == pytest.approx(0.5) and pos.max() == pytest.approx(3.5)
        assert pos[len(pos) // 2] == pytest.approx(2.0)  # center aligned with l

    def test_head_clipped_at_l0(self):
        idx, pos = audio_segment(0, alpha=4, delta_window=1, l_audio=192)
        assert idx.min() == 0 and idx.max() == 4
        assert pos[idx == 0] == pytest.approx(0.0)  # the center keeps position l

    def test_delta_zero_single_frame_window(self):
        idx, pos = audio_segment(5, alpha=4, delta_window=0, l_audio=192)
        assert len(idx) == 5  # alpha + 1 features
        assert pos.min() == pytest.approx(4.5) and pos.max() == pytest.approx(5.5)

    def test_tail_clipping(self):
        idx, _ = audio_segment(47, alpha=4, delta_window=1, l_audio=192)
        assert idx.max() == 191

    def test_negative_l_rejected(self):
        with pytest.raises(ValueError, match="l must be"):
            audio_segment(-1, 4, 1, 192)


def _cross_attention_reference(q_vec, keys, values, positions_q, positions_k, base=10000.0):
    """Independent single-frame cross-attention oracle built on rope_rotate."""
    qr = rope_rotate(Tensor(q_vec), positions_q, base).data
    kr = np.stack([rope_rotate(Tensor(k), p, base).data for k, p in zip(keys, positions_k)])
    logits = kr @ qr / np.sqrt(len(q_vec))
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ values


class TestCrossAttention:
    def test_single_element_segment_returns_value_projection(self):
        cfg = ModelConfig(
            n_blocks=1, d_model=8, n_heads=2, audio_blocks=(0,), alpha=1, delta_window=0,
            class_vocab=3, latent_channels=2, audio_dim=4, mlp_ratio=2,
        )
        model = Model.init(cfg, seed=0)
        model.params["blocks.0.xattn.wo"] = Tensor(np.eye(8), requires_grad=True)
        t_frames = 6
        x_tokens = Tensor(Rng(1).normal((1, t_frames + 1, 8)))
        audio = Tensor(Rng(2).normal((1, t_frames, 4)))
        out = tm.audio_cross_attention(model, "blocks.0", x_tokens, audio)
        expected = audio.data[0] @ model.params["blocks.0.xattn.wv"].data
        assert np.allclose(out.data[0, 0], 0.0, atol=0)
        assert np.allclose(out.data[0, 1:], expected, atol=1e-12)

    def test_identical_features_ignore_attention_weights(self):
        cfg = TINY
        model = Model.init(cfg, seed=1)
        model.params["blocks.1.xattn.wo"] = Tensor(np.eye(8), requires_grad=True)
        t_frames = 5
        row = Rng(3).normal((1, 1, 4))
        audio = Tensor(np.repeat(row, t_frames * cfg.alpha, axis=1))
        x_tokens = Tensor(Rng(4).normal((1, t_frames + 1, 8)))
        out1 = tm.audio_cross_attention(model, "blocks.1", x_tokens, audio)
        model.params["blocks.1.xattn.wq"] = Tensor(Rng(5).normal((8, 8)), requires_grad=True)
        out2 = tm.audio_cross_attention(model, "blocks.1", x_tokens, audio)
        assert np.allclose(out1.data, out2.data, atol=1e-12)
        expected = (row[0, 0] @ model.params["blocks.1.xattn.wv"].data)
        assert np.allclose(out1.data[0, 1:], expected, atol=1e-12)

    def test_joint_position_shift_leaves_output_unchanged(self):
        r = Rng(6)
        q = r.normal((8,))
        keys = r.normal((5, 8))
        values = r.normal((5, 4))
        pos_k = np.linspace(-1.5, 1.5, 5) + 7.0
        base_out = _cross_attention_reference(q, keys, values, 7.0, pos_k)
        for s in (1.0, 5.0, 23.4):
            out = _cross_attention_reference(q, keys, values, 7.0 + s, pos_k + s)
            assert np.max(np.abs(out - base_out)) < 1e-9


class TestForward:
    def _cond(self, audio, use_audio=True, **kw):
        return {"class_id": 1, "audio": audio, "use_audio": use_audio, **kw}

    def test_offsync_invariant_to_audio(self):
        model = Model.init(TINY, seed=2)
        x = Rng(7).normal((6, 2))
        a1, a2 = Rng(8).normal((12, 4)), Rng(9).normal((12, 4))
        o1 = tm.forward(model, x, 0.3, self._cond(a1, use_audio=False))
        o2 = tm.forward(model, x, 0.3, self._cond(a2, use_audio=False))
        assert np.array_equal(o1.data, o2.data)

    def test_audio_only_enters_audio_blocks(self):
        # bypassing the single audio block makes the output exactly audio-free
        model = Model.init(TINY, seed=3)
        for name, t in model.params.items():  # activate the zero-init audio head
            if name.endswith("xattn.wo"):
                model.params[name] = Tensor(Rng(50).normal(t.shape) * 0.1, requires_grad=True)
        x = Rng(10).normal((6, 2))
        a1, a2 = Rng(11).normal((12, 4)), Rng(12).normal((12, 4))
        with_skip = {"skip_blocks": {1}}
        o1 = tm.forward(model, x, 0.5, self._cond(a1, **with_skip))
        o2 = tm.forward(model, x, 0.5, self._cond(a2, **with_skip))
        assert np.array_equal(o1.data, o2.data)
        o3 = tm.forward(model, x, 0.5, self._cond(a1))
        o4 = tm.forward(model, x, 0.5, self._cond(a2))
        assert not np.array_equal(o3.data, o4.data)

    def test_skip_all_blocks_is_projected_embedding(self):
        model = Model.init(TINY, seed=4)
        x = Rng(13).normal((6, 2))
        audio = Rng(14).normal((12, 4))
        t = 0.4
        out = tm.forward(model, x, t, self._cond(audio, skip_blocks={0, 1}))

        p = {k: v.data for k, v in model.params.items()}
        tokens = x @ p["embed_in.w"] + p["embed_in.b"]
        seq = np.concatenate([p["class_emb"][1][None, :], tokens], axis=0)
        freqs = np.exp(np.linspace(0.0, np.log(1000.0), 8))
        feats = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
        h = feats @ p["t_emb.w1"] + p["t_emb.b1"]
        h = h / (1.0 + np.exp(-h))
        temb = h @ p["t_emb.w2"] + p["t_emb.b2"]
        seq = seq + temb[None, :]
        norm = seq * (np.mean(seq**2, axis=-1, keepdims=True) + 1e-6) ** -0.5 * p["final.norm.g"]
        expected = (norm @ p["head.w"] + p["head.b"])[1:]
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_determinism(self):
        model = Model.init(TINY, seed=5)
        x = Rng(15).normal((6, 2))
        audio = Rng(16).normal((12, 4))
        o1 = tm.forward(model, x, 0.7, self._cond(audio))
        o2 = tm.forward(model, x, 0.7, self._cond(audio))
        assert np.array_equal(o1.data, o2.data)

    def test_validation_errors(self):
        model = Model.init(TINY, seed=6)
        x = Rng(17).normal((6, 2))
        audio = Rng(18).normal((12, 4))
        with pytest.raises(ValueError, match="t must be"):
            tm.forward(model, x, 1.5, self._cond(audio))
        with pytest.raises(ValueError, match="skip_blocks"):
            tm.forward(model, x, 0.5, self._cond(audio, skip_blocks={9}))
        with pytest.raises(ValueError, match="requires cond"):
            tm.forward(model, x, 0.5, {"class_id": 1, "use_audio": True})


class TestMotionAwareLoss:
    def test_zero_when_exact(self):
        gt = Tensor(Rng(19).normal((4, 3)))
        assert motion_aware_loss(Tensor(gt.data.copy()), gt, gt, 1.0).item() == 0.0

    def test_hand_example(self):
        loss = motion_aware_loss(Tensor([3.0, 2.0]), Tensor([2.0, 1.0]), Tensor([0.0, 1.0]), 1.0)
        assert loss.item() == pytest.approx(3.0, abs=1e-15)

    def test_static_frames_reduce_to_mse(self):
        pred = Tensor(Rng(20).normal((5, 2)))
        gt = Tensor(Rng(21).normal((5, 2)))
        full = motion_aware_loss(pred, gt, Tensor(gt.data.copy()), 1.0)
        mse = ((pred - gt) * (pred - gt)).mean()
        assert full.item() == pytest.approx(mse.item(), abs=1e-15)

    def test_lambda_zero_is_plain_mse(self):
        pred, gt, prev = (Tensor(Rng(s).normal((6, 4))) for s in (22, 23, 24))
        loss = motion_aware_loss(pred, gt, prev, 0.0)
        mse = ((pred - gt) * (pred - gt)).mean()
        assert loss.item() == mse.item()

    def test_dominates_mse(self):
        for seed in range(5):
            pred, gt, prev = (Tensor(Rng(seed * 3 + s).normal((6, 4))) for s in (0, 1, 2))
            loss = motion_aware_loss(pred, gt, prev, 1.0)
            mse = ((pred - gt) * (pred - gt)).mean()
            assert loss.item() >= mse.item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="motion_aware_loss"):
            motion_aware_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))


class TestGradientThroughModel:
    def test_input_gradient_against_finite_differences(self):
        model = Model.init(TINY, seed=7)
        for name, t in model.params.items():
            if name.endswith("xattn.wo"):
                model.params[name] = Tensor(Rng(60).normal(t.shape) * 0.2, requires_grad=True)
        audio = Rng(26).normal((8, 4))
        gt = Rng(27).normal((4, 2))
        gt_prev = np.concatenate([gt[:1], gt[:-1]], axis=0)
        t_diff = 0.35
        cond = {"class_id": 1, "audio": audio, "use_audio": True}

        def f(x):
            pred = tm.forward(model, x, t_diff, cond)
            z_hat = x + (1.0 - t_diff) * pred
            return motion_aware_loss(z_hat, Tensor(gt), Tensor(gt_prev), 1.0)

        err = finite_diff_check(f, Tensor(Rng(28).normal((4, 2))), eps=1e-5)
        assert err < 1e-4

    def test_parameter_gradient_against_finite_differences(self):
        model = Model.init(TINY, seed=8)
        model.params["blocks.1.xattn.wo"] = Tensor(Rng(61).normal((8, 8)) * 0.2, requires_grad=True)
        audio = Rng(29).normal((8, 4))
        x_in = Rng(30).normal((4, 2))
        gt = Rng(31).normal((4, 2))
        cond = {"class_id": 2, "audio": audio, "use_audio": True}

        for pname in ("blocks.1.xattn.wq", "head.w", "blocks.0.attn.wk"):
            original = model.params[pname]

            def f(w, pname=pname):
                model.params[pname] = w
                pred = tm.forward(model, x_in, 0.6, cond)
                return motion_aware_loss(pred, Tensor(gt), Tensor(gt), 1.0)

            err = finite_diff_check(f, Tensor(original.data.copy()), eps=1e-5)
            model.params[pname] = original
            assert err < 1e-4, pname


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyset")
    return gen_dataset(out, seed=77, n_clips=8)


class TestTrain:
    def test_steps_zero_equals_initialization(self, tiny_dataset):
        cfg = ModelConfig()
        trained = tm.train(cfg, tiny_dataset, steps=0, seed=5)
        init = Model.init(cfg, seed=5)
        for name in init.params:
            assert np.array_equal(trained.params[name].data, init.params[name].data)

    def test_loss_decreases_and_lambda_changes_solution(self, tiny_dataset, tmp_path):
        cfg = TRAIN_CFG
        csv1 = tmp_path / "l1.csv"
        m1 = tm.train(cfg, tiny_dataset, steps=120, batch=4, lam=1.0, seed=3, loss_csv_path=csv1)
        m0 = tm.train(cfg, tiny_dataset, steps=120, batch=4, lam=0.0, seed=3)
        losses = np.array([float(line.split(",")[1]) for line in open(csv1).read().splitlines()[1:]])
        k = len(losses) // 4
        assert losses[-k:].mean() < losses[:k].mean()
        assert any(
            not np.array_equal(m1.params[n].data, m0.params[n].data) for n in m1.params
        )
        header = open(csv1).readline().strip()
        assert header == "step,loss,mse_term,motion_term"

    def test_determinism(self, tiny_dataset):
        a = tm.train(TRAIN_CFG, tiny_dataset, steps=25, batch=4, seed=9)
        b = tm.train(TRAIN_CFG, tiny_dataset, steps=25, batch=4, seed=9)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_non_finite_loss_aborts_with_step_index(self, tiny_dataset):
        with pytest.raises(FloatingPointError, match="step"):
            tm.train(TRAIN_CFG, tiny_dataset, steps=40, batch=4, lr=float("nan"), seed=1)

    def test_empty_manifest_rejected(self, tmp_path):
        man = tmp_path / "manifest.jsonl"
        man.write_text("")
        with pytest.raises(ValueError, match="empty"):
            tm.train(TRAIN_CFG, man, steps=1)


class TestCheckpoint:
    def test_roundtrip(self, tiny_dataset, tmp_path):
        model = tm.train(TRAIN_CFG, tiny_dataset, steps=10, batch=4, seed=2)
        path = tmp_path / "m.sckp"
        tm.save_checkpoint(model, path)
        back = tm.load_checkpoint(path)
        assert back.config == model.config
        assert back.train_step == 10 and back.seed == 2
        for name in model.params:
            assert np.array_equal(back.params[name].data, model.params[name].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sckp"
        path.write_bytes(b"JUNKxxxx")
        with pytest.raises(ValueError, match="magic"):
            tm.load_checkpoint(path)


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="audio_blocks"):
            ModelConfig(n_blocks=2, audio_blocks=(5,))
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=63)
