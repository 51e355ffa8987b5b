"""Pipeline: rejection selection, prompt preparation, text-free branches,
generation determinism, and streaming synthesis equivalence."""

import numpy as np
import pytest

from tada.backbone import BackboneConfig, BackboneModel, FusedStep
from tada.codec import CodecConfig, CodecModel
from tada.durbits import durations_from_positions
from tada.errors import ValidationError
from tada.pipeline import (
    GenerationResult,
    GenParams,
    Prompt,
    SpeakerHead,
    cosine,
    generate,
    load_lm_checkpoint,
    prepare_prompt,
    rejection_select,
    save_lm_checkpoint,
    stream_synthesize,
    tfg_negative,
    train_speaker_head,
)

CODEC = CodecConfig(
    d_frame=6, d_latent=4, d_model=16, n_heads=2, d_ff=16, n_layers=2,
    samples_per_frame=4, vocab_size=5, spectral_windows=(4, 8),
)
BACKBONE = BackboneConfig(
    vocab_size=5, d_model=16, n_heads=2, n_layers=2, d_ff=32, d_cond=8,
    d_latent=4, bits=4, k_shift=2, max_context=128,
)


@pytest.fixture
def models():
    cfg = BackboneConfig(**{k: getattr(BACKBONE, k) for k in BACKBONE.__dataclass_fields__ if k != "flow"})
    cfg.flow.d_time = 8
    cfg.flow.width = 16
    cfg.flow.n_hidden = 2
    cfg.__post_init__()
    lm = BackboneModel(cfg, np.random.default_rng(0))
    codec = CodecModel(CODEC, np.random.default_rng(1))
    head = SpeakerHead(d_latent=4, dims=(8, 8, 4), rng=np.random.default_rng(2))
    return lm, codec, head


def make_prompt(codec, head, rng, L=3):
    T = 4 * L
    positions = np.arange(1, L + 1) * 4 - 1
    frames = rng.standard_normal((T, CODEC.d_frame))
    tokens = rng.integers(0, 5, size=L)
    return prepare_prompt(frames, tokens, None, codec, head, positions=positions)


class TestRejectionSelect:
    def test_argmax(self):
        ref = np.array([1.0, 0.0])
        cands = np.array([[0.9, 0.44], [0.5, 0.87]])
        idx, cos_val, below = rejection_select(cands, ref, theta=0.7)
        assert idx == 0 and not below
        assert cos_val == pytest.approx(cosine(cands[0], ref))

    def test_tie_breaks_to_lower_index(self):
        ref = np.array([1.0, 0.0])
        cands = np.array([[2.0, 0.0], [4.0, 0.0]])  # equal cosines
        idx, _, _ = rejection_select(cands, ref, theta=0.0)
        assert idx == 0

    def test_below_threshold_flagged(self):
        ref = np.array([1.0, 0.0])
        cands = np.array([[0.0, 1.0]])
        idx, cos_val, below = rejection_select(cands, ref, theta=0.7)
        assert idx == 0 and below

    def test_never_returns_below_pool_max(self):
        rng = np.random.default_rng(3)
        ref = rng.standard_normal(6)
        for _ in range(50):
            cands = rng.standard_normal((5, 6))
            idx, cos_val, _ = rejection_select(cands, ref, theta=0.7)
            all_cos = [cosine(c, ref) for c in cands]
            assert cos_val == pytest.approx(max(all_cos))
            assert idx == int(np.argmax(all_cos))

    def test_bigger_pool_non_decreasing_expected_cosine(self):
        # Pools with injected wrong-speaker candidates: growing R must not
        # lower the expected chosen cosine.
        rng = np.random.default_rng(4)
        ref = np.ones(4) / 2.0
        wrong = -np.ones(4) / 2.0
        means = []
        for R in (1, 2, 4, 8):
            chosen = []
            for _ in range(300):
                good = rng.standard_normal((R, 4)) * 0.3 + ref
                pool = np.vstack([wrong + rng.standard_normal(4) * 0.05, good])[: R + 1]
                _, cos_val, _ = rejection_select(pool, ref, theta=0.7)
                chosen.append(cos_val)
            means.append(np.mean(chosen))
        assert all(b >= a - 1e-9 for a, b in zip(means, means[1:]))


class TestSpeakerHead:
    def test_training_raises_cosine(self):
        rng = np.random.default_rng(5)
        targets_per_class = rng.standard_normal((3, 6))
        lat = rng.standard_normal((300, 4))
        cls = rng.integers(0, 3, size=300)
        lat[:, :3] += np.eye(3)[cls] * 2.0  # speaker signal in the latents
        tgt = targets_per_class[cls]
        head = train_speaker_head(lat, tgt, d_latent=4, dims=(8, 8, 6), steps=300, seed=0)
        emb = head.embed(lat)
        cosines = [cosine(e, t) for e, t in zip(emb, tgt)]
        assert np.mean(cosines) > 0.8

    def test_roundtrip_through_lm_checkpoint(self, tmp_path, models):
        lm, codec, head = models
        path = tmp_path / "lm.tada"
        save_lm_checkpoint(path, lm, head)
        lm2, head2 = load_lm_checkpoint(path)
        rng = np.random.default_rng(6)
        s = rng.standard_normal((3, 4))
        np.testing.assert_allclose(head.embed(s), head2.embed(s), atol=1e-5)
        ctx = [FusedStep(1, None, "text-only")]
        np.testing.assert_allclose(
            lm.forward(ctx)[0].text_logits, lm2.forward(ctx)[0].text_logits, atol=1e-5
        )


class TestPreparePrompt:
    def test_empty_transcript_rejected(self, models):
        _, codec, head = models
        with pytest.raises(ValidationError):
            prepare_prompt(np.zeros((4, CODEC.d_frame)), np.array([]), None, codec, head)

    def test_deterministic(self, models):
        _, codec, head = models
        rng = np.random.default_rng(7)
        frames = rng.standard_normal((8, CODEC.d_frame))
        tokens = np.array([1, 3])
        a = prepare_prompt(frames, tokens, None, codec, head, positions=np.array([3, 7]))
        b = prepare_prompt(frames, tokens, None, codec, head, positions=np.array([3, 7]))
        np.testing.assert_array_equal(a.latents, b.latents)
        np.testing.assert_array_equal(a.ref_embedding, b.ref_embedding)

    def test_reference_is_unit_norm(self, models):
        _, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(8))
        assert np.linalg.norm(prompt.ref_embedding) == pytest.approx(1.0)

    def test_filtered_alignment_rejected(self, models):
        _, codec, head = models
        frames = np.zeros((20, CODEC.d_frame))
        with pytest.raises(ValidationError, match="consecutive-run"):
            prepare_prompt(
                frames, np.array([0, 1, 2, 3]), None, codec, head,
                positions=np.array([5, 6, 7, 8]),
            )

    def test_durations_follow_chain(self, models):
        _, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(9))
        fb, fa = durations_from_positions(prompt.positions, prompt.T)
        np.testing.assert_array_equal(prompt.f_before, fb)
        np.testing.assert_array_equal(prompt.f_after, fa)


class TestTfgNegative:
    def test_structure(self, models):
        lm, _, _ = models
        rng = np.random.default_rng(10)
        ctx = [
            FusedStep(2, rng.standard_normal(4 + 2 * 4), "text-speech"),
            FusedStep(4, None, "text-speech"),
        ]
        neg = tfg_negative(lm, ctx)
        assert len(neg) == len(ctx)
        assert all(s.token_id == lm.config.pad_id for s in neg)
        np.testing.assert_array_equal(neg[0].acoustic, ctx[0].acoustic)
        assert neg[1].acoustic is None

    def test_differs_from_zero_mode_conditions(self, models):
        lm, _, _ = models
        rng = np.random.default_rng(11)
        ctx = [FusedStep(1, rng.standard_normal(12), "text-speech")]
        c_tfg = lm.forward(tfg_negative(lm, ctx))[0].cond
        assert not np.allclose(c_tfg, np.zeros_like(c_tfg))


class TestGenerate:
    def test_tts_requires_text(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(12))
        with pytest.raises(ValidationError):
            generate(lm, codec, head, prompt, None, GenParams(mode="tts"))

    def test_deterministic_per_seed(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(13))
        text = np.array([1, 2, 4])
        params = GenParams(n_fm=3, candidates=2, seed=5)
        a = generate(lm, codec, head, prompt, text, params)
        b = generate(lm, codec, head, prompt, text, params)
        np.testing.assert_array_equal(a.latents, b.latents)
        np.testing.assert_array_equal(a.f_before, b.f_before)
        c = generate(lm, codec, head, prompt, text, GenParams(n_fm=3, candidates=2, seed=6))
        assert not np.array_equal(a.latents, c.latents)

    def test_generates_one_slot_per_text_token(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(14))
        text = np.array([0, 3, 2, 1])
        out = generate(lm, codec, head, prompt, text, GenParams(n_fm=2, seed=1))
        assert out.latents.shape == (4, BACKBONE.d_latent)
        assert out.f_before.shape == (4,)
        np.testing.assert_array_equal(out.text_tokens, text)
        assert 0.0 <= out.chain_rate <= 1.0

    def test_r1_no_rejection_loop(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(15))
        out = generate(lm, codec, head, prompt, np.array([1]), GenParams(n_fm=2, candidates=1, seed=2))
        assert all(s.rounds == 1 and s.pool_size == 1 for s in out.step_stats)

    def test_slm_mode_samples_text(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(16))
        params = GenParams(mode="slm", n_fm=2, max_tokens=5, temperature=1.0, seed=3)
        out = generate(lm, codec, head, prompt, None, params)
        assert out.text_tokens.size <= 5
        assert out.latents.shape[0] == out.text_tokens.size

    def test_slm_with_sfg_branch(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(17))
        params = GenParams(mode="slm", n_fm=2, max_tokens=4, sfg_scale=0.5, seed=4)
        out = generate(lm, codec, head, prompt, None, params)
        assert out.latents.shape[0] == out.text_tokens.size

    def test_tfg_negative_mode_runs(self, models):
        lm, codec, head = models
        prompt = make_prompt(codec, head, np.random.default_rng(18))
        out = generate(
            lm, codec, head, prompt, np.array([2, 0]),
            GenParams(n_fm=2, neg_mode="tfg", cfg_scale=1.5, seed=5),
        )
        assert out.latents.shape == (2, BACKBONE.d_latent)


class TestStreamSynthesize:
    def _result(self, rng, L):
        f_before = rng.integers(0, 4, size=L)
        f_after = np.empty(L, dtype=np.int64)
        f_after[:-1] = f_before[1:]
        f_after[-1] = rng.integers(0, 4)
        return GenerationResult(
            text_tokens=rng.integers(0, 5, size=L),
            latents=rng.standard_normal((L, CODEC.d_latent)),
            f_before=f_before,
            f_after=f_after,
            chain_rate=1.0,
        )

    def test_single_token_single_emission(self, models):
        _, codec, _ = models
        rng = np.random.default_rng(19)
        audio = stream_synthesize(self._result(rng, 1), codec)
        assert len(audio.segments) <= 2  # token segment plus optional tail

    def test_eviction_equivalence_five_tokens(self, models):
        _, codec, _ = models
        rng = np.random.default_rng(20)
        result = self._result(rng, 5)
        audio = stream_synthesize(result, codec)
        p, T = result.positions
        full = codec.decode(result.latents, p, T, mode="streaming")
        np.testing.assert_allclose(audio.frames, full.features.data, atol=1e-9)

    def test_peak_cache_bound(self, models):
        _, codec, _ = models
        rng = np.random.default_rng(21)
        result = self._result(rng, 6)
        audio = stream_synthesize(result, codec)
        p, T = result.positions
        ext = np.concatenate([[0, 0], p])
        spans = [int(ext[i + 2] - ext[i]) for i in range(p.size)]
        if T > p[-1]:
            spans.append(int(T - ext[p.size]))
        assert audio.peak_cache <= max(spans)

    def test_chain_mismatch_uses_later_sample(self, models):
        _, codec, _ = models
        result = GenerationResult(
            text_tokens=np.array([1, 2]),
            latents=np.zeros((2, CODEC.d_latent)),
            f_before=np.array([2, 4]),
            f_after=np.array([9, 1]),  # disagrees with f_before[1]
            chain_rate=0.0,
        )
        audio = stream_synthesize(result, codec)
        np.testing.assert_array_equal(audio.positions, [3, 8])
        assert audio.T == 9
