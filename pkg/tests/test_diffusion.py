import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_diffusion import diffusion as Df
from regime_diffusion.dataset import Normalizer, stack_segments
from regime_diffusion.encoder import HistoryBuffer
from regime_diffusion.nncore import ContractViolation, directional_check


@settings(max_examples=30, deadline=None)
@given(K=st.integers(1, 200))
def test_schedule_invariants(K):
    s = Df.make_schedule(K)
    assert s.K == K
    assert np.all((s.betas >= 1e-4) & (s.betas <= 0.999))
    assert np.array_equal(s.alphas, 1.0 - s.betas)
    assert np.array_equal(s.alpha_bars, np.cumprod(s.alphas))
    assert np.all(np.diff(s.alpha_bars) < 0) or K == 1


def test_default_schedule_values():
    s = Df.make_schedule(20)
    f = [math.cos((k / 20 + 0.008) / 1.008 * math.pi / 2) ** 2 for k in range(21)]
    assert np.allclose(s.alpha_bars[:-1], np.array(f[1:20]) / f[0], rtol=1e-12)
    assert s.betas[-1] == 0.999


def test_schedule_needs_a_step():
    with pytest.raises(ContractViolation):
        Df.make_schedule(0)


def test_q_sample_marginal_moments():
    s = Df.make_schedule(20)
    rng = np.random.default_rng(0)
    H0 = np.full((200_000, 1), 2.0)
    x = Df.q_sample(H0, np.full(200_000, 7), rng.standard_normal(H0.shape), s)
    assert abs(x.mean() - 2.0 * math.sqrt(s.alpha_bars[6])) < 0.01
    assert abs(x.var() - (1 - s.alpha_bars[6])) < 0.01


def test_q_sample_contracts():
    s = Df.make_schedule(5)
    with pytest.raises(ContractViolation):
        Df.q_sample(np.zeros(3), 6, np.zeros(3), s)
    with pytest.raises(ContractViolation):
        Df.q_sample(np.zeros(3), 1, np.zeros(4), s)


def test_step_embedding_distinct():
    e = Df.step_embedding(np.arange(1, 21))
    assert e.shape == (20, Df.STEP_EMBED_DIM)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert np.all(d[~np.eye(20, dtype=bool)] > 1e-3)


def test_zero_stub_is_affine_recursion():
    """With eps = 0 every step is H <- H / sqrt(alpha) + sqrt(beta) z."""
    s = Df.make_schedule(6)
    out = Df.reverse_process(lambda H, k: np.zeros_like(H), (5, 3), s, np.random.default_rng(1))
    rng = np.random.default_rng(1)
    H = rng.standard_normal((5, 3))
    for k in range(6, 0, -1):
        H = H / math.sqrt(s.alphas[k - 1])
        if k > 1:
            H = H + math.sqrt(s.betas[k - 1]) * rng.standard_normal((5, 3))
    assert np.allclose(out, H, rtol=1e-14, atol=0)


def test_inactive_clip_matches_plain_update():
    s = Df.make_schedule(20)
    fn = lambda H, k: 0.1 * np.sin(H + k)  # noqa: E731
    a = Df.reverse_process(fn, (4, 8, 8), s, np.random.default_rng(2))
    b = Df.reverse_process(fn, (4, 8, 8), s, np.random.default_rng(2), clip=1e12)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-9)


def test_clip_bounds_samples():
    s = Df.make_schedule(20)
    out = Df.reverse_process(lambda H, k: np.zeros_like(H), (1000, 8), s, np.random.default_rng(3), clip=3.0)
    # The last step has no noise and returns the clipped clean estimate.
    assert np.max(np.abs(out)) <= 3.0 + 1e-9


def _model(**kw):
    return Df.ResidualDiffusion(Normalizer.identity(), encoder_channels=16, width=16, seed=0, **kw)


def test_fast_sampler_matches_tape_forward():
    m = _model()
    rng = np.random.default_rng(4)
    Hk = rng.standard_normal((3, 8, 8))
    cond = rng.standard_normal((3, Df.COND_DIM))
    tape = m.denoiser.forward(Hk, cond).data
    fast = m.denoiser.forward_numpy(Hk, m.denoiser.block_modulations(cond))
    assert np.allclose(tape, fast, atol=1e-12)


def test_loss_gradients(short_segments):
    from regime_diffusion.dataset import fit_normalizer

    m = Df.ResidualDiffusion(fit_normalizer(short_segments), encoder_channels=16, width=16)
    batch = stack_segments(short_segments[:6])
    k, eps = m.draw_noise(6, np.random.default_rng(0))
    err = directional_check(lambda: m.loss(batch, k, eps), m.parameters(), np.random.default_rng(1), probes=10)
    assert err < 1e-4


def test_unconditioned_model_ignores_history(short_segments):
    m = _model(conditioned=False)
    b = stack_segments(short_segments[:4])
    other = b.hist_zeta.copy()
    other[:, :-1] += 3.0
    a1 = m.sample(b.hist_zeta, b.hist_tau, np.random.default_rng(0))
    a2 = m.sample(other, b.hist_tau, np.random.default_rng(0))
    assert np.array_equal(a1, a2)
    assert all(not p.name.startswith("enc.") for p in m.trainable())


def test_conditioned_model_uses_history(short_segments):
    m = _model()
    b = stack_segments(short_segments[:4])
    other = b.hist_zeta.copy()
    other[:, :-1] += 3.0
    a1 = m.sample(b.hist_zeta, b.hist_tau, np.random.default_rng(0))
    a2 = m.sample(other, b.hist_tau, np.random.default_rng(0))
    assert not np.allclose(a1, a2)


def test_predict_residual_needs_full_buffer():
    m = _model()
    buf = HistoryBuffer(m.L + 1)
    with pytest.raises(ContractViolation):
        m.predict_residual(buf, np.random.default_rng(0))
    for _ in range(m.L + 1):
        buf.push(np.zeros(16), np.zeros(8))
    assert m.predict_residual(buf, np.random.default_rng(0)).shape == (8,)


def test_training_is_deterministic_and_reduces_loss(short_segments, short_normalizer):
    logs, models = [], []
    for _ in range(2):
        m = Df.ResidualDiffusion(short_normalizer, encoder_channels=16, width=16, seed=5)
        logs.append(Df.train_diffusion(m, short_segments, short_segments, steps=60, batch_size=16, lr=2e-3, log_every=20, val_size=64))
        models.append(m)
    assert logs[0].rows == logs[1].rows
    assert logs[0].rows[-1][2] < logs[0].rows[0][2]
    for a, b in zip(models[0].parameters(), models[1].parameters()):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_round_trip(tmp_path, short_segments, short_normalizer):
    m = Df.ResidualDiffusion(short_normalizer, encoder_channels=16, width=16, seed=2)
    m.fit_clip(short_segments)
    m.save(tmp_path / "p.ckpt")
    back = Df.ResidualDiffusion.load(tmp_path / "p.ckpt")
    b = stack_segments(short_segments[:5])
    assert back.x0_clip == m.x0_clip
    assert np.array_equal(
        m.sample(b.hist_zeta, b.hist_tau, np.random.default_rng(0)),
        back.sample(b.hist_zeta, b.hist_tau, np.random.default_rng(0)),
    )
    assert Df.validation_loss(m, short_segments, size=32) == Df.validation_loss(back, short_segments, size=32)


def test_nan_data_aborts_training(short_segments, short_normalizer):
    from dataclasses import replace

    bad = [replace(s, H=np.full_like(s.H, np.nan)) for s in short_segments[:8]]
    m = Df.ResidualDiffusion(short_normalizer, encoder_channels=16, width=16)
    m.x0_clip = 5.0
    with pytest.raises(Df.TrainingAborted, match="step 1"):
        Df.train_diffusion(m, bad, steps=3, batch_size=4)
