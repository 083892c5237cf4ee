import math

import pytest
import torch

from compinv.diffusion import (
    AttentionRecorder, NoiseSchedule, PretrainConfig, cross_attention, forward_step, guided_eps,
    marginal_sample, pretrain, reconstruction_loss, sample, sampling_timesteps,
)
from compinv.errors import ContractError
from compinv.numerics import RngStream, finite_difference_check

from conftest import make_tiny_model


def test_schedule_reaches_noise():
    s = NoiseSchedule.linear(100)
    assert float(s.alpha_bar[-1]) < 0.01
    assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert float(s.ab(0)) == 1.0


def test_schedule_roundtrip():
    s = NoiseSchedule.linear(10)
    back = NoiseSchedule.from_dict(s.to_dict())
    assert torch.equal(back.alpha_bar, s.alpha_bar)


def test_forward_step_example():
    s = NoiseSchedule(torch.tensor([0.64]), torch.ones(1))
    x = forward_step(torch.tensor([1.0]), 1, torch.tensor([1.0]), s)
    assert torch.allclose(x, torch.tensor([0.8 + 0.6]))


def test_marginal_example():
    s = NoiseSchedule(torch.tensor([0.5, 0.5]), torch.ones(2))
    x = marginal_sample(torch.tensor([2.0]), 2, torch.tensor([0.0]), s)
    assert torch.allclose(x, torch.tensor([1.0]))


def test_timestep_range_rejected():
    s = NoiseSchedule.linear(10)
    with pytest.raises(ContractError):
        marginal_sample(torch.zeros(1), 0, torch.zeros(1), s)
    with pytest.raises(ContractError):
        marginal_sample(torch.zeros(1), 11, torch.zeros(1), s)


def test_forward_and_marginal_analytic_cases():
    s = NoiseSchedule(torch.tensor([1.0, 0.5]), torch.ones(2))
    x, eps = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
    assert torch.equal(forward_step(x, 1, eps, s), x)
    assert torch.allclose(forward_step(torch.zeros(5, dtype=torch.float64), 2, eps, s), eps / math.sqrt(2))
    assert torch.equal(marginal_sample(x, 1, eps, s), x)
    s2 = NoiseSchedule.linear(10)
    assert torch.allclose(marginal_sample(torch.zeros(5, dtype=torch.float64), 7, eps, s2),
                          (1 - s2.ab(7)).sqrt() * eps)


def test_chained_steps_match_marginal_in_distribution():
    s = NoiseSchedule.linear(10)
    rng = RngStream(3, "mc")
    n = 10_000
    x = torch.full((n,), 0.7, dtype=torch.float64)
    for t in range(1, 6):
        x = forward_step(x, t, rng.normal((n,)), s)
    ab = float(s.ab(5))
    var = 1 - ab
    assert abs(float(x.mean()) - math.sqrt(ab) * 0.7) < 3 * math.sqrt(var / n)
    # the sample variance of a Gaussian has standard error var * sqrt(2 / (n - 1))
    assert abs(float(x.var()) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_marginal_variance_law():
    s = NoiseSchedule.linear(100)
    n = 10_000
    for t in (1, 30, 100):
        x = marginal_sample(torch.full((n,), -0.4, dtype=torch.float64), t, RngStream(t, "var").normal((n,)), s)
        var = float(1 - s.ab(t))
        assert abs(float(x.var()) - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_softmax_analytic_cases():
    f = torch.tensor([[[1.0]]], dtype=torch.float64)
    ctx = torch.tensor([[[0.0], [math.log(3)]]], dtype=torch.float64)
    one = torch.ones(1, 1, dtype=torch.float64)
    _, maps = cross_attention(f, ctx, one, one, one)
    assert torch.allclose(maps[0, :, 0], torch.tensor([0.25, 0.75], dtype=torch.float64))
    same = torch.ones(1, 5, 3, dtype=torch.float64)
    _, maps = cross_attention(torch.randn(1, 4, 2, dtype=torch.float64), same,
                              torch.randn(2, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64),
                              torch.randn(3, 4, dtype=torch.float64), heads=2)
    assert torch.allclose(maps, torch.full_like(maps, 0.2))


def test_default_architecture_size(vocab):
    from compinv.diffusion import build_model
    m = build_model(vocab, PretrainConfig())
    n = sum(p.numel() for p in m.parameters())
    assert n < 2_000_000
    assert all(bool(torch.isfinite(p).all()) for p in m.parameters())


def test_cross_attention_matches_explicit_loops():
    g = torch.Generator().manual_seed(0)
    f = torch.randn(2, 5, 6, generator=g, dtype=torch.float64)
    c = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    wq = torch.randn(6, 4, generator=g, dtype=torch.float64)
    wk = torch.randn(4, 4, generator=g, dtype=torch.float64)
    wv = torch.randn(4, 4, generator=g, dtype=torch.float64)
    out, maps = cross_attention(f, c, wq, wk, wv, heads=2)
    for b in range(2):
        for n in range(5):
            acc = []
            avg = torch.zeros(3, dtype=torch.float64)
            for h in range(2):
                sl = slice(2 * h, 2 * h + 2)
                q = f[b, n] @ wq[:, sl]
                scores = torch.stack([(q @ (c[b, l] @ wk[:, sl])) / math.sqrt(2) for l in range(3)])
                p = torch.exp(scores - scores.max())
                p = p / p.sum()
                avg += p / 2
                acc.append(sum(p[l] * (c[b, l] @ wv[:, sl]) for l in range(3)))
            assert torch.allclose(out[b, n], torch.cat(acc), atol=1e-12)
            assert torch.allclose(maps[b, :, n], avg, atol=1e-12)
    assert torch.allclose(maps.sum(1), torch.ones(2, 5, dtype=torch.float64))


def test_cross_attention_dimension_error():
    with pytest.raises(ContractError):
        cross_attention(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), torch.zeros(5, 4),
                        torch.zeros(4, 4), torch.zeros(4, 4))


def test_denoiser_maps_are_distributions(tiny_model):
    rec = AttentionRecorder()
    ids = torch.tensor([tiny_model.encoder.tokenize("a redcircle")])
    tiny_model.predict_x0(torch.zeros(1, 3, 32, 32, dtype=torch.float64), 5, ids, recorder=rec)
    assert set(rec.maps) == {"down16", "mid8", "up16"}
    for m in rec.maps.values():
        assert torch.allclose(m.sum(1), torch.ones_like(m.sum(1)))
    assert rec.canonical().shape == (1, 8, 16, 16)


def test_reconstruction_loss_with_oracle_denoiser():
    s = NoiseSchedule.linear(10)
    x0 = torch.randn(3, 3, 4, 4, dtype=torch.float64)
    ids = torch.zeros(3, 8, dtype=torch.long)
    perfect = lambda x_t, t, ids, table: x0
    assert float(reconstruction_loss(x0, ids, None, RngStream(0, "r"), schedule=s, denoise_fn=perfect)) == 0.0
    off = lambda x_t, t, ids, table: x0 + 0.5
    val = float(reconstruction_loss(x0, ids, None, RngStream(0, "r"), schedule=s, denoise_fn=off))
    assert val == pytest.approx(0.25 * 48)


def test_reconstruction_loss_empty_batch():
    with pytest.raises(ContractError):
        reconstruction_loss(torch.zeros(0, 3, 4, 4), torch.zeros(0, 8, dtype=torch.long), None,
                            RngStream(0, "r"), schedule=NoiseSchedule.linear(10), denoise_fn=lambda *a: a[0])


def test_reconstruction_gradient_wrt_pseudo_row():
    m = make_tiny_model()
    tid = m.encoder.register_pseudo("cat*", "redcircle", RngStream(0, "p"))
    x0 = torch.randn(2, 3, 32, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(1)).clamp(-1, 1)
    ids = m.encoder.tokenize_batch(["a photo of a cat* redcircle"] * 2)
    t = torch.tensor([3, 12])
    eps = RngStream(2, "e").normal(x0.shape, torch.float64)
    base = m.encoder.table.detach()

    def loss(leaves):
        table = torch.cat([base[:tid], leaves["row"][None], base[tid + 1:]])
        return reconstruction_loss(x0, ids, m, RngStream(0, "x"), table=table, t=t, eps=eps)

    rep = finite_difference_check(loss, {"row": base[tid].clone()})
    assert rep.passed, rep.per_leaf_max_rel_error


def test_guidance_identity_and_linearity():
    c, u = torch.randn(4), torch.randn(4)
    assert torch.equal(guided_eps(c, u, 1.0), c)
    g1, g2 = guided_eps(c, u, 3.0), guided_eps(c, u, 5.0)
    assert torch.allclose(g2 - g1, 2 * (c - u))


def test_sampling_timesteps():
    assert sampling_timesteps(100, 50)[:3] == [100, 98, 96]
    assert sampling_timesteps(100, 50)[-1] == 2
    with pytest.raises(ContractError):
        sampling_timesteps(10, 11)


def test_sampling_is_deterministic_and_hook_identity(tiny_model):
    a, rec = sample("a redcircle", tiny_model, steps=5, rng=RngStream(4, "s"), batch=2)
    b, _ = sample("a redcircle", tiny_model, steps=5, rng=RngStream(4, "s"), batch=2,
                  hook=lambda i, t, x, r: x)
    assert torch.equal(a, b)
    assert a.shape == (2, 32, 32, 3) and float(a.abs().max()) <= 1.0
    assert len(rec) == 5


def test_hook_shape_contract(tiny_model):
    with pytest.raises(ContractError):
        sample("a redcircle", tiny_model, steps=3, rng=RngStream(0, "s"), hook=lambda i, t, x, r: x[:, :1])


def test_pretrain_overfits_and_leaves_uncond_alone():
    m = make_tiny_model(dtype=torch.float32, T=10)
    img = -torch.ones(1, 32, 32, 3)
    img[0, 8:24, 8:24, 0] = 1.0
    cfg = PretrainConfig(steps=300, batch_size=4, lr=1e-2, warmup=5, caption_dropout=0.0, T=10, log_every=0)
    before = m.encoder.table[m.encoder.vocab.uncond_id].detach().clone()
    curve, _ = pretrain(img, ["a redcircle"], m, cfg)
    assert sum(curve[-10:]) / 10 < 0.1 * curve[0]
    assert torch.equal(m.encoder.table[m.encoder.vocab.uncond_id], before)


def test_pretrain_curve_is_reproducible():
    img = -torch.ones(2, 32, 32, 3)
    img[1, :, :16, 2] = 1.0
    cfg = PretrainConfig(steps=5, batch_size=2, warmup=2, T=10, log_every=0)
    a, _ = pretrain(img, ["a redcircle", "a bluesquare"], make_tiny_model(dtype=torch.float32, T=10), cfg)
    b, _ = pretrain(img, ["a redcircle", "a bluesquare"], make_tiny_model(dtype=torch.float32, T=10), cfg)
    assert a == b
