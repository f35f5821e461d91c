import numpy as np
import pytest
import torch

from soundscaper.diffusion import (
    cfg_combine,
    ddim_step,
    make_schedule,
    q_sample,
    q_sample_batch,
    sample,
    training_loss,
)
from soundscaper.unet import EpsPredictor, UnetConfig


@pytest.fixture(scope="module")
def sched():
    return make_schedule(1000, 0.0015, 0.0195, 200)


def test_schedule_paper_values(sched):
    assert sched.beta[0] == pytest.approx(0.0015)
    assert sched.beta[-1] == pytest.approx(0.0195)
    assert sched.alpha_bar[0] == pytest.approx(1 - 0.0015)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert 0 < sched.alpha_bar[-1] < 0.01  # far-noise endpoint
    assert len(sched.ddim_steps) == 200
    assert sched.ddim_steps[-1] == 1000
    assert np.all(np.diff(sched.ddim_steps) > 0)


def test_schedule_single_step():
    s = make_schedule(1, 0.0015, 0.0195, 1)
    np.testing.assert_allclose(s.alpha_bar, [1 - 0.0015])


def test_schedule_full_ddim():
    s = make_schedule(50, 0.001, 0.02, 50)
    np.testing.assert_array_equal(s.ddim_steps, np.arange(1, 51))


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(10, 0.02, 0.001, 5)
    with pytest.raises(ValueError):
        make_schedule(10, 0.001, 0.02, 11)


def test_q_sample_zero_noise(sched):
    z0 = torch.randn(2, 8, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    zt = q_sample(z0, 400, torch.zeros_like(z0), sched)
    np.testing.assert_allclose(
        zt.numpy(), np.sqrt(sched.alpha_bar_at(400)) * z0.numpy(), rtol=1e-12
    )


def test_q_sample_terminal_pure_noise(sched):
    eps = torch.randn(2, 8, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    zt = q_sample(torch.zeros_like(eps), 1000, eps, sched)
    np.testing.assert_allclose(
        zt.numpy(), np.sqrt(1 - sched.alpha_bar_at(1000)) * eps.numpy(), rtol=1e-12
    )


def test_q_sample_rejects_out_of_range(sched):
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        q_sample(z, 0, z, sched)
    with pytest.raises(ValueError):
        q_sample(z, 1001, z, sched)


def test_q_sample_variance_identity(sched):
    gen = torch.Generator().manual_seed(7)
    n = 10000
    for t in (1, 250, 1000):
        z0 = torch.randn(n, dtype=torch.float64, generator=gen)
        eps = torch.randn(n, dtype=torch.float64, generator=gen)
        zt = q_sample(z0, t, eps, sched)
        assert float((zt**2).mean()) == pytest.approx(1.0, rel=0.02)


def test_training_loss_oracle_predictor_is_zero(sched):
    z0 = torch.randn(4, 8, 8, 4, generator=torch.Generator().manual_seed(3))
    eps = torch.randn_like(z0)
    t = torch.randint(1, 1001, (4,), generator=torch.Generator().manual_seed(4))

    captured = {}

    def oracle(z_t, tt, z_e, ctx):
        return eps

    loss = training_loss(oracle, z0, z0, None, t, eps, sched)
    assert float(loss) == 0.0


def test_training_loss_zero_predictor_is_chi_square_mean(sched):
    gen = torch.Generator().manual_seed(5)
    z0 = torch.randn(64, 8, 8, 4, generator=gen)
    eps = torch.randn_like(z0)
    t = torch.randint(1, 1001, (64,), generator=gen)
    loss = training_loss(lambda *a: torch.zeros_like(eps), z0, z0, None, t, eps, sched)
    assert float(loss) == pytest.approx(1.0, rel=0.05)


def test_training_loss_batch_order_invariant(sched):
    gen = torch.Generator().manual_seed(6)
    z0 = torch.randn(8, 8, 8, 4, generator=gen)
    eps = torch.randn_like(z0)
    t = torch.randint(1, 1001, (8,), generator=gen)
    loss1 = training_loss(lambda z, tt, e, c: 0.5 * z, z0, z0, None, t, eps, sched)
    perm = torch.randperm(8, generator=gen)
    loss2 = training_loss(
        lambda z, tt, e, c: 0.5 * z, z0[perm], z0[perm], None, t[perm], eps[perm], sched
    )
    assert float(loss1) == pytest.approx(float(loss2), rel=1e-6)


def test_training_loss_surfaces_nan(sched):
    z0 = torch.zeros(2, 8, 4, 4)
    eps = torch.zeros_like(z0)
    t = torch.tensor([5, 10])

    def bad(z, tt, e, c):
        out = torch.zeros_like(z)
        out[0, 0, 0, 0] = float("nan")
        return out

    with pytest.raises(FloatingPointError):
        training_loss(bad, z0, z0, None, t, eps, sched)


def test_cfg_lambda_one_is_identity():
    a = torch.randn(3, 8, 4, 4, generator=torch.Generator().manual_seed(7))
    b = torch.randn_like(a)
    out = cfg_combine(a, b, 1.0)
    assert torch.equal(out, a)


def test_cfg_scalar_arithmetic():
    a = torch.full((2, 2), 1.0)
    b = torch.full((2, 2), 0.5)
    np.testing.assert_allclose(cfg_combine(a, b, 2.0).numpy(), 1.5)


def test_cfg_affine_in_equal_inputs():
    a = torch.randn(4, 4, generator=torch.Generator().manual_seed(8))
    for lam in (1.0, 2.5, 4.5, 7.0):
        assert torch.equal(cfg_combine(a, a.clone(), lam), a)


def test_cfg_warns_below_one():
    a = torch.zeros(2)
    with pytest.warns(UserWarning, match="guidance"):
        cfg_combine(a, a, 0.5)


def test_cfg_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


def test_ddim_oracle_inversion(sched):
    gen = torch.Generator().manual_seed(9)
    z0 = torch.randn(2, 8, 8, 4, dtype=torch.float64, generator=gen)
    eps = torch.randn_like(z0)
    for t in sched.ddim_steps:
        zt = q_sample(z0, int(t), eps, sched)
        x0_hat = ddim_step(zt, int(t), 0, eps, sched)
        rel = float(torch.norm(x0_hat - z0) / torch.norm(z0))
        assert rel < 1e-5, (t, rel)


def test_ddim_t_prev_zero_returns_x0(sched):
    gen = torch.Generator().manual_seed(10)
    z0 = torch.randn(1, 8, 4, 4, dtype=torch.float64, generator=gen)
    eps = torch.randn_like(z0)
    zt = q_sample(z0, 500, eps, sched)
    x0_hat = ddim_step(zt, 500, 0, eps, sched)
    ab = sched.alpha_bar_at(500)
    manual = (zt - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    assert torch.equal(x0_hat, manual)


def test_ddim_rejects_non_monotone(sched):
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        ddim_step(z, 100, 100, z, sched)
    with pytest.raises(ValueError):
        ddim_step(z, 100, 200, z, sched)


def test_ddim_deterministic(sched):
    gen = torch.Generator().manual_seed(11)
    z = torch.randn(1, 8, 4, 4, generator=gen)
    eps = torch.randn_like(z)
    a = ddim_step(z, 500, 400, eps, sched)
    b = ddim_step(z.clone(), 500, 400, eps.clone(), sched)
    assert torch.equal(a, b)


class CountingPredictor(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.calls = 0
        self.lin = torch.nn.Conv2d(8, 8, 1)

    def forward(self, z_t, t, z_e, ctx):
        self.calls += 1
        scale = (t.float().view(-1, 1, 1, 1) / 1000.0)
        return self.lin(z_t) * 0.01 + 0.1 * scale * z_e


def test_sample_deterministic_and_call_count(sched):
    torch.manual_seed(12)
    pred = CountingPredictor()
    z_e = torch.randn(2, 8, 16, 8)
    ctx = torch.randn(2, 2, 128)
    uncond = torch.randn(2, 2, 128)
    with torch.no_grad():
        a = sample(pred, z_e, ctx, uncond, sched, 4.5, torch.Generator().manual_seed(5))
        calls_one_run = pred.calls
        b = sample(pred, z_e, ctx, uncond, sched, 4.5, torch.Generator().manual_seed(5))
    assert calls_one_run == 2 * len(sched.ddim_steps) == 400
    assert torch.equal(a, b)


def test_sample_lambda_one_matches_conditional_only_sampler(sched):
    torch.manual_seed(13)
    pred = CountingPredictor()
    z_e = torch.randn(1, 8, 16, 8)
    ctx = torch.randn(1, 2, 128)
    uncond = torch.randn(1, 2, 128)
    with torch.no_grad():
        ours = sample(pred, z_e, ctx, uncond, sched, 1.0, torch.Generator().manual_seed(21))

        # independent conditional-only reverse loop
        z = torch.randn(z_e.shape, generator=torch.Generator().manual_seed(21))
        steps = sched.ddim_steps
        for i in range(len(steps) - 1, -1, -1):
            t = int(steps[i])
            t_prev = int(steps[i - 1]) if i > 0 else 0
            tb = torch.full((1,), t, dtype=torch.long)
            z = ddim_step(z, t, t_prev, pred(z, tb, z_e, ctx), sched)
    assert torch.equal(ours, z)


def test_sample_aborts_on_nan(sched):
    def nan_pred(z_t, t, z_e, ctx):
        return torch.full_like(z_t, float("nan"))

    z_e = torch.zeros(1, 8, 4, 4)
    with pytest.raises(FloatingPointError, match="t="):
        sample(nan_pred, z_e, torch.zeros(1, 2, 128), torch.zeros(1, 2, 128),
               sched, 4.5, torch.Generator().manual_seed(0))


def test_unet_shape_contract():
    torch.manual_seed(14)
    net = EpsPredictor(UnetConfig())
    z = torch.randn(2, 8, 64, 16)
    t = torch.tensor([1, 1000])
    ctx = torch.randn(2, 2, 128)
    out = net(z, t, z, ctx)
    assert out.shape == z.shape
    with pytest.raises(ValueError):
        net(z, t, torch.randn(2, 8, 32, 16), ctx)


def test_unet_conditioning_changes_output():
    torch.manual_seed(15)
    net = EpsPredictor(UnetConfig())
    net.eval()
    z = torch.randn(1, 8, 64, 16)
    t = torch.tensor([500])
    with torch.no_grad():
        a = net(z, t, z, torch.zeros(1, 2, 128))
        b = net(z, t, z, torch.ones(1, 2, 128))
    assert not torch.equal(a, b)


def test_eq1_gradient_matches_finite_differences(sched):
    torch.manual_seed(16)
    net = EpsPredictor(UnetConfig(channels=(8, 8, 8, 8), time_dim=16,
                                  ctx_dim=8, heads=2, head_dim=4)).double()
    z0 = torch.randn(1, 8, 64, 16, dtype=torch.float64)
    eps = torch.randn_like(z0)
    ctx = torch.randn(1, 2, 8, dtype=torch.float64)
    t = torch.tensor([700])

    def loss_fn():
        return training_loss(net, z0, z0, ctx, t, eps, sched)

    loss = loss_fn()
    loss.backward()
    weight = net.conv_in.weight
    grad = weight.grad.clone()
    h = 1e-6
    for i in [(0, 0, 0, 0), (5, 3, 1, 1), (7, 15, 2, 2)]:
        with torch.no_grad():
            orig = weight[i].item()
            weight[i] = orig + h
            up = float(loss_fn())
            weight[i] = orig - h
            down = float(loss_fn())
            weight[i] = orig
        fd = (up - down) / (2 * h)
        assert fd == pytest.approx(float(grad[i]), rel=1e-3, abs=1e-10)
