import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from crossda import losses as L

torch.set_default_dtype(torch.float32)


class ConstD(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.p, dtype=x.dtype)


class PassD(nn.Module):
    """Probability equals the first channel, so callers control D exactly."""

    def forward(self, x):
        return x[:, :1]


class ToyD(nn.Module):
    """Per-pixel logistic scorer with 3 parameters."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([0.7, -0.4], dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(0.1, dtype=torch.float64))

    def score(self, x):
        return (self.w[0] * x[:, :1] + self.w[1] * x[:, 1:2] + self.b)

    def forward(self, x):
        return torch.sigmoid(self.score(x))


class ToyG(nn.Module):
    def __init__(self, a=1.2, b=-0.05):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(b, dtype=torch.float64))

    def forward(self, x):
        return self.a * x + self.b


def fd_check(loss_fn, params, eps=1e-6):
    """Compare autograd with central differences; return max relative error."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[i].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def batch(seed, shape=(3, 4, 5, 5)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64)


# --- discriminator / generator adversarial terms ---------------------------------


def test_disc_loss_perfect_discriminator():
    real, fake = torch.ones(2, 4, 8, 8), torch.zeros(2, 4, 8, 8)
    assert L.disc_loss(PassD(), real, fake).item() == 0.0


def test_disc_loss_chance():
    x = torch.rand(2, 4, 8, 8)
    assert L.disc_loss(ConstD(0.5), x, x).item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_disc_loss_finite_difference():
    D = ToyD()
    real, fake = batch(0), batch(1)
    assert sum(p.numel() for p in D.parameters()) == 3
    assert fd_check(lambda: L.disc_loss(D, real, fake), list(D.parameters())) < 1e-3


def test_disc_loss_nonfinite_raises():
    x = torch.rand(1, 4, 4, 4)
    with pytest.raises(L.TrainingDivergenceError):
        L.disc_loss(ConstD(float("nan")), x, x)


def test_gan_loss_values():
    x = torch.rand(2, 4, 8, 8)
    assert L.gan_loss(ConstD(1.0), x).item() == 0.0
    assert L.gan_loss(ConstD(0.5), x).item() == pytest.approx(math.log(2), abs=1e-6)


def test_gan_loss_joint_batch_uses_fake_half():
    real, fake = torch.ones(2, 4, 4, 4), torch.full((2, 4, 4, 4), 0.5)
    assert L.gan_loss(PassD(), fake, real=real).item() == pytest.approx(math.log(2), abs=1e-6)


def test_gan_loss_finite_difference():
    D, G = ToyD(), ToyG()
    x = batch(2)
    assert fd_check(lambda: L.gan_loss(D, G(x)), list(G.parameters())) < 1e-3


# --- consistency terms ----------------------------------------------------------------


def test_identity_loss_values(rng):
    x = torch.rand(2, 4, 6, 6)
    assert L.identity_loss(nn.Identity(), x).item() == 0.0

    def shift_one(t):
        out = t.clone()
        out[:, 2] += 0.1
        return out

    assert L.identity_loss(shift_one, x).item() == pytest.approx(0.025, abs=1e-6)
    y = torch.rand(2, 4, 6, 6)
    assert L.identity_loss(None, x, out=y).item() == pytest.approx((x - y).abs().mean().item(), abs=1e-7)


def test_cycle_loss_values():
    a, b = torch.rand(2, 4, 5, 5), torch.rand(2, 4, 5, 5)
    ident = nn.Identity()
    assert L.cycle_loss(ident, ident, a, b).item() == 0.0
    c = 0.1
    assert L.cycle_loss(lambda t: t + c, lambda t: t - c, a, b).item() == pytest.approx(0.0, abs=1e-6)
    const = torch.full((1, 4, 3, 3), 0.3, dtype=torch.float64)
    assert L.cycle_loss(lambda t: 2 * t, ident, const, const).item() == pytest.approx(0.6, abs=1e-6)


def test_cycle_loss_finite_difference():
    g1, g2 = ToyG(1.1, 0.02), ToyG(0.8, -0.03)
    a, b = batch(3), batch(4)
    assert fd_check(lambda: L.cycle_loss(g1, g2, a, b), [*g1.parameters(), *g2.parameters()]) < 1e-3


def test_bernoulli_kl_values():
    p = torch.rand(3, 1, 4, 4)
    assert L.bernoulli_kl(p, p).abs().max().item() < 1e-6
    kl = L.bernoulli_kl(torch.full((1,), 0.9, dtype=torch.float64), torch.full((1,), 0.5, dtype=torch.float64))
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert kl.item() == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.3681, abs=1e-4)


def test_bernoulli_kl_nonnegative():
    g = torch.Generator().manual_seed(5)
    p, q = torch.rand(1000, generator=g), torch.rand(1000, generator=g)
    assert (L.bernoulli_kl(p, q) >= -1e-7).all()


def test_seg_consistency_identity_and_gradient_flow():
    f = ToyD()
    for p in f.parameters():
        p.requires_grad_(False)
    x = batch(6)
    assert L.seg_consistency_loss(f, x, G=nn.Identity()).item() == pytest.approx(0.0, abs=1e-6)
    G = ToyG(1.3, 0.1)
    loss = L.seg_consistency_loss(f, x, G=G)
    loss.backward()
    assert G.a.grad is not None and f.w.grad is None
    assert fd_check(lambda: L.seg_consistency_loss(f, x, G=G), list(G.parameters())) < 1e-3


def test_seg_consistency_saturated_probabilities_stay_finite():
    f = ConstD(1.0)
    x = torch.rand(1, 4, 4, 4)
    assert torch.isfinite(L.seg_consistency_loss(f, x, out=x))


# --- gradient penalty -----------------------------------------------------------------


def test_gradient_penalty_constant_d():
    x = torch.rand(2, 4, 8, 8)
    assert L.gradient_penalty(ConstD(0.3), x).item() == 0.0


def test_gradient_penalty_analytic_sigmoid():
    w = torch.tensor([0.5, -1.0, 0.25, 2.0], dtype=torch.float64)

    class Linear:
        def __call__(self, x):
            return torch.sigmoid((x * w.view(1, 4, 1, 1)).sum(dim=1, keepdim=True))

    x = batch(7, (5, 4, 1, 1))
    s = (x[:, :, 0, 0] * w).sum(dim=1)
    sig = torch.sigmoid(s)
    expected = ((sig * (1 - sig)) ** 2 * (w ** 2).sum()).mean()
    got = L.gradient_penalty(Linear(), x, on="prob")
    assert got.item() == pytest.approx(expected.item(), rel=1e-9)


def test_gradient_penalty_on_score_of_linear_d():
    D = ToyD()
    x = batch(8, (4, 4, 3, 3))
    # score is linear in x: every pixel contributes w0^2 + w1^2
    expected = 9 * (D.w ** 2).sum().item()
    assert L.gradient_penalty(D, x).item() == pytest.approx(expected, rel=1e-9)


def test_input_gradient_finite_difference():
    D = ToyD()
    x = batch(9, (2, 4, 3, 3)).requires_grad_(True)
    (g,) = torch.autograd.grad(D(x).sum(), x)
    eps = 1e-6
    worst = 0.0
    flat = x.data.view(-1)
    for i in range(0, flat.numel(), 5):
        old = flat[i].item()
        flat[i] = old + eps
        up = D(x).sum().item()
        flat[i] = old - eps
        down = D(x).sum().item()
        flat[i] = old
        num = (up - down) / (2 * eps)
        worst = max(worst, abs(num - g.view(-1)[i].item()) / max(abs(num), 1e-8))
    assert worst < 1e-3


def test_gradient_penalty_bad_mode():
    with pytest.raises(ValueError):
        L.gradient_penalty(ToyD(), batch(0), on="logit")
