"""Adversarial, consistency and regularisation losses.

All losses are means over batch, channels, pixels and discriminator map
entries, so the default weights do not depend on batch or patch size.
``D`` arguments are callables returning probabilities; the gradient penalty
additionally uses ``D.score`` (pre-sigmoid logits) when it exists.
"""

from __future__ import annotations

import torch

EPS = 1e-6


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None, last_checkpoint=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
        self.last_checkpoint = last_checkpoint


def _finite(value: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise TrainingDivergenceError(f"non-finite {what}")
    return value


def _neg_log(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(p.clamp_min(EPS))


def _joint(D, real: torch.Tensor, fake: torch.Tensor, fn=None):
    """Evaluate ``D`` once on the concatenated batch and split the result.

    A single pass keeps batch-norm statistics shared between real and
    generated samples; separate passes would normalise each batch on its own
    and hide any global radiometric offset from the discriminator.
    """
    fn = fn or D
    out = fn(torch.cat([real, fake], dim=0))
    return out[: len(real)], out[len(real) :]


def disc_loss(D, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy: real patches -> 1, generated patches -> 0."""
    p_real, p_fake = _joint(D, real, fake.detach())
    _finite(p_real, "discriminator output")
    _finite(p_fake, "discriminator output")
    return _neg_log(p_real).mean() + _neg_log(1.0 - p_fake).mean()


def gan_loss(D, fake: torch.Tensor, real: torch.Tensor | None = None) -> torch.Tensor:
    """Non-saturating generator loss ``-log D(G(x))``.

    With ``real`` the discriminator sees the same joint batch as in
    :func:`disc_loss`; only the generated half enters the loss.
    """
    p_fake = D(fake) if real is None else _joint(D, real.detach(), fake)[1]
    return _neg_log(_finite(p_fake, "discriminator output")).mean()


def identity_loss(G, batch: torch.Tensor, out: torch.Tensor | None = None) -> torch.Tensor:
    if out is None:
        out = G(batch)
    return (batch - out).abs().mean()


def cycle_loss(G_ab, G_ba, batch_a, batch_b, fake_b=None, fake_a=None) -> torch.Tensor:
    """L1 round-trip error in both directions; ``fake_*`` reuse forward passes."""
    fake_b = G_ab(batch_a) if fake_b is None else fake_b
    fake_a = G_ba(batch_b) if fake_a is None else fake_a
    return (batch_a - G_ba(fake_b)).abs().mean() + (batch_b - G_ab(fake_a)).abs().mean()


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    q = q.clamp(EPS, 1 - EPS)
    return p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))


def seg_consistency_loss(classifier, batch, G=None, out=None) -> torch.Tensor:
    """KL between cloud probabilities on the input and on the translated input.

    The classifier's parameters are never updated and the reference
    probabilities are detached; gradients reach ``G`` only through ``q``.
    """
    if out is None:
        out = G(batch)
    with torch.no_grad():
        p = classifier(batch)
    q = classifier(out)
    loss = bernoulli_kl(p, q).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError("non-finite segmentation-consistency loss after clamping")
    return loss


def gradient_penalty(D, real: torch.Tensor, on: str = "score", fake: torch.Tensor | None = None) -> torch.Tensor:
    """Zero-centred penalty: mean over the batch of ``||grad_x sum D(x)||^2``.

    ``on="score"`` differentiates the pre-sigmoid logits (the default);
    ``on="prob"`` differentiates the sigmoid output.  With ``fake`` the
    discriminator runs on the joint batch and only the real half is
    differentiated.
    """
    real = real.detach().requires_grad_(True)
    if on == "score" and hasattr(D, "score"):
        fn = D.score
    elif on in ("score", "prob"):
        fn = D
    else:
        raise ValueError(f"on must be 'score' or 'prob', got {on!r}")
    out = fn(real) if fake is None else _joint(D, real, fake.detach(), fn)[0]
    if not out.requires_grad:
        return out.new_zeros(())
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return out.new_zeros(())
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()
