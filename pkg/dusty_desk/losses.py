"""Non-saturating adversarial losses and the R1 gradient penalty."""

from typing import Callable, NamedTuple, Optional

from .errors import ConfigError
from .tensor import Tensor, as_tensor, grad, zeros

Critic = Callable[[Tensor], Tensor]
Augment = Callable[[Tensor], Tensor]


class DiscriminatorLoss(NamedTuple):
    total: Tensor
    adversarial: Tensor
    r1: Tensor


def _check_batch(batch: Tensor, label: str) -> None:
    if batch.ndim == 0 or batch.shape[0] == 0:
        raise ConfigError(f"{label} batch is empty")


def d_adversarial(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """E[softplus(-D(real))] + E[softplus(D(fake))], i.e. -log s(D(x)) - log(1 - s(D(G(z))))."""
    return (-real_logits).softplus().mean() + fake_logits.softplus().mean()


def g_adversarial(fake_logits: Tensor) -> Tensor:
    """E[softplus(-D(fake))] = -E[log s(D(G(z)))]."""
    return (-fake_logits).softplus().mean()


def r1_penalty(critic: Critic, real: Tensor, gamma: float) -> Tensor:
    """(gamma / 2) * E[||grad_x D(x)||^2] at real samples, differentiable in D's params."""
    x = Tensor(as_tensor(real).data.copy(), requires_grad=True)
    logits = critic(x)
    (gradient,) = grad(logits.sum(), [x], create_graph=True)
    axes = tuple(range(1, gradient.ndim))
    norms = gradient.square().sum(axis=axes) if axes else gradient.square()
    return norms.mean() * (0.5 * gamma)


def loss_d(
    critic: Critic,
    real: Tensor,
    fake: Tensor,
    r1_gamma: float = 1.0,
    augment: Optional[Augment] = None,
) -> DiscriminatorLoss:
    """Discriminator loss on a real and a (detached) fake batch, plus R1.

    ``augment`` runs once per batch; R1 is taken at the same augmented reals
    the adversarial term scores.
    """
    real, fake = as_tensor(real), as_tensor(fake)
    _check_batch(real, "real")
    _check_batch(fake, "fake")
    if r1_gamma < 0:
        raise ConfigError(f"r1_gamma must be non-negative, got {r1_gamma}")
    if augment is not None:
        real, fake = augment(real), augment(fake)

    adversarial = d_adversarial(critic(real), critic(fake))
    if r1_gamma > 0:
        r1 = r1_penalty(critic, real, r1_gamma)
    else:
        r1 = zeros(())
    return DiscriminatorLoss(total=adversarial + r1, adversarial=adversarial, r1=r1)


def loss_g(critic: Critic, fake: Tensor, augment: Optional[Augment] = None) -> Tensor:
    """Non-saturating generator loss."""
    fake = as_tensor(fake)
    _check_batch(fake, "fake")
    if augment is not None:
        fake = augment(fake)
    return g_adversarial(critic(fake))
