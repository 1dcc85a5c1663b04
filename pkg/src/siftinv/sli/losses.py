"""The five training losses and their stage totals.

All losses are Tensor-valued scalars so gradients flow back through the
recording tape.  Single-channel inputs are replicated to three channels
before entering the perceptual backbone, which has a fixed 3-channel
input like the network it stands in for.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import InvalidParameterError, ShapeError
from .. import autodiff as ad
from ..autodiff import Tensor
from .networks import PerceptNet

_LOG_EPS = 1e-8    # keeps log() finite when a sigmoid saturates
_NORM_EPS = 1e-12  # keeps the sqrt in L2 norms differentiable at zero


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 100.0
    lambda_p: float = 1.0
    lambda_s: float = 10.0
    lambda_g: float = 0.2

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_p, self.lambda_s, self.lambda_g) < 0:
            raise InvalidParameterError("loss weights must be non-negative")


def _l2_norm(diff: Tensor) -> Tensor:
    return ad.sqrt(ad.sq_sum(diff) + _NORM_EPS)


def _to_three_channels(x: Tensor) -> Tensor:
    if x.data.shape[1] == 3:
        return x
    if x.data.shape[1] == 1:
        return ad.concat([x, x, x], axis=1)
    raise ShapeError("perceptual input must have 1 or 3 channels", x.data.shape, None)


def loss_recon(out: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error."""
    if out.data.shape != gt.data.shape:
        raise ShapeError("loss_recon shape mismatch", out.data.shape, gt.data.shape)
    return ad.abs_sum(out - gt) / float(out.data.size)


def _target_activations(gt: Tensor, percept: PerceptNet) -> list[Tensor]:
    # the target branch is constant; keep it off the tape
    with ad.no_grad():
        return [a.detach() for a in percept(_to_three_channels(gt))]


def loss_perceptual(out: Tensor, gt: Tensor, percept: PerceptNet) -> Tensor:
    """Sum over backbone stages of L2 distances between activation maps."""
    if out.data.shape != gt.data.shape:
        raise ShapeError("loss_perceptual shape mismatch", out.data.shape, gt.data.shape)
    acts_out = percept(_to_three_channels(out))
    acts_gt = _target_activations(gt, percept)
    total = None
    for ao, ag in zip(acts_out, acts_gt):
        term = _l2_norm(ao - ag)
        total = term if total is None else total + term
    return total


def loss_style(out: Tensor, gt: Tensor, percept: PerceptNet) -> Tensor:
    """Sum over stages of L2 distances between normalized channel Grams."""
    if out.data.shape != gt.data.shape:
        raise ShapeError("loss_style shape mismatch", out.data.shape, gt.data.shape)
    acts_out = percept(_to_three_channels(out))
    acts_gt = _target_activations(gt, percept)
    total = None
    for ao, ag in zip(acts_out, acts_gt):
        term = _l2_norm(ad.gram(ao) - ad.gram(ag))
        total = term if total is None else total + term
    return total


def loss_ragan(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Relativistic average GAN losses (loss_D, loss_G).

    Each logit is judged against the mean logit of the opposite class;
    with batch size 1 the expectations are spatial means over the
    patch-logit map.  Equal real/fake maps sit at the symmetric fixed
    point loss_D = loss_G = 2*ln(2).
    """
    if d_real.data.shape != d_fake.data.shape:
        raise ShapeError("logit map shape mismatch", d_real.data.shape, d_fake.data.shape)
    rel_real = ad.sigmoid(d_real - ad.mean(d_fake))
    rel_fake = ad.sigmoid(d_fake - ad.mean(d_real))
    loss_d = -(ad.mean(ad.log(rel_real + _LOG_EPS))
               + ad.mean(ad.log(1.0 - rel_fake + _LOG_EPS)))
    loss_g = -(ad.mean(ad.log(rel_fake + _LOG_EPS))
               + ad.mean(ad.log(1.0 - rel_real + _LOG_EPS)))
    return loss_d, loss_g


def stage1_generator_loss(l_rec: Tensor, l_perc: Tensor, l_adv: Tensor,
                          w: LossWeights) -> Tensor:
    return w.lambda_r * l_rec + w.lambda_p * l_perc + w.lambda_g * l_adv


def stage2_generator_loss(l_rec: Tensor, l_perc: Tensor, l_style: Tensor,
                          l_adv: Tensor, w: LossWeights) -> Tensor:
    return (w.lambda_r * l_rec + w.lambda_p * l_perc
            + w.lambda_s * l_style + w.lambda_g * l_adv)
