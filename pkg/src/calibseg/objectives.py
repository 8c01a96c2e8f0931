"""Training objective: reconstruction, latent KL, weight KL and calibration.

The minimised quantity is

    reconstruction + beta * latent_kl + weight_kl / N + gamma * calibration

where reconstruction and latent_kl use posterior-net latents for every
(image, annotation) pair and calibration compares the grader mean with the
model mean under prior-net latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .model import LOG_ALPHA_RANGE, LatentGaussian, ProbabilisticUNet, sample_latent

# Sigmoid approximation of -KL(q(w) || log-uniform prior) for multiplicative
# Gaussian noise, offset so the penalty vanishes as alpha -> infinity.
VD_K1 = 0.63576
VD_K2 = 1.87320
VD_K3 = 1.48695

PM_EPS = 1e-7


def gaussian_kl(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ValidationError(f"cannot compare latents of shape {tuple(q.mean.shape)} and {tuple(p.mean.shape)}")
    var_ratio = torch.exp(q.log_variance - p.log_variance)
    mahalanobis = (q.mean - p.mean) ** 2 * torch.exp(-p.log_variance)
    return 0.5 * (var_ratio + mahalanobis - 1.0 - (q.log_variance - p.log_variance)).sum(dim=-1)


def vd_kl(log_alpha: torch.Tensor, clamp=LOG_ALPHA_RANGE) -> torch.Tensor:
    """Summed per-weight KL penalty of variational dropout (non-negative).

    Out-of-range ``log_alpha`` is clamped to ``clamp``; pass ``None`` to
    evaluate the approximation unclamped.
    """
    la = log_alpha if clamp is None else log_alpha.clamp(*clamp)
    neg_kl = VD_K1 * torch.sigmoid(VD_K2 + VD_K3 * la) - 0.5 * F.softplus(-la) - VD_K1
    return -neg_kl.sum()


def reconstruction_nll(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Bernoulli NLL from logits, summed over pixels and averaged over the batch."""
    if logits.shape != y.shape:
        raise ValidationError(f"logits {tuple(logits.shape)} and masks {tuple(y.shape)} differ in shape")
    if not torch.all((y == 0) | (y == 1)):
        raise ValidationError("reconstruction target must be binary")
    if logits.ndim == 2:
        logits, y = logits[None], y[None]
    nll = F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype), reduction="none")
    return nll.flatten(1).sum(dim=1).mean()


def calibration_loss(p_g: torch.Tensor, p_m: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between grader mean and model mean, averaged over pixels."""
    if p_g.shape != p_m.shape:
        raise ValidationError(f"p_g {tuple(p_g.shape)} and p_m {tuple(p_m.shape)} differ in shape")
    p_g = p_g.to(p_m.dtype)
    p_m = p_m.clamp(PM_EPS, 1.0 - PM_EPS)
    return -(p_g * torch.log(p_m) + (1.0 - p_g) * torch.log1p(-p_m)).mean()


@dataclass
class Batch:
    """Mini-batch of images with every one of their annotations.

    ``masks[k]`` annotates ``images[pair_index[k]]``; ``grader_count[b]`` is
    the size of image ``b``'s annotation set.
    """

    images: torch.Tensor  # (B, 1, H, W)
    masks: torch.Tensor  # (P, H, W)
    pair_index: torch.Tensor  # (P,) long
    grader_count: Sequence[int]
    ids: Sequence[str] = ()

    def validate(self):
        b = self.images.shape[0]
        if len(self.grader_count) != b:
            raise ConfigurationError(f"grader_count lists {len(self.grader_count)} images, batch has {b}")
        if self.masks.shape[0] != self.pair_index.shape[0]:
            raise ConfigurationError("masks and pair_index disagree on the number of pairs")
        counts = torch.bincount(self.pair_index, minlength=b).tolist()
        for i, (have, want) in enumerate(zip(counts, self.grader_count)):
            if have != want:
                name = self.ids[i] if self.ids else i
                raise ConfigurationError(
                    f"image {name} has {have} of its {want} annotations in the batch; "
                    "all annotations of an image must share a mini-batch"
                )

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def grader_mean(self) -> torch.Tensor:
        """Per-image grader mean computed from the annotations present in the batch."""
        total = torch.zeros((self.size,) + tuple(self.masks.shape[1:]), dtype=torch.float64)
        total.index_add_(0, self.pair_index, self.masks.to(torch.float64))
        counts = torch.as_tensor(self.grader_count, dtype=torch.float64)[:, None, None]
        return total / counts

    def to(self, dtype) -> "Batch":
        return Batch(self.images.to(dtype), self.masks.to(dtype), self.pair_index, self.grader_count, self.ids)


def batch_from_items(items) -> Batch:
    """Assemble a :class:`Batch` from dataset items, keeping annotation sets whole."""
    images, masks, index, counts, ids = [], [], [], [], []
    for b, it in enumerate(items):
        images.append(it.image.pixels)
        d = it.annotations.grader_count
        masks.append(it.annotations.masks)
        index.extend([b] * d)
        counts.append(d)
        ids.append(it.id)
    return Batch(
        images=torch.as_tensor(np.stack(images), dtype=torch.float32)[:, None],
        masks=torch.as_tensor(np.concatenate(masks), dtype=torch.float32),
        pair_index=torch.as_tensor(index, dtype=torch.long),
        grader_count=counts,
        ids=ids,
    )


@dataclass
class LossNoise:
    """Standard-normal noise consumed by one evaluation of :func:`total_loss`."""

    posterior_latent: torch.Tensor  # (P, L)
    posterior_weight: torch.Tensor  # (P, C)
    prior_latent: torch.Tensor  # (K, B, L)
    prior_weight: torch.Tensor  # (K, B, C)

    @classmethod
    def draw(cls, batch: Batch, model: ProbabilisticUNet, k: int, generator=None) -> "LossNoise":
        p, b = batch.masks.shape[0], batch.size
        l, c, dt = model.latent_dim, model.head_channels, model.dtype

        def randn(*shape):
            return torch.randn(shape, generator=generator, dtype=dt)

        return cls(randn(p, l), randn(p, c), randn(k, b, l), randn(k, b, c))

    @classmethod
    def zeros(cls, batch: Batch, model: ProbabilisticUNet, k: int) -> "LossNoise":
        p, b = batch.masks.shape[0], batch.size
        l, c, dt = model.latent_dim, model.head_channels, model.dtype
        z = lambda *shape: torch.zeros(shape, dtype=dt)  # noqa: E731
        return cls(z(p, l), z(p, c), z(k, b, l), z(k, b, c))


def estimate_pm(model: ProbabilisticUNet, x: torch.Tensor, k: int = 4, generator=None,
                latent_noise=None, weight_noise=None, features=None, prior=None) -> torch.Tensor:
    """Model mean probability map averaged over ``k`` prior latents and weight draws.

    Noise may be passed explicitly as (k, B, L) and (k, B, C) tensors;
    otherwise it is drawn from ``generator``. ``features``/``prior`` let a
    caller reuse backbone and prior-net outputs. Differentiable.
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    if features is None:
        features = model.features(x)
    if prior is None:
        prior = model.prior_params(x)
    b = features.shape[0]
    if latent_noise is None:
        latent_noise = torch.randn((k, b, model.latent_dim), generator=generator, dtype=model.dtype)
    if weight_noise is None:
        weight_noise = torch.randn((k, b, model.head_channels), generator=generator, dtype=model.dtype)
    k = latent_noise.shape[0]
    z = sample_latent(prior, latent_noise).reshape(k * b, -1)
    w = model.head_weights(weight_noise.reshape(k * b, -1))
    feats = features.repeat(k, 1, 1, 1)
    probs = torch.sigmoid(model.decode_features(feats, z, w))
    return probs.reshape(k, b, *probs.shape[1:]).mean(dim=0)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    latent_kl: torch.Tensor
    weight_kl: torch.Tensor
    calibration: torch.Tensor
    total: torch.Tensor

    FIELDS = ("reconstruction", "latent_kl", "weight_kl", "calibration", "total")

    def as_dict(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in self.FIELDS}

    def nonfinite_terms(self) -> list[str]:
        return [name for name in self.FIELDS if not math.isfinite(float(getattr(self, name).detach()))]


def total_loss(batch: Batch, model: ProbabilisticUNet, beta: float, gamma: float, k: int = 4,
               n_train: int = 1, generator=None, noise: LossNoise | None = None) -> LossBreakdown:
    """Full minimisation objective on one grouped mini-batch.

    ``n_train`` is the number of training (image, annotation) pairs that
    scales the weight KL. With ``noise`` given, the result is a deterministic
    function of the parameters.
    """
    if beta < 0 or gamma < 0:
        raise ConfigurationError(f"beta and gamma must be non-negative, got {beta}, {gamma}")
    batch.validate()
    if noise is None:
        noise = LossNoise.draw(batch, model, k, generator)
    x = batch.images.to(model.dtype)
    y = batch.masks.to(model.dtype)
    idx = batch.pair_index

    features = model.features(x)
    prior = model.prior_params(x)
    posterior = model.posterior_params(x[idx], y)

    z = sample_latent(posterior, noise.posterior_latent)
    w = model.head_weights(noise.posterior_weight)
    logits = model.decode_features(features[idx], z, w)
    reconstruction = reconstruction_nll(logits, y)
    latent_kl = gaussian_kl(posterior, prior[idx]).mean()

    if model.config.variational_dropout:
        weight_kl = vd_kl(model.dropout.log_alpha)
    else:
        weight_kl = torch.zeros((), dtype=model.dtype)

    # evaluated even at gamma = 0 so ablation runs log a comparable value
    p_m = estimate_pm(model, x, latent_noise=noise.prior_latent, weight_noise=noise.prior_weight,
                      features=features, prior=prior)
    calibration = calibration_loss(batch.grader_mean().to(model.dtype), p_m)

    total = reconstruction + beta * latent_kl + weight_kl / n_train + gamma * calibration
    return LossBreakdown(reconstruction, latent_kl, weight_kl, calibration, total)
