"""Probabilistic U-Net with a variational-dropout output layer.

The backbone U-Net maps an image to a feature map. A prior net (image only)
and a posterior net (image plus one grader mask) each output a diagonal
Gaussian over a low-dimensional latent ``z``. The head broadcasts ``z`` over
the feature map and applies three 1x1 convolutions; the weights of the last
one are random, with multiplicative Gaussian noise whose per-weight variance
ratio ``alpha`` is learned.

All stochasticity enters through explicit standard-normal noise tensors, so
every forward pass is a deterministic function of inputs, parameters and
noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

LOG_VARIANCE_RANGE = (-10.0, 10.0)
LOG_ALPHA_RANGE = (-8.0, 2.0)


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    latent_dim: int = 6
    base_width: int = 16
    scales: int = 4
    # width of the first prior/posterior encoder stage
    encoder_width: int = 8
    log_alpha_init: float = -4.0
    variational_dropout: bool = True
    seed: int = 0


@dataclass
class LatentGaussian:
    """Diagonal Gaussian with ``mean`` and ``log_variance`` of shape (B, L)."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValidationError(f"mean {tuple(self.mean.shape)} and log_variance "
                                  f"{tuple(self.log_variance.shape)} differ in shape")
        self.log_variance = self.log_variance.clamp(*LOG_VARIANCE_RANGE)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, index) -> "LatentGaussian":
        return LatentGaussian(self.mean[index], self.log_variance[index])


def sample_latent(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mean + exp(log_variance / 2) * noise``."""
    if noise.shape[-1] != g.dim:
        raise ValidationError(f"latent noise has length {noise.shape[-1]}, expected {g.dim}")
    return g.mean + torch.exp(0.5 * g.log_variance) * noise


class DropoutPosterior(nn.Module):
    """q(w) for the final 1x1 convolution: w = m * (1 + sqrt(alpha) * eps)."""

    def __init__(self, channels: int, log_alpha_init: float = -4.0):
        super().__init__()
        bound = 1.0 / np.sqrt(channels)
        self.weight_means = nn.Parameter(torch.empty(channels).uniform_(-bound, bound))
        self.log_alpha = nn.Parameter(torch.full((channels,), float(log_alpha_init)))
        self.bias = nn.Parameter(torch.zeros(1))

    @property
    def clamped_log_alpha(self) -> torch.Tensor:
        return self.log_alpha.clamp(*LOG_ALPHA_RANGE)

    @torch.no_grad()
    def clamp_(self):
        self.log_alpha.clamp_(*LOG_ALPHA_RANGE)


def sample_weights(d: DropoutPosterior, noise: torch.Tensor) -> torch.Tensor:
    """Draw final-layer weights with multiplicative Gaussian noise.

    ``noise`` has shape (..., C) where C matches ``d.weight_means``; leading
    dimensions index independent draws.
    """
    if noise.shape[-1:] != d.weight_means.shape:
        raise ValidationError(f"weight noise has trailing shape {tuple(noise.shape[-1:])}, "
                              f"expected {tuple(d.weight_means.shape)}")
    return d.weight_means * (1.0 + torch.exp(0.5 * d.clamped_log_alpha) * noise)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class UNet(nn.Module):
    """Plain U-Net: average-pool downsampling, bilinear upsampling."""

    def __init__(self, in_channels=1, base_width=16, scales=4):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(scales)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_block(cin, w))
            cin = w
        self.up = nn.ModuleList(_block(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(scales - 1)))
        self.out_channels = widths[0]

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return x


class LatentEncoder(nn.Module):
    """Convolutional encoder followed by global averaging and a 1x1 conv to (mean, log_variance)."""

    def __init__(self, in_channels, latent_dim, width=8, scales=4):
        super().__init__()
        widths = [width * 2 ** i for i in range(scales)]
        blocks = []
        cin = in_channels
        for w in widths:
            blocks.append(_block(cin, w))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.to_params = nn.Conv2d(cin, 2 * latent_dim, 1)
        self.latent_dim = latent_dim

    def forward(self, x) -> LatentGaussian:
        for i, block in enumerate(self.blocks):
            if i:
                x = F.avg_pool2d(x, 2)
            x = block(x)
        x = self.to_params(x.mean(dim=(2, 3), keepdim=True))[:, :, 0, 0]
        return LatentGaussian(x[:, :self.latent_dim], x[:, self.latent_dim:])


class ProbabilisticUNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone = UNet(1, config.base_width, config.scales)
            self.prior_net = LatentEncoder(1, config.latent_dim, config.encoder_width, config.scales)
            self.posterior_net = LatentEncoder(2, config.latent_dim, config.encoder_width, config.scales)
            f = self.backbone.out_channels
            self.head = nn.Sequential(
                nn.Conv2d(f + config.latent_dim, f, 1), nn.ReLU(),
                nn.Conv2d(f, f, 1), nn.ReLU(),
            )
            self.dropout = DropoutPosterior(f, config.log_alpha_init)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def head_channels(self) -> int:
        return self.dropout.weight_means.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.dropout.weight_means.dtype

    def _check_image(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[:, None]
        expected = (self.config.height, self.config.width)
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != expected:
            raise ValidationError(f"expected images of shape (B, 1, {expected[0]}, {expected[1]}), "
                                  f"got {tuple(x.shape)}")
        return x

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self._check_image(x))

    def prior_params(self, x: torch.Tensor) -> LatentGaussian:
        return self.prior_net(self._check_image(x))

    def posterior_params(self, x: torch.Tensor, y: torch.Tensor) -> LatentGaussian:
        x = self._check_image(x)
        if y.ndim == 3:
            y = y[:, None]
        if y.shape != x.shape:
            raise ValidationError(f"mask shape {tuple(y.shape)} does not match image shape {tuple(x.shape)}")
        return self.posterior_net(torch.cat([x, y.to(x.dtype)], dim=1))

    def head_weights(self, noise: torch.Tensor) -> torch.Tensor:
        """Final-layer weights for a batch of draws; noise is ignored without variational dropout."""
        if not self.config.variational_dropout:
            return self.dropout.weight_means.expand(noise.shape)
        return sample_weights(self.dropout, noise)

    def decode_features(self, features: torch.Tensor, z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        """Logit maps (B, H, W) from features (B, F, H, W), latents (B, L) and weights (B, F)."""
        b, _, h, wd = features.shape
        if z.shape != (b, self.latent_dim):
            raise ValidationError(f"z has shape {tuple(z.shape)}, expected {(b, self.latent_dim)}")
        if w.shape != (b, self.head_channels):
            raise ValidationError(f"w has shape {tuple(w.shape)}, expected {(b, self.head_channels)}")
        zmap = z[:, :, None, None].expand(b, z.shape[1], h, wd)
        hidden = self.head(torch.cat([features, zmap], dim=1))
        return torch.einsum("bchw,bc->bhw", hidden, w) + self.dropout.bias

    def decode(self, x: torch.Tensor, z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return self.decode_features(self.features(x), z, w)

    @torch.no_grad()
    def sample_prob_maps(self, pixels, samples: int, generator: torch.Generator) -> np.ndarray:
        """Draw ``samples`` foreground-probability maps for one image from the prior predictive."""
        x = torch.as_tensor(np.asarray(pixels), dtype=self.dtype)[None, None]
        feats = self.features(x)
        prior = self.prior_params(x)
        eps_z = torch.randn((samples, self.latent_dim), generator=generator, dtype=self.dtype)
        eps_w = torch.randn((samples, self.head_channels), generator=generator, dtype=self.dtype)
        z = sample_latent(prior, eps_z)
        w = self.head_weights(eps_w)
        logits = self.decode_features(feats.expand(samples, -1, -1, -1), z, w)
        return torch.sigmoid(logits).double().numpy()


def image_tensor(pixels, dtype=torch.float32) -> torch.Tensor:
    """(H, W) or (B, H, W) array to a (B, 1, H, W) tensor."""
    x = torch.as_tensor(np.asarray(pixels), dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    return x[:, None]


def save_checkpoint(model: ProbabilisticUNet, path, extra: dict | None = None) -> Path:
    """Write ``<path>`` (state dict) and ``<path>.json`` (architecture sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {"model": asdict(model.config), "dtype": str(model.dtype).replace("torch.", "")}
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> ProbabilisticUNet:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.is_file() or not sidecar_path.is_file():
        raise FileNotFoundError(f"checkpoint {path} or its sidecar {sidecar_path} is missing")
    sidecar = json.loads(sidecar_path.read_text())
    model = ProbabilisticUNet(ModelConfig(**sidecar["model"]))
    if sidecar.get("dtype") == "float64":
        model = model.double()
    try:
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint {path} does not match its recorded architecture: {exc}") from None
    model.eval()
    return model
