"""Mean-field Gaussian weight posteriors (Bayes by Backprop style).

Each variational tensor stores a mean ``mu`` and a pre-scale ``rho`` with
``sigma = softplus(rho)``. Weights are drawn with the reparameterisation
``w = mu + sigma * eps`` so gradients flow to both parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

SAMPLE = "sample"
MEAN = "mean"


@dataclass(frozen=True)
class PriorSpec:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"prior std must be positive, got {self.std}")


def rho_for_sigma(sigma: float) -> float:
    """Inverse softplus, so that ``softplus(rho_for_sigma(s)) == s``."""
    return math.log(math.expm1(sigma))


class GaussianVariational(nn.Module):
    """A grid of independent Gaussians N(mu, softplus(rho)^2)."""

    def __init__(self, shape, init_sigma: float = 0.05, fan_in: int | None = None):
        super().__init__()
        shape = tuple(shape)
        self.mu = nn.Parameter(torch.empty(shape))
        self.rho = nn.Parameter(torch.full(shape, rho_for_sigma(init_sigma)))
        fan_in = fan_in if fan_in is not None else max(1, int(math.prod(shape[1:])))
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.mu.uniform_(-bound, bound)

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.rho)

    @property
    def shape(self) -> torch.Size:
        return self.mu.shape

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        return sample_weights(self.mu, self.rho, generator)

    def kl(self, prior: PriorSpec) -> torch.Tensor:
        return kl_to_prior(self.mu, self.rho, prior)


def sample_weights(mu: torch.Tensor, rho: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    if mu.shape != rho.shape:
        raise ValueError(f"mu shape {tuple(mu.shape)} != rho shape {tuple(rho.shape)}")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + F.softplus(rho) * eps


def kl_to_prior(mu: torch.Tensor, rho: torch.Tensor, prior: PriorSpec = PriorSpec()) -> torch.Tensor:
    """Closed-form KL( N(mu, softplus(rho)^2) || N(prior.mean, prior.std^2) ), summed."""
    sigma = F.softplus(rho)
    var_ratio = (sigma / prior.std) ** 2
    mean_term = ((mu - prior.mean) / prior.std) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio)).sum()


def variational_conv(
    x: torch.Tensor,
    weight: GaussianVariational,
    bias: GaussianVariational | None,
    generator: torch.Generator | None = None,
    mode: str = SAMPLE,
) -> torch.Tensor:
    """2-D convolution with same-size padding using sampled or mean weights."""
    if x.dim() != 4:
        raise ValueError(f"expected a (N, C, H, W) input, got shape {tuple(x.shape)}")
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {in_ch}")
    if mode == SAMPLE:
        w = weight.sample(generator)
        b = bias.sample(generator) if bias is not None else None
    elif mode == MEAN:
        w = weight.mu
        b = bias.mu if bias is not None else None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return F.conv2d(x, w, b, padding=(kh // 2, kw // 2))


class BayesConv2d(nn.Module):
    """Convolution whose weights and bias are Gaussian variational tensors."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, init_sigma: float = 0.05):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("same-size padding needs an odd kernel size")
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = GaussianVariational((out_channels, in_channels, kernel_size, kernel_size), init_sigma, fan_in)
        self.bias = GaussianVariational((out_channels,), init_sigma, fan_in)

    def forward(self, x, generator=None, mode=SAMPLE):
        return variational_conv(x, self.weight, self.bias, generator, mode)

    def kl(self, prior: PriorSpec) -> torch.Tensor:
        return self.weight.kl(prior) + self.bias.kl(prior)
