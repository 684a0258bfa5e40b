"""One-encoder-m-decoder U-Net with rater-specific attention gates.

A single deterministic encoder feeds ``m`` decoder branches. Each branch owns
its decoder blocks, its attention gates on the skip connections and its
output head; with ``use_bayesian_decoders`` every layer of a branch is a
:class:`~multirater.variational.BayesConv2d`. :func:`build_model` assembles
the baseline ladder (vanilla, om, oma, omba, ensemble).
"""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .variational import SAMPLE, BayesConv2d, PriorSpec

VARIANTS = ("vanilla", "om", "oma", "omba", "ensemble")
CHECKPOINT_FORMAT = "multirater-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_channels: int = 32
    num_branches: int = 3
    use_attention: bool = False
    use_bayesian_decoders: bool = False
    input_channels: int = 1
    init_sigma: float = 0.05

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_branches < 1:
            raise ValueError(f"num_branches must be >= 1, got {self.num_branches}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def check_input(self, shape) -> None:
        h, w = shape[-2:]
        factor = 2 ** (self.depth - 1)
        if h % factor or w % factor:
            raise ValueError(f"input size {h}x{w} is not divisible by 2^(depth-1) = {factor}")


class Conv2d(nn.Conv2d):
    """Deterministic same-padded convolution sharing BayesConv2d's call signature."""

    def __init__(self, in_channels, out_channels, kernel_size):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x, generator=None, mode=SAMPLE):
        return super().forward(x)


def make_conv(in_ch: int, out_ch: int, kernel_size: int, bayes: bool, init_sigma: float = 0.05):
    if bayes:
        return BayesConv2d(in_ch, out_ch, kernel_size, init_sigma)
    return Conv2d(in_ch, out_ch, kernel_size)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, bayes=False, init_sigma=0.05):
        super().__init__()
        self.conv1 = make_conv(in_ch, out_ch, 3, bayes, init_sigma)
        self.conv2 = make_conv(out_ch, out_ch, 3, bayes, init_sigma)

    def forward(self, x, generator=None, mode=SAMPLE):
        x = F.relu(self.conv1(x, generator, mode))
        return F.relu(self.conv2(x, generator, mode))


class Encoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = config.input_channels
        for level in range(config.depth):
            blocks.append(ConvBlock(in_ch, config.channels(level)))
            in_ch = config.channels(level)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        self.config.check_input(image.shape)
        feats = []
        x = image
        for level, block in enumerate(self.blocks):
            if level > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class AttentionGate(nn.Module):
    """Per-channel soft gate on an encoder skip feature.

    ``f_g = relu(F_x(f_s) + F_f(f_e))`` and ``f_a = f_e * sigmoid(f_g)``, where
    ``f_e`` is the encoder skip feature and ``f_s`` the decoder feature that was
    upsampled to the same spatial size. Both 1x1 convolutions map to
    ``f_e``'s channel count, so the gate has one coefficient per channel and
    pixel.
    """

    def __init__(self, skip_channels, gating_channels, bayes=False, init_sigma=0.05):
        super().__init__()
        self.F_x = make_conv(gating_channels, skip_channels, 1, bayes, init_sigma)
        self.F_f = make_conv(skip_channels, skip_channels, 1, bayes, init_sigma)

    def coefficients(self, f_e, f_s, generator=None, mode=SAMPLE):
        if f_e.shape[-2:] != f_s.shape[-2:]:
            raise ValueError(f"skip feature {tuple(f_e.shape)} and gating feature {tuple(f_s.shape)} differ in size")
        f_g = F.relu(self.F_x(f_s, generator, mode) + self.F_f(f_e, generator, mode))
        return torch.sigmoid(f_g)

    def forward(self, f_e, f_s, generator=None, mode=SAMPLE):
        return f_e * self.coefficients(f_e, f_s, generator, mode)


class Decoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        bayes = config.use_bayesian_decoders
        blocks, gates = [], []
        # levels are decoded coarse to fine: depth-2, ..., 0
        for level in reversed(range(config.depth - 1)):
            skip_ch, below_ch = config.channels(level), config.channels(level + 1)
            blocks.append(ConvBlock(skip_ch + below_ch, skip_ch, bayes, config.init_sigma))
            if config.use_attention:
                gates.append(AttentionGate(skip_ch, below_ch, bayes, config.init_sigma))
        self.blocks = nn.ModuleList(blocks)
        self.gates = nn.ModuleList(gates)
        self.head = make_conv(config.base_channels, 1, 1, bayes, config.init_sigma)

    def forward(self, features, generator=None, mode=SAMPLE, record_gates: list | None = None):
        x = features[-1]
        for i, block in enumerate(self.blocks):
            skip = features[-2 - i]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            if self.config.use_attention:
                coeff = self.gates[i].coefficients(skip, x, generator, mode)
                if record_gates is not None:
                    record_gates.append(coeff)
                skip = skip * coeff
            x = block(torch.cat([x, skip], dim=1), generator, mode)
        return torch.sigmoid(self.head(x, generator, mode))

    def kl(self, prior: PriorSpec) -> torch.Tensor:
        total = torch.zeros(())
        for module in self.modules():
            if isinstance(module, BayesConv2d):
                total = total + module.kl(prior)
        return total


class MultiDecoderUNet(nn.Module):
    """Shared encoder with ``num_branches`` independent decoders."""

    def __init__(self, config: NetworkConfig, variant: str = "om"):
        super().__init__()
        self.config = config
        self.variant = variant
        self.encoder = Encoder(config)
        self.decoders = nn.ModuleList(Decoder(config) for _ in range(config.num_branches))

    @property
    def num_branches(self) -> int:
        return self.config.num_branches

    @property
    def is_bayesian(self) -> bool:
        return self.config.use_bayesian_decoders

    def encode(self, image):
        return self.encoder(image)

    def decode_branch(self, features, r: int, generator=None, mode=SAMPLE, record_gates=None):
        if not 0 <= r < self.num_branches:
            raise IndexError(f"branch {r} out of range for {self.num_branches} branches")
        return self.decoders[r](features, generator, mode, record_gates)

    def branch_outputs(self, image, generator=None, mode=SAMPLE, branches=None) -> list[torch.Tensor]:
        """One (N, 1, H, W) probability map per requested branch, sharing one encoder pass."""
        feats = self.encode(image)
        branches = range(self.num_branches) if branches is None else branches
        return [self.decode_branch(feats, r, generator, mode) for r in branches]

    def branch_kl(self, r: int, prior: PriorSpec) -> torch.Tensor:
        return self.decoders[r].kl(prior)

    def forward(self, image, generator=None, mode=SAMPLE):
        return torch.cat(self.branch_outputs(image, generator, mode), dim=1)


class UNetEnsemble(nn.Module):
    """``m`` independent single-decoder U-Nets; branch r is member r."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.variant = "ensemble"
        member_cfg = dataclasses.replace(config, num_branches=1)
        self.members = nn.ModuleList(MultiDecoderUNet(member_cfg, "vanilla") for _ in range(config.num_branches))

    @property
    def num_branches(self) -> int:
        return len(self.members)

    @property
    def is_bayesian(self) -> bool:
        return self.config.use_bayesian_decoders

    def branch_outputs(self, image, generator=None, mode=SAMPLE, branches=None) -> list[torch.Tensor]:
        branches = range(self.num_branches) if branches is None else branches
        return [self.members[r].branch_outputs(image, generator, mode)[0] for r in branches]

    def branch_kl(self, r: int, prior: PriorSpec) -> torch.Tensor:
        return self.members[r].branch_kl(0, prior)

    def forward(self, image, generator=None, mode=SAMPLE):
        return torch.cat(self.branch_outputs(image, generator, mode), dim=1)


def resolve_config(variant: str, config: NetworkConfig) -> NetworkConfig:
    if variant == "vanilla":
        return dataclasses.replace(config, num_branches=1, use_attention=False, use_bayesian_decoders=False)
    if variant in ("om", "ensemble"):
        return dataclasses.replace(config, use_attention=False, use_bayesian_decoders=False)
    if variant == "oma":
        return dataclasses.replace(config, use_attention=True, use_bayesian_decoders=False)
    if variant == "omba":
        return dataclasses.replace(config, use_attention=True, use_bayesian_decoders=True)
    raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def build_model(variant: str, config: NetworkConfig, seed: int | None = None) -> nn.Module:
    """Construct a baseline-ladder model; ``seed`` fixes the initial weights."""
    config = resolve_config(variant, config)
    if seed is not None:
        torch.manual_seed(seed)
    if variant == "ensemble":
        return UNetEnsemble(config)
    return MultiDecoderUNet(config, variant)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class PredictionSet:
    branch_probs: np.ndarray  # (m, H, W)
    mc_samples: np.ndarray  # (m * n_mc, H, W), uint8, branch-major
    fused: np.ndarray  # (H, W)


@torch.no_grad()
def forward(model, image, generator: torch.Generator | None = None, n_mc: int = 1, mode: str = SAMPLE) -> PredictionSet:
    """Predict one case: ``n_mc`` weight draws per branch, fused with p(B_r) = 1/m."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    x = torch.as_tensor(image, dtype=torch.float32)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None]
    model.eval()
    draws = []  # n_mc lists of m tensors
    if isinstance(model, MultiDecoderUNet):
        feats = model.encode(x)
        for _ in range(n_mc):
            draws.append([model.decode_branch(feats, r, generator, mode)[0, 0] for r in range(model.num_branches)])
    else:
        for _ in range(n_mc):
            draws.append([p[0, 0] for p in model.branch_outputs(x, generator, mode)])
    per_branch = torch.stack([torch.stack(d) for d in draws], dim=1)  # (m, n_mc, H, W)
    branch_probs = per_branch.mean(dim=1)
    fused = branch_probs.mean(dim=0)
    samples = (per_branch >= 0.5).to(torch.uint8).reshape(-1, *per_branch.shape[-2:])
    return PredictionSet(branch_probs.numpy(), samples.numpy(), fused.numpy())


def save_checkpoint(model, path, seed: int | None = None, extra: dict | None = None) -> None:
    """Write a versioned checkpoint archive (a torch zip file holding plain dicts and tensors)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "config": dataclasses.asdict(model.config),
        "seed": seed,
        "extra": extra or {},
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, payload)`` from a file written by :func:`save_checkpoint`."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a multirater checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = NetworkConfig(**payload["config"])
    model = build_model(payload["variant"], config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
