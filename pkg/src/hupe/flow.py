"""The invertible enhancer: hybrid invertible blocks applied bidirectionally.

Forward (`enhance`) maps a degraded image to its clear counterpart; the exact
inverse (`degrade`) maps a clear image back. The network first squeezes the
input down a ladder of factor-2 space-to-depth steps (one per block), then
each block runs its flow steps at one resolution and ends with an unsqueeze,
so the output returns to the input shape.

No clamping happens anywhere inside the invertible path; [0,1] clamping is
an export-time concern only.
"""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .spectral import SFABlock, faac_apply

DET_FLOOR = 1e-8


class PriorPair(NamedTuple):
    """Per-block conditioning pair: reciprocal transmission and ambient light."""

    t: torch.Tensor  # strictly positive
    b: torch.Tensor  # in [0, 1]


def squeeze(x: torch.Tensor, reverse: bool = False) -> torch.Tensor:
    """Factor-2 space-to-depth: C x H x W <-> 4C x H/2 x W/2.

    Sub-pixel ordering: output channel 4c + 2*dy + dx holds input channel c
    at offset (dy, dx), so a 2x2 patch [[a, b], [c, d]] becomes channels
    (a, b, c, d).
    """
    b, c, h, w = x.shape
    if reverse:
        if c % 4 != 0:
            raise ValueError(f"unsqueeze needs channels divisible by 4, got {c}")
        x = x.view(b, c // 4, 2, 2, h, w)
        x = x.permute(0, 1, 4, 2, 5, 3)
        return x.reshape(b, c // 4, h * 2, w * 2)
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even spatial dims, got {h}x{w}")
    x = x.view(b, c, h // 2, 2, w // 2, 2)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(b, 4 * c, h // 2, w // 2)


def prior_inject(
    x: torch.Tensor, t: torch.Tensor, b: torch.Tensor, reverse: bool = False
) -> torch.Tensor:
    """Physics-shaped affine conditioning: y = T*x + B*(1 - T).

    T is the reciprocal transmission and B the ambient light, both treated
    as conditioning; strict positivity of T makes the map invertible.
    """
    if (t <= 0).any():
        raise ValueError("reciprocal transmission map must be strictly positive")
    if reverse:
        return (x - b * (1.0 - t)) / t
    return t * x + b * (1.0 - t)


class ActNorm(nn.Module):
    """Per-channel affine y = scale * (x + bias), data-initialized.

    `dd_init` sets scale and bias from batch statistics so the first batch
    comes out with zero mean and unit variance per channel. Applying an
    uninitialized layer is an error.
    """

    EPS = 1e-6

    def __init__(self, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(False))

    def dd_init(self, x: torch.Tensor) -> None:
        if bool(self.initialized):
            raise RuntimeError("actnorm already initialized")
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ValueError("actnorm init needs >= 2 samples per channel")
        with torch.no_grad():
            mean = x.mean(dim=(0, 2, 3), keepdim=True)
            std = x.std(dim=(0, 2, 3), keepdim=True, unbiased=False)
            self.bias.copy_(-mean)
            self.scale.copy_(1.0 / (std + self.EPS))
            self.initialized.fill_(True)

    def set_identity(self) -> None:
        with torch.no_grad():
            self.scale.fill_(1.0)
            self.bias.fill_(0.0)
            self.initialized.fill_(True)

    def forward(self, x: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        if not bool(self.initialized):
            raise RuntimeError("actnorm applied before initialization")
        if reverse:
            return x / self.scale - self.bias
        return self.scale * (x + self.bias)


class InvConv(nn.Module):
    """Invertible 1x1 convolution: a dense C x C mix of the channels."""

    def __init__(self, channels: int, label: str = "", init: str = "identity"):
        super().__init__()
        self.label = label or "invconv"
        if init == "identity":
            w = torch.eye(channels)
        elif init == "orthogonal":
            w = torch.linalg.qr(torch.randn(channels, channels))[0]
        else:
            raise ValueError(f"unknown invconv init {init!r}")
        self.weight = nn.Parameter(w)
        self.assert_invertible()

    def assert_invertible(self) -> None:
        sign, logabsdet = torch.linalg.slogdet(self.weight.detach())
        if sign == 0 or logabsdet < torch.log(torch.tensor(DET_FLOOR)):
            raise ValueError(f"singular 1x1 convolution weight in {self.label}")

    def forward(self, x: torch.Tensor, reverse: bool = False) -> torch.Tensor:
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"{self.label}: channel mismatch {x.shape[1]} vs {self.weight.shape[0]}"
            )
        w = self.weight
        if reverse:
            try:
                w = torch.linalg.inv(w)
            except RuntimeError as exc:
                raise ValueError(
                    f"singular 1x1 convolution weight in {self.label}"
                ) from exc
        return F.conv2d(x, w.unsqueeze(-1).unsqueeze(-1))


class FlowStep(nn.Module):
    """One flow step: actnorm -> invertible 1x1 conv -> prior injection -> coupling."""

    def __init__(self, channels: int, label: str, sfa_hidden=None, invconv_init="identity"):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv(channels, label=label, init=invconv_init)
        self.sfa = SFABlock(channels // 2, hidden=sfa_hidden)

    def forward(self, x, prior=None, reverse=False, actnorm_init=False):
        if reverse:
            x = faac_apply(x, self.sfa, reverse=True)
            if prior is not None:
                x = prior_inject(x, *prior, reverse=True)
            x = self.invconv(x, reverse=True)
            return self.actnorm(x, reverse=True)
        if actnorm_init and not bool(self.actnorm.initialized):
            self.actnorm.dd_init(x)
        x = self.actnorm(x)
        x = self.invconv(x)
        if prior is not None:
            x = prior_inject(x, *prior)
        return faac_apply(x, self.sfa)


def _resize_pair(pair, size):
    t, b = pair
    if t.shape[-2:] != tuple(size):
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
        b = F.interpolate(b, size=size, mode="bilinear", align_corners=False)
    return PriorPair(t, b)


class HIB(nn.Module):
    """Hybrid invertible block: a stack of flow steps at one resolution.

    The block's (T, B) prior pair is resized to the working resolution and
    injected either at every step or only at the first, per config. The exit
    unsqueeze is applied by the parent model so intermediate features can be
    tapped at full channel width.
    """

    def __init__(self, channels, flow_steps, index, sfa_hidden=None,
                 invconv_init="identity", injection="step"):
        super().__init__()
        self.index = index
        self.injection = injection
        self.steps = nn.ModuleList(
            FlowStep(channels, f"HIB {index} step {k}", sfa_hidden, invconv_init)
            for k in range(flow_steps)
        )

    def _step_prior(self, pair, k, size):
        if pair is None or self.injection == "off":
            return None
        if self.injection == "block" and k != 0:
            return None
        return _resize_pair(pair, size)

    def forward(self, x, pair=None, reverse=False, actnorm_init=False):
        size = x.shape[-2:]
        order = reversed(range(len(self.steps))) if reverse else range(len(self.steps))
        for k in order:
            x = self.steps[k](
                x, self._step_prior(pair, k, size), reverse=reverse,
                actnorm_init=actnorm_init,
            )
        return x


@dataclass
class FlowConfig:
    in_channels: int = 3
    n_hibs: int = 3
    flow_steps: int = 6
    sfa_hidden: int | None = None
    invconv_init: str = "identity"
    # "step": inject the block prior at every flow step (default)
    # "block": only at the block's first step; "off": no injection
    prior_injection: str = "step"

    def channel_plan(self) -> list[int]:
        return [self.in_channels * 4 ** (self.n_hibs - i) for i in range(self.n_hibs)]


class HeuristicFlow(nn.Module):
    """The full invertible enhancer G_E (forward) / G_E^-1 (reverse)."""

    def __init__(self, config: FlowConfig | None = None, **kwargs):
        super().__init__()
        self.config = config or FlowConfig(**kwargs)
        cfg = self.config
        self.hibs = nn.ModuleList(
            HIB(ch, cfg.flow_steps, i, cfg.sfa_hidden, cfg.invconv_init,
                cfg.prior_injection)
            for i, ch in enumerate(cfg.channel_plan())
        )

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        n = self.config.n_hibs
        if h % (1 << n) or w % (1 << n):
            raise ValueError(f"input {h}x{w} not divisible by 2^{n}")
        if (h & (h - 1)) or (w & (w - 1)):
            raise ValueError(f"input dims must be powers of 2, got {h}x{w}")

    def _check_priors(self, priors) -> None:
        if priors is not None and len(priors) != len(self.hibs):
            raise ValueError(
                f"expected {len(self.hibs)} prior pairs, got {len(priors)}"
            )

    def forward(self, x, priors=None, reverse=False, return_taps=False,
                actnorm_init=False):
        self._check_input(x)
        self._check_priors(priors)
        n = self.config.n_hibs
        taps = []
        if reverse:
            for i in reversed(range(n)):
                x = squeeze(x)
                pair = priors[i] if priors is not None else None
                x = self.hibs[i](x, pair, reverse=True)
            for _ in range(n):
                x = squeeze(x, reverse=True)
        else:
            for _ in range(n):
                x = squeeze(x)
            for i in range(n):
                pair = priors[i] if priors is not None else None
                x = self.hibs[i](x, pair, actnorm_init=actnorm_init)
                if return_taps:
                    taps.append(x)
                x = squeeze(x, reverse=True)
        if return_taps:
            return x, taps
        return x

    def enhance(self, degraded, priors=None):
        return self.forward(degraded, priors)

    def degrade(self, clear, priors=None):
        return self.forward(clear, priors, reverse=True)

    def initialize_actnorm(self, batch, priors=None) -> None:
        """Data-dependent init of every actnorm from one forward traversal."""
        with torch.no_grad():
            self.forward(batch, priors, actnorm_init=True)

    def actnorm_initialized(self) -> bool:
        return all(
            bool(s.actnorm.initialized) for h in self.hibs for s in h.steps
        )

    def set_identity(self) -> None:
        """Force the exact identity map: unit actnorm, identity 1x1 convs.

        Coupling heads are already zero-initialized; with no prior pairs
        passed (T = 1 injection), forward then equals the identity.
        """
        with torch.no_grad():
            for hib in self.hibs:
                for step in hib.steps:
                    step.actnorm.set_identity()
                    step.invconv.weight.copy_(
                        torch.eye(step.invconv.weight.shape[0])
                    )

    def assert_invertible(self) -> None:
        for hib in self.hibs:
            for step in hib.steps:
                step.invconv.assert_invertible()

    def working_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial resolution at which each block (and its prior) operates."""
        n = self.config.n_hibs
        return [(h >> (n - i), w >> (n - i)) for i in range(n)]


def randomize_model(model: HeuristicFlow, seed: int, spread: float = 0.02) -> None:
    """Put the model in a random but well-conditioned parameter state.

    Used by round-trip property tests and the `check` CLI: every coupling
    head becomes non-trivial, actnorms get generic scales/biases, and the
    1x1 convs become random rotations (generic channel mixes that are
    exactly norm-preserving). All noise is fan-in scaled so activations stay
    O(1) through all flow steps; this mirrors the regime a trained model
    lives in, where outputs stay commensurate with [0,1] images. States that
    amplify features by orders of magnitude are numerically valid but make
    float32 round-trip tolerances meaningless.
    """
    gen = torch.Generator().manual_seed(seed)

    def noise(shape, std):
        return std * torch.randn(shape, generator=gen)

    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                # gain < 1 keeps the conditioning subnets mildly contractive,
                # which bounds how much the inverse pass amplifies float32
                # rounding from later steps
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(noise(m.weight.shape, 0.5 * fan_in**-0.5))
                if m.bias is not None:
                    m.bias.copy_(noise(m.bias.shape, spread))
        for hib in model.hibs:
            for step in hib.steps:
                c = step.invconv.weight.shape[0]
                # orthogonal mix: generic yet exactly norm-preserving
                q = torch.linalg.qr(torch.randn(c, c, generator=gen))[0]
                step.invconv.weight.copy_(q)
                # log-symmetric scales keep the 18-step product near 1
                step.actnorm.scale.copy_(
                    torch.exp(noise(step.actnorm.scale.shape, spread))
                )
                step.actnorm.bias.copy_(noise(step.actnorm.bias.shape, spread))
                step.actnorm.initialized.fill_(True)
                head = step.sfa.head
                fan_in = head.in_channels * 9
                head.weight.copy_(noise(head.weight.shape, spread * fan_in**-0.5))
                head.bias.copy_(noise(head.bias.shape, spread))
    model.assert_invertible()
