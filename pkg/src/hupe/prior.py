"""Heuristic priors: gradient/depth maps, the prior-guided encoder and the
underwater imaging model.

The imaging model relates an underwater capture I to the latent scene J via
the transmission t and ambient light B:

    restore:  J = I / t + B * (t - 1) / t
    degrade:  I = t * J + B * (1 - t)        (exact algebraic inverse)

with t = exp(-beta * d) from the attenuation coefficient beta and scene
depth d. The prior-guided encoder consumes the degraded image together with
its gradient and depth maps and emits one (T, B) conditioning pair per
invertible block, where T = 1/t is the reciprocal transmission.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .flow import PriorPair

T_FLOOR = 0.05

_SOBEL_X = torch.tensor([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
_SOBEL_Y = _SOBEL_X.t()
_LUMA = (0.299, 0.587, 0.114)


@dataclass
class PhysicalParams:
    """Parameters of the imaging model for one image.

    t may be a scalar, a per-channel vector or a full map; B likewise. Both
    broadcast against N x C x H x W images.
    """

    t: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        self.t = torch.as_tensor(self.t)
        self.b = torch.as_tensor(self.b)
        if (self.t <= 0).any() or (self.t > 1).any():
            raise ValueError("transmission must lie in (0, 1]")


def luminance(img: torch.Tensor) -> torch.Tensor:
    r, g, b = img[:, 0:1], img[:, 1:2], img[:, 2:3]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def gradient_map(img: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Sobel magnitude of the luminance, max-normalized to [0, 1] per image.

    Peaks below 1e-6 are float residue of flat images (the faintest real
    8-bit edge is ~4e-3), so such images map to all zeros rather than
    normalized noise.
    """
    if img.shape[1] != 3:
        raise ValueError("expected a 3-channel image")
    y = luminance(img)
    y = F.pad(y, (1, 1, 1, 1), mode="replicate")
    kx = _SOBEL_X.to(img.dtype).view(1, 1, 3, 3)
    ky = _SOBEL_Y.to(img.dtype).view(1, 1, 3, 3)
    gx = F.conv2d(y, kx)
    gy = F.conv2d(y, ky)
    mag = torch.sqrt(gx**2 + gy**2)
    peak = mag.amax(dim=(1, 2, 3), keepdim=True)
    out = mag / (peak + eps)
    return torch.where(peak > 1e-6, out, torch.zeros_like(out))


def dark_channel(img: torch.Tensor, window: int = 15) -> torch.Tensor:
    """Windowed minimum over channels and a window x window neighborhood."""
    mins = img.amin(dim=1, keepdim=True)
    pad = window // 2
    mins = F.pad(mins, (pad, pad, pad, pad), mode="replicate")
    return -F.max_pool2d(-mins, window, stride=1)


def depth_map(img: torch.Tensor, window: int = 15, eps: float = 1e-8) -> torch.Tensor:
    """Dark-channel depth proxy, min-max rescaled to [0, 1] per image.

    A constant dark channel (e.g. an all-zeros or all-ones image) rescales
    to 0 everywhere by convention.
    """
    if img.shape[1] != 3:
        raise ValueError("expected a 3-channel image")
    dark = dark_channel(img, window)
    lo = dark.amin(dim=(1, 2, 3), keepdim=True)
    hi = dark.amax(dim=(1, 2, 3), keepdim=True)
    return (dark - lo) / (hi - lo + eps)


def transmission_from_depth(
    depth: torch.Tensor, beta, sign: str = "neg"
) -> torch.Tensor:
    """Beer-Lambert transmission t = exp(-beta * d), clipped to [0.05, 1].

    `sign="pos"` keeps the exponent positive for ablation; under the [0.05, 1]
    clip that form saturates at 1 for any positive optical depth.
    """
    if (depth < 0).any():
        raise ValueError("depth must be non-negative")
    beta = torch.as_tensor(beta, dtype=depth.dtype)
    if (beta < 0).any():
        raise ValueError("attenuation coefficient must be non-negative")
    if sign not in ("neg", "pos"):
        raise ValueError(f"unknown transmission sign {sign!r}")
    expo = -beta * depth if sign == "neg" else beta * depth
    return torch.clamp(torch.exp(expo), T_FLOOR, 1.0)


def physical_apply(x: torch.Tensor, params: PhysicalParams, direction: str) -> torch.Tensor:
    """Apply the imaging model: `restore` (I -> J) or `degrade` (J -> I)."""
    t = params.t.to(x.dtype)
    b = params.b.to(x.dtype)
    if direction == "restore":
        return x / t + b * (t - 1.0) / t
    if direction == "degrade":
        return t * x - b * (t - 1.0)
    raise ValueError(f"unknown direction {direction!r}")


class PriorEncoder(nn.Module):
    """Strided conv encoder estimating per-block (T, B) pairs.

    Input is the channel-wise concatenation of the degraded image, its
    gradient map and its depth map (5 channels). A head at each block's
    working resolution emits 2 channels split into the ambient-light map
    (sigmoid, in [0, 1]) and the reciprocal-transmission map (softplus plus
    a floor, strictly positive).

    Head initialization is chosen so that the whole injector starts as the
    identity: T = 1 and hence B * (1 - T) = 0 at step zero.
    """

    T_EPS = 1e-3
    # softplus(bias) + T_EPS == 1 at zero weights
    _T_BIAS = 0.5397424172369522

    def __init__(self, n_blocks: int = 3, widths: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        self.n_blocks = n_blocks
        act = nn.LeakyReLU(0.2)
        self.stem = nn.Sequential(nn.Conv2d(5, widths[0], 3, padding=1), act)
        downs, heads = [], []
        ch = widths[0]
        for i in range(n_blocks):
            nxt = widths[min(i + 1, len(widths) - 1)]
            downs.append(nn.Sequential(nn.Conv2d(ch, nxt, 3, stride=2, padding=1), act))
            heads.append(nn.Conv2d(nxt, 2, 1))
            ch = nxt
        self.downs = nn.ModuleList(downs)
        self.heads = nn.ModuleList(heads)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            with torch.no_grad():
                head.bias.copy_(torch.tensor([0.0, self._T_BIAS]))

    def forward(self, degraded, gradient, depth) -> list[PriorPair]:
        if not (degraded.shape[-2:] == gradient.shape[-2:] == depth.shape[-2:]):
            raise ValueError("image, gradient and depth maps must share spatial dims")
        x = torch.cat([degraded, gradient, depth], dim=1)
        x = self.stem(x)
        # deepest block first: block i runs at 1/2^(n_blocks - i) resolution
        raw = []
        for down, head in zip(self.downs, self.heads):
            x = down(x)
            raw.append(head(x))
        pairs = []
        for maps in reversed(raw):
            b = torch.sigmoid(maps[:, 0:1])
            t = F.softplus(maps[:, 1:2]) + self.T_EPS
            pairs.append(PriorPair(t, b))
        return pairs


def hpe_encode(degraded: torch.Tensor, encoder: PriorEncoder) -> list[PriorPair]:
    """Gradient/depth estimation plus encoding, in one call."""
    return encoder(degraded, gradient_map(degraded), depth_map(degraded))
