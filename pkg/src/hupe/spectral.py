"""Fourier decomposition and the spatial-frequency affine coupling.

The coupling leaves the first half of the channels untouched and predicts a
(scale, shift) field for the second half from three views of the untouched
half: the raw spatial feature, its amplitude spectrum (recombined with the
original phase) and its phase spectrum (recombined with the original
amplitude).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn


def _check_pow2(h: int, w: int) -> None:
    if h < 1 or w < 1 or (h & (h - 1)) or (w & (w - 1)):
        raise ValueError(f"spatial dims must be powers of 2, got {h}x{w}")


@dataclass
class Spectrum:
    """Amplitude/phase split of a per-channel 2-D DFT.

    amplitude is non-negative; phase lies in (-pi, pi] with atan2(0, 0) = 0.
    """

    amplitude: torch.Tensor
    phase: torch.Tensor


def fft_decompose(x: torch.Tensor) -> Spectrum:
    """Per-channel 2-D DFT of an N x C x H x W tensor, as amplitude and phase."""
    _check_pow2(x.shape[-2], x.shape[-1])
    f = torch.fft.fft2(x, dim=(-2, -1))
    amplitude = torch.sqrt(f.real**2 + f.imag**2)
    phase = torch.atan2(f.imag, f.real)
    return Spectrum(amplitude=amplitude, phase=phase)


def fft_recompose(s: Spectrum) -> torch.Tensor:
    """Inverse of fft_decompose; the imaginary residue is discarded."""
    if s.amplitude.shape != s.phase.shape:
        raise ValueError("amplitude/phase shape mismatch")
    real = s.amplitude * torch.cos(s.phase)
    imag = s.amplitude * torch.sin(s.phase)
    return torch.fft.ifft2(torch.complex(real, imag), dim=(-2, -1)).real


def _fft_split_safe(x: torch.Tensor) -> Spectrum:
    """Like fft_decompose but with finite gradients at zero bins.

    sqrt and atan2 have undefined derivatives where a bin is exactly zero
    (common for quantized or symmetric inputs); the conditioning subnet
    trains through this split, so zero bins are floored at a level that
    leaves the forward values effectively unchanged.
    """
    _check_pow2(x.shape[-2], x.shape[-1])
    f = torch.fft.fft2(x, dim=(-2, -1))
    power = f.real**2 + f.imag**2
    amplitude = torch.sqrt(torch.clamp(power, min=1e-24))
    zero = (f.real == 0) & (f.imag == 0)
    real_safe = torch.where(zero, torch.ones_like(f.real), f.real)
    phase = torch.atan2(torch.where(zero, torch.zeros_like(f.imag), f.imag), real_safe)
    return Spectrum(amplitude=amplitude, phase=phase)


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a skip connection (spatial branch of the SFA)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.conv2(h)
        return x + h


class SFABlock(nn.Module):
    """Spatial-frequency affine subnet: produces (scale, shift) from u1.

    The output head is zero-initialized so the coupling starts as the
    identity. Raw scale is clamped to [-2, 2] before exponentiation, keeping
    scale inside [e^-2, e^2] and the coupling invertible for every reachable
    parameter state.
    """

    SCALE_CLAMP = 2.0

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        width = hidden or channels
        self.spatial = ResidualBlock(channels)
        self.amp_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.phase_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.fuse = nn.Sequential(
            nn.Conv2d(3 * channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Conv2d(width, 2 * channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, u1: torch.Tensor):
        spec = _fft_split_safe(u1)
        spatial = self.spatial(u1)
        # each frequency branch edits one spectrum and keeps the other
        amp_feat = fft_recompose(Spectrum(self.amp_conv(spec.amplitude), spec.phase))
        phase_feat = fft_recompose(Spectrum(spec.amplitude, self.phase_conv(spec.phase)))
        fused = self.fuse(torch.cat([spatial, amp_feat, phase_feat], dim=1))
        raw_scale, shift = self.head(fused).chunk(2, dim=1)
        scale = torch.exp(torch.clamp(raw_scale, -self.SCALE_CLAMP, self.SCALE_CLAMP))
        return scale, shift


def faac_apply(u: torch.Tensor, sfa: SFABlock, reverse: bool = False) -> torch.Tensor:
    """Frequency-aware affine coupling over a channel-wise (u1, u2) split."""
    c = u.shape[1]
    if c % 2 != 0:
        raise ValueError(f"coupling needs an even channel count, got {c}")
    u1, u2 = u[:, : c // 2], u[:, c // 2 :]
    scale, shift = sfa(u1)
    if reverse:
        u2 = (u2 - shift) / scale
    else:
        u2 = scale * u2 + shift
    return torch.cat([u1, u2], dim=1)
