"""Image quality metrics: full-reference PSNR/SSIM and the no-reference
underwater scores (UCIQE, UIQM and a contrast surrogate).

Inputs are H x W x 3 float arrays in [0, 1] (or H x W for grayscale where
noted). UCIQE/UIQM coefficients follow the metric literature; this module
keeps every component explicit so the values can be cross-checked against
an independent straight-loop implementation.

The contrast score ("ceiq_s") is NOT the published CEIQ regression: it is a
fixed-weight surrogate over the same feature family (SSIM against the
equalized image plus histogram entropies). It grows with remaining
equalization headroom, so lower values mean the image is already close to
its equalized version.
"""

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0

# chroma std / luminance contrast / mean saturation
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)
# colorfulness / sharpness / contrast
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UIQM_BLOCK = 8
UIQM_TRIM = 0.1
# PLIP model constant for the logarithmic contrast term
PLIP_GAMMA = 1026.0

_LUMA = np.array([0.299, 0.587, 0.114])


def _as_float_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected H x W [x C] image, got shape {x.shape}")
    return x


def luminance(x: np.ndarray) -> np.ndarray:
    x = _as_float_image(x)
    if x.shape[-1] == 1:
        return x[..., 0]
    return x[..., :3] @ _LUMA


def psnr(x, y) -> float:
    """10 log10(1 / MSE) for [0, 1] images; identical inputs report 99.0."""
    x = _as_float_image(x)
    y = _as_float_image(y)
    if x.shape != y.shape:
        raise ValueError("psnr operands must share a shape")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    xs = np.arange(size) - half
    k = np.exp(-(xs**2) / (2 * sigma**2))
    return k / k.sum()


def ssim(x, y, size: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM on [0, 1] luminance: 11 x 11 Gaussian, sigma 1.5,
    C1 = 0.01^2, C2 = 0.03^2, averaged over interior windows."""
    lx = luminance(x)
    ly = luminance(y)
    if lx.shape != ly.shape:
        raise ValueError("ssim operands must share a shape")
    if min(lx.shape) < size:
        raise ValueError(f"image smaller than the {size}x{size} ssim window")
    k = _gaussian_kernel(size, sigma)

    def blur(img):
        out = correlate1d(img, k, axis=0, mode="constant")
        out = correlate1d(out, k, axis=1, mode="constant")
        half = size // 2
        return out[half:-half, half:-half]

    c1, c2 = 0.01**2, 0.03**2
    mu_x, mu_y = blur(lx), blur(ly)
    sxx = blur(lx * lx) - mu_x**2
    syy = blur(ly * ly) - mu_y**2
    sxy = blur(lx * ly) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# sRGB (D65) to XYZ; the white point is taken as the row sums so that exact
# grays map to a = b = 0 with no float residue
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_LAB_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def rgb2lab(x: np.ndarray) -> np.ndarray:
    """CIELab from [0, 1] sRGB, H x W x 3 in and out.

    Exact grays (r == g == b) get a = b = 0 with no float residue, which is
    the exact mathematical value under the row-sum white point.
    """
    x = _as_float_image(x)
    lin = np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / _LAB_WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    achromatic = (x[..., 0] == x[..., 1]) & (x[..., 1] == x[..., 2])
    a = np.where(achromatic, 0.0, 500.0 * (fx - fy))
    b = np.where(achromatic, 0.0, 200.0 * (fy - fz))
    return np.stack([116.0 * fy - 16.0, a, b], axis=-1)


def uciqe_terms(x) -> tuple[float, float, float]:
    """(chroma std, luminance contrast, mean saturation) in CIELab terms.

    Luminance contrast is mean(top 1% of L) - mean(bottom 1% of L), L on the
    0..100 Lab scale. Saturation is chroma / L, zero where L is zero.
    """
    lab = rgb2lab(_as_float_image(x))
    lum, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    chroma = np.sqrt(a**2 + b**2)
    sigma_c = float(np.std(chroma))

    flat = np.sort(lum, axis=None)
    top = max(1, int(round(0.01 * flat.size)))
    con_l = float(np.mean(flat[-top:]) - np.mean(flat[:top]))

    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum > 0)
    mu_s = float(np.mean(sat))
    return sigma_c, con_l, mu_s


def uciqe(x) -> float:
    sigma_c, con_l, mu_s = uciqe_terms(x)
    c1, c2, c3 = UCIQE_COEFFS
    return c1 * sigma_c + c2 * con_l + c3 * mu_s


def _trimmed_stats(values: np.ndarray, trim: float) -> tuple[float, float]:
    """Asymmetric alpha-trimmed mean and the variance about it."""
    flat = np.sort(values, axis=None)
    cut = int(trim * flat.size)
    kept = flat[cut : flat.size - cut]
    mean = float(np.mean(kept))
    var = float(np.mean((kept - mean) ** 2))
    return mean, var


def _sobel(channel: np.ndarray) -> np.ndarray:
    kx = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64)
    gx = correlate1d(correlate1d(channel, kx[0], axis=1, mode="nearest"),
                     np.array([1.0, 2.0, 1.0]), axis=0, mode="nearest")
    gy = correlate1d(correlate1d(channel, kx[0], axis=0, mode="nearest"),
                     np.array([1.0, 2.0, 1.0]), axis=1, mode="nearest")
    return np.sqrt(gx**2 + gy**2)


def _blocks(img: np.ndarray, size: int):
    h, w = img.shape
    for i in range(0, h - h % size, size):
        for j in range(0, w - w % size, size):
            yield img[i : i + size, j : j + size]


def _eme(channel: np.ndarray, size: int) -> float:
    """Log max/min block contrast; zero block extrema are lifted to 1 (the
    8-bit quantization floor) before the ratio."""
    total, count = 0.0, 0
    for block in _blocks(channel, size):
        bmax = max(float(block.max()), 1.0)
        bmin = max(float(block.min()), 1.0)
        total += np.log(bmax / bmin)
        count += 1
    return 2.0 / count * total if count else 0.0


def _plip_sub(a, b):
    return PLIP_GAMMA * (a - b) / (PLIP_GAMMA - b)


def _plip_sum(a, b):
    return a + b - a * b / PLIP_GAMMA


def _logamee(channel: np.ndarray, size: int) -> float:
    total, count = 0.0, 0
    for block in _blocks(channel, size):
        bmax, bmin = float(block.max()), float(block.min())
        top = _plip_sub(bmax, bmin)
        bottom = _plip_sum(bmax, bmin)
        m = top / bottom if bottom != 0 else 0.0
        if m > 0:
            total += m * np.log(m)
        count += 1
    w = 1.0 / count if count else 0.0
    return PLIP_GAMMA - PLIP_GAMMA * (1.0 - total / PLIP_GAMMA) ** w if count else 0.0


def uiqm_terms(x) -> tuple[float, float, float]:
    """(UICM, UISM, UIConM) on the 0..255 intensity scale."""
    img = _as_float_image(x) * 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]

    rg = r - g
    yb = (r + g) / 2 - b
    mu_rg, var_rg = _trimmed_stats(rg, UIQM_TRIM)
    mu_yb, var_yb = _trimmed_stats(yb, UIQM_TRIM)
    uicm = -0.0268 * np.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * np.sqrt(var_rg + var_yb)

    weights = (0.299, 0.587, 0.114)
    uism = sum(
        w * _eme(ch * _sobel(ch), UIQM_BLOCK)
        for w, ch in zip(weights, (r, g, b))
    )

    gray = luminance(x) * 255.0
    uiconm = _logamee(gray, UIQM_BLOCK)
    return float(uicm), float(uism), float(uiconm)


def uiqm(x) -> float:
    c1, c2, c3 = UIQM_COEFFS
    uicm, uism, uiconm = uiqm_terms(x)
    return c1 * uicm + c2 * uism + c3 * uiconm


def histeq(x: np.ndarray, bins: int = 256) -> np.ndarray:
    """Histogram equalization of a [0, 1] grayscale image.

    Uses the classic cdf remap on a 256-bin quantization. Single-level
    images are returned unchanged (there is nothing to equalize).
    """
    x = np.asarray(x, dtype=np.float64)
    q = np.clip((x * (bins - 1)).round().astype(int), 0, bins - 1)
    hist = np.bincount(q.ravel(), minlength=bins)
    if np.count_nonzero(hist) <= 1:
        return x.copy()
    cdf = np.cumsum(hist) / q.size
    lut = (cdf - cdf.min()) / (1.0 - cdf.min()) if cdf.min() < 1.0 else cdf
    return lut[q]


def gray_entropy(x: np.ndarray, bins: int = 256) -> float:
    """Shannon entropy (bits) of the 256-bin gray histogram."""
    q = np.clip((np.asarray(x, dtype=np.float64) * (bins - 1)).round().astype(int), 0, bins - 1)
    hist = np.bincount(q.ravel(), minlength=bins).astype(np.float64)
    p = hist[hist > 0] / q.size
    return float(-(p * np.log2(p)).sum())


def ceiq_surrogate(x) -> float:
    """Fixed-weight contrast surrogate (not the published CEIQ regression).

    score = 0.5 * (1 - ssim(x, histeq(x))) + 0.25 * entropy(x)/8
          + 0.25 * entropy(histeq(x))/8,
    computed on luminance. Equals 0 for constant images; drops when an image
    is replaced by its equalized version.
    """
    lum = luminance(x)
    eq = histeq(lum)
    f1 = ssim(lum, eq)
    f2 = gray_entropy(lum) / 8.0
    f3 = gray_entropy(eq) / 8.0
    return 0.5 * (1.0 - f1) + 0.25 * f2 + 0.25 * f3
