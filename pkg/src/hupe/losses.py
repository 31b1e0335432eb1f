"""Training objectives: contrastive, frequency, bilateral, guide and the
built-in task losses (detection and segmentation).

All reductions are means, so loss magnitudes are resolution independent.
Every loss is non-negative and exactly zero at its documented zero case.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CONTRASTIVE_EPS = 1e-7
CONTRASTIVE_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
# indices into the extractor's layer stack after which features are tapped
TAP_INDICES = (1, 3, 5, 9, 13)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_RANDOM_BACKEND_SEED = 20240

@dataclass
class LossWeights:
    """Mixing weights for the enhancement loss and the guide term."""

    contrastive: float = 1.0
    frequency: float = 0.05
    bilateral: float = 1.0
    guide: float = 0.2

    def __post_init__(self):
        if min(self.contrastive, self.frequency, self.bilateral, self.guide) < 0:
            raise ValueError("loss weights must be non-negative")


def _vgg_shaped_stack() -> nn.ModuleList:
    """The first 14 layers of a VGG19-shaped feature stack."""
    return nn.ModuleList([
        nn.Conv2d(3, 64, 3, padding=1), nn.ReLU(),
        nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(),
        nn.Conv2d(128, 128, 3, padding=1), nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(128, 256, 3, padding=1), nn.ReLU(),
        nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(),
    ])


class PerceptualExtractor(nn.Module):
    """Fixed multi-layer conv feature extractor with taps at five depths.

    backend "vgg19" loads pretrained weights (needs torchvision weights on
    disk or a reachable mirror); "random" uses a frozen, seed-fixed random
    stack of the same shape; "auto" tries vgg19 and falls back to random.
    The random backend is fully deterministic and independent of the global
    RNG state.
    """

    def __init__(self, backend: str = "auto"):
        super().__init__()
        if backend not in ("auto", "vgg19", "random"):
            raise ValueError(f"unknown perceptual backend {backend!r}")
        self.layers = _vgg_shaped_stack()
        self.backend = "random"
        if backend in ("auto", "vgg19"):
            try:
                self._load_vgg19()
                self.backend = "vgg19"
            except Exception:
                if backend == "vgg19":
                    raise
        if self.backend == "random":
            self._init_random()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load_vgg19(self):
        from torchvision.models import VGG19_Weights, vgg19

        ref = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        with torch.no_grad():
            for mine, theirs in zip(self.layers, ref):
                if isinstance(mine, nn.Conv2d):
                    mine.weight.copy_(theirs.weight)
                    mine.bias.copy_(theirs.bias)

    def _init_random(self):
        gen = torch.Generator().manual_seed(_RANDOM_BACKEND_SEED)
        with torch.no_grad():
            for layer in self.layers:
                if isinstance(layer, nn.Conv2d):
                    fan_in = layer.in_channels * 9
                    layer.weight.copy_(
                        torch.randn(layer.weight.shape, generator=gen) * fan_in**-0.5
                    )
                    layer.bias.copy_(
                        0.1 * torch.randn(layer.bias.shape, generator=gen)
                    )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.backend == "vgg19":
            mean = torch.tensor(_IMAGENET_MEAN, device=x.device).view(1, 3, 1, 1)
            std = torch.tensor(_IMAGENET_STD, device=x.device).view(1, 3, 1, 1)
            x = (x - mean.to(x.dtype)) / std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in TAP_INDICES:
                feats.append(x)
        return feats


def contrastive_terms(feats_out, feats_ref, feats_neg) -> torch.Tensor:
    """Weighted sum of per-tap pull/push L1 ratios on precomputed features."""
    total = feats_out[0].new_zeros(())
    for rho, f_o, f_r, f_n in zip(
        CONTRASTIVE_WEIGHTS, feats_out, feats_ref, feats_neg
    ):
        pull = (f_r - f_o).abs().mean()
        push = (f_n - f_o).abs().mean()
        total = total + rho * pull / (push + CONTRASTIVE_EPS)
    return total


def contrastive_loss(out, reference, negative, extractor: PerceptualExtractor):
    """Pulls `out` toward the reference and away from the degraded negative,
    both measured in extractor feature space."""
    return contrastive_terms(
        extractor(out), extractor(reference), extractor(negative)
    )


def frequency_loss(out: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Mean complex modulus of the spectral difference.

    The modulus is floored at 1e-12 so its gradient stays finite when bins
    coincide exactly (the modulus has no derivative at zero).
    """
    diff = torch.fft.fft2(out, dim=(-2, -1)) - torch.fft.fft2(reference, dim=(-2, -1))
    power = diff.real**2 + diff.imag**2
    return torch.sqrt(torch.clamp(power, min=1e-24)).mean()


def pixel_norm(a: torch.Tensor, b: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "l2":
        return F.mse_loss(a, b)
    if norm == "l1":
        return (a - b).abs().mean()
    raise ValueError(f"unknown bilateral norm {norm!r}")


def bilateral_loss(model, degraded, reference, priors=None, norm: str = "l2"):
    """Two-sided fidelity: forward output vs reference and inverse output vs
    the degraded input, through one shared parameter set."""
    fwd = pixel_norm(model.enhance(degraded, priors), reference, norm)
    bwd = pixel_norm(model.degrade(reference, priors), degraded, norm)
    return fwd + bwd


def enhancement_loss(model, degraded, reference, extractor, weights: LossWeights,
                     priors=None, norm: str = "l2"):
    """Weighted contrastive + frequency + bilateral mix, sharing one forward
    pass. Returns (loss, enhanced)."""
    out = model.enhance(degraded, priors)
    l_c = contrastive_loss(out, reference, degraded, extractor)
    l_f = frequency_loss(out, reference)
    l_b = pixel_norm(out, reference, norm) + pixel_norm(
        model.degrade(reference, priors), degraded, norm
    )
    total = weights.contrastive * l_c + weights.frequency * l_f + weights.bilateral * l_b
    return total, out


def guide_loss(f_mfg: torch.Tensor, f_ftb: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between meta-features and feature bridges."""
    if f_mfg.shape != f_ftb.shape:
        raise ValueError(f"shape mismatch {tuple(f_mfg.shape)} vs {tuple(f_ftb.shape)}")
    return F.mse_loss(f_mfg, f_ftb)


def focal_loss(pred_prob, target, alpha: float = 0.25, gamma: float = 2.0):
    """Alpha-balanced focal form, mean over anchors.

    Probabilities are clamped to [1e-6, 1 - 1e-6] before the log.
    """
    p = pred_prob.clamp(1e-6, 1 - 1e-6)
    target = target.to(p.dtype)
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def giou_loss(box_pred: torch.Tensor, box_gt: torch.Tensor) -> torch.Tensor:
    """1 - GIoU, mean over matched box pairs; boxes are (x1, y1, x2, y2)."""
    if box_pred.shape != box_gt.shape or box_pred.shape[-1] != 4:
        raise ValueError("expected matching (..., 4) xyxy boxes")
    ix1 = torch.maximum(box_pred[..., 0], box_gt[..., 0])
    iy1 = torch.maximum(box_pred[..., 1], box_gt[..., 1])
    ix2 = torch.minimum(box_pred[..., 2], box_gt[..., 2])
    iy2 = torch.minimum(box_pred[..., 3], box_gt[..., 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)

    area_p = (box_pred[..., 2] - box_pred[..., 0]) * (box_pred[..., 3] - box_pred[..., 1])
    area_g = (box_gt[..., 2] - box_gt[..., 0]) * (box_gt[..., 3] - box_gt[..., 1])
    union = area_p + area_g - inter

    hx1 = torch.minimum(box_pred[..., 0], box_gt[..., 0])
    hy1 = torch.minimum(box_pred[..., 1], box_gt[..., 1])
    hx2 = torch.maximum(box_pred[..., 2], box_gt[..., 2])
    hy2 = torch.maximum(box_pred[..., 3], box_gt[..., 3])
    hull = (hx2 - hx1) * (hy2 - hy1)

    giou = inter / union - (hull - union) / hull
    return (1.0 - giou).mean()


def decode_boxes(box_out: torch.Tensor) -> torch.Tensor:
    """Decode per-cell box regressions to normalized xyxy boxes.

    Cell (i, j) predicts a center inside itself (sigmoid offsets) and a
    width/height as image fractions (sigmoid), so decoded boxes always have
    positive extent. Output shape: N x H x W x 4.
    """
    n, c, h, w = box_out.shape
    if c != 4:
        raise ValueError("box head must emit 4 channels")
    ys = torch.arange(h, dtype=box_out.dtype, device=box_out.device).view(1, h, 1)
    xs = torch.arange(w, dtype=box_out.dtype, device=box_out.device).view(1, 1, w)
    s = torch.sigmoid(box_out)
    cx = (xs + s[:, 0]) / w
    cy = (ys + s[:, 1]) / h
    bw = s[:, 2]
    bh = s[:, 3]
    return torch.stack(
        [cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1
    )


def match_cells(labels, grid_hw, device=None, dtype=torch.float32):
    """Objectness targets and (cell, box) matches for a batch of label sets.

    `labels` is a list (one entry per image) of K x 5 tensors holding
    normalized (x1, y1, x2, y2, class) rows. A box matches the single grid
    cell containing its center.
    """
    h, w = grid_hw
    n = len(labels)
    obj = torch.zeros(n, 1, h, w, dtype=dtype, device=device)
    matches = []
    for img_idx, rows in enumerate(labels):
        for row in rows:
            x1, y1, x2, y2 = (float(v) for v in row[:4])
            cx = min(int((x1 + x2) / 2 * w), w - 1)
            cy = min(int((y1 + y2) / 2 * h), h - 1)
            obj[img_idx, 0, cy, cx] = 1.0
            matches.append((img_idx, cy, cx, (x1, y1, x2, y2)))
    return obj, matches


def detection_task_loss(cls_out: torch.Tensor, box_out: torch.Tensor, labels):
    """Focal objectness loss plus GIoU loss on center-matched cells.

    `cls_out` holds raw objectness logits (N x 1 x H x W); `box_out` the raw
    box regressions (N x 4 x H x W).
    """
    obj_target, matches = match_cells(
        labels, cls_out.shape[-2:], device=cls_out.device, dtype=cls_out.dtype
    )
    loss = focal_loss(torch.sigmoid(cls_out), obj_target)
    if matches:
        boxes = decode_boxes(box_out)
        pred = torch.stack([boxes[i, cy, cx] for i, cy, cx, _ in matches])
        gt = cls_out.new_tensor([m[3] for m in matches])
        loss = loss + giou_loss(pred, gt)
    return loss


def segmentation_task_loss(logits: torch.Tensor, label_map: torch.Tensor):
    """Per-pixel cross entropy (softmax), mean over pixels."""
    return F.cross_entropy(logits, label_map)
