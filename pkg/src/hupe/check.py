"""Self-check suites behind the `check` CLI command.

Each suite returns (name, passed, detail) rows; the CLI prints them as a
table and exits nonzero if any row failed. The gradient suite compares
autograd against central finite differences in double precision.
"""

import math

import torch

from .flow import FlowConfig, HeuristicFlow, PriorPair, randomize_model
from .losses import (
    contrastive_loss,
    focal_loss,
    frequency_loss,
    giou_loss,
    guide_loss,
    pixel_norm,
    segmentation_task_loss,
)
from .spectral import SFABlock, Spectrum, faac_apply, fft_decompose, fft_recompose


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function, coordinate-wise."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom


def grad_matches(fn, x: torch.Tensor, tol: float = 1e-3, eps: float = 1e-5) -> float:
    """Max relative error between autograd and finite differences at x."""
    x = x.detach().clone().requires_grad_(True)
    loss = fn(x)
    (analytic,) = torch.autograd.grad(loss, x)
    numeric = finite_difference_grad(fn, x.detach().clone(), eps)
    return rel_error(analytic, numeric)


def _rand_priors(model, h, w, gen, batch=1):
    return [
        PriorPair(
            1.0 + 0.2 * torch.rand(batch, 1, *s, generator=gen),
            torch.rand(batch, 1, *s, generator=gen),
        )
        for s in model.working_sizes(h, w)
    ]


def suite_invertibility(seeds: int = 10, size: int = 64):
    rows = []
    worst = 0.0
    for seed in range(seeds):
        model = HeuristicFlow(FlowConfig(n_hibs=3, flow_steps=6))
        randomize_model(model, seed)
        gen = torch.Generator().manual_seed(seed + 10_000)
        x = torch.rand(1, 3, size, size, generator=gen)
        pri = _rand_priors(model, size, size, gen)
        err = (model.degrade(model.enhance(x, pri), pri) - x).abs().max().item()
        worst = max(worst, err)
    rows.append(("round trip float32 (max over seeds)", worst <= 1e-4, f"{worst:.3e}"))

    model = HeuristicFlow(FlowConfig(n_hibs=3, flow_steps=6))
    model.set_identity()
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, size, size, generator=gen)
    err = (model.enhance(x) - x).abs().max().item()
    rows.append(("identity at init", err <= 1e-6, f"{err:.3e}"))
    return rows


def checkpoint_invertibility(hin, size: int = 64):
    """Validate a loaded network: 1x1 conv conditioning plus a round trip."""
    rows = []
    try:
        hin.flow.assert_invertible()
        rows.append(("1x1 convolutions invertible", True, "all blocks"))
    except ValueError as exc:
        rows.append(("1x1 convolutions invertible", False, str(exc)))
        return rows
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, size, size, generator=gen)
    y = hin.enhance(x)
    back = hin.degrade(y, prior_source=x)
    err = (back - x).abs().max().item()
    rows.append(("checkpoint round trip", err <= 1e-3, f"{err:.3e}"))
    return rows


def suite_gradients():
    torch.manual_seed(0)
    rows = []
    gen = torch.Generator().manual_seed(5)

    model = HeuristicFlow(FlowConfig(n_hibs=2, flow_steps=2)).double()
    randomize_model(model, 3)
    model.double()
    probe = torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    pri = [
        PriorPair(
            (1.0 + 0.2 * torch.rand(1, 1, *s, generator=gen)).double(),
            torch.rand(1, 1, *s, generator=gen).double(),
        )
        for s in model.working_sizes(8, 8)
    ]
    weight = torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)

    def through_enhance(x):
        return (model.enhance(x, pri) * weight).sum()

    x = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    err = grad_matches(through_enhance, x)
    rows.append(("enhance path", err <= 1e-3, f"rel err {err:.2e}"))

    ref = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    err = grad_matches(lambda z: frequency_loss(z, ref), x)
    rows.append(("frequency loss", err <= 1e-3, f"rel err {err:.2e}"))

    err = grad_matches(lambda z: pixel_norm(z, ref, "l2"), x)
    rows.append(("bilateral l2 term", err <= 1e-3, f"rel err {err:.2e}"))

    probs = 0.2 + 0.6 * torch.rand(16, generator=gen, dtype=torch.float64)
    target = (torch.rand(16, generator=gen) > 0.5).double()
    err = grad_matches(lambda p: focal_loss(p, target), probs)
    rows.append(("focal loss", err <= 1e-3, f"rel err {err:.2e}"))

    boxes = torch.tensor([[0.1, 0.1, 0.5, 0.6], [0.3, 0.2, 0.9, 0.8]], dtype=torch.float64)
    gt = torch.tensor([[0.2, 0.1, 0.6, 0.5], [0.2, 0.3, 0.8, 0.9]], dtype=torch.float64)
    err = grad_matches(lambda b: giou_loss(b, gt), boxes)
    rows.append(("giou loss", err <= 1e-3, f"rel err {err:.2e}"))

    f_ref = torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)
    err = grad_matches(lambda f: guide_loss(f, f_ref), f_ref * 0.5 + 0.1)
    rows.append(("guide loss", err <= 1e-3, f"rel err {err:.2e}"))
    return rows


def suite_spectral():
    rows = []
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 8, 8, generator=gen)
    err = (fft_recompose(fft_decompose(x)) - x).abs().max().item()
    rows.append(("decompose/recompose round trip", err <= 1e-5, f"{err:.3e}"))

    ones = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    spec = fft_decompose(ones)
    dc_ok = abs(spec.amplitude[0, 0, 0, 0].item() - 4.0) <= 1e-9
    rest = spec.amplitude.flatten()[1:].abs().max().item()
    rows.append(("2x2 DC oracle", dc_ok and rest <= 1e-9, f"residual {rest:.1e}"))

    x = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    spec = fft_decompose(x)
    parseval = abs(
        (x**2).sum().item() - (spec.amplitude**2).sum().item() / 16.0
    )
    rows.append(("Parseval identity", parseval <= 1e-9, f"gap {parseval:.1e}"))

    sfa = SFABlock(4)
    u = torch.rand(1, 8, 8, 8, generator=gen)
    err = (faac_apply(faac_apply(u, sfa), sfa, reverse=True) - u).abs().max().item()
    rows.append(("coupling round trip (zero head)", err <= 1e-5, f"{err:.3e}"))

    for p in sfa.parameters():
        with torch.no_grad():
            p.copy_(0.05 * torch.randn(p.shape, generator=gen))
    err = (faac_apply(faac_apply(u, sfa), sfa, reverse=True) - u).abs().max().item()
    rows.append(("coupling round trip (random)", err <= 1e-5, f"{err:.3e}"))
    return rows


def suite_losses():
    rows = []
    gen = torch.Generator().manual_seed(4)
    a = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)

    val = frequency_loss(a, a).item()
    rows.append(("frequency zero case", val <= 1e-6, f"{val:.1e}"))

    single = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    bumped = single.clone()
    bumped[0, 0, 0, 0] = 0.1
    val = frequency_loss(bumped, single).item()
    rows.append(("frequency 2x2 closed form", abs(val - 0.1) <= 1e-6, f"{val:.6f}"))

    val = guide_loss(torch.zeros(4, 4), 0.5 * torch.ones(4, 4)).item()
    rows.append(("guide closed form", abs(val - 0.25) <= 1e-9, f"{val}"))

    val = focal_loss(
        torch.tensor([0.5], dtype=torch.float64),
        torch.tensor([1.0], dtype=torch.float64),
        alpha=1.0, gamma=0.0,
    ).item()
    rows.append(("focal degenerates to CE", abs(val - math.log(2)) <= 1e-9, f"{val:.6f}"))

    val = giou_loss(
        torch.tensor([[0.0, 0.0, 1.0, 1.0]]), torch.tensor([[1.0, 1.0, 2.0, 2.0]])
    ).item()
    rows.append(("giou disjoint case", abs(val - 1.5) <= 1e-6, f"{val}"))

    logits = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
    val = segmentation_task_loss(logits, torch.zeros(1, 8, 8, dtype=torch.long)).item()
    rows.append(("uniform 4-class CE", abs(val - math.log(4)) <= 1e-6, f"{val:.6f}"))
    return rows


SUITES = {
    "invertibility": suite_invertibility,
    "gradients": suite_gradients,
    "spectral": suite_spectral,
    "losses": suite_losses,
}
