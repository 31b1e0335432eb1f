"""Semantic collaborative learning: meta-feature alignment between the
enhancer and a task head, trained by alternating internal/external stages.

The internal stage first takes one SGD step on the enhancer (HIN) under the
guide loss, then updates the meta-feature generator (MFG) and feature
transition block (FTB) by the enhancement loss measured through that freshly
updated enhancer. The enhancement loss does not touch MFG/FTB directly, so
their gradient exists only through the enhancer's guide step; the step is
kept differentiable (create_graph) and the FTB/MFG update is second order.
The external stage is a plain optimizer step on the enhancer under
enhancement loss plus weighted guide loss, with everything else frozen.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .flow import FlowConfig, HeuristicFlow
from .losses import (
    LossWeights,
    PerceptualExtractor,
    pixel_norm,
    contrastive_loss,
    detection_task_loss,
    frequency_loss,
    guide_loss,
    segmentation_task_loss,
)
from .prior import PriorEncoder, depth_map, gradient_map


class HIN(nn.Module):
    """Heuristic invertible network: the flow plus its prior encoder.

    Priors are always estimated from the degraded-domain image; for the
    inverse direction pass the degraded counterpart via `prior_source` (the
    conditioning must match the forward pass for the round trip to close).
    """

    INJECTION_CODES = {"step": 0.0, "block": 1.0, "off": 2.0}

    def __init__(self, flow_config: FlowConfig):
        super().__init__()
        self.flow = HeuristicFlow(flow_config)
        self.encoder = PriorEncoder(n_blocks=flow_config.n_hibs)
        # rides along in checkpoints so geometry can be rebuilt from file
        self.register_buffer(
            "injection_mode",
            torch.tensor(self.INJECTION_CODES[flow_config.prior_injection]),
        )

    def priors(self, image):
        if self.flow.config.prior_injection == "off":
            return None
        return self.encoder(image, gradient_map(image), depth_map(image))

    def forward(self, x, reverse=False, prior_source=None, return_taps=False):
        pri = self.priors(prior_source if prior_source is not None else x)
        return self.flow(x, pri, reverse=reverse, return_taps=return_taps)

    def enhance(self, degraded):
        return self.forward(degraded)

    def degrade(self, clear, prior_source=None):
        return self.forward(clear, reverse=True, prior_source=prior_source)


def _conv_relu(cin: int, cout: int) -> list[nn.Module]:
    conv = nn.Conv2d(cin, cout, 3, padding=1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return [conv, nn.ReLU()]


class FTB(nn.Module):
    """Feature transition block: enhancer features -> 256-channel bridges.

    Output channel plan of the trunk: 128, 256, 256. Per-tap 1x1 stems adapt
    the varying enhancer tap widths to the trunk input (plumbing).
    """

    OUT_CHANNELS = (128, 256, 256)

    def __init__(self, fe_channels: list[int], width: int = 128):
        super().__init__()
        self.stems = nn.ModuleList(nn.Conv2d(c, width, 1) for c in fe_channels)
        layers: list[nn.Module] = []
        cin = width
        for cout in self.OUT_CHANNELS:
            layers += _conv_relu(cin, cout)
            cin = cout
        self.trunk = nn.Sequential(*layers)

    def forward(self, f_e, tap: int):
        return self.trunk(self.stems[tap](f_e))


class MFG(nn.Module):
    """Meta-feature generator fusing task-aware and enhancer features.

    Channel plans: task branch 512, 256, 256, 256; enhancer branch 128, 256;
    fused trunk 64, 128, 192, 256, 320, 256. The trunk consumes the
    channel-wise concat of the two branch outputs.
    """

    TASK_CHANNELS = (512, 256, 256, 256)
    ENH_CHANNELS = (128, 256)
    TRUNK_CHANNELS = (64, 128, 192, 256, 320, 256)

    def __init__(self, ft_channels: list[int], fe_channels: list[int],
                 ft_width: int = 256, fe_width: int = 128):
        super().__init__()
        self.ft_stems = nn.ModuleList(nn.Conv2d(c, ft_width, 1) for c in ft_channels)
        self.fe_stems = nn.ModuleList(nn.Conv2d(c, fe_width, 1) for c in fe_channels)

        def chain(cin, plan):
            layers: list[nn.Module] = []
            for cout in plan:
                layers += _conv_relu(cin, cout)
                cin = cout
            return nn.Sequential(*layers), cin

        self.task_branch, task_out = chain(ft_width, self.TASK_CHANNELS)
        self.enh_branch, enh_out = chain(fe_width, self.ENH_CHANNELS)
        fused = task_out + enh_out
        assert fused == 512, "trunk expects concat of 256+256 branch outputs"
        self.trunk, _ = chain(fused, self.TRUNK_CHANNELS)

    def forward(self, f_t, f_e, tap: int):
        if f_t.shape[-2:] != f_e.shape[-2:]:
            f_t = F.interpolate(f_t, size=f_e.shape[-2:], mode="bilinear",
                                align_corners=False)
        if f_t.shape[-2:] != f_e.shape[-2:]:
            raise ValueError("task/enhancer feature spatial mismatch after resize")
        z_task = self.task_branch(self.ft_stems[tap](f_t))
        z_enh = self.enh_branch(self.fe_stems[tap](f_e))
        return self.trunk(torch.cat([z_enh, z_task], dim=1))


class TaskHead(nn.Module):
    """Minimal perception head: 3-stage conv backbone plus a task-specific
    output. Detection emits per-cell objectness and box regressions on the
    deepest grid; segmentation emits per-pixel class logits at input size.
    """

    def __init__(self, task: str = "detect", num_classes: int = 4,
                 widths: tuple[int, int, int] = (64, 128, 256)):
        super().__init__()
        if task not in ("detect", "segment"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.widths = widths
        stages = []
        cin = 3
        for w in widths:
            down = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            nn.init.kaiming_normal_(down.weight, nonlinearity="relu")
            nn.init.zeros_(down.bias)
            stages.append(nn.Sequential(down, nn.ReLU(), *_conv_relu(w, w)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.neck = nn.Sequential(*_conv_relu(widths[-1], 64))
        if task == "detect":
            self.cls_head = nn.Conv2d(64, 1, 1)
            self.box_head = nn.Conv2d(64, 4, 1)
        else:
            self.seg_head = nn.Conv2d(64, num_classes, 1)

    def features(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x):
        feats = self.features(x)
        h = self.neck(feats[-1])
        if self.task == "detect":
            return (self.cls_head(h), self.box_head(h)), feats
        logits = F.interpolate(self.seg_head(h), size=x.shape[-2:],
                               mode="bilinear", align_corners=False)
        return logits, feats

    def task_loss(self, outputs, labels):
        if self.task == "detect":
            cls_out, box_out = outputs
            return detection_task_loss(cls_out, box_out, labels)
        return segmentation_task_loss(outputs, labels)


@dataclass
class SCLState:
    """Everything the alternating schedule mutates, plus freeze flags."""

    hin: HIN
    task_head: TaskHead
    mfg: MFG
    ftb: FTB
    extractor: PerceptualExtractor
    weights: LossWeights
    opt_hin: torch.optim.Optimizer
    opt_fcm: torch.optim.Optimizer
    inner_lr: float
    bilateral_norm: str = "l2"
    hin_pretrained: bool = False
    task_pretrained: bool = False
    history: list[dict] = field(default_factory=list)


def build_state(config: RunConfig) -> SCLState:
    if config.n_hibs > 3:
        raise ValueError("collaborative learning pairs at most 3 feature taps")
    flow_cfg = FlowConfig(
        n_hibs=config.n_hibs,
        flow_steps=config.flow_steps,
        sfa_hidden=config.sfa_hidden,
        invconv_init=config.invconv_init,
        prior_injection=config.prior_injection,
    )
    hin = HIN(flow_cfg)
    task_head = TaskHead(config.task, config.num_classes)
    fe_channels = flow_cfg.channel_plan()
    ft_channels = list(reversed(task_head.widths))[: config.n_hibs]
    mfg = MFG(ft_channels, fe_channels)
    ftb = FTB(fe_channels)
    weights = LossWeights(*config.lambdas)
    return SCLState(
        hin=hin,
        task_head=task_head,
        mfg=mfg,
        ftb=ftb,
        extractor=PerceptualExtractor(config.perceptual_backend),
        weights=weights,
        opt_hin=torch.optim.Adam(hin.parameters(), lr=config.lr),
        opt_fcm=torch.optim.Adam(
            list(mfg.parameters()) + list(ftb.parameters()),
            lr=config.fcm_lr if config.fcm_lr is not None else config.lr,
        ),
        inner_lr=config.inner_lr if config.inner_lr is not None else config.lr,
        bilateral_norm=config.bilateral_norm,
    )


def _collab_features(state: SCLState, enhanced, taps):
    """Meta-features and bridges for every tap; task features come from the
    head applied to the enhanced image, deepest stage first."""
    feats = state.task_head.features(enhanced)
    f_t = list(reversed(feats))[: len(taps)]
    f_mfg = [state.mfg(t, e, i) for i, (t, e) in enumerate(zip(f_t, taps))]
    f_ftb = [state.ftb(e, i) for i, e in enumerate(taps)]
    return f_mfg, f_ftb


def _guide_total(f_mfg, f_ftb):
    return torch.stack([guide_loss(a, b) for a, b in zip(f_mfg, f_ftb)]).mean()


def _enhancement_terms(call, i_u, i_r, state: SCLState):
    out = call(i_u)
    l_c = contrastive_loss(out, i_r, i_u, state.extractor)
    l_f = frequency_loss(out, i_r)
    back = call(i_r, reverse=True, prior_source=i_u)
    l_b = pixel_norm(out, i_r, state.bilateral_norm) + pixel_norm(
        back, i_u, state.bilateral_norm
    )
    w = state.weights
    return w.contrastive * l_c + w.frequency * l_f + w.bilateral * l_b, out


def _require_pretrained(state: SCLState):
    if not state.hin_pretrained:
        raise RuntimeError("enhancer is not pretrained; run or load a checkpoint first")
    if not state.task_pretrained:
        raise RuntimeError("task head is not pretrained; run or load a checkpoint first")


def inner_update(state: SCLState, batch) -> tuple[float, float]:
    """Internal stage: (a) one guide-loss SGD step on the enhancer with
    MFG/FTB frozen, then (b) one optimizer step on MFG/FTB under the
    enhancement loss measured through the step-(a) result, enhancer frozen.

    Returns (guide loss before (a), enhancement loss at the updated enhancer).
    """
    _require_pretrained(state)
    i_u, i_r = batch
    hin = state.hin
    params = dict(hin.named_parameters())

    def call_with(theta):
        def call(x, **kw):
            return functional_call(hin, theta, (x,), kw)
        return call

    # (a) guide step, kept differentiable w.r.t. MFG/FTB parameters
    out, taps = call_with(params)(i_u, return_taps=True)
    f_mfg, f_ftb = _collab_features(state, out, taps)
    l_g = _guide_total(f_mfg, f_ftb)
    grads = torch.autograd.grad(
        l_g, list(params.values()), create_graph=True, allow_unused=True
    )
    updated = {
        n: p - state.inner_lr * g if g is not None else p
        for (n, p), g in zip(params.items(), grads)
    }

    # (b) enhancement loss through the updated enhancer; gradient reaches
    # MFG/FTB only via the step above
    l_e, _ = _enhancement_terms(call_with(updated), i_u, i_r, state)
    fcm_params = [p for p in state.mfg.parameters()] + [p for p in state.ftb.parameters()]
    state.opt_fcm.zero_grad()
    l_e.backward(inputs=fcm_params)
    state.opt_fcm.step()

    # materialize step (a) on the live parameters
    with torch.no_grad():
        for n, p in hin.named_parameters():
            p.copy_(updated[n].detach())
    hin.flow.assert_invertible()
    return float(l_g.detach()), float(l_e.detach())


def outer_update(state: SCLState, batch) -> tuple[float, float]:
    """External stage: one optimizer step on the enhancer minimizing
    enhancement loss plus the weighted guide loss; MFG/FTB/head frozen.

    Returns (enhancement loss, guide loss) at the pre-step parameters.
    """
    _require_pretrained(state)
    i_u, i_r = batch
    hin = state.hin
    out, taps = hin(i_u, return_taps=True)
    l_c = contrastive_loss(out, i_r, i_u, state.extractor)
    l_f = frequency_loss(out, i_r)
    back = hin(i_r, reverse=True, prior_source=i_u)
    l_b = pixel_norm(out, i_r, state.bilateral_norm) + pixel_norm(
        back, i_u, state.bilateral_norm
    )
    w = state.weights
    l_e = w.contrastive * l_c + w.frequency * l_f + w.bilateral * l_b
    f_mfg, f_ftb = _collab_features(state, out, taps)
    l_g = _guide_total(f_mfg, f_ftb)
    loss = l_e + w.guide * l_g

    state.opt_hin.zero_grad()
    loss.backward(inputs=list(hin.parameters()))
    state.opt_hin.step()
    hin.flow.assert_invertible()
    return float(l_e.detach()), float(l_g.detach())


def _log(fh, record: dict):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def _iter_batches(dataset, batch_size, rng, crop=None, shuffle=True):
    from .data import random_crop_pair

    order = torch.randperm(len(dataset), generator=rng) if shuffle else torch.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size].tolist()
        pairs = [dataset.load_pair(i) for i in idx]
        if crop is not None and crop < pairs[0][0].shape[-1]:
            pairs = [random_crop_pair(u, r, crop, rng) for u, r in pairs]
        i_u = torch.stack([p[0] for p in pairs])
        i_r = torch.stack([p[1] for p in pairs])
        yield idx, i_u, i_r


def hin_from_checkpoint(path) -> "HIN":
    """Rebuild an HIN with the geometry recorded in a checkpoint file."""
    import re

    from .checkpoint import read_checkpoint

    arrays = read_checkpoint(path)
    hibs = {int(m.group(1)) for n in arrays
            if (m := re.match(r"flow\.hibs\.(\d+)\.", n))}
    steps = {int(m.group(1)) for n in arrays
             if (m := re.search(r"\.steps\.(\d+)\.", n))}
    if not hibs or not steps:
        raise ValueError(f"checkpoint {path} does not contain a flow network")
    n_hibs = max(hibs) + 1
    flow_steps = max(steps) + 1
    deepest = arrays["flow.hibs.0.steps.0.invconv.weight"].shape[0]
    in_channels = deepest // 4**n_hibs
    widths = {
        i: arrays[f"flow.hibs.{i}.steps.0.sfa.fuse.0.weight"].shape[0]
        for i in range(n_hibs)
    }
    natural = {i: arrays[f"flow.hibs.{i}.steps.0.invconv.weight"].shape[0] // 2
               for i in range(n_hibs)}
    if widths == natural:
        sfa_hidden = None
    elif len(set(widths.values())) == 1:
        sfa_hidden = next(iter(widths.values()))
    else:
        raise ValueError(f"inconsistent coupling widths in checkpoint {path}")
    codes = {v: k for k, v in HIN.INJECTION_CODES.items()}
    mode = codes.get(float(arrays.get("injection_mode", 0.0)), "step")
    cfg = FlowConfig(
        in_channels=in_channels, n_hibs=n_hibs, flow_steps=flow_steps,
        sfa_hidden=sfa_hidden, prior_injection=mode,
    )
    hin = HIN(cfg)
    load_checkpoint(hin, path)
    return hin


def pretrain_enhancer(state: SCLState, dataset, config: RunConfig, log_fh=None) -> int:
    """Enhancement-loss pretraining of the HIN. Returns optimizer steps run."""
    rng = torch.Generator().manual_seed(config.seed)
    hin = state.hin
    step = 0
    for epoch in range(config.epochs):
        for _, i_u, i_r in _iter_batches(dataset, config.batch, rng, crop=config.crop):
            if not hin.flow.actnorm_initialized():
                hin.flow.initialize_actnorm(i_u, hin.priors(i_u))
            l_e, _ = _enhancement_terms(
                lambda x, **kw: hin(x, **kw), i_u, i_r, state
            )
            state.opt_hin.zero_grad()
            l_e.backward()
            state.opt_hin.step()
            hin.flow.assert_invertible()
            step += 1
            _log(log_fh, {"phase": "pretrain_hin", "epoch": epoch, "step": step,
                          "l_e": float(l_e.detach())})
            if config.max_steps is not None and step >= config.max_steps:
                return step
    return step


def pretrain_task(state: SCLState, dataset, config: RunConfig, log_fh=None) -> int:
    """Task-loss pretraining of the head on reference-domain images."""
    head = state.task_head
    opt = torch.optim.SGD(head.parameters(), lr=config.task_lr,
                          weight_decay=config.task_weight_decay)
    rng = torch.Generator().manual_seed(config.seed + 1)
    step = 0
    for epoch in range(config.task_epochs):
        for idx, _, i_r in _iter_batches(dataset, config.task_batch, rng):
            # labels are defined on full frames; task pretraining skips crops
            if head.task == "detect":
                labels = [dataset.boxes(i) for i in idx]
                if any(l is None for l in labels):
                    raise ValueError(
                        "detection pretraining needs <stem>.boxes.json labels"
                    )
            else:
                masks = [dataset.mask(i) for i in idx]
                if any(m is None for m in masks):
                    raise ValueError(
                        "segmentation pretraining needs <stem>.mask.png labels"
                    )
                labels = torch.stack(masks)
            outputs, _ = head(i_r)
            loss = head.task_loss(outputs, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            _log(log_fh, {"phase": "pretrain_task", "epoch": epoch, "step": step,
                          "l_t": float(loss.detach())})
            if config.task_max_steps is not None and step >= config.task_max_steps:
                return step
    return step


def save_state(state: SCLState, out_dir, tag: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, module in (
        ("hin", state.hin), ("mfg", state.mfg), ("ftb", state.ftb),
        ("taskhead", state.task_head),
    ):
        path = out_dir / f"{name}_{tag}.ckpt"
        save_checkpoint(module, path)
        paths[name] = path
    return paths


def collaborative_train(config: RunConfig, dataset, log_fh=None) -> SCLState:
    """Full schedule: pretrain what is not checkpointed, then alternate
    internal and external stages per batch, checkpointing every epoch."""
    torch.manual_seed(config.seed)
    state = build_state(config)
    out_dir = Path(config.out_dir)

    if config.hin_checkpoint:
        load_checkpoint(state.hin, config.hin_checkpoint)
        state.hin_pretrained = True
    else:
        pretrain_enhancer(state, dataset, config, log_fh)
        state.hin_pretrained = True

    if config.joint_epochs > 0:
        if config.task_checkpoint:
            load_checkpoint(state.task_head, config.task_checkpoint)
            state.task_pretrained = True
        else:
            pretrain_task(state, dataset, config, log_fh)
            state.task_pretrained = True

        rng = torch.Generator().manual_seed(config.seed + 2)
        step = 0
        done = False
        for epoch in range(config.joint_epochs):
            for _, i_u, i_r in _iter_batches(dataset, config.batch, rng, crop=config.crop):
                record = {"phase": "joint", "epoch": epoch, "step": step}
                if step % config.inner_every == 0:
                    l_g, l_e = inner_update(state, (i_u, i_r))
                    record.update({"inner_l_g": l_g, "inner_l_e": l_e})
                if step % config.outer_every == 0:
                    l_e, l_g = outer_update(state, (i_u, i_r))
                    record.update({"outer_l_e": l_e, "outer_l_g": l_g})
                step += 1
                _log(log_fh, record)
                state.history.append(record)
                if config.joint_max_steps is not None and step >= config.joint_max_steps:
                    done = True
                    break
            save_state(state, out_dir, f"epoch{epoch:03d}")
            if done:
                break
    save_state(state, out_dir, "final")
    return state
