"""Command-line entry points: train, enhance, eval, check, synth.

Every command is deterministic given its --seed. The enhance command writes
a `<stem>.prior.npz` conditioning sidecar next to each forward output; the
inverse direction picks the sidecar up when present so that a forward/
inverse round trip closes (G_E^-1 must run under the same conditioning as
G_E).
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .config import RunConfig
from .data import list_images, load_image, save_image, synth_degrade_dataset
from .report import build_report, plot_training_log, write_report


def _pow2_floor(n: int) -> int:
    p = 1
    while p * 2 <= n:
        p *= 2
    return p


def cmd_train(args) -> int:
    from .scl import collaborative_train
    from .data import PairedDataset

    config = RunConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    dataset = PairedDataset(config.train_degraded, config.train_reference,
                            size=config.resize)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w") as log_fh:
        collaborative_train(config, dataset, log_fh)
    plot_training_log(log_path, out_dir / "train_log.png")
    print(f"training complete; checkpoints and logs in {out_dir}")
    return 0


def _load_for_model(path, hin):
    img = load_image(path)
    h, w = img.shape[-2:]
    need = 1 << hin.flow.config.n_hibs
    ok = (h & (h - 1)) == 0 and (w & (w - 1)) == 0 and h % need == 0 and w % need == 0
    if not ok:
        side = max(need, _pow2_floor(min(h, w)))
        img = load_image(path, size=side)
        print(f"note: resized {Path(path).name} to {side}x{side} for the flow",
              file=sys.stderr)
    return img


def cmd_enhance(args) -> int:
    from .flow import PriorPair
    from .scl import hin_from_checkpoint

    hin = hin_from_checkpoint(args.ckpt)
    hin.eval()
    paths = list_images(args.input_dir)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not paths:
        print(f"warning: no images found in {args.input_dir}", file=sys.stderr)
        return 0
    for path in paths:
        img = _load_for_model(path, hin).unsqueeze(0)
        sidecar = Path(path).with_suffix(".prior.npz")
        with torch.no_grad():
            if args.direction == "forward":
                pri = hin.priors(img)
                out = hin.flow(img, pri)
                if pri is not None:
                    payload = {}
                    for i, pair in enumerate(pri):
                        payload[f"t{i}"] = pair.t.numpy()
                        payload[f"b{i}"] = pair.b.numpy()
                    np.savez(out_dir / f"{path.stem}.prior.npz", **payload)
            else:
                if sidecar.is_file():
                    blob = np.load(sidecar)
                    n = len(blob.files) // 2
                    pri = [
                        PriorPair(torch.from_numpy(blob[f"t{i}"]),
                                  torch.from_numpy(blob[f"b{i}"]))
                        for i in range(n)
                    ]
                else:
                    pri = hin.priors(img)
                out = hin.flow(img, pri, reverse=True)
        save_image(out[0], out_dir / f"{path.stem}.png")
    print(f"wrote {len(paths)} images to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    preds = list_images(args.pred)
    if not preds:
        print(f"warning: no images found in {args.pred}", file=sys.stderr)
        return 0
    refs = {}
    if args.ref:
        refs = {p.stem: p for p in list_images(args.ref)}
    per_image: dict[str, dict[str, float]] = {}
    for path in preds:
        x = load_image(path).permute(1, 2, 0).numpy()
        row = {
            "uciqe": M.uciqe(x),
            "uiqm": M.uiqm(x),
            "ceiq_s": M.ceiq_surrogate(x),
        }
        if refs:
            if path.stem not in refs:
                raise ValueError(f"no reference image for {path.stem}")
            y = load_image(refs[path.stem]).permute(1, 2, 0).numpy()
            if y.shape != x.shape:
                raise ValueError(f"shape mismatch for {path.stem}")
            row["psnr"] = M.psnr(x, y)
            row["ssim"] = M.ssim(x, y)
        per_image[path.stem] = row
    report = build_report(per_image)
    written = write_report(report, args.report, figures=not args.no_figures)
    print("wrote " + ", ".join(str(w) for w in written))
    return 0


def cmd_check(args) -> int:
    from .check import SUITES, checkpoint_invertibility

    if args.ckpt and args.suite == "invertibility":
        from .scl import hin_from_checkpoint

        try:
            hin = hin_from_checkpoint(args.ckpt)
            rows = checkpoint_invertibility(hin)
        except ValueError as exc:
            rows = [("load checkpoint", False, str(exc))]
    else:
        rows = SUITES[args.suite]()
    width = max(len(name) for name, _, _ in rows)
    failed = 0
    for name, ok, detail in rows:
        mark = "PASS" if ok else "FAIL"
        failed += 0 if ok else 1
        print(f"{name:<{width}}  {mark}  {detail}")
    print(f"{args.suite}: {len(rows) - failed}/{len(rows)} checks passed")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    manifest = synth_degrade_dataset(
        args.clean,
        args.out,
        beta_range=(args.beta_min, args.beta_max),
        light_range=(args.light_min, args.light_max),
        seed=args.seed,
        size=args.size,
        depth_source=args.depth,
    )
    print(f"wrote {manifest['count']} degraded images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hupe",
        description="Invertible underwater image enhancement with heuristic "
                    "priors and semantic collaborative learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain and jointly train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("enhance", help="run the enhancer over a folder")
    p.add_argument("--in", dest="input_dir", required=True)
    p.add_argument("--out", dest="output_dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--direction", choices=("forward", "inverse"), default="forward")
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("eval", help="compute metrics and write a report")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run a named property suite")
    p.add_argument("--suite", required=True,
                   choices=("invertibility", "gradients", "spectral", "losses"))
    p.add_argument("--ckpt", default=None,
                   help="validate this checkpoint instead of fresh random models")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("synth", help="generate synthetic degraded pairs")
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta-min", type=float, default=0.3)
    p.add_argument("--beta-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--light-min", type=float, default=0.3)
    p.add_argument("--light-max", type=float, default=0.9)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", choices=("dark_channel", "ramp"), default="dark_channel")
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
