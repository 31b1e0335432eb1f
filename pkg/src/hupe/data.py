"""Dataset plumbing: paired folders, FFT-legal resizing, random crops and
synthetic degradation through the imaging model.

Synthetic pairs are the desk-scale ground truth: the degraded image is an
exact, recorded function of the clean one, so restoration through the model
equations can be checked analytically. Each synthetic sample is written as
an 8-bit PNG for eyeballing plus a float32 .npz (degraded image and the full
transmission map) so the inversion check is not limited by quantization; the
JSON sidecar records the sampled parameters.
"""

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .prior import PhysicalParams, depth_map, physical_apply, transmission_from_depth

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Decode to a float [0, 1] CHW tensor, optionally bicubic-resized to a
    square power-of-2 size."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing image: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if size is not None:
        if not _is_pow2(size):
            raise ValueError(f"resize target must be a power of 2, got {size}")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def save_image(tensor: torch.Tensor, path) -> None:
    """Write a CHW float tensor as 8-bit PNG, clamping to [0, 1] at export."""
    arr = tensor.detach().clamp(0, 1).mul(255).round().byte()
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)


class PairedDataset:
    """Degraded/reference image pairs matched by filename stem.

    A stem present on one side but not the other is an error, not a silent
    skip. Optional per-pair detection labels are read from `<stem>.boxes.json`
    (rows of [x1, y1, x2, y2, class], normalized) and segmentation labels
    from `<stem>.mask.png` (index map), both next to the reference image.
    """

    def __init__(self, degraded_dir, reference_dir, size: int = 512):
        self.size = size
        deg = {p.stem: p for p in list_images(degraded_dir)}
        ref = {p.stem: p for p in list_images(reference_dir)}
        if deg.keys() != ref.keys():
            odd = sorted(deg.keys() ^ ref.keys())
            raise ValueError(f"unpaired stems: {odd[:10]}")
        self.pairs = [(deg[s], ref[s]) for s in sorted(deg)]
        if not self.pairs:
            raise ValueError("no image pairs found")

    def __len__(self) -> int:
        return len(self.pairs)

    def load_pair(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        deg_path, ref_path = self.pairs[index]
        i_u = load_image(deg_path, self.size)
        i_r = load_image(ref_path, self.size)
        if i_u.shape != i_r.shape:
            raise ValueError(f"pair shape mismatch for stem {deg_path.stem}")
        return i_u, i_r

    def __getitem__(self, index):
        return self.load_pair(index)

    def boxes(self, index: int) -> torch.Tensor | None:
        side = self.pairs[index][1].with_suffix(".boxes.json")
        if not side.is_file():
            return None
        rows = json.loads(side.read_text())
        return torch.tensor(rows, dtype=torch.float32).reshape(-1, 5)

    def mask(self, index: int) -> torch.Tensor | None:
        side = self.pairs[index][1].with_suffix(".mask.png")
        if not side.is_file():
            return None
        arr = np.asarray(Image.open(side), dtype=np.int64)
        mask = torch.from_numpy(arr)
        if mask.shape != (self.size, self.size):
            raise ValueError(f"mask size mismatch for {side}")
        return mask


def random_crop_pair(i_u, i_r, size: int, rng: torch.Generator):
    """One crop window, uniform over valid offsets, applied to both images."""
    if i_u.shape[-2:] != i_r.shape[-2:]:
        raise ValueError("pair must share spatial dims")
    h, w = i_u.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image {h}x{w}")
    top = int(torch.randint(0, h - size + 1, (1,), generator=rng))
    left = int(torch.randint(0, w - size + 1, (1,), generator=rng))
    return (
        i_u[..., top : top + size, left : left + size],
        i_r[..., top : top + size, left : left + size],
    )


def synth_degrade_dataset(
    clean_dir,
    out_dir,
    beta_range=(0.3, 1.0),
    light_range=(0.3, 0.9),
    seed: int = 0,
    size: int = 64,
    depth_source: str = "dark_channel",
) -> dict:
    """Degrade every clean image through the physical model.

    beta and a per-channel ambient light are sampled per image; the depth map
    comes from the dark-channel proxy (or a left-to-right ramp). Returns the
    manifest, which is also written to out_dir/manifest.json.
    """
    clean_paths = list_images(clean_dir)
    if not clean_paths:
        raise ValueError(f"no clean images found in {clean_dir}")
    if depth_source not in ("dark_channel", "ramp"):
        raise ValueError(f"unknown depth source {depth_source!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)

    entries = []
    for path in clean_paths:
        clean = load_image(path, size)
        beta = float(
            beta_range[0] + (beta_range[1] - beta_range[0]) * torch.rand(1, generator=rng)
        )
        light = light_range[0] + (light_range[1] - light_range[0]) * torch.rand(
            3, generator=rng
        )
        if depth_source == "ramp":
            d = torch.linspace(0, 1, size).view(1, 1, 1, size).expand(1, 1, size, size)
        else:
            d = depth_map(clean.unsqueeze(0))
        t = transmission_from_depth(d, beta)
        params = PhysicalParams(t=t, b=light.view(1, 3, 1, 1))
        degraded = physical_apply(clean.unsqueeze(0), params, "degrade")[0]

        save_image(degraded, out_dir / f"{path.stem}.png")
        np.savez(
            out_dir / f"{path.stem}.npz",
            degraded=degraded.numpy().astype(np.float32),
            t=t[0].numpy().astype(np.float32),
        )
        meta = {
            "clean": str(path),
            "beta": beta,
            "ambient": [float(v) for v in light],
            "t_min": float(t.min()),
            "t_mean": float(t.mean()),
            "t_max": float(t.max()),
            "seed": seed,
            "depth_source": depth_source,
            "size": size,
        }
        (out_dir / f"{path.stem}.json").write_text(json.dumps(meta, indent=1))
        entries.append({"stem": path.stem, **meta})

    manifest = {
        "count": len(entries),
        "seed": seed,
        "beta_range": list(beta_range),
        "light_range": list(light_range),
        "images": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
