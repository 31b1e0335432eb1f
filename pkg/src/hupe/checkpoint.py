"""Checkpoint format: a versioned, ordered name -> array map.

Layout: one UTF-8 JSON header line holding the version string and the
ordered parameter records (name, shape), followed by the concatenated raw
little-endian float32 payloads in header order.
"""

import json
from pathlib import Path

import numpy as np
import torch

VERSION = "hupe-ckpt-v1"


def save_checkpoint(module: torch.nn.Module, path) -> None:
    """Write every parameter and buffer of `module`, cast to float32."""
    records = []
    payloads = []
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        records.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.astype("<f4").tobytes())
    header = json.dumps({"version": VERSION, "params": records})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for blob in payloads:
            fh.write(blob)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Read the ordered name -> float32 array map."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"not a checkpoint file: {path}") from exc
        if header.get("version") != VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('version')!r} in {path}"
            )
        out: dict[str, np.ndarray] = {}
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * 4)
            if len(blob) != count * 4:
                raise ValueError(f"truncated checkpoint payload in {path}")
            out[rec["name"]] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return out


def load_checkpoint(module: torch.nn.Module, path) -> None:
    """Restore `module` from `path`; names and shapes must match exactly."""
    arrays = read_checkpoint(path)
    state = module.state_dict()
    if arrays.keys() != state.keys():
        missing = sorted(state.keys() - arrays.keys())
        extra = sorted(arrays.keys() - state.keys())
        raise ValueError(
            f"checkpoint/module mismatch: missing {missing[:5]}, extra {extra[:5]}"
        )
    new_state = {}
    for name, arr in arrays.items():
        if tuple(state[name].shape) != arr.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs "
                f"module {tuple(state[name].shape)}"
            )
        new_state[name] = torch.from_numpy(arr).to(state[name].dtype)
    module.load_state_dict(new_state)
