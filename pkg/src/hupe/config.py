"""Run configuration: one JSON file drives training and the CLI.

The schema is versioned and strict: unknown keys are rejected with the
offending field named, so typos fail fast instead of silently training with
defaults.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION

    # data
    train_degraded: str = ""
    train_reference: str = ""
    out_dir: str = "runs/default"
    crop: int = 512
    resize: int = 512

    # model
    n_hibs: int = 3
    flow_steps: int = 6
    sfa_hidden: int | None = None
    invconv_init: str = "identity"
    prior_injection: str = "step"  # step | block | off
    transmission_sign: str = "neg"

    # enhancement training
    lr: float = 1e-5
    batch: int = 1
    epochs: int = 100
    max_steps: int | None = None
    hin_checkpoint: str | None = None
    task_checkpoint: str | None = None
    lambdas: list[float] = field(default_factory=lambda: [1.0, 0.05, 1.0, 0.2])
    bilateral_norm: str = "l2"
    perceptual_backend: str = "auto"
    seed: int = 0

    # collaborative stage
    joint_epochs: int = 20
    joint_max_steps: int | None = None
    inner_lr: float | None = None  # guide-loss SGD step; defaults to lr
    fcm_lr: float | None = None    # MFG/FTB optimizer; defaults to lr
    inner_every: int = 1
    outer_every: int = 1

    # task head
    task: str = "detect"  # detect | segment
    num_classes: int = 4
    task_lr: float = 1e-2
    task_weight_decay: float = 1e-4
    task_batch: int = 1
    task_epochs: int = 1
    task_max_steps: int | None = None

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if self.task not in ("detect", "segment"):
            raise ValueError(f"task must be 'detect' or 'segment', got {self.task!r}")
        if self.bilateral_norm not in ("l1", "l2"):
            raise ValueError(f"bilateral_norm must be 'l1' or 'l2'")
        if self.transmission_sign not in ("neg", "pos"):
            raise ValueError("transmission_sign must be 'neg' or 'pos'")
        if self.prior_injection not in ("step", "block", "off"):
            raise ValueError("prior_injection must be 'step', 'block' or 'off'")
        if len(self.lambdas) != 4:
            raise ValueError("lambdas must have 4 entries (contrastive, "
                             "frequency, bilateral, guide)")

    @classmethod
    def segment_defaults(cls, **kwargs) -> "RunConfig":
        base = dict(task="segment", task_lr=1e-3, task_weight_decay=5e-4, task_batch=7)
        base.update(kwargs)
        return cls(**base)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing config file: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if raw.get("task") == "segment":
            defaults = {"task_lr": 1e-3, "task_weight_decay": 5e-4, "task_batch": 7}
            for key, val in defaults.items():
                raw.setdefault(key, val)
        return cls(**raw)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))
