"""Configuration with paper-default values.

Every field defaults to the published setting where one exists (learning
rate 0.001, batch 1, head width 128, single cascade stage at IoU 0.6,
256 proposals, RoI resolutions 4 and 8, support crops 240x240, query
short side 320 capped at long side 1000). Iteration counts default to
the desk-scale 2000 rather than the published 20000. Loading from JSON
logs any field that differs from its default.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

log = logging.getLogger("oredet")


@dataclass
class ModelConfig:
    channels: int = 64            # FPN / block channel width C_f
    segments: int = 8             # SM segment count (segment size = channels // segments)
    bottleneck: int = 16          # SM reweighting bottleneck width (channels // 4)
    support_pool: int = 8         # support maps pooled to this size before the SM block
    head_width: int = 128
    cascade_stages: int = 1
    iou_thr: float = 0.6
    proposals: int = 256
    score_floor: float = 0.01
    roi_res: tuple = (4, 8)
    fusion: str = "rg"            # "rg" or "xcorr1x1" (AttentionRPN-style ablation)
    stem_width: int = 32
    stage_widths: tuple = (64, 96, 128)   # C3/C4/C5 output channels
    vov_widths: tuple = (32, 48, 64)      # per-stage 3x3 conv width inside the VoV block


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    iters: int = 2000             # paper runs 20000 on the real dataset
    batch: int = 1
    seed: int = 0
    freeze_backbone: bool = False
    base_shots: int = 2           # support shots per episode during base training
    roi_samples: int = 64         # stage-2 proposals sampled per image
    pos_fraction: float = 0.5
    log_every: int = 100


@dataclass
class DataConfig:
    path: str = ""                # COCO-layout dataset dir; empty -> synthetic
    synth_seed: int = 7
    synth_images: int = 160
    synth_size: int = 320
    density: str = "medium"
    novel_images: int = 40        # novel-split scenes available for the k-shot pool
    eval_images: int = 100
    eval_seed: int = 9000


@dataclass
class EvalConfig:
    iou_thrs: tuple = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    nms_thr: float = 0.5
    max_detections: int = 100


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for section in d.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        defaults = cls()
        for section_name in ("model", "train", "data", "eval"):
            section = getattr(cfg, section_name)
            updates = d.get(section_name, {})
            for key, value in updates.items():
                if not hasattr(section, key):
                    raise ValueError(f"unknown config field {section_name}.{key}")
                current = getattr(section, key)
                if isinstance(current, tuple):
                    value = tuple(value)
                setattr(section, key, value)
                default = getattr(getattr(defaults, section_name), key)
                if value != default:
                    log.info("config override: %s.%s = %r (default %r)",
                             section_name, key, value, default)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
