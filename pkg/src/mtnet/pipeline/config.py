from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class TrainConfig:
    lr: float = 1e-5
    fine_tune_lr: float = 5e-6
    iterations: int = 400
    fine_tune_iterations: int = 3
    seed: int = 0
    # augmentation ranges
    flip_prob: float = 0.5
    brightness_delta: float = 0.2
    contrast_min: float = 0.8
    contrast_max: float = 1.2
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotation_deg: float = 15.0
    translate_frac: float = 0.1
    crop_size: int = 128
    sample_size: int = 160
    max_mask_retries: int = 8
    # model/pipeline knobs
    precision: str = "float32"
    warp: str = "scatter"
    window: int = 0
    soft_match_grad: bool = False
    soft_temperature: float = 1.0
    dice_eps: float = 1.0

    def validate(self, stride: int = 16) -> "TrainConfig":
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.crop_size % stride:
            raise ValueError(f"crop_size {self.crop_size} is not divisible by stride {stride}")
        if self.sample_size < self.crop_size:
            raise ValueError("sample_size must be >= crop_size")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.warp not in ("scatter", "gather"):
            raise ValueError(f"warp must be scatter or gather, got {self.warp!r}")
        if self.contrast_min > self.contrast_max or self.scale_min > self.scale_max:
            raise ValueError("augmentation range minimum exceeds maximum")
        return self

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def no_augmentation(cls, **kw) -> "TrainConfig":
        base = dict(
            flip_prob=0.0,
            brightness_delta=0.0,
            contrast_min=1.0,
            contrast_max=1.0,
            scale_min=1.0,
            scale_max=1.0,
            rotation_deg=0.0,
            translate_frac=0.0,
        )
        base.update(kw)
        return cls(**base)
