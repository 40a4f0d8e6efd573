"""Full-scale training regimes and external benchmark numbers."""

from __future__ import annotations

# (backbone, stage) -> (batch size, epochs, batches per epoch); late1 and late2 share a regime.
TRAINING_REGIMES = {
    ("unet", "early"): (4, 80, 500),
    ("resunet", "early"): (4, 80, 500),
    ("dlinknet", "early"): (4, 150, 500),
    ("unet", "late"): (4, 80, 500),
    ("resunet", "late"): (2, 80, 1000),
    ("dlinknet", "late"): (2, 150, 1000),
}

# Sentinel-2 U-Net benchmark (Ayala et al., 2021), IoU only.
SENTINEL_BENCHMARKS = [
    {"label": "U-Net + Bicubic x4 Overall", "iou": "0.6894", "boundary_iou": "-",
     "source": "Ayala et al. 2021"},
    {"label": "U-Net + Bicubic x4 Best", "iou": "0.7066", "boundary_iou": "-",
     "source": "Ayala et al. 2021"},
]


def regime(kind: str, stage: str) -> dict:
    """Batch/epoch settings for a backbone and fusion stage ('none' uses the early regime)."""
    key = (kind, "late" if stage in ("late1", "late2") else "early")
    try:
        batch, epochs, per_epoch = TRAINING_REGIMES[key]
    except KeyError:
        raise ValueError(f"no preset for backbone {kind!r}, stage {stage!r}") from None
    return {"batch_size": batch, "epochs": epochs, "batches_per_epoch": per_epoch, "val_batches": 200}


def preset_config(kind: str, stage: str, operator: str = "concatenate", loss: str = "mse",
                  depth: int = 4, base_width: int = 64) -> dict:
    cfg = {
        "model": {"backbone": {"kind": kind, "depth": depth, "base_width": base_width},
                  "fusion": {"stage": stage, "operator": operator}},
        "loss": loss,
        "lr": 0.001,
    }
    if loss == "focal":
        cfg["loss_params"] = {"gamma": 2.0, "alpha": 0.25}
    cfg.update(regime(kind, stage))
    return cfg
