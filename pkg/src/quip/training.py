"""Shared optimization settings for the training loops."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    def lr_scale(self, step: int, total_steps: int) -> float:
        """Linear warmup then linear decay to zero; ``step`` counts from 0."""
        warmup = max(1, int(round(self.warmup_fraction * total_steps)))
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))
