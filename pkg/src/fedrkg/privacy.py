"""Gradient clipping and Gaussian noise for the item-embedding updates.

Only the item-embedding gradient is sanitized: the user embedding and the gate
never leave the device. ``sigma`` is the absolute per-entry noise std.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class PrivacyConfig:
    enabled: bool = False
    clip: float = 0.1
    sigma: float = 0.001
    delta: float = 1e-5  # reported only

    def problems(self) -> list[str]:
        out = []
        if self.enabled:
            if self.clip <= 0:
                out.append(f"privacy.clip must be > 0, got {self.clip}")
            if self.sigma < 0:
                out.append(f"privacy.sigma must be >= 0, got {self.sigma}")
        if not 0 < self.delta < 1:
            out.append(f"privacy.delta must be in (0, 1), got {self.delta}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def clip_gradient(grad: np.ndarray, C: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm <= C:
        return grad
    scale = C / norm
    out = grad * scale
    # rounding can leave the norm an ulp above C; the bound must hold exactly
    while np.linalg.norm(out) > C:
        scale = np.nextafter(scale, 0.0)
        out = grad * scale
    return out


def add_noise(grad: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return grad
    return grad + rng.normal(0.0, sigma, size=grad.shape)


def sensitivity_bound(eta: float, T_int: int, E: int, C: float) -> float:
    """L2 sensitivity of the accumulated item update between two guidance rounds.

    ``E`` counts optimizer steps per round; with mini-batches pass
    epochs * batches_per_epoch.
    """
    return 2.0 * eta * T_int * E * C


def sanitize_item_gradient(
    grad_rows: np.ndarray, m: int, cfg: PrivacyConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray | None]:
    """Clip a row-sparse item gradient and draw dense noise for the full table.

    Rows absent from the batch have zero gradient, so the norm over the
    touched rows equals the norm of the whole (m, d) gradient. Returns the
    clipped rows and an (m, d) noise matrix, or ``None`` when ``sigma`` is 0.
    """
    clipped = clip_gradient(grad_rows, cfg.clip)
    if cfg.sigma == 0:
        return clipped, None
    return clipped, rng.normal(0.0, cfg.sigma, size=(m, grad_rows.shape[1]))
