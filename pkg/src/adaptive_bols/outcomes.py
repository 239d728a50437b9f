"""Two-arm outcome distributions used in the simulations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class ArmDistribution:
    """Gaussian ``N(mean, sd^2)`` or Bernoulli with success probability ``mean``."""

    kind: str
    mean: float
    sd: Optional[float] = None

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.sd is None or not self.sd > 0:
                raise ValueError("Gaussian arm needs sd > 0")
        elif self.kind == "bernoulli":
            if not 0.0 <= self.mean <= 1.0:
                raise ValueError("Bernoulli success probability must lie in [0, 1]")
            if self.sd is not None:
                raise ValueError("Bernoulli arm takes no sd")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    @classmethod
    def gaussian(cls, mean: float, sd: float) -> "ArmDistribution":
        return cls("gaussian", float(mean), float(sd))

    @classmethod
    def bernoulli(cls, p: float) -> "ArmDistribution":
        return cls("bernoulli", float(p))

    @classmethod
    def parse(cls, text: str) -> "ArmDistribution":
        """Parse ``gauss:MEAN:SD`` or ``bern:P``."""
        parts = text.strip().split(":")
        try:
            if parts[0] in ("gauss", "gaussian", "normal") and len(parts) == 3:
                return cls.gaussian(float(parts[1]), float(parts[2]))
            if parts[0] in ("bern", "bernoulli") and len(parts) == 2:
                return cls.bernoulli(float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"bad distribution spec {text!r}: {exc}") from None
        raise ValueError(f"bad distribution spec {text!r}; expected gauss:MEAN:SD or bern:P")

    def format(self) -> str:
        if self.kind == "gaussian":
            return f"gauss:{self.mean:g}:{self.sd:g}"
        return f"bern:{self.mean:g}"

    @property
    def is_binary(self) -> bool:
        return self.kind == "bernoulli"


def true_variance(dist: ArmDistribution) -> float:
    if dist.kind == "gaussian":
        return dist.sd**2
    return dist.mean * (1.0 - dist.mean)


def draw(dist: ArmDistribution, rng: np.random.Generator, size=None):
    """Draw outcomes from one arm."""
    if dist.kind == "gaussian":
        return dist.mean + dist.sd * rng.standard_normal(size)
    u = rng.random(size)
    return (u < dist.mean).astype(float) if size is not None else float(u < dist.mean)


def unit_noise(arms: tuple, rng: np.random.Generator, shape):
    """The primitive randomness behind :func:`draw_units`.

    One standard normal per unit for Gaussian pairs and one uniform per unit
    otherwise, so draws line up unit by unit whatever the arm assignment.
    """
    if noise_is_normal(arms):
        return rng.standard_normal(shape)
    return rng.random(shape)


def _arm_values(dist: ArmDistribution, noise: np.ndarray, normal_noise: bool) -> np.ndarray:
    if dist.kind == "gaussian":
        z = noise if normal_noise else ndtri(noise)
        return dist.mean + dist.sd * z
    return (noise < dist.mean).astype(float)


def outcomes_from_noise(arms: tuple, assigned: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Map unit noise to outcomes; ``arms`` is ordered ``(control, treated)``."""
    normal_noise = noise_is_normal(arms)
    control, treated = arms
    return np.where(np.asarray(assigned) == 1,
                    _arm_values(treated, noise, normal_noise),
                    _arm_values(control, noise, normal_noise))


def noise_is_normal(arms: tuple) -> bool:
    return all(d.kind == "gaussian" for d in arms)


def draw_units(arms: tuple, assigned: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one outcome per assigned unit; ``arms`` is ``(control, treated)``."""
    assigned = np.asarray(assigned)
    return outcomes_from_noise(arms, assigned, unit_noise(arms, rng, assigned.shape))
