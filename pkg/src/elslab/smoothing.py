"""Environment label smoothing: soft domain targets, the smoothed discriminator
loss, the annealing schedule, symmetric label noise and the closed-form
gradients used as oracles.

Convention: ``gamma`` is the weight kept on the true environment and the other
``M - 1`` environments share ``1 - gamma`` evenly.  The gradient analysis that
writes the loss with ``1 - gamma`` on the true class uses a complementary
parameter; translating, its kappa equals ``(1 - gamma) * M / (M - 1)`` here.

The scalar helpers use plain arithmetic so they also accept ``Fraction``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("two_sided", "one_sided", "none")


class InfeasibleSmoothing(ValueError):
    """The noise-corrected smoothing parameter falls outside (0.5, 1]."""


@dataclass(frozen=True)
class SmoothingSpec:
    gamma: float = 1.0
    mode: str = "two_sided"
    anneal: bool = False
    num_domains: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if self.num_domains < 2:
            raise ValueError("num_domains must be at least 2")
        if self.mode == "two_sided" and not (1 / self.num_domains <= self.gamma <= 1):
            raise ValueError(f"two-sided gamma must lie in [1/M, 1], got {self.gamma}")
        if self.mode == "one_sided":
            if self.num_domains != 2:
                raise ValueError("one-sided smoothing is defined for M = 2 only")
            if not 0 < self.gamma <= 1:
                raise ValueError(f"one-sided gamma must lie in (0, 1], got {self.gamma}")

    @property
    def effective_gamma(self):
        return 1 if self.mode == "none" else self.gamma

    def with_gamma(self, gamma) -> "SmoothingSpec":
        return SmoothingSpec(gamma, self.mode, self.anneal, self.num_domains)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma"] = float(d["gamma"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothingSpec":
        unknown = set(d) - {"gamma", "mode", "anneal", "num_domains"}
        if unknown:
            raise ValueError(f"unknown smoothing keys: {sorted(unknown)}")
        anneal = d.get("anneal", False)
        if isinstance(anneal, str):
            anneal = anneal.strip().lower() in ("1", "true", "yes")
        return cls(
            gamma=float(d.get("gamma", 1.0)),
            mode=str(d.get("mode", "two_sided")),
            anneal=bool(anneal),
            num_domains=int(d.get("num_domains", 2)),
        )


@dataclass(frozen=True)
class SmoothedTarget:
    probs: tuple

    def as_array(self) -> np.ndarray:
        return np.array([float(p) for p in self.probs])


def smooth_labels(env_label: int, spec: SmoothingSpec) -> SmoothedTarget:
    m = spec.num_domains
    if not 0 <= env_label < m:
        raise IndexError(f"environment label {env_label} out of range for M = {m}")
    g = spec.effective_gamma
    if spec.mode == "one_sided":
        # domain 0 is the "real"/source side; only its target is softened
        probs = (g, 1 - g) if env_label == 0 else (0, 1)
        return SmoothedTarget(tuple(probs))
    off = (1 - g) / (m - 1)
    return SmoothedTarget(tuple(g if j == env_label else off for j in range(m)))


def target_matrix(env_labels: Sequence[int], spec: SmoothingSpec) -> np.ndarray:
    """Rows of smoothed targets for a batch of environment labels."""
    labels = np.asarray(env_labels, dtype=np.int64)
    m = spec.num_domains
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise IndexError(f"environment labels out of range for M = {m}")
    table = np.stack([smooth_labels(j, spec).as_array() for j in range(m)])
    return table[labels]


def els_discriminator_loss(logits: Tensor, env_labels: Sequence[int], spec: SmoothingSpec) -> Tensor:
    """Mean over the batch of -<smoothed target, log_softmax(logits)>."""
    if logits.value.ndim != 2 or logits.shape[1] != spec.num_domains:
        raise ad.AutodiffError("els_discriminator_loss", f"logits {logits.shape} do not have M = {spec.num_domains} columns")
    if len(env_labels) != logits.shape[0]:
        raise ad.AutodiffError("els_discriminator_loss", "one label per logit row required")
    if not np.all(np.isfinite(logits.value)):
        raise ad.AutodiffError("els_discriminator_loss", "non-finite logits")
    targets = Tensor(target_matrix(env_labels, spec))
    per_cell = ad.mul(targets, ad.log_softmax_rows(logits))
    n = logits.shape[0]
    return ad.scale(ad.sum(per_cell), -1.0 / n)


def total_objective(cls_loss, adv_loss, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(cls_loss, Tensor) or isinstance(adv_loss, Tensor):
        return ad.add(ad._as_tensor(cls_loss), ad.scale(ad._as_tensor(adv_loss), lam))
    return cls_loss + lam * adv_loss


def anneal_gamma(t, T, M: int):
    """gamma(t) = 1 - ((M - 1) / M) * (t / T), from one-hot to uniform."""
    if T <= 0:
        raise ValueError("T must be positive")
    if M < 2:
        raise ValueError("M must be at least 2")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    # single division of exact integers: gamma(T) is the correctly rounded 1/M
    return (M * T - (M - 1) * t) / (M * T)


@dataclass(frozen=True)
class NoiseModel:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate < 0.5:
            raise ValueError("noise rate must lie in [0, 0.5)")


def flip_labels(env_labels: Sequence[int], model: NoiseModel, rng: np.random.Generator | None = None) -> np.ndarray:
    """Flip each binary label independently with probability ``model.rate``."""
    labels = np.asarray(env_labels, dtype=np.int64)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("flip_labels expects binary labels")
    if rng is None:
        from .rng import substream

        rng = substream(model.seed, "noise")
    flips = rng.random(labels.shape) < model.rate
    return np.where(flips, 1 - labels, labels)


def optimal_gamma_under_noise(gamma_star, e):
    """Smoothing that cancels the reverse-optimisation term: (g* - e) / (1 - 2e)."""
    if not 0 <= e < 0.5:
        raise ValueError("noise rate must lie in [0, 0.5)")
    gamma = (gamma_star - e) / (1 - 2 * e)
    if not 0.5 < gamma <= 1:
        raise InfeasibleSmoothing(
            f"infeasible smoothing for this noise rate: gamma = {float(gamma):.6g} (gamma*={float(gamma_star)}, e={float(e)})"
        )
    return gamma


def noisy_loss_coefficient(gamma_star, gamma, e):
    """Weight of E[l(f, 1-y) - l(f, y)] when training on noisy smoothed labels."""
    return gamma_star - gamma - e + 2 * gamma * e


def smoothed_ce_gradient_closed_form(probs, true_idx: int, spec: SmoothingSpec) -> np.ndarray:
    """d/d(logits) of -<target, log softmax(logits)> for one sample: p - target."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probs must sum to 1")
    return p - smooth_labels(true_idx, spec).as_array()
