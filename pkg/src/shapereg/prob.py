"""Gaussian/multinomial families used by the objective, with closed-form KLs.

All reductions are sums. Functions taking ``per_sample=True`` return one
value per batch element (leading dim) instead of the grand total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

LOG_EPS = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


def _check_positive(name: str, t: torch.Tensor) -> None:
    if not bool((t > 0).all()):
        raise ValueError(f"{name} must be strictly positive")


def _reduce(x: torch.Tensor, per_sample: bool) -> torch.Tensor:
    if per_sample:
        return x.reshape(x.shape[0], -1).sum(dim=1)
    return x.sum()


@dataclass
class DvfGaussian:
    """Per-voxel N(mu, sigma2 * I + v v^T) over 3-vector displacements.

    Shapes: mu (B,3,H,W,D), sigma2 (B,1,H,W,D), v (B,3,H,W,D).
    """

    mu: torch.Tensor
    sigma2: torch.Tensor
    v: torch.Tensor

    def v_norm2(self) -> torch.Tensor:
        return self.v.pow(2).sum(dim=-4, keepdim=True)

    def trace(self) -> torch.Tensor:
        return 3.0 * self.sigma2 + self.v_norm2()

    def logdet(self) -> torch.Tensor:
        # matrix determinant lemma: |s I + v v^T| = s^3 (1 + |v|^2 / s)
        return 2.0 * torch.log(self.sigma2) + torch.log(self.sigma2 + self.v_norm2())

    def covariance(self) -> torch.Tensor:
        """Dense per-voxel covariance with the 3x3 block in the last two dims."""
        v = self.v.movedim(-4, -1)
        eye = torch.eye(3, dtype=v.dtype, device=v.device)
        return self.sigma2.movedim(-4, -1).unsqueeze(-1) * eye + v.unsqueeze(-1) * v.unsqueeze(-2)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        """Reparameterised draw mu + sigma * xi + v * eta, xi ~ N(0, I3), eta ~ N(0, 1)."""
        xi = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype, device=self.mu.device)
        eta = torch.randn(self.sigma2.shape, generator=generator, dtype=self.mu.dtype, device=self.mu.device)
        return self.mu + self.sigma2.sqrt() * xi + self.v * eta

    def detach(self) -> "DvfGaussian":
        return DvfGaussian(self.mu.detach(), self.sigma2.detach(), self.v.detach())


@dataclass
class LatentGaussian:
    """Factorised N(mu, sigma2) at latent resolution, shapes (B,1,h,w,D)."""

    mu: torch.Tensor
    sigma2: torch.Tensor

    def detach(self) -> "LatentGaussian":
        return LatentGaussian(self.mu.detach(), self.sigma2.detach())


def kl_dvf(q: DvfGaussian, printed_variant: bool = False, per_sample: bool = False) -> torch.Tensor:
    """Sum over voxels of KL(q || N(0, I3)).

    ``printed_variant=True`` evaluates 0.5 * (log|C| + 3 + mu^T mu + Tr C)
    instead, which does not vanish at q = prior; kept only for reproduction
    studies of that form.
    """
    _check_positive("sigma2", q.sigma2)
    mu2 = q.mu.pow(2).sum(dim=-4, keepdim=True)
    if printed_variant:
        kl = 0.5 * (q.logdet() + 3.0 + mu2 + q.trace())
    else:
        kl = 0.5 * (q.trace() + mu2 - 3.0 - q.logdet())
    return _reduce(kl, per_sample)


def kl_latent(q: LatentGaussian, p: LatentGaussian, per_sample: bool = False) -> torch.Tensor:
    if q.mu.shape != p.mu.shape or q.sigma2.shape != p.sigma2.shape:
        raise ValueError(f"shape mismatch: q {tuple(q.mu.shape)} vs p {tuple(p.mu.shape)}")
    _check_positive("q.sigma2", q.sigma2)
    _check_positive("p.sigma2", p.sigma2)
    kl = 0.5 * (
        torch.log(p.sigma2) - torch.log(q.sigma2) - 1.0
        + (q.sigma2 + (q.mu - p.mu).pow(2)) / p.sigma2
    )
    return _reduce(kl, per_sample)


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B,H,W,D) integer labels -> (B,K,H,W,D) float one-hot."""
    labels = labels.long()
    if int(labels.max()) >= num_classes or int(labels.min()) < 0:
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    return torch.nn.functional.one_hot(labels, num_classes).movedim(-1, -4)


def supervised_shape_loss(gt: torch.Tensor, theta: torch.Tensor, per_sample: bool = False) -> torch.Tensor:
    """Cross-entropy -sum c log(theta) of hard labels ``gt`` against ``theta``."""
    if theta.dim() == gt.dim():
        raise ValueError("theta needs a class axis")
    if tuple(gt.shape[-3:]) != tuple(theta.shape[-3:]):
        raise ValueError(f"shape mismatch: gt {tuple(gt.shape)} vs theta {tuple(theta.shape)}")
    c = one_hot(gt, theta.shape[-4]).to(theta.dtype)
    ce = -(c * torch.log(theta.clamp_min(LOG_EPS)))
    return _reduce(ce, per_sample)


def semi_shape_loss(psi: torch.Tensor, theta: torch.Tensor, per_sample: bool = False) -> torch.Tensor:
    """Multinomial KL(psi || theta) summed over classes and voxels."""
    if psi.shape != theta.shape:
        raise ValueError(f"shape mismatch: psi {tuple(psi.shape)} vs theta {tuple(theta.shape)}")
    kl = psi * (torch.log(psi.clamp_min(LOG_EPS)) - torch.log(theta.clamp_min(LOG_EPS)))
    return _reduce(kl, per_sample)


def sample_latent(q: LatentGaussian, generator: torch.Generator | None = None) -> torch.Tensor:
    _check_positive("sigma2", q.sigma2)
    xi = torch.randn(q.mu.shape, generator=generator, dtype=q.mu.dtype, device=q.mu.device)
    return q.mu + q.sigma2.sqrt() * xi


def entropy_map(q: DvfGaussian, differential: bool = False) -> torch.Tensor:
    """Per-voxel 0.5 * log((2 pi)^3 |C|), shape (..., 1, H, W, D).

    ``differential=True`` uses (2 pi e)^3, the exact Gaussian entropy.
    """
    _check_positive("sigma2", q.sigma2)
    const = 3.0 * (LOG_2PI + (1.0 if differential else 0.0))
    return 0.5 * (const + q.logdet())
