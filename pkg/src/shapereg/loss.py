"""Total training objective over a T-frame sequence.

``total = elbo + rho * smooth`` with
``elbo = shape_sup + shape_semi + lambda1 * kl_d + lambda2 * kl_z + lambda3 * rec``.
Every term is a per-sequence sum averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .nets import SequenceOutputs
from .prob import (
    kl_dvf,
    kl_latent,
    semi_shape_loss,
    supervised_shape_loss,
)
from .warp import smoothness_loss


@dataclass
class LossWeights:
    lambda1: float = 1e-4
    lambda2: float = 2e-4
    lambda3: float = 0.3
    rho: float = 0.01

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "rho"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


TERMS = ("shape_sup", "shape_semi", "kl_d", "kl_z", "rec", "smooth")
REPORT_FIELDS = ("total", "elbo") + TERMS


@dataclass
class LossReport:
    total: torch.Tensor
    elbo: torch.Tensor
    shape_sup: torch.Tensor
    shape_semi: torch.Tensor
    kl_d: torch.Tensor
    kl_z: torch.Tensor | None
    rec: torch.Tensor | None
    smooth: torch.Tensor
    per_frame: dict[str, list[float]] = field(default_factory=dict)

    def row(self) -> dict[str, float | None]:
        return {f: (None if getattr(self, f) is None else float(getattr(self, f).detach())) for f in REPORT_FIELDS}


def reconstruction_loss(volumes: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """(1/L) * sum_t sum_l ||I_t - I_hat_t^(l)||^2.

    ``recon`` carries the L samples on the axis just before the volume's
    ``(1, H, W, D)`` dims.
    """
    if recon.dim() != volumes.dim() + 1 or recon.shape[-4:] != volumes.shape[-4:]:
        raise ValueError(f"recon {tuple(recon.shape)} does not match volumes {tuple(volumes.shape)} + sample axis")
    n_samples = recon.shape[-5]
    if n_samples < 1:
        raise ValueError("need at least one latent sample")
    return (volumes.unsqueeze(-5) - recon).pow(2).sum() / n_samples


def _frame(g, t):
    return type(g)(*[getattr(g, f)[:, t] for f in g.__dataclass_fields__])


def _as_index(idx, B: int, device) -> torch.Tensor:
    if idx is None:
        raise ValueError("ED/ES indices are required")
    out = torch.as_tensor(idx, device=device).long().reshape(-1)
    if out.numel() == 1:
        out = out.expand(B)
    if out.numel() != B:
        raise ValueError(f"expected {B} indices, got {out.numel()}")
    return out


def sequence_loss(
    labels: torch.Tensor,
    ed_index,
    es_index,
    outputs: SequenceOutputs,
    weights: LossWeights,
    volumes: torch.Tensor | None = None,
    use_rvae: bool = True,
    use_segnet_guidance: bool = True,
    printed_kl: bool = False,
) -> LossReport:
    """Assemble the objective from model outputs.

    ``labels`` is (B,T,H,W,D); only ED/ES frames are read. Without SegNet
    guidance the shape slots hold the intensity analogue
    ``||I_t - I_{t-1} o D_t||^2`` (needs ``volumes``) so that the report
    identities are unchanged.
    """
    B, T = outputs.dvf_used.shape[:2]
    device = outputs.dvf_used.device
    ed = _as_index(ed_index, B, device)
    es = _as_index(es_index, B, device)
    frames = torch.arange(T, device=device)
    supervised = (frames[None, :] == ed[:, None]) | (frames[None, :] == es[:, None])  # (B,T)

    per_frame = {k: [] for k in TERMS}
    sup = semi = kl_d = smooth = 0
    kl_z = rec = 0 if use_rvae else None
    if not use_segnet_guidance and volumes is None:
        raise ValueError("volumes are required when SegNet guidance is disabled")

    for t in range(T):
        mask = supervised[:, t].to(outputs.dvf_used.dtype)
        if use_segnet_guidance:
            if outputs.theta is None or outputs.psi is None:
                raise ValueError("SegNet outputs missing while SegNet guidance is enabled")
            ce = supervised_shape_loss(labels[:, t], outputs.theta[:, t], per_sample=True)
            kl_m = semi_shape_loss(outputs.psi[:, t], outputs.theta[:, t], per_sample=True)
            s_t = (ce * mask).sum() / B
            m_t = (kl_m * (1 - mask)).sum() / B
        else:
            err = (volumes[:, t] - outputs.warped_volumes[:, t]).pow(2).reshape(B, -1).sum(dim=1)
            s_t = (err * mask).sum() / B
            m_t = (err * (1 - mask)).sum() / B
        d_t = kl_dvf(_frame(outputs.dvf, t), printed_variant=printed_kl) / B
        g_t = smoothness_loss(outputs.dvf.mu[:, t]) / B
        sup, semi, kl_d, smooth = sup + s_t, semi + m_t, kl_d + d_t, smooth + g_t
        per_frame["shape_sup"].append(float(s_t.detach()))
        per_frame["shape_semi"].append(float(m_t.detach()))
        per_frame["kl_d"].append(float(d_t.detach()))
        per_frame["smooth"].append(float(g_t.detach()))

        if use_rvae:
            if outputs.qz is None or outputs.recon is None or volumes is None:
                raise ValueError("RVAE outputs and volumes are required when use_rvae is set")
            z_t = kl_latent(_frame(outputs.qz, t), _frame(outputs.pz, t)) / B
            r_t = reconstruction_loss(volumes[:, t], outputs.recon[:, t]) / B
            kl_z, rec = kl_z + z_t, rec + r_t
            per_frame["kl_z"].append(float(z_t.detach()))
            per_frame["rec"].append(float(r_t.detach()))

    elbo = sup + semi + weights.lambda1 * kl_d
    if use_rvae:
        elbo = elbo + weights.lambda2 * kl_z + weights.lambda3 * rec
    total = elbo + weights.rho * smooth
    return LossReport(
        total=total, elbo=elbo, shape_sup=sup, shape_semi=semi, kl_d=kl_d,
        kl_z=kl_z, rec=rec, smooth=smooth, per_frame=per_frame,
    )
