"""Synthetic model outputs for loss tests."""
import torch

from shapereg.nets import SequenceOutputs
from shapereg.prob import DvfGaussian, LatentGaussian
from shapereg.warp import warp


def random_outputs(seed, B=2, T=4, K=4, shape=(6, 5, 3), L=1, dtype=torch.float64, requires_grad=False):
    """Random but well-formed outputs plus labels and volumes; theta is psi_{t-1} warped by dvf_used."""
    g = torch.Generator().manual_seed(seed)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=dtype)

    H, W, D = shape
    dvf = DvfGaussian(r(B, T, 3, H, W, D), r(B, T, 1, H, W, D).exp() * 0.5, 0.5 * r(B, T, 3, H, W, D))
    qz = LatentGaussian(r(B, T, 1, 2, 2, D), r(B, T, 1, 2, 2, D).exp())
    pz = LatentGaussian(r(B, T, 1, 2, 2, D), r(B, T, 1, 2, 2, D).exp())
    logits = r(B, T, K, H, W, D)
    volumes = torch.rand(B, T, 1, H, W, D, generator=g, dtype=dtype)
    recon = torch.rand(B, T, L, 1, H, W, D, generator=g, dtype=dtype)
    labels = torch.randint(0, K, (B, T, H, W, D), generator=g)
    leaves = [dvf.mu, dvf.sigma2, dvf.v, qz.mu, qz.sigma2, pz.mu, pz.sigma2, logits, recon]
    if requires_grad:
        for t in leaves:
            t.requires_grad_(True)
    outputs = assemble(dvf, qz, pz, logits, volumes, recon)
    return outputs, labels, volumes, leaves


def assemble(dvf, qz, pz, logits, volumes, recon, dvf_used=None):
    psi = logits.softmax(dim=2)
    used = dvf.mu if dvf_used is None else dvf_used
    T = volumes.shape[1]
    theta = torch.stack([warp(psi[:, t - 1], used[:, t]) for t in range(T)], dim=1)
    warped = torch.stack([warp(volumes[:, t - 1], used[:, t]) for t in range(T)], dim=1)
    return SequenceOutputs(dvf=dvf, dvf_used=used, warped_volumes=warped, psi=psi, theta=theta,
                           qz=qz, pz=pz, recon=recon)


TINY_MODEL = {"feat_channels": [2, 2, 4, 4], "hidden_channels": 4, "z_mid": 4, "phi_channels": 4,
              "dec_channels": [4, 4, 2, 2], "deform_widths": [2, 2, 4, 4, 4], "seg_widths": [2, 2, 4, 4]}


def tiny_config(directory, **sections):
    """Write a minutes-scale experiment config and return its path."""
    import yaml

    cfg = {
        "version": 1,
        "output": "run",
        "dataset": {"count": 10},
        "preprocess": {"margin": 3, "target_hw": 16, "target_depth": 8},
        "model": TINY_MODEL,
        "pretrain": {"epochs": 2, "batch_size": 4, "checkpoint_every": 1},
        "train": {"epochs": 1, "batch_size": 4, "checkpoint_every": 1},
        "sweep": {"rho": [0.0, 0.1], "epochs": 1},
    }
    cfg.update(sections)
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path
