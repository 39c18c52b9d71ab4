"""Network blocks and the recurrent framework that wires them together.

Spatial layout is ``(B, C, H, W, D)``. All down/upsampling acts on H and W
only; depth stride is always one. The latent grid sits at ``(H/16, W/16, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prob import DvfGaussian, LatentGaussian, sample_latent
from .warp import warp

LRELU_SLOPE = 0.01
VAR_FLOOR = 1e-6
DOWN = (2, 2, 1)
LATENT_FACTOR = 16

BLOCKS = ("featnet", "infer_z", "prior_z", "featz", "decnet", "recnet", "deformnet", "segnet")


def positive(raw: torch.Tensor) -> torch.Tensor:
    """Smooth map onto (VAR_FLOOR, inf) used for every variance head."""
    return F.softplus(raw) + VAR_FLOOR


def conv_act(cin: int, cout: int, kernel: int = 3, stride=1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        nn.LeakyReLU(LRELU_SLOPE),
    )


def up_act(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.ConvTranspose3d(cin, cout, DOWN, stride=DOWN), nn.LeakyReLU(LRELU_SLOPE))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(m.weight, a=LRELU_SLOPE, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def check_latent_divisible(shape) -> None:
    H, W = shape[-3], shape[-2]
    if H % LATENT_FACTOR or W % LATENT_FACTOR:
        raise ValueError(f"H and W must be divisible by {LATENT_FACTOR}, got {(H, W)}")


class FeatNet(nn.Module):
    """Four stride-(2,2,1) conv stages: 1 x H x W x D -> C x H/16 x W/16 x D."""

    def __init__(self, in_channels: int = 1, channels=(8, 16, 32, 32)):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("FeatNet needs exactly four stages")
        layers, cin = [], in_channels
        for c in channels:
            layers.append(conv_act(cin, c, stride=DOWN))
            cin = c
        self.layers = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        check_latent_divisible(x.shape)
        return self.layers(x)


class InferZ(nn.Module):
    """Posterior q(Z_t | I_t, h_{t-1}) from FeatNet features and the hidden state."""

    def __init__(self, feat_channels: int, hidden_channels: int = 32, latent_channels: int = 1, mid: int = 16):
        super().__init__()
        self.body = conv_act(feat_channels + hidden_channels, mid)
        self.head = nn.Conv3d(mid, 2 * latent_channels, 1)
        self.latent_channels = latent_channels

    def forward(self, feat, h) -> LatentGaussian:
        if feat.shape[2:] != h.shape[2:]:
            raise ValueError(f"feature grid {tuple(feat.shape[2:])} != hidden grid {tuple(h.shape[2:])}")
        mu, raw = self.head(self.body(torch.cat([feat, h], dim=1))).split(self.latent_channels, dim=1)
        return LatentGaussian(mu, positive(raw))


class PriorZ(nn.Module):
    """Prior p(Z_t | h_{t-1})."""

    def __init__(self, hidden_channels: int = 32, latent_channels: int = 1, mid: int = 16):
        super().__init__()
        self.body = conv_act(hidden_channels, mid)
        self.head = nn.Conv3d(mid, 2 * latent_channels, 1)
        self.latent_channels = latent_channels

    def forward(self, h) -> LatentGaussian:
        mu, raw = self.head(self.body(h)).split(self.latent_channels, dim=1)
        return LatentGaussian(mu, positive(raw))


class FeatZ(nn.Module):
    """Latent sample -> features phi_Z shared by the decoder and DeformNet."""

    def __init__(self, latent_channels: int = 1, channels: int = 16):
        super().__init__()
        self.layers = nn.Sequential(conv_act(latent_channels, channels), conv_act(channels, channels, kernel=1))
        self.out_channels = channels

    def forward(self, z):
        return self.layers(z)


class DecNet(nn.Module):
    """Four transposed-conv x2 stages in H,W; returns the reconstructed volume."""

    def __init__(self, in_channels: int = 16, channels=(16, 8, 8, 4)):
        super().__init__()
        layers, cin = [], in_channels
        for c in channels:
            layers.append(up_act(cin, c))
            cin = c
        self.layers = nn.Sequential(*layers)
        self.out = nn.Conv3d(cin, 1, 3, padding=1)

    def forward(self, phi):
        return self.out(self.layers(phi))


class RecNet(nn.Module):
    """ConvLSTM cell (no peepholes, 3x3x3 kernels) over concat(z, features)."""

    def __init__(self, in_channels: int, hidden_channels: int = 32):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv3d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)

    def initial_state(self, like: torch.Tensor):
        shape = (like.shape[0], self.hidden_channels) + tuple(like.shape[2:])
        z = like.new_zeros(shape)
        return z, z.clone()

    def forward(self, state, z, feat):
        h, c = state
        if not (h.shape[2:] == z.shape[2:] == feat.shape[2:]):
            raise ValueError("RecNet inputs must share the latent grid")
        i, f, o, g = self.gates(torch.cat([z, feat, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class UNet(nn.Module):
    """Plain 3D U-Net; ``len(widths) - 1`` in-plane downsamplings.

    ``bottleneck_channels`` extra channels may be concatenated at the
    coarsest level and mixed back by a 1x1x1 conv.
    """

    def __init__(self, in_channels: int, widths, bottleneck_channels: int = 0):
        super().__init__()
        self.widths = tuple(widths)
        self.inc = conv_act(in_channels, widths[0])
        self.down = nn.ModuleList(
            nn.Sequential(conv_act(widths[i - 1], widths[i], stride=DOWN), conv_act(widths[i], widths[i]))
            for i in range(1, len(widths))
        )
        self.fuse = conv_act(widths[-1] + bottleneck_channels, widths[-1], kernel=1) if bottleneck_channels else None
        # up[i] / dec[i] bring level i+1 back to level i
        self.up = nn.ModuleList(up_act(widths[i + 1], widths[i]) for i in range(len(widths) - 1))
        self.dec = nn.ModuleList(conv_act(2 * widths[i], widths[i]) for i in range(len(widths) - 1))

    @property
    def factor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x, bottleneck=None):
        if x.shape[-3] % self.factor or x.shape[-2] % self.factor:
            raise ValueError(f"U-Net input H,W must be divisible by {self.factor}, got {tuple(x.shape[-3:-1])}")
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        y = skips.pop()
        if self.fuse is not None:
            if bottleneck is None or bottleneck.shape[2:] != y.shape[2:]:
                raise ValueError("bottleneck features missing or at the wrong resolution")
            y = self.fuse(torch.cat([y, bottleneck], dim=1))
        for i in reversed(range(len(self.up))):
            y = self.dec[i](torch.cat([self.up[i](y), skips[i]], dim=1))
        return y


class DeformNet(nn.Module):
    """q(D_t | I_t, I_{t-1}, Z_t): mean, isotropic variance and rank-1 factor."""

    def __init__(self, widths=(8, 16, 32, 64, 64), phi_channels: int = 16, head_scale: float = 0.1):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("DeformNet bottleneck must sit at H/16: need five widths")
        self.unet = UNet(2, widths, bottleneck_channels=phi_channels)
        self.mu = nn.Conv3d(widths[0], 3, 3, padding=1)
        self.sigma2 = nn.Conv3d(widths[0], 1, 3, padding=1)
        self.v = nn.Conv3d(widths[0], 3, 3, padding=1)
        self.head_scale = head_scale

    def reset_heads(self) -> None:
        with torch.no_grad():
            for head in (self.mu, self.v):
                head.weight.mul_(self.head_scale)

    def forward(self, image, previous, phi_z) -> DvfGaussian:
        if image.shape != previous.shape:
            raise ValueError(f"volume shapes differ: {tuple(image.shape)} vs {tuple(previous.shape)}")
        y = self.unet(torch.cat([image, previous], dim=1), phi_z)
        return DvfGaussian(self.mu(y), positive(self.sigma2(y)), self.v(y))


class SegNet(nn.Module):
    """q(M_t | I_t) as a softmax U-Net."""

    def __init__(self, widths=(8, 16, 32, 64), num_classes: int = 4):
        super().__init__()
        self.unet = UNet(1, widths)
        self.head = nn.Conv3d(widths[0], num_classes, 1)
        self.num_classes = num_classes

    def logits(self, image):
        return self.head(self.unet(image))

    def forward(self, image):
        return torch.softmax(self.logits(image), dim=1)

    def last_layers(self, n: int = 3) -> list[str]:
        """Module paths of the last ``n`` parameterised layers on the output path."""
        order = ["head", "unet.dec.0.0", "unet.up.0.0", "unet.dec.1.0", "unet.up.1.0"]
        return order[:n]


@dataclass
class ModelConfig:
    num_classes: int = 4
    feat_channels: tuple[int, ...] = (8, 16, 32, 32)
    hidden_channels: int = 32
    latent_channels: int = 1
    z_mid: int = 16
    phi_channels: int = 16
    dec_channels: tuple[int, ...] = (16, 8, 8, 4)
    deform_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    seg_widths: tuple[int, ...] = (8, 16, 32, 64)


@dataclass
class SequenceOutputs:
    """Per-frame outputs stacked on dim 1 (time)."""

    dvf: DvfGaussian                  # (B,T,{3,1,3},H,W,D)
    dvf_used: torch.Tensor            # (B,T,3,H,W,D) sampled or mean field used for warping
    warped_volumes: torch.Tensor      # (B,T,1,H,W,D) I_{t-1} o D_t
    psi: torch.Tensor | None = None   # (B,T,K,H,W,D) SegNet posterior
    theta: torch.Tensor | None = None  # (B,T,K,H,W,D) Psi_{t-1} o D_t
    qz: LatentGaussian | None = None
    pz: LatentGaussian | None = None
    recon: torch.Tensor | None = None  # (B,T,L,1,H,W,D) one reconstruction per latent sample
    hidden: list = field(default_factory=list)


def _stack_gaussians(items, cls):
    fields = [torch.stack([getattr(g, f) for g in items], dim=1) for f in cls.__dataclass_fields__]
    return cls(*fields)


class Framework(nn.Module):
    """RVAE (FeatNet/InferZ/PriorZ/FeatZ/DecNet/RecNet) + DeformNet + SegNet."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.featnet = FeatNet(1, cfg.feat_channels)
        fc = self.featnet.out_channels
        self.infer_z = InferZ(fc, cfg.hidden_channels, cfg.latent_channels, cfg.z_mid)
        self.prior_z = PriorZ(cfg.hidden_channels, cfg.latent_channels, cfg.z_mid)
        self.featz = FeatZ(cfg.latent_channels, cfg.phi_channels)
        self.decnet = DecNet(cfg.phi_channels, cfg.dec_channels)
        self.recnet = RecNet(cfg.latent_channels + fc, cfg.hidden_channels)
        self.deformnet = DeformNet(cfg.deform_widths, cfg.phi_channels)
        self.segnet = SegNet(cfg.seg_widths, cfg.num_classes)
        init_weights(self)
        self.deformnet.reset_heads()

    def block_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def set_trainable(self, predicate) -> None:
        """``predicate(param_name) -> bool`` decides requires_grad for each parameter."""
        for name, p in self.named_parameters():
            p.requires_grad_(bool(predicate(name)))

    def frozen_flags(self) -> dict[str, bool]:
        return {name: not p.requires_grad for name, p in self.named_parameters()}

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent grid -> reconstructed volume (FeatZ then DecNet)."""
        return self.decnet(self.featz(z))

    def segment(self, volumes: torch.Tensor) -> torch.Tensor:
        """SegNet over (B,T,1,H,W,D) -> (B,T,K,H,W,D)."""
        B, T = volumes.shape[:2]
        return self.segnet(volumes.flatten(0, 1)).unflatten(0, (B, T))

    def run(
        self,
        volumes: torch.Tensor,
        sample: bool = True,
        generator: torch.Generator | None = None,
        use_rvae: bool = True,
        use_segnet: bool = True,
        latent_samples: int = 1,
    ) -> SequenceOutputs:
        """Unroll the model over a (B,T,1,H,W,D) sequence with I_{-1} = I_{T-1}."""
        if volumes.dim() != 6 or volumes.shape[2] != 1:
            raise ValueError(f"expected (B,T,1,H,W,D) volumes, got {tuple(volumes.shape)}")
        check_latent_divisible(volumes.shape)
        B, T = volumes.shape[:2]
        psi = self.segment(volumes) if use_segnet else None

        if use_rvae:
            feats = self.featnet(volumes.flatten(0, 1)).unflatten(0, (B, T))
            state = self.recnet.initial_state(feats[:, 0])
        else:
            H, W, D = volumes.shape[3:]
            phi_zero = volumes.new_zeros((B, self.cfg.phi_channels, H // LATENT_FACTOR, W // LATENT_FACTOR, D))

        dvfs, used, warped_vols, thetas, qzs, pzs, recons, hidden = [], [], [], [], [], [], [], []
        for t in range(T):
            prev = (t - 1) % T
            image, previous = volumes[:, t], volumes[:, prev]
            if use_rvae:
                h = state[0]
                qz = self.infer_z(feats[:, t], h)
                pz = self.prior_z(h)
                if sample:
                    zs = [sample_latent(qz, generator) for _ in range(latent_samples)]
                else:
                    zs = [qz.mu]
                phis = [self.featz(z) for z in zs]
                recons.append(torch.stack([self.decnet(p) for p in phis], dim=1))
                phi = phis[0]
                state = self.recnet(state, zs[0], feats[:, t])
                qzs.append(qz)
                pzs.append(pz)
                hidden.append(state)
            else:
                phi = phi_zero
            q = self.deformnet(image, previous, phi)
            d = q.sample(generator) if sample else q.mu
            dvfs.append(q)
            used.append(d)
            warped_vols.append(warp(previous, d))
            if psi is not None:
                thetas.append(warp(psi[:, prev], d))

        return SequenceOutputs(
            dvf=_stack_gaussians(dvfs, DvfGaussian),
            dvf_used=torch.stack(used, dim=1),
            warped_volumes=torch.stack(warped_vols, dim=1),
            psi=psi,
            theta=torch.stack(thetas, dim=1) if thetas else None,
            qz=_stack_gaussians(qzs, LatentGaussian) if qzs else None,
            pz=_stack_gaussians(pzs, LatentGaussian) if pzs else None,
            recon=torch.stack(recons, dim=1) if recons else None,
            hidden=hidden,
        )
