"""Autograd against central finite differences in float64 (1e-3 relative)."""
import pytest
import torch

from helpers import assemble, random_outputs
from oracles import directional_check, rel_err
from shapereg.loss import LossWeights, reconstruction_loss, sequence_loss
from shapereg.nets import BLOCKS, Framework, ModelConfig
from shapereg.prob import (
    DvfGaussian,
    LatentGaussian,
    entropy_map,
    kl_dvf,
    kl_latent,
    semi_shape_loss,
    supervised_shape_loss,
)
from shapereg.warp import smoothness_loss, warp

TOL = 1e-3
TINY = ModelConfig(feat_channels=(2, 2, 4, 4), hidden_channels=4, z_mid=4, phi_channels=4,
                   dec_channels=(4, 4, 2, 2), deform_widths=(2, 2, 4, 4, 4), seg_widths=(2, 2, 4, 4))
SHAPE = (5, 4, 3)


def leaf(*shape, seed, positive=False, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    t = scale * torch.randn(*shape, generator=g, dtype=torch.float64)
    if positive:
        t = t.exp()
    return t.requires_grad_(True)


def check(fn, tensors, seeds=range(3), steps=(1e-6, 1e-7)):
    # LeakyReLU and trilinear cells are piecewise smooth: a step that crosses a
    # kink corrupts the difference, a genuine gradient error shows at every step
    for s in seeds:
        trials = [directional_check(fn, tensors, eps=e, seed=s) for e in steps]
        assert min(rel_err(a, fd) for a, fd in trials) < TOL, (s, trials)


class TestKernels:
    @pytest.mark.parametrize("printed", [False, True])
    def test_kl_dvf(self, printed):
        mu, s2, v = leaf(2, 3, *SHAPE, seed=0), leaf(2, 1, *SHAPE, seed=1, positive=True), leaf(2, 3, *SHAPE, seed=2)
        check(lambda: kl_dvf(DvfGaussian(mu, s2, v), printed_variant=printed), [mu, s2, v])

    def test_kl_latent(self):
        t = [leaf(2, 1, 2, 2, 3, seed=i, positive=i % 2 == 1) for i in range(4)]
        check(lambda: kl_latent(LatentGaussian(t[0], t[1]), LatentGaussian(t[2], t[3])), t)

    def test_entropy(self):
        s2, v = leaf(1, 1, *SHAPE, seed=1, positive=True), leaf(1, 3, *SHAPE, seed=2)
        mu = torch.zeros(1, 3, *SHAPE, dtype=torch.float64)
        check(lambda: entropy_map(DvfGaussian(mu, s2, v)).sum(), [s2, v])

    def test_supervised(self):
        logits = leaf(2, 4, *SHAPE, seed=3)
        gt = torch.randint(0, 4, (2, *SHAPE), generator=torch.Generator().manual_seed(0))
        check(lambda: supervised_shape_loss(gt, logits.softmax(1)), [logits])

    def test_semi(self):
        a, b = leaf(2, 4, *SHAPE, seed=4), leaf(2, 4, *SHAPE, seed=5)
        check(lambda: semi_shape_loss(a.softmax(1), b.softmax(1)), [a, b])

    def test_reconstruction(self):
        v, r = leaf(2, 1, *SHAPE, seed=6), leaf(2, 2, 1, *SHAPE, seed=7)
        check(lambda: reconstruction_loss(v, r), [v, r])

    def test_smoothness(self):
        d = leaf(3, 3, *SHAPE, seed=8)
        check(lambda: smoothness_loss(d), [d])

    def test_warp_wrt_dvf_and_input(self):
        img, d = leaf(1, 4, *SHAPE, seed=9), leaf(1, 3, *SHAPE, seed=10, scale=0.7)
        w = torch.randn(1, 4, *SHAPE, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        check(lambda: (warp(img, d) * w).sum(), [img, d])


class TestSequenceLoss:
    @pytest.mark.parametrize("rvae,guided", [(True, True), (True, False), (False, True), (False, False)])
    def test_total_wrt_outputs(self, rvae, guided):
        _, labels, vols, leaves = random_outputs(11, B=1, T=3, shape=SHAPE, requires_grad=True)
        mu, s2, v, qm, qs, pm, ps, logits, recon = leaves
        w = LossWeights(0.3, 0.2, 0.3, 0.5)

        def total():
            out = assemble(DvfGaussian(mu, s2, v), LatentGaussian(qm, qs), LatentGaussian(pm, ps), logits, vols, recon)
            return sequence_loss(labels, 0, 2, out, w, volumes=vols, use_rvae=rvae, use_segnet_guidance=guided).total

        used = [mu, s2, v, logits] + ([qm, qs, pm, ps, recon] if rvae else [])
        check(total, used)

    def test_each_term_wrt_dvf(self):
        _, labels, vols, leaves = random_outputs(12, B=1, T=3, shape=SHAPE, requires_grad=True)
        mu, s2, v, qm, qs, pm, ps, logits, recon = leaves
        for term in ("shape_sup", "shape_semi", "kl_d", "smooth"):
            def fn():
                out = assemble(DvfGaussian(mu, s2, v), LatentGaussian(qm, qs), LatentGaussian(pm, ps),
                               logits, vols, recon)
                return getattr(sequence_loss(labels, 0, 2, out, LossWeights(), volumes=vols), term)

            check(fn, [mu, s2, v, logits] if term != "smooth" else [mu], seeds=[0])


def make_setup():
    torch.manual_seed(0)
    model = Framework(TINY).double()
    # zero biases and the zero initial state put LeakyReLU exactly on its kink;
    # jitter to a generic point so central differences see one slope
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    g = torch.Generator().manual_seed(1)
    vols = torch.rand(1, 3, 1, 16, 16, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 4, (1, 3, 16, 16, 4), generator=g)
    return model, vols, labels


@pytest.fixture(scope="module")
def setup():
    return make_setup()


class TestNetworkWeights:
    @pytest.mark.parametrize("rvae,guided", [(True, True), (False, False)])
    def test_total_wrt_all_weights(self, setup, rvae, guided):
        model, vols, labels = setup

        def total():
            out = model.run(vols, sample=True, generator=torch.Generator().manual_seed(5),
                            use_rvae=rvae, use_segnet=guided)
            return sequence_loss(labels, 0, 1, out, LossWeights(0.1, 0.1, 0.3, 0.1), volumes=vols,
                                 use_rvae=rvae, use_segnet_guidance=guided).total

        params = [p for p in model.parameters()]
        for p in params:
            p.grad = None
        check(total, params, seeds=[0, 1])

    @pytest.mark.parametrize("block", BLOCKS)
    def test_per_block(self, setup, block):
        model, vols, labels = setup
        params = [p for n, p in model.named_parameters() if model.block_of(n) == block]

        def total():
            out = model.run(vols, sample=True, generator=torch.Generator().manual_seed(5))
            return sequence_loss(labels, 0, 1, out, LossWeights(0.1, 0.1, 0.3, 0.1), volumes=vols).total

        for p in model.parameters():
            p.grad = None
        check(total, params, seeds=[0])
