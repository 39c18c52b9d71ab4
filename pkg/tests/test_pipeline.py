import dataclasses

import numpy as np
import pytest
import torch

from shapereg.loss import LossWeights
from shapereg.nets import ModelConfig
from shapereg.phantom import PhantomSpec
from shapereg.pipeline import (
    SequenceSet,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    batches,
    build_model,
    compare,
    compose_from_ed,
    evaluate,
    load_model,
    make_phantoms,
    pretrain_segnet,
    rollout,
    split_indices,
    train_full,
)
from shapereg.storage import FormatError

TINY = ModelConfig(feat_channels=(2, 2, 4, 4), hidden_channels=4, z_mid=4, phi_channels=4,
                   dec_channels=(4, 4, 2, 2), deform_widths=(2, 2, 4, 4, 4), seg_widths=(2, 2, 4, 4))


@pytest.fixture(scope="module")
def data():
    return SequenceSet.from_samples(make_phantoms(PhantomSpec(), 4, target_hw=16, target_depth=8))


def cfg(phase, **kw):
    base = dict(phase=phase, batch_size=2, epochs=1, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


class TestData:
    def test_split(self):
        s = split_indices(64)
        assert [len(s[k]) for k in ("train", "val", "test")] == [51, 6, 7]
        assert sorted(s["train"] + s["val"] + s["test"]) == list(range(64))
        s10 = split_indices(10)
        assert [len(s10[k]) for k in ("train", "val", "test")] == [8, 1, 1]

    def test_batches_cover_epoch(self):
        b = batches(3, 0, 7, 2)
        assert sorted(sum(b, [])) == list(range(7)) and [len(x) for x in b] == [2, 2, 2, 1]
        assert b == batches(3, 0, 7, 2) and b != batches(3, 1, 7, 2)

    def test_sequence_set(self, data):
        assert data.volumes.shape == (4, 6, 1, 16, 16, 8) and data.labels.dtype == torch.int64
        sub = data.subset([1, 3])
        assert len(sub) == 2 and sub.ids == [data.ids[1], data.ids[3]]
        with pytest.raises(ValueError):
            data.subset([])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(phase=3)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)


class TestFreezing:
    def test_phase1_touches_only_segnet(self, data):
        model = build_model(0, TINY)
        before = snapshot(model)
        Trainer(model, data, cfg(1)).fit()
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n]) != n.startswith("segnet."), n

    @pytest.mark.parametrize("rvae,guided", [(True, True), (True, False), (False, True)])
    def test_phase2_frozen_segnet(self, data, rvae, guided):
        model = build_model(0, TINY)
        before = snapshot(model)
        Trainer(model, data, cfg(2, use_rvae=rvae, use_segnet_guidance=guided)).fit()
        tails = tuple(f"segnet.{layer}." for layer in model.segnet.last_layers())
        for n, p in model.named_parameters():
            changed = not torch.equal(p, before[n])
            if n.startswith("segnet."):
                assert changed == (guided and n.startswith(tails)), n
            elif n.startswith("deformnet."):
                assert changed, n
            else:
                assert changed == rvae, n


class TestTraining:
    def test_phase1_loss_decreases(self, data):
        model = build_model(0, TINY)
        trainer = Trainer(model, data, cfg(1, learning_rate=1e-4))
        losses = [trainer.train_step([0, 1])["total"] for _ in range(20)]
        assert losses[-1] < losses[0]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_phase2_overfits_one_sequence(self, data):
        model = build_model(0, TINY)
        trainer = Trainer(model, data, cfg(2, sample_dvf=False, learning_rate=1e-3))
        losses = [trainer.train_step([0])["total"] for _ in range(50)]
        assert losses[-1] < 0.9 * losses[0]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_divergence(self, data):
        model = build_model(0, TINY)
        with torch.no_grad():
            model.segnet.head.bias.fill_(float("nan"))
        trainer = Trainer(model, data, cfg(1))
        with pytest.raises(TrainingDiverged) as err:
            trainer.train_step([2, 3])
        assert err.value.batch == [data.ids[2], data.ids[3]]

    def test_log_columns(self, data, tmp_path):
        Trainer(build_model(0, TINY), data, cfg(2), tmp_path, val=data.subset([0])).fit()
        header = (tmp_path / "train_log.csv").read_text().splitlines()[0].split(",")
        assert header == ["step", "epoch", "total", "elbo", "shape_sup", "shape_semi", "kl_d", "kl_z", "rec",
                          "smooth", "wall_time"]
        assert (tmp_path / "val_log.csv").exists()
        assert (tmp_path / "epoch_0001" / "manifest.json").exists()

    @pytest.mark.parametrize("phase", [1, 2])
    def test_resume_matches_uninterrupted(self, data, tmp_path, phase):
        full = Trainer(build_model(0, TINY), data, cfg(phase, epochs=2), tmp_path / "a").fit()
        Trainer(build_model(0, TINY), data, cfg(phase, epochs=1), tmp_path / "b").fit()
        resumed = Trainer(build_model(7, TINY), data, cfg(phase, epochs=2), tmp_path / "c")
        resumed.resume(tmp_path / "b" / "epoch_0001")
        result = resumed.fit()
        assert result.step == full.step == 4
        for a, b in zip(full.history[2:], result.history):
            assert a["step"] == b["step"]
            assert b["total"] == pytest.approx(a["total"], rel=1e-6, abs=1e-6)
        for p, q in zip(full.model.parameters(), result.model.parameters()):
            assert torch.allclose(p, q, atol=1e-6)

    def test_incompatible_resume(self, data, tmp_path):
        Trainer(build_model(0, TINY), data, cfg(1), tmp_path / "p1").fit()
        trainer = Trainer(build_model(0, TINY), data, cfg(2))
        with pytest.raises(FormatError, match="phase"):
            trainer.resume(tmp_path / "p1" / "epoch_0001")
        other = dataclasses.replace(TINY, seg_widths=(2, 2, 4, 8))
        with pytest.raises(FormatError):
            train_full(data, tmp_path / "p1" / "epoch_0001", cfg(2), model=build_model(0, other))

    def test_train_full_requires_phase1_checkpoint(self, data, tmp_path):
        Trainer(build_model(0, TINY), data, cfg(2), tmp_path / "p2").fit()
        with pytest.raises(FormatError, match="phase 1"):
            train_full(data, tmp_path / "p2" / "epoch_0001", cfg(2), model=build_model(0, TINY))

    def test_two_phase_and_reload(self, data, tmp_path):
        p1 = pretrain_segnet(data, cfg(1), tmp_path / "p1", model_cfg=TINY)
        p2 = train_full(data, p1.checkpoints[-1], cfg(2), tmp_path / "p2", model_cfg=TINY)
        model, extra = load_model(p2.checkpoints[-1])
        assert extra["phase"] == 2 and extra["use_rvae"] and extra["segnet_trainable_layers"]
        for p, q in zip(model.parameters(), p2.model.parameters()):
            assert torch.equal(p, q)
        with pytest.raises(ValueError):
            pretrain_segnet(data, cfg(2))

    def test_weights_flow_through(self, data):
        heavy = cfg(2, weights=LossWeights(rho=100.0))
        model = build_model(0, TINY)
        a = Trainer(model, data, cfg(2)).loss([0])[1]
        b = Trainer(model, data, heavy).loss([0])[1]
        assert b["smooth"] == pytest.approx(a["smooth"], rel=1e-5)
        assert b["total"] - b["elbo"] == pytest.approx(100.0 * b["smooth"], rel=1e-5)


class TestInference:
    def test_compose_identity(self, data):
        labels = data.labels[0, 0]
        comp = compose_from_ed(labels, torch.zeros(6, 3, 16, 16, 8), 0)
        assert (comp.argmax(1) == labels).all()

    def test_compose_wraps_from_ed(self):
        dvfs = torch.zeros(4, 3, 4, 4, 2)
        dvfs[0] = 1.0  # only the step into frame 0 moves
        labels = torch.zeros(4, 4, 2, dtype=torch.long)
        labels[1:3, 1:3] = 1
        comp = compose_from_ed(labels, dvfs, ed_index=1, num_classes=2)
        assert (comp[1].argmax(0) == labels).all() and (comp[2].argmax(0) == labels).all()
        assert not (comp[0].argmax(0) == labels).all()

    def test_rollout_deterministic(self, data):
        model = build_model(0, TINY)
        a = rollout(data.volumes[0], model, data.labels[0, 0])
        b = rollout(data.volumes[0], model, data.labels[0, 0])
        assert torch.equal(a.dvf_mean, b.dvf_mean) and torch.equal(a.entropy, b.entropy)
        assert (a.composed[0].argmax(0) == data.labels[0, 0]).all()
        assert a.frames == 6 and len(a.hidden) == 6 and a.entropy.shape == (6, 1, 16, 16, 8)

    def test_identity_rollout(self, data):
        r = rollout(data.volumes[1], None, data.labels[1, 0])
        assert not r.dvf_mean.any() and r.entropy is None
        assert all((r.composed[t].argmax(0) == data.labels[1, 0]).all() for t in range(6))

    def test_bad_ed_index(self, data):
        with pytest.raises(ValueError):
            rollout(data.volumes[0], None, ed_index=6)

    def test_evaluate_and_compare(self, data):
        ident = evaluate(None, data, "identity")
        model = evaluate(build_model(0, TINY), data, "untrained")
        es = ident.scores("ES", "LV")
        assert es.shape == (4,) and (es < 1).all()
        assert (ident.scores("ED", "LV") == 1).all()
        table = ident.table()
        assert {r["region"] for r in table} >= {"LV", "LVmyo", "RV"}
        res = compare(model, ident)
        assert set(res) == {"LV", "LVmyo", "RV"}
        assert all(0 <= r.p <= 1 or r.degenerate for r in res.values())
