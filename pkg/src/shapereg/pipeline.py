"""Two-phase training, inference rollout and evaluation over phantom sequences."""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import storage
from .loss import REPORT_FIELDS, LossWeights, sequence_loss
from .metrics import TTestResult, hard_labels, paired_t_test, region_metrics, uncertainty_in_region
from .nets import Framework, ModelConfig
from .phantom import CLASS_NAMES, NUM_CLASSES, PhantomSample, PhantomSpec, generate, jittered_spec, preprocess
from .prob import DvfGaussian, entropy_map, one_hot, supervised_shape_loss
from .warp import count_njd, jacobian, warp

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch") + REPORT_FIELDS + ("wall_time",)
VAL_FIELDS = ("epoch", "step") + tuple(f"dsc_{n}" for n in CLASS_NAMES[1:]) + ("dsc_mean",)
RVAE_BLOCKS = ("featnet", "infer_z", "prior_z", "featz", "decnet", "recnet")


def deterministic_mode() -> bool:
    return os.environ.get("CMK_DETERMINISTIC", "") == "1"


def configure_torch(threads: int | None = None) -> None:
    """Single-threaded deterministic kernels when CMK_DETERMINISTIC=1."""
    if deterministic_mode():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(threads)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch: list[int], report: dict):
        self.step, self.batch, self.report = step, batch, report
        super().__init__(f"non-finite loss at step {step}; batch sample indices {batch}; terms {report}")


@dataclass
class TrainConfig:
    phase: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    use_segnet_guidance: bool = True
    use_rvae: bool = True
    sample_dvf: bool = True          # reparameterised DVF draws during training
    latent_samples: int = 1
    checkpoint_every: int = 1        # epochs
    max_steps: int | None = None
    printed_kl: bool = False

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {self.phase}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.latent_samples < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, latent_samples and checkpoint_every must be >= 1, epochs >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


# ---------------------------------------------------------------- data

@dataclass
class SequenceSet:
    """Stacked preprocessed sequences: volumes (N,T,1,H,W,D), labels (N,T,H,W,D)."""

    volumes: torch.Tensor
    labels: torch.Tensor
    ed: torch.Tensor
    es: torch.Tensor
    spacing: np.ndarray
    ids: list[int]
    true_dvfs: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.volumes.shape[0]

    @classmethod
    def from_samples(cls, samples: list[PhantomSample], ids=None) -> "SequenceSet":
        if not samples:
            raise ValueError("empty dataset")
        shapes = {s.volumes.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"sequences differ in shape: {sorted(shapes)}")
        return cls(
            volumes=torch.from_numpy(np.stack([s.volumes for s in samples])),
            labels=torch.from_numpy(np.stack([s.masks for s in samples]).astype(np.int64)),
            ed=torch.tensor([s.ed_index for s in samples]),
            es=torch.tensor([s.es_index for s in samples]),
            spacing=np.stack([np.asarray(s.spacing, dtype=np.float64) for s in samples]),
            ids=list(ids) if ids is not None else list(range(len(samples))),
            true_dvfs=torch.from_numpy(np.stack([s.true_dvfs for s in samples])),
        )

    def subset(self, index) -> "SequenceSet":
        index = list(index)
        if not index:
            raise ValueError("empty dataset")
        t = torch.as_tensor(index)
        return SequenceSet(
            self.volumes[t], self.labels[t], self.ed[t], self.es[t], self.spacing[index],
            [self.ids[i] for i in index], None if self.true_dvfs is None else self.true_dvfs[t],
        )


def split_indices(n: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Contiguous train/val/test split; train and val take floor shares, test the remainder."""
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    return {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }


def make_phantoms(base: PhantomSpec, count: int, margin: int = 3, target_hw: int = 32, target_depth: int = 8) -> list[PhantomSample]:
    """``count`` jittered, preprocessed phantom sequences (deterministic in base.seed)."""
    return [
        preprocess(generate(jittered_spec(base, i)), margin=margin, target_hw=target_hw, target_depth=target_depth)
        for i in range(count)
    ]


# ---------------------------------------------------------------- training

def build_model(seed: int, model_cfg: ModelConfig | None = None) -> Framework:
    torch.manual_seed(seed)
    return Framework(model_cfg)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(seed: int, epoch: int, n: int, batch_size: int) -> list[list[int]]:
    order = epoch_order(seed, epoch, n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def segnet_predicate(model: Framework, cfg: TrainConfig) -> Callable[[str], bool]:
    """Which parameters train in the given phase and ablation."""
    if cfg.phase == 1:
        return lambda name: name.startswith("segnet.")
    tails = tuple(f"segnet.{layer}." for layer in model.segnet.last_layers())

    def predicate(name: str) -> bool:
        block = name.split(".", 1)[0]
        if block == "segnet":
            return cfg.use_segnet_guidance and name.startswith(tails)
        if block in RVAE_BLOCKS:
            return cfg.use_rvae
        return True

    return predicate


def phase1_loss(model: Framework, data: SequenceSet, idx: list[int]) -> torch.Tensor:
    """Cross-entropy of SegNet on the ED and ES frames of the chosen sequences."""
    t = torch.as_tensor(idx)
    frames = torch.cat([data.ed[t], data.es[t]])
    seq = torch.cat([t, t])
    x = data.volumes[seq, frames]
    y = data.labels[seq, frames]
    probs = model.segnet(x)
    return supervised_shape_loss(y, probs, per_sample=True).mean()


def phase1_report(loss: torch.Tensor) -> dict:
    zero = 0.0
    return {"total": float(loss.detach()), "elbo": float(loss.detach()), "shape_sup": float(loss.detach()), "shape_semi": zero,
            "kl_d": zero, "kl_z": None, "rec": None, "smooth": zero}


def phase2_report(model: Framework, data: SequenceSet, idx: list[int], cfg: TrainConfig, generator):
    t = torch.as_tensor(idx)
    vols = data.volumes[t]
    out = model.run(
        vols, sample=cfg.sample_dvf, generator=generator, use_rvae=cfg.use_rvae,
        use_segnet=cfg.use_segnet_guidance, latent_samples=cfg.latent_samples,
    )
    return sequence_loss(
        data.labels[t], data.ed[t], data.es[t], out, cfg.weights, volumes=vols,
        use_rvae=cfg.use_rvae, use_segnet_guidance=cfg.use_segnet_guidance, printed_kl=cfg.printed_kl,
    )


@dataclass
class TrainResult:
    model: Framework
    step: int
    epoch: int
    history: list[dict]
    validation: list[dict]
    checkpoints: list[Path]


class Trainer:
    """Owns model, optimizer and RNG for one phase; batch order is a pure function of (seed, epoch)."""

    def __init__(self, model: Framework, data: SequenceSet, cfg: TrainConfig, out_dir=None,
                 val: SequenceSet | None = None, extra: dict | None = None):
        if len(data) == 0:
            raise ValueError("empty dataset")
        self.model, self.data, self.cfg, self.val = model, data, cfg, val
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.extra = extra or {}
        model.set_trainable(segnet_predicate(model, cfg))
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.validation: list[dict] = []
        self.checkpoints: list[Path] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data) / self.cfg.batch_size)

    def resume(self, checkpoint) -> None:
        manifest = storage.load_params(checkpoint, self.model)
        stored = manifest["extra"]
        if stored.get("phase") != self.cfg.phase:
            raise storage.FormatError(f"checkpoint is from phase {stored.get('phase')}, trainer is phase {self.cfg.phase}")
        storage.load_optimizer(checkpoint, self.model, self.optimizer)
        storage.load_generator(checkpoint, self.generator)
        self.step, self.epoch = int(stored["step"]), int(stored["epoch"])

    def loss(self, idx: list[int]):
        if self.cfg.phase == 1:
            loss = phase1_loss(self.model, self.data, idx)
            return loss, phase1_report(loss)
        report = phase2_report(self.model, self.data, idx, self.cfg, self.generator)
        return report.total, report.row()

    def train_step(self, idx: list[int]) -> dict:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        start = time.perf_counter()
        loss, row = self.loss(idx)
        if not torch.isfinite(loss):
            raise TrainingDiverged(self.step, [self.data.ids[i] for i in idx], row)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        wall = 0.0 if deterministic_mode() else time.perf_counter() - start
        row = {"step": self.step, "epoch": self.epoch, **row, "wall_time": wall}
        self.history.append(row)
        return row

    def checkpoint(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        extra = {
            "phase": self.cfg.phase, "step": self.step, "epoch": self.epoch,
            "segnet_trainable_layers": self.model.segnet.last_layers() if self.cfg.phase == 2 else "all",
            "model_config": _jsonable(self.model.cfg.__dict__),
            "use_rvae": self.cfg.use_rvae, "use_segnet_guidance": self.cfg.use_segnet_guidance,
            **self.extra,
        }
        path = storage.save_checkpoint(self.out_dir / name, self.model, self.optimizer, self.generator, extra)
        self.checkpoints.append(path)
        return path

    def validate(self) -> dict | None:
        if self.val is None:
            return None
        scores = segmentation_dsc(self.model, self.val)
        row = {"epoch": self.epoch, "step": self.step,
               **{f"dsc_{n}": float(v) for n, v in zip(CLASS_NAMES[1:], scores)},
               "dsc_mean": float(np.mean(scores))}
        self.validation.append(row)
        log.info("phase %d epoch %d validation DSC %s", self.cfg.phase, self.epoch, np.round(scores, 4).tolist())
        return row

    def fit(self) -> TrainResult:
        cfg = self.cfg
        log_path = None if self.out_dir is None else self.out_dir / "train_log.csv"
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        writer = storage.CsvLog(log_path, LOG_FIELDS, append=self.step > 0) if log_path else None
        val_writer = storage.CsvLog(self.out_dir / "val_log.csv", VAL_FIELDS, append=self.step > 0) \
            if (self.out_dir is not None and self.val is not None) else None
        try:
            while self.epoch < cfg.epochs:
                plan = batches(cfg.seed, self.epoch, len(self.data), cfg.batch_size)
                done_in_epoch = self.step - self.epoch * self.steps_per_epoch
                for idx in plan[done_in_epoch:]:
                    if cfg.max_steps is not None and self.step >= cfg.max_steps:
                        return self._result()
                    row = self.train_step(idx)
                    if writer:
                        writer.write(row)
                self.epoch += 1
                val_row = self.validate()
                if val_writer and val_row:
                    val_writer.write(val_row)
                if self.epoch % cfg.checkpoint_every == 0 or self.epoch == cfg.epochs:
                    self.checkpoint(f"epoch_{self.epoch:04d}")
        finally:
            if writer:
                writer.close()
            if val_writer:
                val_writer.close()
        return self._result()

    def _result(self) -> TrainResult:
        return TrainResult(self.model, self.step, self.epoch, self.history, self.validation, self.checkpoints)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


ABLATIONS = {1: (True, True), 2: (True, False), 3: (False, True), 4: (False, False)}  # (use_rvae, use_segnet_guidance)


def load_model(checkpoint) -> tuple[Framework, dict]:
    """Rebuild a Framework from a checkpoint; returns it with the stored run metadata."""
    manifest = storage.read_manifest(checkpoint)
    extra = manifest["extra"]
    stored = extra.get("model_config", {})
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()})
    model = Framework(cfg)
    storage.load_params(checkpoint, model, apply_frozen=True)
    model.eval()
    return model, extra


def pretrain_segnet(data: SequenceSet, cfg: TrainConfig, out_dir=None, val: SequenceSet | None = None,
                    model: Framework | None = None, model_cfg: ModelConfig | None = None, resume=None) -> TrainResult:
    """Phase 1: SegNet alone on ED/ES labels; everything else frozen."""
    if cfg.phase != 1:
        raise ValueError("pretrain_segnet needs a phase-1 config")
    if data is None or len(data) == 0:
        raise ValueError("empty dataset")
    model = model or build_model(cfg.seed, model_cfg)
    trainer = Trainer(model, data, cfg, out_dir, val)
    if resume is not None:
        trainer.resume(resume)
    return trainer.fit()


def train_full(data: SequenceSet, segnet_checkpoint, cfg: TrainConfig, out_dir=None,
               val: SequenceSet | None = None, model: Framework | None = None,
               model_cfg: ModelConfig | None = None, resume=None) -> TrainResult:
    """Phase 2: whole framework with SegNet frozen except its last three layers."""
    if cfg.phase != 2:
        raise ValueError("train_full needs a phase-2 config")
    if data is None or len(data) == 0:
        raise ValueError("empty dataset")
    model = model or build_model(cfg.seed, model_cfg)
    if segnet_checkpoint is not None:
        manifest = storage.load_params(segnet_checkpoint, model, prefix="segnet.")
        if manifest["extra"].get("phase") != 1:
            raise storage.FormatError("SegNet checkpoint must come from phase 1")
    trainer = Trainer(model, data, cfg, out_dir, val, extra={"segnet_checkpoint": str(segnet_checkpoint)})
    if resume is not None:
        trainer.resume(resume)
    return trainer.fit()


@torch.no_grad()
def segmentation_dsc(model: Framework, data: SequenceSet) -> np.ndarray:
    """Mean per-class DSC of SegNet over every frame of every sequence."""
    from .metrics import dsc

    model.eval()
    scores = []
    for n in range(len(data)):
        pred = model.segnet(data.volumes[n]).argmax(1)
        for t in range(pred.shape[0]):
            scores.append([dsc(pred[t] == k, data.labels[n, t] == k) for k in range(1, NUM_CLASSES)])
    return np.mean(scores, axis=0)


# ---------------------------------------------------------------- inference

@dataclass
class Rollout:
    """Per-frame inference outputs for one sequence (leading axis = time)."""

    dvf_mean: torch.Tensor                    # (T,3,H,W,D)
    dvf: DvfGaussian | None                   # (T,...) or None for the identity baseline
    entropy: torch.Tensor | None              # (T,1,H,W,D)
    warped_mask: torch.Tensor | None = None   # (T,K,H,W,D) Psi_{t-1} o D_t
    psi: torch.Tensor | None = None           # (T,K,H,W,D)
    hidden: list = field(default_factory=list)
    composed: torch.Tensor | None = None      # (T,K,H,W,D) ED labels carried through D
    ed_index: int = 0

    @property
    def frames(self) -> int:
        return self.dvf_mean.shape[0]


def compose_from_ed(ed_labels: torch.Tensor, dvf_means: torch.Tensor, ed_index: int = 0,
                    num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """Warp one-hot ED labels through successive D_t to every frame; ED itself is the zero-step result."""
    T = dvf_means.shape[0]
    current = one_hot(ed_labels.long()[None], num_classes).to(dvf_means.dtype)
    out = [None] * T
    out[ed_index] = current[0]
    for k in range(1, T):
        t = (ed_index + k) % T
        current = warp(current, dvf_means[t][None])
        out[t] = current[0]
    return torch.stack(out)


@torch.no_grad()
def rollout(volumes: torch.Tensor, model: Framework | None, ed_labels: torch.Tensor | None = None,
            ed_index: int = 0, use_rvae: bool = True, use_segnet: bool = True) -> Rollout:
    """Inference over one (T,1,H,W,D) sequence with posterior means.

    ``model=None`` gives the identity baseline (zero DVFs, no uncertainty).
    """
    if volumes.dim() != 5 or volumes.shape[1] != 1:
        raise ValueError(f"expected (T,1,H,W,D) volumes, got {tuple(volumes.shape)}")
    T = volumes.shape[0]
    if not 0 <= ed_index < T:
        raise ValueError(f"ED index {ed_index} outside [0, {T})")
    if model is None:
        zero = volumes.new_zeros((T, 3) + tuple(volumes.shape[2:]))
        composed = None if ed_labels is None else compose_from_ed(ed_labels, zero, ed_index)
        return Rollout(dvf_mean=zero, dvf=None, entropy=None, composed=composed, ed_index=ed_index)

    model.eval()
    out = model.run(volumes[None], sample=False, use_rvae=use_rvae, use_segnet=use_segnet)
    q = DvfGaussian(*[getattr(out.dvf, f)[0] for f in DvfGaussian.__dataclass_fields__])
    mean = out.dvf_used[0]
    composed = None if ed_labels is None else compose_from_ed(ed_labels, mean, ed_index)
    return Rollout(
        dvf_mean=mean,
        dvf=q,
        entropy=entropy_map(q),
        warped_mask=None if out.theta is None else out.theta[0],
        psi=None if out.psi is None else out.psi[0],
        hidden=[tuple(s[0] for s in state) for state in out.hidden],
        composed=composed,
        ed_index=ed_index,
    )


# ---------------------------------------------------------------- evaluation

EVAL_FIELDS = ("config", "sample", "phase", "region", "dsc", "jac", "hd95", "msd", "njd", "empty")
TABLE_FIELDS = ("config", "region", "n", "dsc_mean", "dsc_std", "jac_mean", "jac_std",
                "hd95_mean", "hd95_std", "msd_mean", "msd_std", "njd_mean", "njd_std")
UNCERTAINTY_FIELDS = ("config", "sample", "phase", "mean", "median", "q1", "q3", "voxels")


@dataclass
class Evaluation:
    config: str
    rows: list[dict]            # per sample x phase x region
    uncertainty: list[dict]     # per sample x phase
    njd: dict[int, int]

    def scores(self, phase: str, region: str, metric: str = "dsc") -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["phase"] == phase and r["region"] == region])

    def table(self) -> list[dict]:
        return summary_table(self.config, self.rows)


def evaluate(model: Framework | None, data: SequenceSet, config: str, use_rvae: bool = True,
             use_segnet: bool = True) -> Evaluation:
    """Composed-mask metrics at ED/ES, NJD over all frames and cardiac-region entropy per sequence."""
    rows, unc, njd = [], [], {}
    for n in range(len(data)):
        sid = data.ids[n]
        ed, es = int(data.ed[n]), int(data.es[n])
        labels = data.labels[n]
        r = rollout(data.volumes[n], model, labels[ed], ed, use_rvae=use_rvae, use_segnet=use_segnet)
        njd[sid] = count_njd(jacobian(r.dvf_mean))
        pred = hard_labels(r.composed)
        for phase, t in (("ED", ed), ("ES", es)):
            metrics = region_metrics(pred[t], labels[t].numpy(), NUM_CLASSES, data.spacing[n])
            for k, m in metrics.items():
                rows.append({"config": config, "sample": sid, "phase": phase, "region": CLASS_NAMES[k],
                             "dsc": m.dsc, "jac": m.jac, "hd95": m.hd95, "msd": m.msd,
                             "njd": njd[sid], "empty": int(m.empty)})
            if r.entropy is not None:
                summary = uncertainty_in_region(r.entropy[t, 0], labels[t] > 0)
                unc.append({"config": config, "sample": sid, "phase": phase,
                            **{k: summary[k] for k in ("mean", "median", "q1", "q3")},
                            "voxels": int(summary["values"].size)})
    return Evaluation(config, rows, unc, njd)


def summary_table(config: str, rows: list[dict]) -> list[dict]:
    """One row per (config, region): mean and std pooled over samples and the ED/ES phases."""
    out = []
    for region in CLASS_NAMES[1:]:
        sel = [r for r in rows if r["region"] == region]
        if not sel:
            continue
        row = {"config": config, "region": region, "n": len(sel)}
        for metric in ("dsc", "jac", "hd95", "msd", "njd"):
            v = np.array([r[metric] for r in sel], dtype=np.float64)
            v = v[np.isfinite(v)]
            row[f"{metric}_mean"] = float(v.mean()) if v.size else float("nan")
            row[f"{metric}_std"] = float(v.std()) if v.size else float("nan")
        out.append(row)
    return out


def compare(a: Evaluation, b: Evaluation, phase: str = "ES", metric: str = "dsc") -> dict[str, object]:
    """Paired t-test of ``a`` against ``b`` per region on matched samples (degenerate below two pairs)."""
    out = {}
    for region in CLASS_NAMES[1:]:
        x, y = a.scores(phase, region, metric), b.scores(phase, region, metric)
        if x.size < 2:
            out[region] = TTestResult(float("nan"), max(x.size - 1, 0), float("nan"), degenerate=True)
        else:
            out[region] = paired_t_test(x, y)
    return out
