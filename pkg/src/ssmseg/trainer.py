"""Joint semi-supervised training of the two backbones.

Every step draws a labelled half-batch and an unlabelled half-batch,
runs both networks on the union, and minimizes the unweighted sum of
five terms: per-network supervised Dice+CE on the labelled half,
per-network cross pseudo-supervision on the unlabelled half, and the
contrastive consistency term between the two networks' projected
features over the full batch (labelled data participates in the
unsupervised terms as if unlabelled).

Validation runs at a fixed cadence and the best checkpoint (selected on
the first network's mean validation Dice) is the retained artifact; the
second network's checkpoint is saved alongside it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import losses, metrics
from .data import Sample, SplitManifest, augment, load_dataset, resize_pair, split
from .losses import LossBreakdown
from .nets import NetworkSpec, build_network, save_checkpoint

LOG_COLUMNS = ("iteration", "sup1", "sup2", "semi1", "semi2", "contra", "total",
               "val_dice_f1", "val_dice_f2")


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 16
    labelled_batch: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    validate_every: int = 200
    seed: int = 1337
    deterministic: bool = True
    use_semi: bool = True
    use_contra: bool = True
    projector_grid: int = 14
    projector_channels: int = 16
    network1: NetworkSpec = field(default_factory=lambda: NetworkSpec(variant="mamba-unet"))
    network2: NetworkSpec = field(default_factory=lambda: NetworkSpec(variant="cnn-unet"))
    network1_seed: int | None = None
    network2_seed: int | None = None

    def __post_init__(self):
        if isinstance(self.network1, dict):
            self.network1 = NetworkSpec.from_dict(self.network1)
        if isinstance(self.network2, dict):
            self.network2 = NetworkSpec.from_dict(self.network2)
        for name in ("iterations", "batch_size", "labelled_batch", "validate_every"):
            if getattr(self, name) < 0 or (name != "iterations" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 1 <= self.labelled_batch < self.batch_size:
            raise ValueError("labelled_batch must leave room for unlabelled samples")
        if self.network1.input_size != self.network2.input_size:
            raise ValueError("both networks must share one input size")
        if self.network1.classes != self.network2.classes:
            raise ValueError("both networks must share the class count")
        if self.projector_grid > self.network1.input_size:
            raise ValueError("projector grid exceeds the input size")

    @property
    def unlabelled_batch(self) -> int:
        return self.batch_size - self.labelled_batch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network1"] = self.network1.to_dict()
        d["network2"] = self.network2.to_dict()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CheckpointRecord:
    iteration: int
    val_dice_f1: float
    val_dice_f2: float
    ckpt_f1: str | None
    ckpt_f2: str | None
    config_hash: str

    def to_file(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def build_optimizer(network: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """Plain SGD with classical momentum, constant learning rate."""
    return torch.optim.SGD(network.parameters(), lr=config.learning_rate,
                           momentum=config.momentum,
                           weight_decay=config.weight_decay, nesterov=False)


@dataclass
class TrainBatch:
    images_labelled: torch.Tensor     # (nl, 1, S, S)
    labels: torch.Tensor              # (nl, S, S)
    images_unlabelled: torch.Tensor   # (nu, 1, S, S)

    @property
    def images_all(self) -> torch.Tensor:
        return torch.cat([self.images_labelled, self.images_unlabelled])


class _Stream:
    """Cycles a sample list with a fresh shuffle each epoch."""

    def __init__(self, samples, seed, tag):
        if not samples:
            raise ValueError("empty sample stream")
        self.samples = samples
        self.seed = seed
        self.tag = tag
        self.epoch = -1
        self.order = []
        self.pos = 0

    def _reshuffle(self):
        self.epoch += 1
        rng = np.random.default_rng([self.seed, self.tag, self.epoch])
        self.order = list(rng.permutation(len(self.samples)))
        self.pos = 0

    def take(self, n):
        out = []
        while len(out) < n:
            if self.pos >= len(self.order):
                self._reshuffle()
            out.append(self.samples[self.order[self.pos]])
            self.pos += 1
        return out


class BatchComposer:
    """Deterministic labelled/unlabelled batch assembly with augmentation."""

    def __init__(self, labelled, unlabelled, config: TrainConfig):
        if not labelled:
            raise ValueError("labelled set must not be empty")
        size = config.network1.input_size
        self.size = size
        self.config = config
        self.labelled = [self._prep(s) for s in labelled]
        self.unlabelled = [self._prep(s) for s in unlabelled]
        self.lab_stream = _Stream(self.labelled, config.seed, 1)
        self.unlab_stream = _Stream(self.unlabelled, config.seed, 2) if unlabelled else None
        self.step = 0

    def _prep(self, s: Sample) -> Sample:
        img, mask = resize_pair(s.image, s.mask, target=self.size)
        return Sample(np.ascontiguousarray(img, dtype=np.float32),
                      None if mask is None else np.ascontiguousarray(mask),
                      s.case_id, s.slice_index)

    def next_batch(self) -> TrainBatch:
        cfg = self.config
        lab = self.lab_stream.take(cfg.labelled_batch)
        if self.unlab_stream is not None:
            unlab = self.unlab_stream.take(cfg.unlabelled_batch)
        else:
            unlab = self.lab_stream.take(cfg.unlabelled_batch)
        slot = 0
        out_lab, out_unlab = [], []
        for source, sink in ((lab, out_lab), (unlab, out_unlab)):
            for s in source:
                rng = np.random.default_rng([cfg.seed, 3, self.step, slot])
                sink.append(augment(s, rng))
                slot += 1
        self.step += 1
        x_lab = torch.from_numpy(np.stack([s.image for s in out_lab])[:, None])
        y_lab = torch.from_numpy(np.stack([s.mask for s in out_lab])).long()
        x_unlab = torch.from_numpy(np.stack([s.image for s in out_unlab])[:, None])
        return TrainBatch(x_lab, y_lab, x_unlab)


def compute_losses(net1, net2, batch: TrainBatch, config: TrainConfig):
    """The five loss terms for one composed batch.

    Returns (total tensor, LossBreakdown). With both unsupervised terms
    disabled the unlabelled half is not even forwarded, making the
    ablation a plain supervised trainer on the labelled stream.
    """
    nl = batch.images_labelled.shape[0]
    x = batch.images_all if (config.use_semi or config.use_contra) \
        else batch.images_labelled
    logits1, feat1 = net1(x)
    logits2, feat2 = net2(x)

    sup1 = losses.supervised_loss(logits1[:nl], batch.labels)
    sup2 = losses.supervised_loss(logits2[:nl], batch.labels)
    zero = torch.zeros((), dtype=sup1.dtype)
    if config.use_semi:
        semi1, semi2 = losses.cross_supervision_loss(logits1[nl:], logits2[nl:])
    else:
        semi1 = semi2 = zero
    if config.use_contra:
        p1 = losses.project_features(feat1, config.projector_grid, config.projector_channels)
        p2 = losses.project_features(feat2, config.projector_grid, config.projector_channels)
        contra = losses.contrastive_loss(p1, p2)
    else:
        contra = zero

    total = sup1 + sup2 + semi1 + semi2 + contra
    breakdown = losses.total_loss(sup1, sup2, semi1, semi2, contra)
    return total, breakdown


def train_step(networks, optimizers, batch: TrainBatch, config: TrainConfig) -> LossBreakdown:
    """One optimization step over both networks with a single backward."""
    net1, net2 = networks
    net1.train()
    net2.train()
    total, breakdown = compute_losses(net1, net2, batch, config)
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    total.backward()
    for opt in optimizers:
        opt.step()
    return breakdown


def validate(network: torch.nn.Module, validation_samples) -> float:
    """Mean per-image foreground Dice over the validation set."""
    if not validation_samples:
        raise ValueError("empty validation set")
    rows, _ = metrics.evaluate_testset(network, validation_samples)
    return float(np.mean([r.dice for r in rows]))


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def train(config: TrainConfig, data_root, manifest: SplitManifest, out_dir,
          log_name: str = "training_log.csv"):
    """Run the full loop; returns (CheckpointRecord, list of LossBreakdown)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    samples = load_dataset(data_root, classes=config.network1.classes)
    labelled, unlabelled, validation, _ = split(samples, manifest)

    net1 = build_network(config.network1,
                         config.network1_seed if config.network1_seed is not None
                         else config.seed + 1)
    net2 = build_network(config.network2,
                         config.network2_seed if config.network2_seed is not None
                         else config.seed + 2)
    opt1 = build_optimizer(net1, config)
    opt2 = build_optimizer(net2, config)
    composer = BatchComposer(labelled, unlabelled, config)

    record = CheckpointRecord(iteration=0, val_dice_f1=float("-inf"),
                              val_dice_f2=float("nan"), ckpt_f1=None, ckpt_f2=None,
                              config_hash=config.config_hash())
    history = []
    log_path = out / log_name
    with open(log_path, "w", newline="") as log_fh:
        log = csv.writer(log_fh)
        log.writerow(LOG_COLUMNS)
        for it in range(1, config.iterations + 1):
            batch = composer.next_batch()
            breakdown = train_step((net1, net2), (opt1, opt2), batch, config)
            history.append(breakdown)
            row = [it] + [f"{getattr(breakdown, k):.8f}"
                          for k in ("sup1", "sup2", "semi1", "semi2", "contra", "total")]
            if it % config.validate_every == 0 or it == config.iterations:
                d1 = validate(net1, validation)
                d2 = validate(net2, validation)
                row += [f"{d1:.6f}", f"{d2:.6f}"]
                if d1 > record.val_dice_f1:
                    ckpt1 = out / "best_f1.npz"
                    ckpt2 = out / "best_f2.npz"
                    _atomic_checkpoint(ckpt1, net1, it, d1)
                    _atomic_checkpoint(ckpt2, net2, it, d2)
                    record = CheckpointRecord(iteration=it, val_dice_f1=d1,
                                              val_dice_f2=d2, ckpt_f1=str(ckpt1),
                                              ckpt_f2=str(ckpt2),
                                              config_hash=config.config_hash())
                    record.to_file(out / "best_record.json")
            else:
                row += ["", ""]
            log.writerow(row)
            log_fh.flush()
    return record, history


def _atomic_checkpoint(path: Path, net, iteration: int, val_dice: float):
    tmp = path.with_suffix(".tmp.npz")
    save_checkpoint(tmp, net, meta={"iteration": iteration, "val_dice": val_dice})
    os.replace(tmp, path)
