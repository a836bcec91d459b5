"""Two-stage training: shuffled-patch pretraining, then flow/mask fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import SampleRecord, build_position_map, load_dataset, make_shuffle
from .losses import finetune_objective, pretrain_objective
from .model import ModelConfig, PretrainNet, RectifyNet, transfer_weights
from .nncore import Adam, OneCycle, load_checkpoint, save_checkpoint
from .nncore.tensor import no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, name: str, value: float):
        super().__init__(f"non-finite {name}={value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 65
    batch_size: int = 4
    max_lr: float = 1e-4
    seed: int = 0
    dataset: str | None = None
    checkpoint_dir: str | None = None
    n_f: int | None = None
    steps: int | None = None          # overrides epochs when set
    shuffle: bool = True              # pretraining only; False is the no-shuffle ablation
    reduction: str = "mean"
    keep_checkpoints: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)

    FULL_SCALE = dict(epochs=65, batch_size=64, max_lr=1e-4)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainResult:
    params: dict
    log: list[tuple[int, str, float]]
    checkpoint: Path | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([v for _, n, v in self.log if n == name])


class _LossLog:
    def __init__(self, path: Path | None):
        self.rows: list[tuple[int, str, float]] = []
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step", "loss_name", "value"])

    def add(self, step: int, name: str, value: float):
        self.rows.append((step, name, value))
        if self._fh is not None:
            self._writer.writerow([step, name, repr(float(value))])

    def close(self):
        if self._fh is not None:
            self._fh.close()


def read_loss_log(path) -> list[tuple[int, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["step"]), r["loss_name"], float(r["value"])) for r in csv.DictReader(fh)]


class _Batcher:
    """Epoch-wise shuffled mini-batches over record indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.steps_per_epoch = math.ceil(n / batch_size)
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return out


def _records(config: TrainConfig, records):
    if records is not None:
        return list(records)
    if config.dataset is None:
        raise ValueError("no dataset given")
    return load_dataset(config.dataset)[1]


def _check_finite(step, reports):
    for r in reports:
        if not math.isfinite(r.value):
            raise TrainingDiverged(step, r.name, r.value)


def _save_epoch(config: TrainConfig, net, epoch: int, stage: str) -> Path | None:
    if config.checkpoint_dir is None:
        return None
    root = Path(config.checkpoint_dir)
    path = save_checkpoint(root / f"{stage}_epoch{epoch:04d}", net.named_parameters(),
                           {"stage": stage, "epoch": epoch, "train": config.to_dict()})
    old = sorted(root.glob(f"{stage}_epoch*"))
    for stale in old[:-config.keep_checkpoints]:
        shutil.rmtree(stale)
    return path


def _log_path(config: TrainConfig, stage: str) -> Path | None:
    if config.checkpoint_dir is None:
        return None
    return Path(config.checkpoint_dir) / f"{stage}_loss.csv"


def _total_steps(config: TrainConfig, batcher: _Batcher) -> int:
    return config.steps if config.steps is not None else config.epochs * batcher.steps_per_epoch


def pretrain(config: TrainConfig, records: Sequence[SampleRecord] | None = None,
             hook: Callable | None = None) -> TrainResult:
    """Pretext training on shuffled patches with contrastive + position losses.

    ``hook(step, images, perms, labels)`` is called before each forward pass.
    """
    cfg = config.model
    recs = _records(config, records)
    images_all = np.stack([r.distorted for r in recs])
    pos_map = build_position_map(cfg.image_size, cfg.image_size, cfg.patch_size).flat()
    n = pos_map.size
    net = PretrainNet(cfg, seed=config.seed)
    params = net.named_parameters()
    opt = Adam(params)
    rng = np.random.default_rng(config.seed)
    batcher = _Batcher(len(recs), config.batch_size, rng)
    total = _total_steps(config, batcher)
    schedule = OneCycle(config.max_lr, total)
    losslog = _LossLog(_log_path(config, "pretrain"))
    ckpt = None
    try:
        for step in range(total):
            idx = batcher.next()
            images = images_all[idx]
            if config.shuffle:
                seeds = rng.integers(0, 2 ** 63, size=len(idx))
                perms = np.stack([make_shuffle(n, int(s)).perm for s in seeds])
            else:
                perms = np.broadcast_to(np.arange(n), (len(idx), n))
            labels = pos_map[perms]
            if hook is not None:
                hook(step, images, perms, labels)
            _, logits, feats = net(images, perms if config.shuffle else None)
            loss, reports = pretrain_objective(feats, logits, labels, cfg.tau)
            _check_finite(step, reports)
            opt.zero_grad()
            loss.backward()
            opt.step(schedule(step))
            for r in reports[:2]:
                losslog.add(step, r.name, r.value)
            if (step + 1) % batcher.steps_per_epoch == 0 or step + 1 == total:
                ckpt = _save_epoch(config, net, math.ceil((step + 1) / batcher.steps_per_epoch), "pretrain")
    finally:
        losslog.close()
    return TrainResult({k: v.data.copy() for k, v in params.items()}, losslog.rows, ckpt)


def finetune(config: TrainConfig, records: Sequence[SampleRecord] | None = None,
             pretrained=None) -> TrainResult:
    """Train the rectification network on L_flow + L_mask.

    ``pretrained`` is a parameter mapping or a checkpoint directory; when
    omitted the network trains from scratch.
    """
    cfg = config.model
    recs = _records(config, records)
    images_all = np.stack([r.distorted for r in recs])
    flows_all = np.stack([r.flow_gt for r in recs])
    masks_all = np.stack([r.mask_gt for r in recs])
    net = RectifyNet(cfg, seed=config.seed)
    if pretrained is not None:
        if isinstance(pretrained, (str, Path)):
            pretrained = load_checkpoint(pretrained)
        n_f = cfg.transfer_depth if config.n_f is None else config.n_f
        net.load_params(transfer_weights(pretrained, net.named_parameters(), n_f, cfg.depth))
    params = net.named_parameters()
    opt = Adam(params)
    rng = np.random.default_rng(config.seed)
    batcher = _Batcher(len(recs), config.batch_size, rng)
    total = _total_steps(config, batcher)
    schedule = OneCycle(config.max_lr, total)
    losslog = _LossLog(_log_path(config, "finetune"))
    ckpt = None
    try:
        for step in range(total):
            idx = batcher.next()
            flow, conf = net(images_all[idx])
            loss, reports = finetune_objective(flow, conf, flows_all[idx], masks_all[idx], config.reduction)
            _check_finite(step, reports)
            opt.zero_grad()
            loss.backward()
            opt.step(schedule(step))
            for r in reports[:2]:
                losslog.add(step, r.name, r.value)
            if (step + 1) % batcher.steps_per_epoch == 0 or step + 1 == total:
                ckpt = _save_epoch(config, net, math.ceil((step + 1) / batcher.steps_per_epoch), "finetune")
    finally:
        losslog.close()
    return TrainResult({k: v.data.copy() for k, v in params.items()}, losslog.rows, ckpt)


def position_accuracy(params, cfg: ModelConfig, records: Sequence[SampleRecord], seed: int = 1234,
                      trials: int = 4) -> float:
    """Position-head accuracy on freshly shuffled tokens of ``records``."""
    net = PretrainNet(cfg)
    net.load_params(params, strict=False)
    pos_map = build_position_map(cfg.image_size, cfg.image_size, cfg.patch_size).flat()
    n = pos_map.size
    rng = np.random.default_rng(seed)
    hits = total = 0
    images = np.stack([r.distorted for r in records])
    with no_grad():
        for _ in range(trials):
            perms = np.stack([make_shuffle(n, int(s)).perm for s in rng.integers(0, 2 ** 63, size=len(images))])
            _, logits, _ = net(images, perms)
            pred = logits.data.argmax(axis=-1)
            hits += int((pred == pos_map[perms]).sum())
            total += pred.size
    return hits / total
