"""SGD training loop for every mode, evaluation and metrics persistence."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig, serialize_experiment
from .dataset import Dataset, split_semi_supervised
from .diversification import diversify
from .losses import (
    GceConfig,
    MemoryBank,
    cross_entropy,
    dcl_adv_loss,
    dcl_cls_loss,
    dcl_loc_loss,
    dcl_total,
    gce_loss,
    pirl_loss,
    pirl_total,
    rotation_total,
)
from .model import ModelSpec, SSLNet
from .tensor import NonFiniteError, Tensor
from .transforms import (
    Purpose,
    apply_rcm,
    center_crop,
    extract_jigsaw_patches,
    location_targets,
    random_crop,
    rcm_permutation,
    resize,
    rotate90,
    stream,
)

__all__ = [
    "MetricsRow",
    "LrSchedule",
    "TrainingDiverged",
    "sgd_step",
    "loss_schedule",
    "evaluate",
    "topk_accuracy",
    "build_model",
    "train",
    "write_metrics",
    "read_metrics",
]

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "train_total_loss", "train_cls_loss", "train_ssl_loss", "test_top1", "test_top2", "lr"]


class TrainingDiverged(NonFiniteError):
    """A loss or activation became non-finite during training."""


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    train_total_loss: float
    train_cls_loss: float
    train_ssl_loss: float
    test_top1: float
    test_top2: float
    lr: float


@dataclass(frozen=True)
class LrSchedule:
    base: float
    factor: float = 0.1
    decay_epoch: int = 50

    def __call__(self, epoch: int) -> float:
        return self.base if epoch < self.decay_epoch else self.base * self.factor


def loss_schedule(epoch: int, gce: GceConfig) -> dict[str, bool]:
    """Plain CE during warm-up, then GCE."""
    use_ce = epoch < gce.warmup_epochs
    return {"use_ce": use_ce, "use_gce": not use_ce}


def sgd_step(params, lr: float, momentum: float) -> None:
    """``buf ← momentum·buf + grad``; ``param ← param − lr·buf``.

    Parameters that took no part in the loss (``grad is None``) are left alone.
    """
    params = list(params)
    if not any(p.grad is not None for p in params):
        raise ValueError("sgd_step: no parameter has a gradient")
    for p in params:
        if p.grad is None:
            continue
        buf = p.momentum_buffer
        buf *= momentum
        buf += p.grad
        p.data = p.data - p.data.dtype.type(lr) * buf


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of rows whose label is among the ``k`` best scores (ties → lower index)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")[:, :k]
    return 100.0 * float(np.mean((order == np.asarray(labels)[:, None]).any(axis=1)))


def eval_inputs(dataset: Dataset, aug_scale: float) -> np.ndarray:
    """Resize by ``aug_scale`` and centre-crop back to the native size; ``B×3×H×W``."""
    out = []
    for s in dataset.samples:
        h, w = s.image.shape[:2]
        big = resize(s.image, round(h * aug_scale), round(w * aug_scale))
        out.append(center_crop(big, h, w))
    return np.stack(out).transpose(0, 3, 1, 2)


def evaluate(model, test: Dataset, aug_scale: float = 1.125, batch_size: int = 250,
             inputs: np.ndarray | None = None) -> tuple[float, float]:
    """Top-1 and top-2 accuracy in percent over the whole test set.

    ``inputs`` may carry precomputed :func:`eval_inputs` for ``test``.
    """
    if len(test) == 0:
        raise ValueError("evaluate: empty test set")
    x = eval_inputs(test, aug_scale) if inputs is None else inputs
    x = x.astype(T.get_default_dtype(), copy=False)
    scores = []
    if hasattr(model, "eval"):
        model.eval()
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            s = model.logits(x[i:i + batch_size])
            scores.append(s.data if isinstance(s, Tensor) else np.asarray(s))
    if hasattr(model, "train"):
        model.train()
    scores = np.concatenate(scores)
    labels = test.labels
    return topk_accuracy(scores, labels, 1), topk_accuracy(scores, labels, 2)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def build_model(cfg: TrainConfig, num_classes: int) -> SSLNet:
    return SSLNet(ModelSpec(
        num_classes=num_classes,
        variant="cam" if cfg.mode == "db_gce" else "standard",
        rcm_k=cfg.rcm.k,
        loc_mode=cfg.loc_mode,
        embed_dim=cfg.embed_dim,
        num_patches=cfg.pirl.grid ** 2,
        seed=cfg.seed,
    ))


class _Run:
    def __init__(self, cfg: TrainConfig, train: Dataset, model: SSLNet):
        self.cfg = cfg
        self.model = model
        self.train = train
        self.dtype = T.get_default_dtype()
        h, w = train.samples[0].image.shape[:2]
        self.size = (h, w)
        big = (round(h * cfg.aug_scale), round(w * cfg.aug_scale))
        self.resized = {s.id: resize(s.image, *big) for s in train.samples}
        self.labels = {s.id: s.label for s in train.samples}
        self.bank = None
        if cfg.mode == "pirl":
            self.bank = MemoryBank(train.ids, cfg.embed_dim, cfg.pirl.beta, cfg.pirl.tau, seed=cfg.seed)

    def crops(self, ids, epoch: int) -> np.ndarray:
        h, w = self.size
        return np.stack([random_crop(self.resized[i], h, w, stream(self.cfg.seed, epoch, i, Purpose.CROP))
                         for i in ids])

    def _chw(self, images: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=self.dtype)

    # each step returns (loss tensor, supervised loss value, auxiliary loss value)
    def step_baseline(self, ids, labels, imgs, epoch):
        scores = self.model.class_scores(self.model.features(self._chw(imgs)))
        loss = cross_entropy(scores, labels)
        return loss, loss.item(), 0.0

    def step_rotation(self, ids, labels, imgs, epoch):
        m, lam = self.model, self.cfg.rotation_lambda
        feats = m.features(self._chw(imgs))
        cls = cross_entropy(m.class_scores(feats), labels)
        rotated = np.concatenate([np.stack([rotate90(im, r) for im in imgs]) for r in (1, 2, 3)])
        rot_feats = m.features(self._chw(rotated))
        pooled = T.concat([m.pooled(feats), m.pooled(rot_feats)], axis=0)
        rot_labels = np.repeat(np.arange(4), len(ids))
        rot = cross_entropy(m.rot(pooled), rot_labels)
        return rotation_total(cls, rot, lam), cls.item(), rot.item()

    def step_dcl(self, ids, labels, imgs, epoch):
        m, cfg = self.model, self.cfg
        decon, targets = [], []
        for i, im in zip(ids, imgs):
            perm = rcm_permutation(cfg.rcm.k, cfg.rcm.D, stream(cfg.seed, epoch, i, Purpose.RCM))
            decon.append(apply_rcm(im, perm)[0])
            targets.append(location_targets(perm))
        b = len(ids)
        feats = m.features(self._chw(np.concatenate([imgs, np.stack(decon)])))
        scores = m.class_scores(feats)
        disc = m.adversarial_scores(feats)
        loc = m.location_map(feats)
        l_cls = dcl_cls_loss(scores[:b], scores[b:], labels)
        l_adv = dcl_adv_loss(disc[:b], disc[b:])
        l_loc = dcl_loc_loss(loc[:b], loc[b:], np.stack(targets), cfg.loc_mode)
        total = dcl_total(l_cls, l_adv, l_loc, cfg.dcl_ablation)
        with T.no_grad():
            sup = cross_entropy(scores.data[:b], labels).item()
        return total, sup, total.item()

    def step_pirl(self, ids, labels, imgs, epoch):
        m, cfg = self.model, self.cfg
        p = cfg.pirl
        patch_sets = [extract_jigsaw_patches(im, p.resize, p.crop or None, p.grid, p.patch_size,
                                             stream(cfg.seed, epoch, i, Purpose.JIGSAW))
                      for i, im in zip(ids, imgs)]
        patches = np.stack([ps.patches for ps in patch_sets]).transpose(0, 1, 4, 2, 3)
        feats = m.features(self._chw(imgs))
        cls = cross_entropy(m.class_scores(feats), labels)
        v_i, v_t = m.pirl_embed(None, np.ascontiguousarray(patches, dtype=self.dtype), features=feats)
        negs = np.stack([self.bank.sample_negatives(i, p.negatives, stream(cfg.seed, epoch, i, Purpose.NEGATIVES))
                         for i in ids])
        ssl = pirl_loss(v_i, v_t, negs, p.tau)
        self._pending_bank = list(zip(ids, v_i.data.copy()))
        return pirl_total(cls, ssl), cls.item(), ssl.item()

    def step_db_gce(self, ids, labels, imgs, epoch):
        m, cfg = self.model, self.cfg
        rngs = [stream(cfg.seed, epoch, i, Purpose.DB) for i in ids]
        scores = m.class_scores(m.features(self._chw(imgs)),
                                suppress=lambda a: diversify(a, cfg.db, rngs, training=True))
        if loss_schedule(epoch, cfg.gce)["use_ce"]:
            loss = cross_entropy(scores, labels)
        else:
            loss = gce_loss(scores, labels, cfg.gce.k)
        return loss, loss.item(), 0.0

    def run_epoch(self, epoch: int, lr: float) -> tuple[float, float, float, int]:
        cfg, m = self.cfg, self.model
        ids = self.train.ids
        order = ids[stream(cfg.seed, epoch, 0, Purpose.SHUFFLE).permutation(len(ids))]
        step_fn = getattr(self, f"step_{cfg.mode}")
        totals = np.zeros(3)
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            labels = np.array([self.labels[i] for i in batch])
            imgs = self.crops(batch, epoch)
            m.zero_grad()
            try:
                loss, sup, ssl = step_fn(batch, labels, imgs, epoch)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}") from exc
            sgd_step(m.parameters(), lr, cfg.momentum)
            for p in m.parameters():
                if not np.isfinite(p.data).all():
                    raise TrainingDiverged(f"epoch {epoch} step {steps}: parameter {p.name} is not finite")
            if self.bank is not None:
                for i, rep in self._pending_bank:
                    self.bank.update(i, rep)
            totals += (loss.item(), sup, ssl)
            steps += 1
        totals /= max(steps, 1)
        return float(totals[0]), float(totals[1]), float(totals[2]), steps


def train(config: TrainConfig, train: Dataset, test: Dataset, model: SSLNet | None = None,
          on_epoch=None) -> tuple[SSLNet, list[MetricsRow]]:
    """Train from scratch (or from ``model``) and evaluate after every epoch."""
    config.validate()
    if len(train) == 0 or len(test) == 0:
        raise ValueError("train and test sets must be non-empty")
    if config.mode == "db_gce" and not config.gce.k <= train.num_classes - 1:
        raise ValueError(f"gce k={config.gce.k} needs at least {config.gce.k + 1} classes")
    subset = split_semi_supervised(train, config.split)
    schedule = LrSchedule(config.lr, config.lr_decay_factor, config.lr_decay_epoch)
    with T.default_dtype(config.dtype):
        model = model or build_model(config, train.num_classes)
        run = _Run(config, subset, model)
        test_x = eval_inputs(test, config.aug_scale)
        history = []
        for epoch in range(config.epochs):
            lr = schedule(epoch)
            total, sup, ssl, steps = run.run_epoch(epoch, lr)
            top1, top2 = evaluate(model, test, config.aug_scale, inputs=test_x)
            row = MetricsRow(epoch, total, sup, ssl, top1, top2, lr)
            history.append(row)
            log.info("epoch %d  loss %.4f  top1 %.2f  top2 %.2f", epoch, total, top1, top2)
            if on_epoch is not None:
                on_epoch(row, run)
    model.epoch = config.epochs
    model.bank = run.bank
    return model, history


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------

def write_metrics(history: list[MetricsRow], path_csv, path_json_summary, config: TrainConfig | None = None) -> None:
    if not history:
        raise ValueError("write_metrics: empty history")
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(row)])
    summary = {
        "best_top1": max(r.test_top1 for r in history),
        "best_top2": max(r.test_top2 for r in history),
        "final_epoch": history[-1].epoch,
        "final_top1": history[-1].test_top1,
        "final_top2": history[-1].test_top2,
        "config": None if config is None else _config_dict(config),
        "experiment_file": None if config is None else serialize_experiment(config),
    }
    Path(path_json_summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["dcl_ablation"] = list(cfg.dcl_ablation)
    return d


def read_metrics(path_csv) -> list[MetricsRow]:
    with open(path_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in CSV_HEADER[1:])) for r in reader]
