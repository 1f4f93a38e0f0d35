"""Deterministic training loop: Adam with L2 weight decay, gradient-norm
clipping, reduce-on-plateau learning-rate scheduling on validation F20, and
best-checkpoint selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .features import (FRAMES_PER_LABEL, FeatureSegment, MelFilterbank, StftConfig,
                       acs_swap_features, extract_features)
from .labels import (EventLabel, TargetTensor, encode_multi_accdoa,
                     permutation_invariant_loss)
from .metrics import MetricsReport, compute_metrics
from .model import SeldModel, decode_predictions, save_checkpoint
from .synth import SceneClip


class NumericalError(RuntimeError):
    """Loss or gradients stopped being finite."""


@dataclass
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 5e-6
    batch_size: int = 32
    epochs: int = 120
    seed: int = 42
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    grad_clip: float = 5.0
    acs: bool = False
    val_split: float = 0.2
    dist_scale: float = 0.1
    act_threshold: float = 0.5
    unify_deg: float = 15.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError("scheduler factor must lie in (0, 1)")
        if self.scheduler_patience < 0:
            raise ValueError("scheduler patience must be >= 0")


# ---------------------------------------------------------------------------
# Optimizer and scheduler
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam; weight decay enters as an additive L2 gradient term."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class PlateauScheduler:
    """Halve (by ``factor``) after ``patience`` + 1 consecutive non-improving
    validations of a maximized metric."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5) -> None:
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -np.inf
        self.bad_count = 0

    def step(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.bad_count = 0
        else:
            self.bad_count += 1
            if self.bad_count > self.patience:
                self.lr *= self.factor
                self.bad_count = 0
        return self.lr


def plateau_scheduler_step(sched: PlateauScheduler, val_f20: float) -> float:
    return sched.step(val_f20)


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


@dataclass
class TrainItem:
    """One 250-frame segment with its encoded target and raw labels."""

    name: str
    features: np.ndarray          # [7, 250, n_mels]
    target: TargetTensor
    label_mask: np.ndarray        # [label frames] bool, False on tail padding
    labels: list[EventLabel]      # segment-local frames, for evaluation


def build_items(scenes: list[SceneClip], stft_cfg: StftConfig | None = None,
                fb: MelFilterbank | None = None, tracks: int = 3,
                classes: int = 13) -> list[TrainItem]:
    """Extract features and per-segment targets for a list of scenes."""
    stft_cfg = stft_cfg if stft_cfg is not None else StftConfig()
    fb = fb if fb is not None else MelFilterbank(cfg=stft_cfg)
    items = []
    for scene in scenes:
        segments = extract_features(scene.clip, stft_cfg, fb)
        for seg in segments:
            label_frames = seg.data.shape[1] // FRAMES_PER_LABEL
            lo = seg.index * label_frames
            hi = lo + label_frames
            local = [EventLabel(frame=ev.frame - lo, class_id=ev.class_id,
                                source_id=ev.source_id, azimuth_deg=ev.azimuth_deg,
                                distance_m=ev.distance_m)
                     for ev in scene.labels if lo <= ev.frame < hi]
            target = encode_multi_accdoa(local, label_frames, tracks=tracks,
                                         classes=classes)
            mask = np.zeros(label_frames, dtype=bool)
            mask[:seg.valid_label_frames] = True
            items.append(TrainItem(name=f"{scene.name}_seg{seg.index}",
                                   features=seg.data, target=target,
                                   label_mask=mask, labels=local))
    return items


def acs_swap_item(item: TrainItem) -> TrainItem:
    """Feature-domain channel swap: negate the Y intensity channel and mirror
    the targets and labels."""
    values = item.target.values.copy()
    values[..., 1] = -values[..., 1]
    labels = [EventLabel(frame=ev.frame, class_id=ev.class_id, source_id=ev.source_id,
                         azimuth_deg=-ev.azimuth_deg, distance_m=ev.distance_m)
              for ev in item.labels]
    return TrainItem(name=item.name + "_acs",
                     features=acs_swap_features(item.features),
                     target=TargetTensor(values=values, flags=item.target.flags.copy()),
                     label_mask=item.label_mask.copy(), labels=labels)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_model(model: SeldModel, items: list[TrainItem],
                   act_threshold: float = 0.5, unify_deg: float = 15.0,
                   batch_size: int = 8) -> MetricsReport:
    """Decode model output on every item and score against the labels."""
    was_training = model.training
    model.eval()
    preds: list[EventLabel] = []
    refs: list[EventLabel] = []
    offset = 0
    for start in range(0, len(items), batch_size):
        batch = items[start:start + batch_size]
        feats = Tensor(np.stack([it.features for it in batch]))
        out = model(feats).data
        for b, item in enumerate(batch):
            valid = int(item.label_mask.sum())
            decoded = decode_predictions(out[b], act_threshold=act_threshold,
                                         unify_deg=unify_deg)
            for ev in decoded:
                if ev.frame < valid:
                    preds.append(EventLabel(frame=ev.frame + offset, class_id=ev.class_id,
                                            source_id=ev.source_id,
                                            azimuth_deg=ev.azimuth_deg,
                                            distance_m=ev.distance_m))
            for ev in item.labels:
                refs.append(EventLabel(frame=ev.frame + offset, class_id=ev.class_id,
                                       source_id=ev.source_id, azimuth_deg=ev.azimuth_deg,
                                       distance_m=ev.distance_m))
            offset += item.label_mask.shape[0]
    if was_training:
        model.train()
    return compute_metrics(preds, refs)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_f20: float
    val_doae: float
    val_rde: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_f20: float = -1.0
    best_state: dict | None = None
    steps_per_epoch: int = 0
    total_steps: int = 0

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = ["epoch,train_loss,val_f20,val_doae,val_rde,lr"]
        rows += [f"{e.epoch},{e.train_loss:.8f},{e.val_f20:.6f},{e.val_doae:.6f},"
                 f"{e.val_rde:.6f},{e.lr:.8g}" for e in self.history]
        path.write_text("\n".join(rows) + "\n")


def split_items(items: list[TrainItem], val_split: float, seed: int
                ) -> tuple[list[TrainItem], list[TrainItem]]:
    """Deterministic shuffled split; val_split = 0 trains and validates on
    everything."""
    if val_split <= 0:
        return list(items), list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    n_val = max(1, int(round(len(items) * val_split)))
    val_idx = set(order[:n_val].tolist())
    train = [items[i] for i in range(len(items)) if i not in val_idx]
    val = [items[i] for i in range(len(items)) if i in val_idx]
    return train, val


def train_loop(model: SeldModel, train_items: list[TrainItem],
               val_items: list[TrainItem], cfg: TrainConfig,
               ckpt_dir=None, log_path=None) -> TrainResult:
    """Run the full protocol and return per-epoch logs plus the best state.

    Raises NumericalError (after writing what it can) if the loss goes
    non-finite.
    """
    if not train_items:
        raise ValueError("no training items")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, factor=cfg.scheduler_factor,
                             patience=cfg.scheduler_patience)
    rng = np.random.default_rng(cfg.seed)
    expanded = list(train_items)
    if cfg.acs:
        expanded += [acs_swap_item(it) for it in train_items]
    result = TrainResult()
    result.steps_per_epoch = int(np.ceil(len(expanded) / cfg.batch_size))

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(expanded))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [expanded[i] for i in order[start:start + cfg.batch_size]]
            feats = Tensor(np.stack([it.features for it in batch]))
            targets = np.stack([it.target.values for it in batch])
            masks = np.stack([it.label_mask for it in batch]).astype(np.float64)
            model.zero_grad()
            with Tape() as tape:
                out = model(feats)
                loss = permutation_invariant_loss(out, targets, frame_mask=masks,
                                                  dist_scale=cfg.dist_scale)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
            clip_gradients(params, cfg.grad_clip)
            opt.step()
            result.total_steps += 1
            losses.append(loss_val)

        report = evaluate_model(model, val_items, act_threshold=cfg.act_threshold,
                                unify_deg=cfg.unify_deg)
        opt.lr = sched.step(report.f20)
        entry = EpochLog(epoch=epoch, train_loss=float(np.mean(losses)),
                         val_f20=report.f20, val_doae=report.doae_deg,
                         val_rde=report.rde, lr=opt.lr)
        result.history.append(entry)
        if report.f20 > result.best_f20:
            result.best_f20 = report.f20
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            if ckpt_dir is not None:
                save_checkpoint(Path(ckpt_dir) / "best.ckpt", model)
        if ckpt_dir is not None:
            save_checkpoint(Path(ckpt_dir) / "last.ckpt", model)
        if log_path is not None:
            result.write_csv(log_path)
    return result


def select_best(val_reports: list[MetricsReport]) -> int:
    """Index of the checkpoint with the highest validation F20 (first wins ties)."""
    if not val_reports:
        raise ValueError("no validation reports")
    scores = [r.f20 for r in val_reports]
    return int(np.argmax(scores))
