"""Ground-truth handling: azimuth folding, channel-swap augmentation,
multi-track activity/direction/distance target encoding, and the
permutation-invariant regression loss.

Targets use three tracks per class. Active (frame, class) cells carry a unit
frontal-plane direction (cos az, sin az) whose norm doubles as the activity
flag, plus a distance in meters; when fewer sources than tracks are present
the existing targets are duplicated into the empty tracks (flagged) so every
track regresses toward something.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_TRACKS = 3
N_CLASSES = 13
LABEL_FRAMES_PER_SEGMENT = 50
# distance contributes to the loss in units of 10 m so a few-meter error is
# comparable to a unit direction error; tunable through TrainConfig
DIST_SCALE = 0.1

FLAG_EMPTY = 0
FLAG_REAL = 1
FLAG_DUPLICATE = 2


@dataclass
class EventLabel:
    """One active source in one 100 ms label frame."""

    frame: int
    class_id: int
    source_id: int
    azimuth_deg: float
    distance_m: float

    def __post_init__(self) -> None:
        if not -90.0 - 1e-9 <= self.azimuth_deg <= 90.0 + 1e-9:
            raise ValueError(f"azimuth {self.azimuth_deg} outside folded range [-90, 90]")
        if self.distance_m < 0:
            raise ValueError(f"distance {self.distance_m} must be non-negative")


def fold_azimuth(phi_deg):
    """Map any azimuth into the frontal range [-90, 90].

    Rear directions reflect forward: phi -> 180 - phi for phi > 90 and
    -180 - phi for phi < -90, after wrapping into [-180, 180). Scalar in,
    scalar out; arrays work elementwise.
    """
    phi = np.asarray(phi_deg, dtype=np.float64)
    wrapped = np.mod(phi + 180.0, 360.0) - 180.0
    folded = np.where(wrapped > 90.0, 180.0 - wrapped,
                      np.where(wrapped < -90.0, -180.0 - wrapped, wrapped))
    if np.isscalar(phi_deg) or np.ndim(phi_deg) == 0:
        return float(folded)
    return folded


def acs_swap(clip, labels: list[EventLabel]):
    """Audio channel swap: exchange L/R and mirror every azimuth.

    Involution on (audio, labels); class, frame, source, and distance are
    untouched.
    """
    from .features import StereoClip

    swapped = StereoClip(left=clip.right.copy(), right=clip.left.copy(),
                         sample_rate=clip.sample_rate)
    new_labels = [
        EventLabel(frame=ev.frame, class_id=ev.class_id, source_id=ev.source_id,
                   azimuth_deg=-ev.azimuth_deg, distance_m=ev.distance_m)
        for ev in labels
    ]
    return swapped, new_labels


@dataclass
class TargetTensor:
    """Dense regression target: values [frames, tracks, classes, 3] with the
    last axis (x, y, distance_m); flags mark empty / real / duplicated slots."""

    values: np.ndarray
    flags: np.ndarray

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def encode_multi_accdoa(labels: list[EventLabel], frames: int,
                        tracks: int = N_TRACKS, classes: int = N_CLASSES) -> TargetTensor:
    """Encode frame-level events into the multi-track target tensor.

    At most ``tracks`` simultaneous same-class sources are representable;
    excess events are dropped keeping the nearest ones (with a warning).
    Remaining empty tracks of an active cell are filled with duplicates of
    the real targets, flagged so downstream code can tell them apart.
    """
    values = np.zeros((frames, tracks, classes, 3))
    flags = np.zeros((frames, tracks, classes), dtype=np.uint8)
    cells: dict[tuple[int, int], list[EventLabel]] = {}
    for ev in labels:
        if not 0 <= ev.frame < frames:
            raise ValueError(f"event frame {ev.frame} outside [0, {frames})")
        if not 0 <= ev.class_id < classes:
            raise ValueError(f"class_id {ev.class_id} outside [0, {classes})")
        cells.setdefault((ev.frame, ev.class_id), []).append(ev)

    for (frame, class_id), events in cells.items():
        events = sorted(events, key=lambda e: (e.source_id, e.azimuth_deg, e.distance_m))
        if len(events) > tracks:
            warnings.warn(
                f"frame {frame} class {class_id}: {len(events)} overlapping sources, "
                f"keeping the {tracks} nearest")
            events = sorted(events, key=lambda e: e.distance_m)[:tracks]
            events = sorted(events, key=lambda e: (e.source_id, e.azimuth_deg, e.distance_m))
        n_real = len(events)
        for t in range(tracks):
            ev = events[t] if t < n_real else events[t % n_real]
            rad = np.deg2rad(ev.azimuth_deg)
            values[frame, t, class_id] = (np.cos(rad), np.sin(rad), ev.distance_m)
            flags[frame, t, class_id] = FLAG_REAL if t < n_real else FLAG_DUPLICATE
    return TargetTensor(values=values, flags=flags)


def permutation_invariant_loss(pred: Tensor, target: TargetTensor | np.ndarray,
                               frame_mask: np.ndarray | None = None,
                               dist_scale: float = DIST_SCALE) -> Tensor:
    """Track-permutation-invariant regression loss.

    pred: Tensor [frames, tracks, classes, 3] or batched [B, F, T, C, 3];
    target: matching array (duplicated slots count like real ones). Per
    (frame, class) the squared error on (x, y, dist_scale * distance) is
    averaged over tracks and components, minimized over the track
    permutations (ties resolved toward the first permutation in lexicographic
    order), then averaged over every unmasked (frame, class) cell.
    """
    tgt = target.values if isinstance(target, TargetTensor) else np.asarray(target)
    if pred.ndim == 4:
        pred = ad.reshape(pred, (1,) + pred.shape)
    if tgt.ndim == 4:
        tgt = tgt[None]
    if pred.shape != tgt.shape:
        raise ad.ShapeError(f"pred shape {pred.shape} != target shape {tgt.shape}")
    batch, frames, tracks, classes, _ = pred.shape

    scale = np.ones(3)
    scale[2] = dist_scale
    scale_full = np.broadcast_to(scale, pred.shape).copy()
    pred_s = ad.mul(pred, Tensor(scale_full))
    tgt_s = tgt * scale

    perms = list(itertools.permutations(range(tracks)))
    per_perm: list[Tensor] = []
    neg_tgt = Tensor(-tgt_s)
    for perm in perms:
        p = ad.take(pred_s, np.asarray(perm), axis=2)
        sq = ad.square(ad.add(p, neg_tgt))
        cell = ad.mul(ad.tensor_sum(sq, axis=(2, 4)), 1.0 / (tracks * 3))
        per_perm.append(cell)  # [B, F, C]

    stacked = np.stack([c.data for c in per_perm])          # [P, B, F, C]
    best = np.argmin(stacked, axis=0)                       # first-min tie break

    if frame_mask is None:
        weights = np.ones((batch, frames, classes))
    else:
        mask = np.asarray(frame_mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[None]
        weights = np.broadcast_to(mask[:, :, None], (batch, frames, classes)).copy()
    denom = weights.sum()
    if denom == 0:
        raise ValueError("permutation_invariant_loss: all frames masked out")

    total = None
    for i, cell in enumerate(per_perm):
        sel = (best == i) * weights
        if not sel.any():
            continue
        term = ad.tensor_sum(ad.mul(cell, Tensor(sel)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / denom)


# ---------------------------------------------------------------------------
# Metadata CSV
# ---------------------------------------------------------------------------

CSV_HEADER = ["frame_100ms", "class_id", "source_id", "azimuth_deg", "distance_m"]


def write_labels_csv(path, labels: list[EventLabel]) -> None:
    """One row per active event: frame_100ms,class_id,source_id,azimuth_deg,distance_m."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(labels, key=lambda e: (e.frame, e.class_id, e.source_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for ev in rows:
            writer.writerow([ev.frame, ev.class_id, ev.source_id,
                             f"{ev.azimuth_deg:.6f}", f"{ev.distance_m:.6f}"])


def read_labels_csv(path, distance_unit: str = "m") -> list[EventLabel]:
    """Read the metadata CSV; tolerates a header row and a trailing elevation
    column (dropped). ``distance_unit`` may be "m" or "cm"."""
    if distance_unit not in ("m", "cm"):
        raise ValueError(f"distance_unit must be 'm' or 'cm', got {distance_unit!r}")
    div = 100.0 if distance_unit == "cm" else 1.0
    labels = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                frame = int(float(row[0]))
            except ValueError:
                continue  # header line
            if len(row) < 5:
                raise ValueError(f"{path}: expected >=5 columns, got {row}")
            labels.append(EventLabel(
                frame=frame, class_id=int(float(row[1])), source_id=int(float(row[2])),
                azimuth_deg=float(row[3]), distance_m=float(row[4]) / div))
    return labels
