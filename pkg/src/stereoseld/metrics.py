"""Location-dependent detection and localization metrics.

A prediction counts as a true positive only when it is matched to a same
class reference in the same 100 ms frame with angular error <= 20 degrees and
relative distance error <= 1.0. Matching minimizes the total angular error
per (frame, class) cell. The angular error is the absolute difference of
folded azimuths (1-D frontal field of view, no elevation).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

from .labels import EventLabel

ANGULAR_THRESHOLD_DEG = 20.0
RELATIVE_DISTANCE_THRESHOLD = 1.0
MAX_ASSIGNMENT_SIZE = 8  # brute-force matching; polyphony here is <= 3


@dataclass
class MetricsReport:
    f20: float
    doae_deg: float
    rde: float
    tp: int
    fp: int
    fn: int
    f20_macro: float = float("nan")
    per_class: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def summary(self) -> str:
        return f"F20={self.f20:.3f} DOAE={self.doae_deg:.1f} RDE={self.rde:.3f}"


def match_events(preds: list[tuple[float, float]], refs: list[tuple[float, float]]
                 ) -> list[tuple[int, int]]:
    """Minimum-total-angular-error assignment between same-class events.

    preds/refs are (azimuth_deg, distance_m) lists for one (frame, class)
    cell. Returns matched (pred_index, ref_index) pairs; min(len(preds),
    len(refs)) pairs are produced, the rest stay unmatched.
    """
    m, n = len(preds), len(refs)
    if m == 0 or n == 0:
        return []
    if max(m, n) > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"assignment of {m}x{n} events exceeds brute-force bound")
    best_cost, best_pairs = float("inf"), []
    if m <= n:
        for perm in itertools.permutations(range(n), m):
            cost = sum(abs(preds[i][0] - refs[j][0]) for i, j in enumerate(perm))
            if cost < best_cost:
                best_cost = cost
                best_pairs = [(i, j) for i, j in enumerate(perm)]
    else:
        for perm in itertools.permutations(range(m), n):
            cost = sum(abs(preds[i][0] - refs[j][0]) for j, i in enumerate(perm))
            if cost < best_cost:
                best_cost = cost
                best_pairs = [(i, j) for j, i in enumerate(perm)]
    return best_pairs


def _group(events: list[EventLabel]) -> dict[tuple[int, int], list[tuple[float, float]]]:
    cells: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for ev in events:
        cells.setdefault((ev.frame, ev.class_id), []).append(
            (ev.azimuth_deg, ev.distance_m))
    return cells


def compute_metrics(pred_events: list[EventLabel], ref_events: list[EventLabel],
                    ang_threshold: float = ANGULAR_THRESHOLD_DEG,
                    rel_threshold: float = RELATIVE_DISTANCE_THRESHOLD) -> MetricsReport:
    """Frame-level F20 / DOAE / RDE over two event lists.

    DOAE and RDE average over matched pairs regardless of the thresholds;
    matched pairs with a zero-distance reference are excluded from RDE (a
    zero/zero pair counts as zero error for the threshold test).
    """
    pred_cells = _group(pred_events)
    ref_cells = _group(ref_events)
    per_class: dict[int, list[int]] = {}
    ang_errors: list[float] = []
    rel_errors: list[float] = []
    tp = fp = fn = 0

    for key in sorted(set(pred_cells) | set(ref_cells)):
        preds = pred_cells.get(key, [])
        refs = ref_cells.get(key, [])
        pairs = match_events(preds, refs)
        cls = key[1]
        stats = per_class.setdefault(cls, [0, 0, 0])
        for ip, ir in pairs:
            ang = abs(preds[ip][0] - refs[ir][0])
            d_ref, d_pred = refs[ir][1], preds[ip][1]
            if d_ref > 0:
                rel = abs(d_pred - d_ref) / d_ref
                rel_errors.append(rel)
            else:
                rel = 0.0 if d_pred == 0 else float("inf")
                warnings.warn("reference distance 0; pair excluded from RDE")
            ang_errors.append(ang)
            if ang <= ang_threshold and rel <= rel_threshold:
                tp += 1
                stats[0] += 1
            else:
                fp += 1
                fn += 1
                stats[1] += 1
                stats[2] += 1
        extra_p = len(preds) - len(pairs)
        extra_r = len(refs) - len(pairs)
        fp += extra_p
        fn += extra_r
        stats[1] += extra_p
        stats[2] += extra_r

    f20 = 2.0 * tp / (2.0 * tp + fp + fn) if (tp + fp + fn) else 1.0
    doae = float(sum(ang_errors) / len(ang_errors)) if ang_errors else float("nan")
    rde = float(sum(rel_errors) / len(rel_errors)) if rel_errors else float("nan")
    class_f = [2.0 * t / (2.0 * t + p + n) if (t + p + n) else 1.0
               for t, p, n in per_class.values()]
    macro = float(sum(class_f) / len(class_f)) if class_f else float("nan")
    return MetricsReport(f20=f20, doae_deg=doae, rde=rde, tp=tp, fp=fp, fn=fn,
                         f20_macro=macro,
                         per_class={c: tuple(v) for c, v in sorted(per_class.items())})


def write_report(path, report: MetricsReport) -> None:
    """Key-value text report plus a per-class CSV next to it."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"f20 {report.f20:.6f}",
        f"f20_macro {report.f20_macro:.6f}",
        f"doae_deg {report.doae_deg:.6f}",
        f"rde {report.rde:.6f}",
        f"tp {report.tp}",
        f"fp {report.fp}",
        f"fn {report.fn}",
    ]
    path.write_text("\n".join(lines) + "\n")
    csv_path = path.with_suffix(".csv")
    rows = ["class_id,tp,fp,fn"]
    rows += [f"{c},{t},{p},{n}" for c, (t, p, n) in report.per_class.items()]
    csv_path.write_text("\n".join(rows) + "\n")
