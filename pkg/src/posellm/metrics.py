"""OKS average precision (ground-truth box protocol) and PCKh.

Coordinates are normalized to the image; OKS distances are measured in pixels
against the instance area in squared pixels, PCKh distances in normalized units
against the normalized head size.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .prompt_codec import KEYPOINT_NAMES, NUM_KEYPOINTS
from .synth_data import SkeletonSample

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

# published COCO per-keypoint sigmas; k_i = 2 * sigma_i
COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

PCKH_GROUPS = {
    "shoulder": (5, 6),
    "elbow": (7, 8),
    "hip": (11, 12),
    "knee": (13, 14),
}


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class OksParams:
    k: tuple = (0.08,) * NUM_KEYPOINTS
    area_medium: float = 32.0 ** 2
    area_large: float = 96.0 ** 2

    def __post_init__(self):
        if len(self.k) != NUM_KEYPOINTS or min(self.k) <= 0:
            raise ValueError("need 17 positive falloff constants")

    @classmethod
    def coco(cls, **kw) -> "OksParams":
        return cls(k=tuple(2 * s for s in COCO_SIGMAS), **kw)


@dataclass
class Prediction:
    """17 predicted (x, y) points; NaN rows mark keypoints that failed to parse."""

    id: int
    points: np.ndarray

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.points).any(axis=1)

    @classmethod
    def from_pairs(cls, id: int, pairs: Sequence[Optional[Sequence[float]]]) -> "Prediction":
        pts = np.full((NUM_KEYPOINTS, 2), np.nan)
        for k, p in enumerate(pairs):
            if p is not None:
                pts[k] = p
        return cls(int(id), pts)


def oks(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray, area: float,
        params: OksParams = OksParams(), image_size=(1.0, 1.0)) -> Optional[float]:
    """Object keypoint similarity of one instance.

    ``pred`` may contain NaN rows (missing predictions, scored as 0). Returns
    ``None`` when no keypoint is visible.
    """
    vis = np.asarray(visibility).astype(bool)
    if not vis.any():
        return None
    if area <= 0:
        raise ValueError("area must be positive")
    w, h = image_size
    diff = (np.asarray(pred, dtype=np.float64) - gt) * np.array([w, h])
    d2 = (diff ** 2).sum(axis=1)
    k = np.asarray(params.k)
    e = np.exp(-d2 / (2.0 * area * k ** 2))
    e = np.where(np.isnan(e), 0.0, e)
    return float(e[vis].mean())


def instance_oks(predictions: Sequence[Prediction], dataset: Sequence[SkeletonSample],
                 params: OksParams = OksParams()) -> List[Optional[float]]:
    by_id = {p.id: p for p in predictions}
    if len(by_id) != len(predictions):
        raise IntegrityError("duplicate prediction ids")
    unknown = set(by_id) - {s.seed for s in dataset}
    if unknown:
        raise IntegrityError(f"predictions for ids not in dataset: {sorted(unknown)[:5]}")
    out = []
    for s in dataset:
        p = by_id.get(s.seed)
        pts = p.points if p is not None else np.full((NUM_KEYPOINTS, 2), np.nan)
        out.append(oks(pts, s.keypoints, s.visibility, s.area, params, (s.w, s.h)))
    return out


def _ap_at(scores: np.ndarray, t: float) -> float:
    if len(scores) == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(scores >= t)) / len(scores)


def _ap_mean(scores: np.ndarray) -> float:
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(_ap_at(scores, t) for t in OKS_THRESHOLDS) / len(OKS_THRESHOLDS)


def ap_suite(predictions: Sequence[Prediction], dataset: Sequence[SkeletonSample],
             params: OksParams = OksParams()) -> Dict[str, float]:
    """AP, AP50, AP75, APM, APL, AR over per-instance OKS.

    With one prediction per ground-truth instance, precision and recall at a
    threshold coincide, so AR equals AP; it is kept as its own column. Area bands
    with no instances report 0.0 (see ``n_medium``/``n_large``).
    """
    scores, areas = [], []
    for s, o in zip(dataset, instance_oks(predictions, dataset, params)):
        if o is not None:
            scores.append(o)
            areas.append(s.area)
    scores, areas = np.asarray(scores), np.asarray(areas)
    medium = (areas >= params.area_medium) & (areas < params.area_large)
    large = areas >= params.area_large
    ap = _ap_mean(scores)
    return {
        "AP": ap,
        "AP50": _ap_at(scores, 0.50),
        "AP75": _ap_at(scores, 0.75),
        "APM": _ap_mean(scores[medium]),
        "APL": _ap_mean(scores[large]),
        "AR": ap,
        "n_instances": int(len(scores)),
        "n_medium": int(medium.sum()),
        "n_large": int(large.sum()),
    }


def pckh_correct(predictions: Sequence[Prediction], dataset: Sequence[SkeletonSample], alpha: float):
    """(correct, visible) boolean arrays of shape (n_samples, 17)."""
    by_id = {p.id: p for p in predictions}
    correct = np.zeros((len(dataset), NUM_KEYPOINTS), dtype=bool)
    visible = np.zeros((len(dataset), NUM_KEYPOINTS), dtype=bool)
    for i, s in enumerate(dataset):
        if s.head_size <= 0:
            raise ValueError(f"sample {s.seed} has non-positive head size")
        visible[i] = s.visibility.astype(bool)
        p = by_id.get(s.seed)
        if p is None:
            continue
        dist = np.hypot(*(p.points - s.keypoints).T)
        correct[i] = (dist <= alpha * s.head_size) & ~np.isnan(dist) & visible[i]
    return correct, visible


def pckh(predictions: Sequence[Prediction], dataset: Sequence[SkeletonSample], alpha: float = 0.5) -> float:
    correct, visible = pckh_correct(predictions, dataset, alpha)
    n = visible.sum()
    return 100.0 * correct.sum() / n if n else 0.0


def pckh_groups(predictions, dataset, alpha: float = 0.5) -> Dict[str, float]:
    correct, visible = pckh_correct(predictions, dataset, alpha)
    out = {}
    for name, idx in PCKH_GROUPS.items():
        n = visible[:, idx].sum()
        out[name] = 100.0 * correct[:, idx].sum() / n if n else 0.0
    return out


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    APM: float
    APL: float
    AR: float
    PCKh_0_5: float
    PCKh_0_1: float
    shoulder: float
    elbow: float
    hip: float
    knee: float
    n_instances: int = 0
    n_medium: int = 0
    n_large: int = 0
    parse_failures: int = 0
    queries: int = 0

    TABLE_COLUMNS = ("AP", "AP50", "AP75", "APM", "APL", "AR")
    PCKH_COLUMNS = ("shoulder", "elbow", "hip", "knee", "PCKh_0_5", "PCKh_0_1")
    PCKH_HEADERS = ("Shou.", "Elbo.", "Hip", "Knee", "Mean", "Mean0.1")

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, label: str = "model") -> str:
        return format_table([(label, self)])


def evaluate(predictions: Sequence[Prediction], dataset: Sequence[SkeletonSample],
             params: OksParams = OksParams(), parse_failures: int = 0, queries: int = 0) -> EvalReport:
    ap = ap_suite(predictions, dataset, params)
    groups = pckh_groups(predictions, dataset, 0.5)
    return EvalReport(
        AP=ap["AP"], AP50=ap["AP50"], AP75=ap["AP75"], APM=ap["APM"], APL=ap["APL"], AR=ap["AR"],
        PCKh_0_5=pckh(predictions, dataset, 0.5), PCKh_0_1=pckh(predictions, dataset, 0.1),
        n_instances=ap["n_instances"], n_medium=ap["n_medium"], n_large=ap["n_large"],
        parse_failures=parse_failures, queries=queries, **groups,
    )


def format_table(rows: Sequence[tuple]) -> str:
    """Aligned text table with the AP columns followed by the PCKh columns."""
    headers = ("Method",) + EvalReport.TABLE_COLUMNS + EvalReport.PCKH_HEADERS
    body = [
        (label,) + tuple(f"{getattr(r, c):.1f}" for c in EvalReport.TABLE_COLUMNS + EvalReport.PCKH_COLUMNS)
        for label, r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# predictions file: one JSON object per line, {"id": ..., "kps": [[x, y] | "miss", ...]}


def write_predictions(predictions: Sequence[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in predictions:
            kps = ["miss" if np.isnan(pt).any() else [float(pt[0]), float(pt[1])] for pt in p.points]
            f.write(json.dumps({"id": p.id, "kps": kps}) + "\n")


def read_predictions(path) -> List[Prediction]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kps = rec["kps"]
                if len(kps) != NUM_KEYPOINTS:
                    raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got {len(kps)}")
                out.append(Prediction.from_pairs(rec["id"], [None if v == "miss" else v for v in kps]))
            except (ValueError, KeyError, TypeError) as e:
                raise IntegrityError(f"{path}:{lineno}: bad prediction record ({e})") from e
    return out


def ground_truth_predictions(dataset: Sequence[SkeletonSample]) -> List[Prediction]:
    return [Prediction(s.seed, s.keypoints.copy()) for s in dataset]
