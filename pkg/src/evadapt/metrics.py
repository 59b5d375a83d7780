"""Instance-segmentation quality: greedy max-IoU matching and aggregates.

Matching is greedy over all (gt, pred) pairs with IoU > 0, in descending
IoU order, one-to-one, tie-broken by lower gt id then lower pred id.
Unmatched ground-truth instances score 0 on precision/recall/IoU and are
counted in the means; aIoU weights per-instance IoU by mask area, with the
denominator defaulting to total ground-truth mask area so a perfect
prediction scores 1.0 (image-area normalization is available as an option).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


@dataclass
class MaskSet:
    masks: list[np.ndarray]          # each (H, W) bool/0-1
    ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.masks)))
        dims = {m.shape for m in self.masks}
        if len(dims) > 1:
            raise ValueError("inconsistent mask dimensions")
        for i, m in enumerate(self.masks):
            if not m.any():
                raise ValueError(f"mask {self.ids[i]} is empty")

    def __len__(self):
        return len(self.masks)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]   # (gt index, pred index, IoU)
    unmatched_gt: list[int]
    unmatched_pred: list[int]


@dataclass
class MetricsReport:
    mP: float
    mR: float
    mIoU: float
    aIoU: float
    tp: int
    fp: int
    fn: int
    instances: list[dict]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError("mask dimensions differ")
    a = a.astype(bool)
    b = b.astype(bool)
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def _overlap_table(gt: MaskSet, pred: MaskSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gm = np.stack([m.astype(np.uint8).ravel() for m in gt.masks])
    pm = np.stack([m.astype(np.uint8).ravel() for m in pred.masks])
    inter = _kernels.pairwise_mask_overlap(gm, pm)
    return inter, gm.sum(axis=1), pm.sum(axis=1)


def match_instances(gt: MaskSet, pred: MaskSet) -> MatchResult:
    """Greedy one-to-one matching in descending IoU order."""
    if len(pred) == 0 or len(gt) == 0:
        return MatchResult(pairs=[], unmatched_gt=list(range(len(gt))),
                           unmatched_pred=list(range(len(pred))))
    inter, ga, pa = _overlap_table(gt, pred)
    candidates = []
    for g in range(len(gt)):
        for p in range(len(pred)):
            if inter[g, p] > 0:
                u = ga[g] + pa[p] - inter[g, p]
                candidates.append((inter[g, p] / u, g, p))
    # descending IoU; ties by lower gt id then lower pred id
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_g: set[int] = set()
    used_p: set[int] = set()
    pairs = []
    for v, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        pairs.append((g, p, float(v)))
        used_g.add(g)
        used_p.add(p)
    return MatchResult(
        pairs=pairs,
        unmatched_gt=[g for g in range(len(gt)) if g not in used_g],
        unmatched_pred=[p for p in range(len(pred)) if p not in used_p],
    )


def compute_report(gt: MaskSet, pred: MaskSet,
                   aiou_denominator: str = "mask_total",
                   image_area: int | None = None) -> MetricsReport:
    """Per-instance precision/recall/IoU plus the four aggregates."""
    if len(gt) == 0:
        raise ValueError("ground-truth mask set is empty")
    if aiou_denominator not in ("mask_total", "image_area"):
        raise ValueError(f"unknown aIoU denominator: {aiou_denominator}")
    match = match_instances(gt, pred)
    by_gt = {g: (p, v) for g, p, v in match.pairs}
    if len(pred) > 0:
        inter, ga, pa = _overlap_table(gt, pred)
    else:
        ga = np.array([int(m.sum()) for m in gt.masks])
    instances = []
    ps, rs, ious, areas = [], [], [], []
    for g in range(len(gt)):
        area = int(ga[g])
        if g in by_gt:
            p, v = by_gt[g]
            it = float(inter[g, p])
            prec = it / float(pa[p])
            rec = it / float(area)
        else:
            p, v, prec, rec = None, 0.0, 0.0, 0.0
        instances.append({"gt": gt.ids[g],
                          "pred": pred.ids[p] if p is not None else None,
                          "p": prec, "r": rec, "iou": v, "area": area})
        ps.append(prec)
        rs.append(rec)
        ious.append(v)
        areas.append(area)
    areas = np.asarray(areas, dtype=np.float64)
    ious_a = np.asarray(ious)
    denom = areas.sum() if aiou_denominator == "mask_total" else float(
        image_area if image_area is not None else gt.masks[0].size)
    return MetricsReport(
        mP=float(np.mean(ps)),
        mR=float(np.mean(rs)),
        mIoU=float(np.mean(ious_a)),
        aIoU=float((areas * ious_a).sum() / denom),
        tp=len(match.pairs),
        fp=len(match.unmatched_pred),
        fn=len(match.unmatched_gt),
        instances=instances,
    )


def report_to_dict(r: MetricsReport) -> dict:
    def f6(x):
        return float(f"{x:.6f}")

    return {
        "mP": f6(r.mP), "mR": f6(r.mR), "mIoU": f6(r.mIoU), "aIoU": f6(r.aIoU),
        "tp": r.tp, "fp": r.fp, "fn": r.fn,
        "instances": [
            {"gt": i["gt"], "pred": i["pred"], "p": f6(i["p"]), "r": f6(i["r"]),
             "iou": f6(i["iou"]), "area": i["area"]}
            for i in r.instances
        ],
    }
