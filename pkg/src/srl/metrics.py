"""Foreground ARI and mean best overlap at video and image level."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

METRIC_COLUMNS = ("video_id", "fg_ari_video", "fg_ari_image", "mbo_video", "mbo_image")


def _pairs(x) -> int:
    return x * (x - 1) // 2


def ari_from_labels(pred: np.ndarray, gt: np.ndarray) -> float:
    """Adjusted Rand Index of two flat labelings via exact integer pair counts.

    Identical trivial clusterings (both one cluster, or both all singletons)
    score 1.0.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    _, p_idx = np.unique(pred, return_inverse=True)
    _, g_idx = np.unique(gt, return_inverse=True)
    table = np.zeros((g_idx.max(initial=-1) + 1, p_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (g_idx, p_idx), 1)
    n = int(pred.size)
    index = sum(_pairs(int(c)) for c in table.ravel() if c > 1)
    sum_g = sum(_pairs(int(c)) for c in table.sum(axis=1))
    sum_p = sum(_pairs(int(c)) for c in table.sum(axis=0))
    total = _pairs(n)
    num = 2 * (index * total - sum_g * sum_p)
    den = (sum_g + sum_p) * total - 2 * sum_g * sum_p
    if den == 0:
        return 1.0
    return num / den


def fg_ari(pred: np.ndarray, gt: np.ndarray, level: str = "video") -> float:
    """ARI over pixels whose ground truth is foreground (id != 0).

    ``video`` scores all frames as one clustering; ``image`` averages
    per-frame scores over frames that contain foreground.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    fg = gt != 0
    if not fg.any():
        raise ValueError("fg_ari undefined: no foreground pixels")
    if level == "video":
        return ari_from_labels(pred[fg], gt[fg])
    if level == "image":
        scores = [ari_from_labels(p[f], g[f]) for p, g, f in zip(pred, gt, fg) if f.any()]
        return float(np.mean(scores))
    raise ValueError(f"unknown level {level!r}")


def labels_to_masks(labels: np.ndarray, ignore_zero: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Split a label field into per-id boolean masks [K, ...] and the ids."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ignore_zero:
        ids = ids[ids != 0]
    return labels[None] == ids.reshape(-1, *([1] * labels.ndim)), ids


def _best_overlaps(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    p = pred_masks.reshape(pred_masks.shape[0], -1).astype(np.int64)
    g = gt_masks.reshape(gt_masks.shape[0], -1).astype(np.int64)
    inter = g @ p.T
    union = g.sum(axis=1)[:, None] + p.sum(axis=1)[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou.max(axis=1) if iou.shape[1] else np.zeros(g.shape[0])


def mbo(pred_masks: np.ndarray, gt_masks: np.ndarray, level: str = "video") -> float:
    """Mean over ground-truth objects of the best IoU with any predicted mask.

    Masks are boolean arrays [K, T, H, W].  A predicted mask may be the best
    match for several objects.  At image level each frame averages over
    the objects visible in it and frames without objects are skipped.
    """
    pred_masks = np.asarray(pred_masks, dtype=bool)
    gt_masks = np.asarray(gt_masks, dtype=bool)
    gt_masks = gt_masks[gt_masks.reshape(gt_masks.shape[0], -1).any(axis=1)]
    if gt_masks.shape[0] == 0:
        raise ValueError("mbo undefined: no ground-truth objects")
    if pred_masks.shape[1:] != gt_masks.shape[1:]:
        raise ValueError(f"mask shapes differ: {pred_masks.shape[1:]} vs {gt_masks.shape[1:]}")
    if level == "video":
        return float(_best_overlaps(pred_masks, gt_masks).mean())
    if level == "image":
        scores = []
        for t in range(gt_masks.shape[1]):
            g = gt_masks[:, t]
            g = g[g.reshape(g.shape[0], -1).any(axis=1)]
            if g.shape[0]:
                scores.append(_best_overlaps(pred_masks[:, t], g).mean())
        return float(np.mean(scores))
    raise ValueError(f"unknown level {level!r}")


def mbo_from_labels(pred: np.ndarray, gt: np.ndarray, level: str = "video") -> float:
    pm, _ = labels_to_masks(pred)
    gm, _ = labels_to_masks(gt, ignore_zero=True)
    return mbo(pm, gm, level)


def upsample_labels(patch_labels: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    """Nearest-neighbour expansion of [T, N] patch labels to [T, H, W]."""
    patch_labels = np.asarray(patch_labels)
    if h % patch or w % patch:
        raise ValueError(f"H={h}, W={w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    if patch_labels.ndim != 2 or patch_labels.shape[1] != gh * gw:
        raise ValueError(f"patch labels {patch_labels.shape} do not match a {gh}x{gw} grid")
    grid = patch_labels.reshape(-1, gh, gw)
    return np.repeat(np.repeat(grid, patch, axis=1), patch, axis=2)


def score_video(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return {
        "fg_ari_video": fg_ari(pred, gt, "video"),
        "fg_ari_image": fg_ari(pred, gt, "image"),
        "mbo_video": mbo_from_labels(pred, gt, "video"),
        "mbo_image": mbo_from_labels(pred, gt, "image"),
    }


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metrics_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [
            {k: (int(v) if k == "video_id" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
