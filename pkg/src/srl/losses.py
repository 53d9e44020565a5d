"""Training objectives: ternary ranking contrast, base losses, slot regularisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class TernaryPartition:
    """Anchor-relative split of the flattened T*N patch indices."""

    anchor: tuple[int, int]
    positives: frozenset
    semi_positives: frozenset
    negatives: frozenset


@dataclass(frozen=True)
class StageSchedule:
    reg_end: float = 0.1
    cl_start: float = 0.2
    lambda_reg: float = 0.1
    lambda_cl: float = 0.1

    def __post_init__(self):
        if not 0 < self.reg_end <= self.cl_start < 1:
            raise ValueError(f"stage boundaries must satisfy 0 < {self.reg_end} <= {self.cl_start} < 1")


@dataclass
class LossBreakdown:
    recon: float = 0.0
    slot_contrast: float = 0.0
    cl_dec: float = 0.0
    cl_enc: float = 0.0
    reg: float = 0.0
    total: float = 0.0
    total_tensor: Tensor | None = field(default=None, repr=False)

    def row(self) -> list[float]:
        return [self.recon, self.slot_contrast, self.cl_dec, self.cl_enc, self.reg, self.total]


# ---------------------------------------------------------------------------
# partitions


def _flat(anchor, n):
    t, i = anchor
    return t * n + i


def _to_partition(anchor, p_row, q_row, n_row) -> TernaryPartition:
    return TernaryPartition(
        anchor=tuple(anchor),
        positives=frozenset(np.flatnonzero(p_row).tolist()),
        semi_positives=frozenset(np.flatnonzero(q_row).tolist()),
        negatives=frozenset(np.flatnonzero(n_row).tolist()),
    )


def dec_partition_masks(l_attn: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, ...]:
    """Boolean (P, Q, N) masks [A, T*N] for the deblurring objective.

    P is the anchor alone, Q shares the anchor's attention label, N is the rest.
    """
    flat = np.asarray(l_attn).reshape(-1)
    anchors = np.asarray(anchors)
    a = anchors.shape[0]
    pos = np.zeros((a, flat.size), dtype=bool)
    pos[np.arange(a), anchors] = True
    same = flat[None, :] == flat[anchors][:, None]
    return pos, same & ~pos, ~same


def enc_partition_masks(l_mask: np.ndarray, backbone: np.ndarray, anchors: np.ndarray, k: int) -> tuple[np.ndarray, ...]:
    """Boolean (P, Q, N) masks [A, T*N] for the denoising objective.

    P holds the anchor plus its K most cosine-similar backbone patches over
    the whole clip (lower flattened index wins ties); Q shares the anchor's
    decoder label; N is the rest.
    """
    flat = np.asarray(l_mask).reshape(-1)
    total = flat.size
    if not 1 <= k <= total - 1:
        raise ValueError(f"K={k} out of range [1, {total - 1}]")
    feats = np.asarray(backbone, dtype=np.float64).reshape(total, -1)
    norms = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), ad.EPS)
    unit = feats / norms
    anchors = np.asarray(anchors)
    a = anchors.shape[0]
    # score distinct rows once so duplicate patches tie exactly
    uniq, inv = np.unique(unit, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sim = (uniq[inv[anchors]] @ uniq.T)[:, inv]
    sim[np.arange(a), anchors] = -np.inf
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    pos = np.zeros((a, total), dtype=bool)
    np.put_along_axis(pos, order, True, axis=1)
    pos[np.arange(a), anchors] = True
    same = flat[None, :] == flat[anchors][:, None]
    semi = same & ~pos
    return pos, semi, ~(pos | semi)


def build_dec_partition(anchor, l_attn: np.ndarray) -> TernaryPartition:
    n = np.asarray(l_attn).shape[1]
    p, q, neg = dec_partition_masks(l_attn, np.array([_flat(anchor, n)]))
    return _to_partition(anchor, p[0], q[0], neg[0])


def build_enc_partition(anchor, l_mask: np.ndarray, backbone, k: int) -> TernaryPartition:
    feats = backbone.data if isinstance(backbone, Tensor) else backbone
    n = np.asarray(l_mask).shape[1]
    p, q, neg = enc_partition_masks(l_mask, feats, np.array([_flat(anchor, n)]), k)
    return _to_partition(anchor, p[0], q[0], neg[0])


def _partition_masks(part: TernaryPartition, total: int) -> tuple[np.ndarray, ...]:
    out = []
    for s in (part.positives, part.semi_positives, part.negatives):
        m = np.zeros((1, total), dtype=bool)
        m[0, list(s)] = True
        out.append(m)
    return tuple(out)


# ---------------------------------------------------------------------------
# ranking contrastive loss


def ranking_contrastive_masked(anchors: Tensor, bank: Tensor, pos, semi, neg, tau: float) -> Tensor:
    """Per-anchor two-level ranking loss, returned as a length-A vector.

    ``anchors`` [A, C] and ``bank`` [T*N, C]; masks are [A, T*N].
    First level: positives against Q u N.  Second level: semi-positives
    against N.  A level whose numerator or denominator set is empty
    contributes 0.
    """
    pos, semi, neg = (np.asarray(m, dtype=bool) for m in (pos, semi, neg))
    logits = ad.scale(ad.cosine_matrix(anchors, bank), 1.0 / tau)

    n_pos = pos.sum(axis=1)
    n_semi = semi.sum(axis=1)
    has_qn = (semi | neg).any(axis=1)
    has_n = neg.any(axis=1)
    use1 = (n_pos > 0) & has_qn
    use2 = (n_semi > 0) & has_n

    w_pos = np.where(use1[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0)
    w_semi = np.where(use2[:, None], semi / np.maximum(n_semi, 1)[:, None], 0.0)

    term1 = ad.logsumexp(logits, axis=1, mask=semi | neg) * use1.astype(float) - ad.tsum(logits * w_pos, axis=1)
    term2 = ad.logsumexp(logits, axis=1, mask=neg) * use2.astype(float) - ad.tsum(logits * w_semi, axis=1)
    return term1 + term2


def ranking_contrastive(anchor_vec: Tensor, bank: Tensor, part: TernaryPartition, tau: float) -> Tensor:
    anchor_vec = ad.as_tensor(anchor_vec)
    p, q, n = _partition_masks(part, bank.shape[0])
    per = ranking_contrastive_masked(ad.reshape(anchor_vec, (1, -1)), bank, p, q, n, tau)
    return ad.reshape(per, ())


def default_anchors(t: int, n: int, limit: int = 256, rng: np.random.Generator | None = None) -> np.ndarray:
    """All flattened anchors when T*N <= limit, else a seeded subset of ``limit``."""
    total = t * n
    if total <= limit:
        return np.arange(total)
    if rng is None:
        rng = np.random.default_rng(0)
    return np.sort(rng.choice(total, size=limit, replace=False))


def _flatten_tn(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0] * x.shape[1], x.shape[2]))


def loss_cl_dec(proj, labels, tau: float, anchors: np.ndarray | None = None) -> Tensor:
    z, y = _flatten_tn(proj.z), _flatten_tn(proj.y.detach())
    if anchors is None:
        anchors = np.arange(z.shape[0])
    p, q, n = dec_partition_masks(labels.l_attn, anchors)
    return ad.mean(ranking_contrastive_masked(z[anchors], y, p, q, n, tau))


def loss_cl_enc(proj, backbone, labels, k: int, tau: float, anchors: np.ndarray | None = None) -> Tensor:
    v = _flatten_tn(proj.v)
    if anchors is None:
        anchors = np.arange(v.shape[0])
    feats = backbone.data if isinstance(backbone, Tensor) else np.asarray(backbone)
    p, q, n = enc_partition_masks(labels.l_mask, feats, anchors, k)
    return ad.mean(ranking_contrastive_masked(v[anchors], v, p, q, n, tau))


# ---------------------------------------------------------------------------
# base losses


def loss_recon(decoded: Tensor, target) -> Tensor:
    target = ad.as_tensor(target).detach()
    if decoded.shape != target.shape:
        raise ad.ShapeError(f"loss_recon: decoded {decoded.shape} vs target {target.shape}")
    diff = decoded - target
    return ad.mean(diff * diff)


def loss_slot_contrast(slots: Tensor, tau: float) -> Tensor:
    """InfoNCE between each slot and its successor at the next frame.

    Negatives are the other slots of the next frame.  Averaged over slot
    index and frame pair.
    """
    t, s, _ = slots.shape
    if t < 2:
        raise ValueError(f"slot contrast needs T >= 2 frames, got {t}")
    if s == 1:
        return ad.as_tensor(0.0)
    logits = ad.scale(ad.cosine_matrix(slots[:-1], slots[1:]), 1.0 / tau)  # [T-1, S, S]
    diag = np.broadcast_to(np.eye(s, dtype=bool), logits.shape)
    per = ad.logsumexp(logits, axis=-1) - ad.tsum(logits * diag.astype(float), axis=-1)
    return ad.mean(per)


# ---------------------------------------------------------------------------
# slot regularisation


def _normalize_rows(attn_data: np.ndarray) -> np.ndarray:
    a = attn_data + ad.EPS
    return a / a.sum(axis=-1, keepdims=True)


def kl_to_uniform(attn_data: np.ndarray) -> np.ndarray:
    """KL(normalised row || uniform) for every [.., N] row."""
    p = _normalize_rows(np.asarray(attn_data, dtype=np.float64))
    return (p * np.log(p)).sum(axis=-1) + np.log(p.shape[-1])


def select_penalized_slots(slots, attn, m: int) -> list[int]:
    """Pick ``m`` redundant slots, one per round.

    Each round takes the most cosine-similar unpenalised pair among the
    final-frame slots and penalises whichever of the two has the lower
    mean KL(attention || uniform) over frames.  Ties go to the lower index.
    """
    s_data = slots.data if isinstance(slots, Tensor) else np.asarray(slots)
    a_data = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    s = s_data.shape[1]
    if not 1 <= m <= s - 1:
        raise ValueError(f"M={m} out of range [1, {s - 1}]")
    last = s_data[-1]
    unit = last / np.maximum(np.linalg.norm(last, axis=1, keepdims=True), ad.EPS)
    sim = unit @ unit.T
    spec = kl_to_uniform(a_data).mean(axis=1)
    iu, ju = np.triu_indices(s, k=1)
    alive = np.ones(s, dtype=bool)
    chosen = []
    for _ in range(m):
        ok = alive[iu] & alive[ju]
        cand = np.where(ok, sim[iu, ju], -np.inf)
        best = int(np.argmax(cand))
        i, j = int(iu[best]), int(ju[best])
        low = i if spec[i] <= spec[j] else j
        chosen.append(low)
        alive[low] = False
    return chosen


def loss_reg(attn: Tensor, penalized) -> Tensor:
    penalized = list(penalized)
    if not penalized:
        raise ValueError("loss_reg needs at least one penalised slot")
    rows = attn[np.asarray(penalized)] + ad.EPS  # [M, T, N]
    p = rows / ad.tsum(rows, axis=-1, keepdims=True)
    n = attn.shape[-1]
    kl = ad.tsum(p * ad.log(p), axis=-1) + np.log(n)
    return ad.mean(kl)


# ---------------------------------------------------------------------------
# staged objective


def stage_of(eta: float, schedule: StageSchedule) -> str:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    if eta < schedule.reg_end:
        return "reg"
    if eta < schedule.cl_start:
        return "base"
    return "cl"


def stage_total(recon, slot_contrast, cl_dec, cl_enc, reg, eta: float, schedule: StageSchedule) -> LossBreakdown:
    """Combine components per the three-stage rule.

    Components may be Tensors or floats.  Inactive stage terms are zeroed in
    the breakdown so logs show exactly what contributed.
    """
    stage = stage_of(eta, schedule)
    total = ad.as_tensor(recon) + ad.as_tensor(slot_contrast)
    if stage == "reg":
        total = total + ad.scale(ad.as_tensor(reg), schedule.lambda_reg)
        cl_dec = cl_enc = 0.0
    elif stage == "base":
        reg = cl_dec = cl_enc = 0.0
    else:
        total = total + ad.scale(ad.as_tensor(cl_enc) + ad.as_tensor(cl_dec), schedule.lambda_cl)
        reg = 0.0

    def f(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    return LossBreakdown(
        recon=f(recon), slot_contrast=f(slot_contrast), cl_dec=f(cl_dec), cl_enc=f(cl_enc),
        reg=f(reg), total=f(total), total_tensor=total,
    )
