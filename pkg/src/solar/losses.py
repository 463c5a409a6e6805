"""Training objectives for both stages.

Every loss takes and returns `Tensor`s so gradients reach the model
parameters; teacher quantities are plain arrays and receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DegenerateInputError
from .model import MASKED_LOGIT
from .numerics import DTYPE, Tensor, as_tensor, concat, stack

# a variance below this is treated as zero when deciding whether Pearson is defined
_VAR_FLOOR = 1e-24


def _safe_rows(X: Tensor, valid: np.ndarray) -> Tensor:
    """Replace padded rows by a constant unit vector so they can be normalised."""
    if valid.all():
        return X
    d = X.shape[-1]
    filler = (1.0 - valid)[..., None] * np.full(d, 1.0 / np.sqrt(d))
    return X * valid[..., None] + filler


# ---------------------------------------------------------------------------
# global-to-local alignment


@dataclass
class GLAResult:
    loss: Tensor
    l2v: Tensor
    v2l: Tensor
    # direction -> (positive scores, negative scores), flattened
    pools: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _gla_direction(locals_: Tensor, valid: np.ndarray, partner_global: Tensor, delta: float):
    B = partner_global.shape[0]
    sims = _safe_rows(locals_, valid).normalize(-1) @ partner_global.normalize(-1).T  # [B, n, B]
    eye = np.eye(B, dtype=DTYPE)
    w = valid[:, :, None]
    pos_w = w * eye[:, None, :]
    neg_w = w * (1.0 - eye)[:, None, :]
    mean_pos = (sims * pos_w).sum() * (1.0 / pos_w.sum())
    mean_neg = (sims * neg_w).sum() * (1.0 / neg_w.sum())
    loss = (mean_neg + delta - mean_pos).relu()
    s = sims.data
    pools = (s[pos_w > 0], s[neg_w > 0])
    return loss, pools


def gla_loss(
    V: Tensor, v_cls: Tensor, L: Tensor, l_cls: Tensor, delta: float = 0.1,
    v_valid: np.ndarray | None = None, l_valid: np.ndarray | None = None,
) -> GLAResult:
    """Margin loss between in-pair and cross-pair local-to-global similarities.

    ``V``/``L`` are ``[B, n, d]`` local features, ``v_cls``/``l_cls`` are
    ``[B, d]`` globals.  Scores are pooled over the whole batch before taking
    means.
    """
    B = v_cls.shape[0]
    if B < 2:
        raise DegenerateInputError("GLA needs a batch of at least two pairs")
    v_valid = np.ones(V.shape[:2]) if v_valid is None else v_valid
    l_valid = np.ones(L.shape[:2]) if l_valid is None else l_valid
    l2v, p_l2v = _gla_direction(V, v_valid, l_cls, delta)
    v2l, p_v2l = _gla_direction(L, l_valid, v_cls, delta)
    return GLAResult(loss=l2v + v2l, l2v=l2v, v2l=v2l, pools={"L2V": p_l2v, "V2L": p_v2l})


# ---------------------------------------------------------------------------
# distillation


def _row_pearson(S: Tensor, T: np.ndarray, W: np.ndarray):
    """Pearson correlation of each row of S against T over weights W (0/1)."""
    count = W.sum(-1, keepdims=True)
    count_safe = np.where(count > 0, count, 1.0)
    t_mean = (T * W).sum(-1, keepdims=True) / count_safe
    tc = (T - t_mean) * W
    t_ss = (tc * tc).sum(-1)
    s_mean = (S * W).sum(-1, keepdims=True) * (1.0 / count_safe)
    sc = (S - s_mean) * W
    s_ss = (sc * sc).sum(-1)
    keep = (count[..., 0] >= 2) & (t_ss > _VAR_FLOOR) & (s_ss.data > _VAR_FLOOR)
    keep_f = keep.astype(DTYPE)
    den = (s_ss + (1.0 - keep_f)).sqrt() * np.sqrt(np.where(keep, t_ss, 1.0))
    corr = (sc * tc).sum(-1) / den * keep_f
    return corr, keep


def ld_loss(student, teacher, valid: np.ndarray | None = None) -> Tensor:
    """Local distillation for one modality.

    For every token, its cosine similarities to the other tokens of the same
    sequence are Pearson-correlated between student and teacher; the loss is
    one minus the mean correlation.  Accepts ``[n, d]`` or batched
    ``[B, n, d]`` student features (teacher dims may differ).  Tokens whose
    similarity vector has zero variance are skipped.
    """
    student = as_tensor(student)
    teacher = np.asarray(teacher, dtype=DTYPE)
    if student.ndim == 2:
        student = student.reshape(1, *student.shape)
        teacher = teacher[None]
        valid = None if valid is None else np.asarray(valid)[None]
    B, n, _ = student.shape
    if teacher.shape[:2] != (B, n):
        raise ValueError(f"teacher token layout {teacher.shape[:2]} != student {(B, n)}")
    valid = np.ones((B, n), dtype=DTYPE) if valid is None else np.asarray(valid, dtype=DTYPE)
    if (valid.sum(axis=1) < 3).any():
        raise DegenerateInputError("local distillation needs at least 3 tokens per sequence")

    Sn = _safe_rows(student, valid).normalize(-1)
    S = Sn @ Sn.T
    tn = np.where(valid[..., None] > 0, teacher, 1.0)
    tn = tn / np.linalg.norm(tn, axis=-1, keepdims=True)
    T = tn @ np.swapaxes(tn, -1, -2)
    W = valid[:, :, None] * valid[:, None, :] * (1.0 - np.eye(n))
    corr, keep = _row_pearson(S, T, W)
    per_sample = keep.sum(-1)
    if per_sample.sum() == 0:
        raise DegenerateInputError("every token has a zero-variance similarity vector")
    has = per_sample > 0
    sample_mean = corr.sum(-1) * (1.0 / np.where(has, per_sample, 1))
    return 1.0 - (sample_mean * has.astype(DTYPE)).sum() * (1.0 / has.sum())


def _upper(n: int):
    return np.triu_indices(n, k=1)


def gd_loss(student_globals, teacher_globals) -> Tensor:
    """Global distillation for one modality over a batch of ``B >= 3`` globals."""
    g = as_tensor(student_globals)
    t = np.asarray(teacher_globals, dtype=DTYPE)
    B = g.shape[0]
    if B < 3:
        raise DegenerateInputError("global distillation needs a batch of at least three")
    iu = _upper(B)
    gn = g.normalize(-1)
    s = (gn @ gn.T)[iu]
    tn = t / np.linalg.norm(t, axis=-1, keepdims=True)
    ts = (tn @ tn.T)[iu]
    tc = ts - ts.mean()
    sc = s - s.mean()
    s_ss = (sc * sc).sum()
    t_ss = float(tc @ tc)
    if t_ss <= _VAR_FLOOR or s_ss.item() <= _VAR_FLOOR:
        raise DegenerateInputError("global similarity vector has zero variance")
    corr = (sc * tc).sum() / (s_ss.sqrt() * np.sqrt(t_ss))
    return 1.0 - corr


# ---------------------------------------------------------------------------
# contrastive objectives


def _eta(eta) -> Tensor:
    eta = as_tensor(eta)
    if np.any(eta.data <= 0):
        raise DegenerateInputError("temperature must be positive")
    return eta


def itc_loss(f_V, f_L, eta) -> Tensor:
    """Symmetric InfoNCE over in-batch image/text pairs."""
    f_V, f_L = as_tensor(f_V), as_tensor(f_L)
    eta = _eta(eta)
    B = f_V.shape[0]
    logits = (f_V @ f_L.T) / eta
    diag = (logits * np.eye(B)).sum(-1)
    v2l = (logits.logsumexp(-1) - diag).mean()
    l2v = (logits.T.logsumexp(-1) - diag).mean()
    return (v2l + l2v) * 0.5


@dataclass
class Stage1LossReport:
    itc: float
    gla: float
    gd: float
    ld: float
    total: float
    weights: tuple[float, float, float]
    breakdown: dict[str, float] = field(default_factory=dict)
    total_tensor: Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        d = {"itc": self.itc, "gla": self.gla, "gd": self.gd, "ld": self.ld, "total": self.total}
        d.update(self.breakdown)
        return d


def stage1_total(
    itc: Tensor, gla: Tensor, gd: Tensor, ld: Tensor,
    lambdas: Sequence[float] = (1.0, 1.0, 1.0), breakdown: dict | None = None,
) -> Stage1LossReport:
    l1, l2, l3 = (float(x) for x in lambdas)
    itc, gla, gd, ld = (as_tensor(x) for x in (itc, gla, gd, ld))
    total = itc + gla * l1 + gd * l2 + ld * l3
    return Stage1LossReport(
        itc=itc.item(), gla=gla.item(), gd=gd.item(), ld=ld.item(), total=total.item(),
        weights=(l1, l2, l3), breakdown=dict(breakdown or {}), total_tensor=total,
    )


@dataclass
class ContrastiveGroup:
    anchor: Tensor  # [d]
    positives: Tensor  # [P, d]
    negatives: Tensor  # [Q, d]

    def __post_init__(self):
        if self.positives.shape[0] < 1:
            raise DegenerateInputError("a contrastive group needs at least one positive")
        if self.negatives.shape[0] < 1:
            raise DegenerateInputError("a contrastive group needs at least one negative")


def stage2_loss_packed(anchors, candidates, positive: np.ndarray, valid: np.ndarray, eta) -> Tensor:
    """Multi-positive contrastive loss on padded candidate lists.

    ``anchors`` is ``[N, d]``, ``candidates`` ``[N, C, d]``; ``positive`` and
    ``valid`` are ``[N, C]`` 0/1 arrays (positives must also be valid).
    """
    anchors, candidates = as_tensor(anchors), as_tensor(candidates)
    eta = _eta(eta)
    positive = np.asarray(positive, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if (positive.sum(1) < 1).any():
        raise DegenerateInputError("every group needs at least one positive")
    if ((valid & ~positive).sum(1) < 1).any():
        raise DegenerateInputError("every group needs at least one negative")
    N, C, d = candidates.shape
    sims = (candidates @ anchors.reshape(N, d, 1)).reshape(N, C) / eta
    pos_bias = np.where(positive, 0.0, MASKED_LOGIT)
    all_bias = np.where(valid, 0.0, MASKED_LOGIT)
    per_group = (sims + all_bias).logsumexp(-1) - (sims + pos_bias).logsumexp(-1)
    return per_group.mean()


def stage2_loss(groups: Sequence[ContrastiveGroup], eta) -> Tensor:
    """Mean over groups of -log(sum_pos exp(s/eta) / sum_all exp(s/eta))."""
    C = max(g.positives.shape[0] + g.negatives.shape[0] for g in groups)
    d = groups[0].anchor.shape[-1]
    rows, pos, valid = [], np.zeros((len(groups), C)), np.zeros((len(groups), C))
    for i, g in enumerate(groups):
        p, q = g.positives.shape[0], g.negatives.shape[0]
        parts = [g.positives, g.negatives]
        if p + q < C:
            parts.append(Tensor(np.zeros((C - p - q, d))))
        rows.append(concat(parts, axis=0))
        pos[i, :p] = 1
        valid[i, : p + q] = 1
    anchors = stack([g.anchor for g in groups])
    return stage2_loss_packed(anchors, stack(rows), pos, valid, eta)
