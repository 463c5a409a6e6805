"""Masked positive / negative variants of an anchor pair for contrastive training.

Masking the intersection of one modality keeps the pair's information (the
other modality still carries it), so the result is a positive.  Masking the
difference, or the intersection in both modalities, removes information and
gives a negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE

POSITIVE = "positive"
NEGATIVE = "negative"

MASK_INTER_IMAGE = "mask-intersection-image"
MASK_INTER_TEXT = "mask-intersection-text"
MASK_DIFF_IMAGE = "mask-difference-image"
MASK_DIFF_TEXT = "mask-difference-text"
MASK_INTER_BOTH = "mask-intersection-both"

POSITIVE_RECIPES = (MASK_INTER_IMAGE, MASK_INTER_TEXT)
NEGATIVE_RECIPES = (MASK_DIFF_IMAGE, MASK_DIFF_TEXT, MASK_INTER_BOTH)

_MAX_REDRAWS = 64


@dataclass(frozen=True, eq=False)
class ConstructedVariant:
    base_id: str
    image_mask: np.ndarray  # 1 keeps a patch, 0 masks it
    text_mask: np.ndarray
    polarity: str
    recipe: str

    def __post_init__(self):
        expected = POSITIVE if self.recipe in POSITIVE_RECIPES else NEGATIVE
        if self.recipe not in POSITIVE_RECIPES + NEGATIVE_RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")
        if self.polarity != expected:
            raise ValueError(f"recipe {self.recipe} must be {expected}")


def _draw_u(rng: np.random.Generator) -> float:
    return 1.0 - rng.random()  # Uniform(0, 1]


def text_masks(s_v2l, tau_l: float, rng: np.random.Generator, u: float | None = None):
    """(M_L+, M_L-) keep-masks; either is None when its side of tau is empty.

    One masking probability is drawn per mask and applied as an independent
    Bernoulli per token.  The positive keeps at least one token; the negative
    masks at least one.
    """
    s = np.asarray(s_v2l, dtype=DTYPE)
    above = s > tau_l
    below = ~above
    n = s.size

    pos = None
    if above.any():
        for _ in range(_MAX_REDRAWS):
            p = _draw_u(rng) if u is None else u
            drop = above & (rng.random(n) < p)
            if not drop.all():
                break
        else:
            drop = above.copy()
            drop[np.flatnonzero(above)[-1]] = False
        pos = (~drop).astype(DTYPE)

    neg = None
    if below.any():
        for _ in range(_MAX_REDRAWS):
            p = _draw_u(rng) if u is None else u
            drop = below & (rng.random(n) < p)
            if drop.any():
                break
        else:
            drop = np.zeros(n, dtype=bool)
            drop[np.flatnonzero(below)[0]] = True
        neg = (~drop).astype(DTYPE)
    return pos, neg


def random_subset(k: int, rng: np.random.Generator) -> list[int]:
    """Uniformly random non-empty subset of range(k)."""
    while True:
        pick = rng.random(k) < 0.5
        if pick.any():
            return np.flatnonzero(pick).tolist()


def segments_mask(n: int, segments, chosen) -> np.ndarray:
    m = np.ones(n, dtype=DTYPE)
    for k in chosen:
        m[segments[k]] = 0.0
    return m


def image_masks(segments, inter: list[int], diff: list[int], n_patches: int, rng):
    """(M_V+, M_V-): mask a random non-empty subset of one side's segments."""
    pos = segments_mask(n_patches, segments, [inter[i] for i in random_subset(len(inter), rng)]) if inter else None
    neg = segments_mask(n_patches, segments, [diff[i] for i in random_subset(len(diff), rng)]) if diff else None
    return pos, neg


def plan_variants(
    sample_id: str,
    segments,
    inter: list[int],
    diff: list[int],
    s_v2l,
    tau_l: float,
    rng: np.random.Generator,
    constructed_negatives: bool = True,
    positive_mode: str = "intersection",
) -> tuple[list[ConstructedVariant], dict]:
    """One positive (if any recipe is available) plus the available negatives.

    ``positive_mode="random"`` ignores the intersection estimate and masks
    random segments or tokens instead (ablation).
    """
    n_v = sum(len(s) for s in segments)
    n_l = len(s_v2l)
    ones_v, ones_l = np.ones(n_v), np.ones(n_l)
    mv_pos, mv_neg = image_masks(segments, inter, diff, n_v, rng)
    ml_pos, ml_neg = text_masks(s_v2l, tau_l, rng)
    if positive_mode == "random":
        mv_pos = segments_mask(n_v, segments, random_subset(len(segments), rng))
        ml_pos, _ = text_masks(np.ones(n_l), 0.0, rng)
    elif positive_mode != "intersection":
        raise ValueError(f"unknown positive_mode {positive_mode!r}")

    available = {
        MASK_INTER_IMAGE: mv_pos is not None,
        MASK_INTER_TEXT: ml_pos is not None,
        MASK_DIFF_IMAGE: mv_neg is not None,
        MASK_DIFF_TEXT: ml_neg is not None,
        MASK_INTER_BOTH: bool(inter) and bool(np.any(np.asarray(s_v2l) > tau_l)),
    }
    out: list[ConstructedVariant] = []
    pos_choices = [r for r in POSITIVE_RECIPES if available[r]]
    if pos_choices:
        recipe = pos_choices[int(rng.integers(len(pos_choices)))]
        if recipe == MASK_INTER_IMAGE:
            out.append(ConstructedVariant(sample_id, mv_pos, ones_l, POSITIVE, recipe))
        else:
            out.append(ConstructedVariant(sample_id, ones_v, ml_pos, POSITIVE, recipe))
    if constructed_negatives:
        if available[MASK_DIFF_IMAGE]:
            out.append(ConstructedVariant(sample_id, mv_neg, ones_l, NEGATIVE, MASK_DIFF_IMAGE))
        if available[MASK_DIFF_TEXT]:
            out.append(ConstructedVariant(sample_id, ones_v, ml_neg, NEGATIVE, MASK_DIFF_TEXT))
        if available[MASK_INTER_BOTH]:
            # the whole intersection goes in both modalities, otherwise it stays recoverable
            both_v = segments_mask(n_v, segments, inter)
            both_l = (~(np.asarray(s_v2l) > tau_l)).astype(DTYPE)
            if both_v.sum() + both_l.sum() > 0:
                out.append(ConstructedVariant(sample_id, both_v, both_l, NEGATIVE, MASK_INTER_BOTH))
            else:
                available[MASK_INTER_BOTH] = False
    return out, available


@dataclass
class GroupPlan:
    """Candidate rows of one anchor's contrastive group, as indices into an embedding table."""

    anchor: int
    positives: list[int]
    negatives: list[int]
    counts: dict


def build_group(anchor: int, variant_rows: list[tuple[ConstructedVariant, int]], mined_rows: list[int], peer_rows: list[int]) -> GroupPlan | None:
    """D+ is the constructed positive; D- gathers constructed, mined and in-batch negatives.

    Returns None when no positive is available (the anchor sits out this step).
    """
    pos = [r for v, r in variant_rows if v.polarity != NEGATIVE]
    if not pos:
        return None
    cons = [r for v, r in variant_rows if v.polarity == NEGATIVE]
    negs = cons + list(mined_rows) + [r for r in peer_rows if r != anchor]
    counts = {"positive": len(pos), "constructed": len(cons), "mined": len(mined_rows), "in_batch": len(negs) - len(cons) - len(mined_rows)}
    return GroupPlan(anchor, pos, negs, counts)
