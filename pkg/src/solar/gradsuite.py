"""Finite-difference checks of every differentiable objective on random small instances."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .losses import ContrastiveGroup, gd_loss, gla_loss, itc_loss, ld_loss, stage2_loss
from .model import ModelConfig, ModelParams, adapt_batch
from .numerics import Parameter, grad_check, no_grad
from .pipeline import MaskState, Stage1Config, stage1_masks, stage1_objective
from .providers import SynthConfig, synth_generate

CHECKS = ("gla_loss", "ld_loss", "gd_loss", "itc_loss", "stage2_loss", "stage1_total")


@dataclass
class SuiteResult:
    errors: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def worst(self) -> dict[str, float]:
        return {k: max(v) for k, v in self.errors.items()}

    def passed(self, tol: float = 1e-4) -> bool:
        return all(max(v) < tol for v in self.errors.values())


def _unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _gla(rng):
    B, nv, nl, d = 3, 4, 5, 4
    ps = [Parameter(rng.standard_normal(s)) for s in ((B, nv, d), (B, d), (B, nl, d), (B, d))]
    # a wide margin keeps the hinge active
    return lambda: gla_loss(*ps, delta=2.5).loss, ps


def _ld(rng):
    S = Parameter(rng.standard_normal((2, 5, 4)))
    T = rng.standard_normal((2, 5, 6))
    return lambda: ld_loss(S, T), [S]


def _gd(rng):
    G = Parameter(rng.standard_normal((4, 5)))
    T = rng.standard_normal((4, 3))
    return lambda: gd_loss(G, T), [G]


def _itc(rng):
    a, b = Parameter(rng.standard_normal((4, 3))), Parameter(rng.standard_normal((4, 3)))
    eta = Parameter(np.array(rng.uniform(0.2, 1.0)))
    return lambda: itc_loss(a.normalize(-1), b.normalize(-1), eta), [a, b, eta]


def _stage2(rng):
    d = 4
    anchors = [Parameter(rng.standard_normal(d)) for _ in range(2)]
    pos = [Parameter(rng.standard_normal((p, d))) for p in (1, 2)]
    neg = [Parameter(rng.standard_normal((q, d))) for q in (3, 2)]
    eta = Parameter(np.array(rng.uniform(0.2, 1.0)))

    def f():
        groups = [ContrastiveGroup(a.normalize(-1), p.normalize(-1), n.normalize(-1)) for a, p, n in zip(anchors, pos, neg)]
        return stage2_loss(groups, eta)

    return f, anchors + pos + neg + [eta]


def _stage1_total(rng, seed):
    cfg = SynthConfig(patch_grid=(2, 3), text_length=5, concept_dim=6, dictionary_size=6,
                      shared_concepts_per_pair=1, unique_concepts_per_modality=1, seed=seed)
    samples = list(synth_generate(cfg, 4))
    params = ModelParams.init(ModelConfig(6, 6, d=4, heads=2, hidden=6, layers=2), seed=seed)
    scfg = Stage1Config(steps=10, delta=2.5, lambdas=tuple(rng.uniform(0.5, 2.0, 3)))
    with no_grad():
        b = adapt_batch(samples, params)
        pools = gla_loss(b.V, b.v_cls, b.L, b.l_cls, scfg.delta, b.v_valid, b.l_valid).pools
        M_V, M_L, _ = stage1_masks(b, pools, 2, scfg, MaskState())
    # masks are piecewise constant in the parameters, so they are pinned for differencing
    f = lambda: stage1_objective(samples, params, 2, scfg, MaskState(), masks=(M_V, M_L))[0].total_tensor
    return f, list(params)


def run_suite(n_instances: int = 20, seed: int = 0, max_coords: int = 24, checks=CHECKS) -> SuiteResult:
    """Largest relative error per objective over ``n_instances`` random instances.

    Each instance probes at most ``max_coords`` randomly chosen coordinates.
    """
    builders = {"gla_loss": _gla, "ld_loss": _ld, "gd_loss": _gd, "itc_loss": _itc, "stage2_loss": _stage2}
    res = SuiteResult()
    t0 = time.perf_counter()
    for name in checks:
        errs = []
        for i in range(n_instances):
            rng = np.random.default_rng([seed, CHECKS.index(name), i])
            if name == "stage1_total":
                f, ps = _stage1_total(rng, seed * 1000 + i)
            else:
                f, ps = builders[name](rng)
            errs.append(grad_check(f, ps, max_coords=max_coords, seed=i))
        res.errors[name] = errs
    res.seconds = time.perf_counter() - t0
    return res
