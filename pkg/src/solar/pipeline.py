"""Run configuration, both training stages, corpus embedding and evaluation."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .evaluation import MetricsReport, evaluate_embeddings
from .exceptions import ConfigError, DegenerateInputError, FixtureError, NumericalAbort
from .losses import gd_loss, gla_loss, itc_loss, ld_loss, stage1_total, stage2_loss_packed
from .maskgen import batch_thresholds, evolutionary_mask, hard_mask, rho_at
from .mining import HardNegativeIndex, build_index, sample_negatives
from .model import (
    AdaptedBatch,
    ModelConfig,
    ModelParams,
    adapt_batch,
    alignment_embeds_batch,
    joint_embed_batch,
    load_params,
    save_params,
    unmasked_globals_batch,
)
from .numerics import DTYPE, Tensor, concat, no_grad, pairwise_cosine, read_solt, write_solt
from .providers import (
    Benchmark, Dataset, PairedSample, SynthConfig, load_benchmark, load_fixture, save_benchmark, save_fixture,
    synth_benchmark, synth_generate,
)
from .sample_construction import NEGATIVE, plan_variants
from .segmentation import adaptive_segment, score_segments, split_by_threshold

SEED_ENV = "SOLAR_SEED"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    fixture: str | None = None
    synth: dict = field(default_factory=dict)  # SynthConfig overrides
    n_train: int = 1024
    n_heldout: int = 64

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.synth)


@dataclass
class ModelSection:
    d: int = 32
    heads: int = 4
    hidden: int = 64
    layers: int = 3
    init_temperature: float = 0.07
    tie_adapter_init: bool = False


@dataclass
class Stage1Config:
    batch_size: int = 64
    steps: int = 500
    lr: float = 1e-2
    eta_lr: float = 1e-3
    clip_norm: float | None = 1.0
    delta: float = 0.1
    lambdas: tuple = (1.0, 1.0, 1.0)
    anneal_kind: str = "linear"
    anneal_steps: int | None = None  # None -> half of steps
    checkpoint_every: int = 0

    @property
    def total_anneal(self) -> int:
        return self.anneal_steps if self.anneal_steps is not None else max(1, self.steps // 2)


@dataclass
class Stage2Config:
    batch_size: int = 32
    steps: int = 200
    lr: float = 1e-2
    eta_lr: float = 1e-3
    clip_norm: float | None = 1.0
    use_mined: bool = True
    constructed_negatives: bool = True
    positive_mode: str = "intersection"
    checkpoint_every: int = 0


@dataclass
class SegmentationConfig:
    t_init: float = 0.45
    dt: float = 0.05
    n_iter: int = 5
    r_max: float = 0.87
    k_max: int = 5


@dataclass
class MiningConfig:
    k: int = 10
    n: int = 2


@dataclass
class BenchmarkConfig:
    path: str | None = None
    n_triplets: int = 200
    n_distractors: int = 5000
    variant_fraction: float = 0.2
    bootstrap_iters: int = 10000
    ci_level: float = 0.95


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = (), env: dict | None = None) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            raw = json.loads(p.read_text())
        cfg = cls.from_dict(raw)
        for item in overrides:
            cfg = cfg.override(item)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg.validate()
        return cfg

    def override(self, item: str) -> "RunConfig":
        """Apply one ``dotted.key=value`` override; the value is parsed as JSON when possible."""
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value: Any = json.loads(text)
        except json.JSONDecodeError:
            value = text
        d = self.to_dict()
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        # free-form dicts (synth overrides) accept new keys
        if parts[-1] not in node and not (len(parts) >= 2 and parts[-2] == "synth"):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        if self.data.fixture is not None and not Path(self.data.fixture).exists():
            raise ConfigError(f"fixture path does not exist: {self.data.fixture}")
        if self.benchmark.path is not None and not Path(self.benchmark.path).exists():
            raise ConfigError(f"benchmark path does not exist: {self.benchmark.path}")
        if self.data.fixture is None:
            self.data.synth_config()
        if self.stage1.batch_size < 3:
            raise ConfigError("stage1.batch_size must be >= 3 (global distillation)")
        if self.stage2.batch_size < 2:
            raise ConfigError("stage2.batch_size must be >= 2")
        if self.stage2.positive_mode not in ("intersection", "random"):
            raise ConfigError(f"unknown positive_mode {self.stage2.positive_mode!r}")
        if self.stage1.anneal_kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown anneal_kind {self.stage1.anneal_kind!r}")
        if len(self.stage1.lambdas) != 3:
            raise ConfigError("stage1.lambdas needs three weights")
        for name, lr in (("stage1.lr", self.stage1.lr), ("stage2.lr", self.stage2.lr)):
            if not lr > 0:
                raise ConfigError(f"{name} must be positive")


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name in known else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# data


@dataclass
class RunData:
    train: Dataset
    heldout: Dataset
    benchmark: Benchmark | None = None


def load_data(cfg: RunConfig, with_benchmark: bool = False) -> RunData:
    if cfg.data.fixture is not None:
        ds = load_fixture(cfg.data.fixture)
        n_hold = min(cfg.data.n_heldout, len(ds) // 4)
        train = ds.subset(ds.ids[: len(ds) - n_hold])
        heldout = ds.subset(ds.ids[len(ds) - n_hold :])
        bench = None
    else:
        sc = cfg.data.synth_config()
        train = synth_generate(sc, cfg.data.n_train, prefix="s")
        heldout = synth_generate(sc, cfg.data.n_heldout, start=cfg.data.n_train, prefix="h")
        bench = None
        if with_benchmark and cfg.benchmark.path is None:
            b = cfg.benchmark
            bench = synth_benchmark(sc, b.n_triplets, b.n_distractors, b.variant_fraction)
    if with_benchmark and cfg.benchmark.path is not None:
        bench = load_benchmark_dir(cfg.benchmark.path)
    return RunData(train, heldout, bench)


def save_benchmark_dir(bench: Benchmark, path) -> Path:
    """Fixture of every referenced sample plus ``triplets.jsonl`` and ``pool.json``."""
    root = save_fixture(bench.samples, path)
    save_benchmark(bench.triplets, root / "triplets.jsonl")
    (root / "pool.json").write_text(json.dumps(bench.pool_ids))
    return root


def load_benchmark_dir(path) -> Benchmark:
    root = Path(path)
    for name in ("triplets.jsonl", "pool.json"):
        if not (root / name).exists():
            raise FixtureError(f"benchmark directory lacks {root / name}")
    samples = load_fixture(root)
    bench = Benchmark(load_benchmark(root / "triplets.jsonl"), samples, json.loads((root / "pool.json").read_text()))
    known = set(samples.ids)
    referenced = [i for t in bench.triplets for i in (t.anchor, t.positive, t.negative, t.variant) if i]
    missing = [i for i in referenced + bench.pool_ids if i not in known]
    if missing:
        raise FixtureError(f"benchmark references unknown sample(s): {missing[:5]}")
    return bench


def model_config(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    dims = ds.dims
    m = cfg.model
    return ModelConfig(dims["image"], dims["text"], m.d, m.heads, m.hidden, m.layers, m.init_temperature, m.tie_adapter_init)


def batch_indices(n: int, batch_size: int, seed: int, stage: int, step: int) -> np.ndarray:
    """Batch of distinct sample indices drawn from a stream keyed by (seed, stage, step)."""
    rng = np.random.default_rng([seed, 0xBA7C, stage, step])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


ETA_BOUNDS = (0.01, 1.0)


def grad_norm(params: ModelParams) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))


def sgd_step(params: ModelParams, lr: float, eta_lr: float | None = None, clip: float | None = None) -> float:
    """Fixed-step SGD with optional global-norm clipping; returns the pre-clip norm.

    The log-temperature gets its own step size and is clamped to ETA_BOUNDS.
    """
    norm = grad_norm(params)
    scale = clip / norm if clip and norm > clip else 1.0
    for p in params:
        if p.grad is None:
            continue
        step = eta_lr if (p.name == "log_eta" and eta_lr is not None) else lr
        with np.errstate(over="ignore", invalid="ignore"):  # caller aborts on non-finite params
            p.data -= (step * scale) * p.grad
    if "log_eta" in params.names():
        le = params["log_eta"]
        le.data = np.clip(le.data, np.log(ETA_BOUNDS[0]), np.log(ETA_BOUNDS[1]))
    return norm


class TrainingLog:
    """JSON-lines log; ``path=None`` keeps records in memory only."""

    def __init__(self, path=None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stage 1


def local_global_scores(batch: AdaptedBatch) -> tuple[np.ndarray, np.ndarray]:
    """In-pair cosine scores [B, nV] (patch vs text global) and [B, nL] (token vs image global)."""

    def cos(X, g):
        Xn = X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-300)
        gn = g / np.linalg.norm(g, axis=-1, keepdims=True)
        return np.einsum("bnd,bd->bn", Xn, gn)

    return cos(batch.V.data, batch.l_cls.data), cos(batch.L.data, batch.v_cls.data)


def hard_masks(scores: np.ndarray, valid: np.ndarray, tau: float | None) -> np.ndarray:
    """Per-row hard masks over valid positions; ``tau=None`` keeps every token."""
    out = np.zeros_like(scores)
    for i in range(scores.shape[0]):
        n = int(valid[i].sum())
        out[i, :n] = 1.0 if tau is None else hard_mask(scores[i, :n], tau)
    return out


@dataclass
class MaskState:
    """Thresholds carried across steps for batches whose QDA fit is refused."""

    tau_v: float | None = None
    tau_l: float | None = None


def stage1_masks(batch: AdaptedBatch, pools, step: int, scfg: Stage1Config, state: MaskState):
    """Evolutionary masks for one batch plus the log fields describing them."""
    th = batch_thresholds(pools)
    rho = rho_at(step, scfg.total_anneal, scfg.anneal_kind)
    annealing = step < scfg.total_anneal
    fallback = {}
    taus = {}
    for key, fitted in (("tau_v", th.tau_v), ("tau_l", th.tau_l)):
        if fitted is not None:
            setattr(state, key, fitted)
            taus[key] = fitted
        elif annealing:
            taus[key] = None
            fallback[key] = "all-ones"
        else:
            taus[key] = getattr(state, key)
            fallback[key] = "last-good" if taus[key] is not None else "all-ones"
    s_l2v, s_v2l = local_global_scores(batch)
    hv = hard_masks(s_l2v, batch.v_valid, taus["tau_v"])
    hl = hard_masks(s_v2l, batch.l_valid, taus["tau_l"])
    # a refused direction behaves as rho = 1 for this batch
    rho_v = 1.0 if taus["tau_v"] is None else rho
    rho_l = 1.0 if taus["tau_l"] is None else rho
    M_V = evolutionary_mask(hv, rho_v) * batch.v_valid
    M_L = evolutionary_mask(hl, rho_l) * batch.l_valid
    info = {
        "rho": rho,
        "tau_v": taus["tau_v"],
        "tau_l": taus["tau_l"],
        "gaussians": th.stats,
        "qda_errors": th.errors,
        "fallback": fallback,
    }
    return M_V, M_L, info


def stage1_objective(
    samples: Sequence[PairedSample], params: ModelParams, step: int, scfg: Stage1Config, state: MaskState,
    masks: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Combined Stage-1 objective for one batch; ``masks`` pins (M_V, M_L) instead of deriving them."""
    batch = adapt_batch(samples, params)
    gla = gla_loss(batch.V, batch.v_cls, batch.L, batch.l_cls, scfg.delta, batch.v_valid, batch.l_valid)
    if masks is None:
        M_V, M_L, info = stage1_masks(batch, gla.pools, step, scfg, state)
    else:
        (M_V, M_L), info = masks, {"pinned_masks": True}
    f_V, f_L = alignment_embeds_batch(batch, M_V, M_L, params)
    itc = itc_loss(f_V, f_L, params.eta)
    g_V, g_L = unmasked_globals_batch(batch, params)
    gd_v = gd_loss(g_V, np.stack([s.teacher_image.cls for s in samples]))
    gd_l = gd_loss(g_L, np.stack([s.teacher_text.cls for s in samples]))
    tV, _ = _pad_teacher([s.teacher_image.locals for s in samples])
    tL, _ = _pad_teacher([s.teacher_text.locals for s in samples])
    ld_v = ld_loss(batch.V, tV, batch.v_valid)
    ld_l = ld_loss(batch.L, tL, batch.l_valid)
    breakdown = {
        "gla_l2v": gla.l2v.item(), "gla_v2l": gla.v2l.item(),
        "gd_vision": gd_v.item(), "gd_language": gd_l.item(),
        "ld_vision": ld_v.item(), "ld_language": ld_l.item(),
    }
    report = stage1_total(itc, gla.loss, gd_v + gd_l, ld_v + ld_l, scfg.lambdas, breakdown)
    return report, info


def _pad_teacher(rows):
    n = max(r.shape[0] for r in rows)
    out = np.zeros((len(rows), n, rows[0].shape[1]), dtype=DTYPE)
    valid = np.zeros((len(rows), n), dtype=DTYPE)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
        valid[i, : r.shape[0]] = 1.0
    return out, valid


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    checkpoint: Path | None
    aborted: bool = False


def _checkpoint(params: ModelParams, out_dir: Path | None, name: str, meta: dict) -> Path | None:
    if out_dir is None:
        return None
    return save_params(params, out_dir / name, meta)


def _finite_or_abort(value: float, params: ModelParams, last_good: ModelParams, out_dir, stage: str, step: int):
    if np.isfinite(value) and params.all_finite():
        return
    path = _checkpoint(last_good, out_dir, f"{stage}-last-good", {"stage": stage, "step": step, "aborted": True})
    raise NumericalAbort(f"{stage}: non-finite loss at step {step}; last good parameters kept at {path}")


def train_stage1(
    cfg: RunConfig,
    data: RunData | None = None,
    out_dir=None,
    params: ModelParams | None = None,
    callback: Callable[[int, ModelParams], None] | None = None,
    start_step: int = 0,
    state: MaskState | None = None,
) -> TrainResult:
    """Stage-1 mask-learning loop; returns the trained parameters and the step log.

    Batches are keyed by (seed, step), so passing the parameters and mask
    state saved at ``start_step`` continues a run exactly.
    """
    data = data or load_data(cfg)
    ds = data.train
    out = Path(out_dir) if out_dir is not None else None
    params = params or ModelParams.init(model_config(cfg, ds), cfg.seed)
    scfg = cfg.stage1
    log = TrainingLog(out / "stage1_log.jsonl" if out else None, append=start_step > 0)
    state = state or MaskState()
    last_good = params.copy()
    for step in range(start_step, scfg.steps):
        idx = batch_indices(len(ds), scfg.batch_size, cfg.seed, 1, step)
        samples = [ds[int(i)] for i in idx]
        params.zero_grad()
        with np.errstate(all="ignore"):
            report, info = stage1_objective(samples, params, step, scfg, state)
            _finite_or_abort(report.total, params, last_good, out, "stage1", step)
            report.total_tensor.backward()
            grads_ok = all(np.isfinite(p.grad).all() for p in params if p.grad is not None)
        if not grads_ok:
            _finite_or_abort(float("nan"), params, last_good, out, "stage1", step)
        last_good = params.copy()
        gnorm = sgd_step(params, scfg.lr, scfg.eta_lr, scfg.clip_norm)
        _finite_or_abort(report.total, params, last_good, out, "stage1", step)
        log.write({"stage": 1, "step": step, **report.as_dict(), "weights": list(report.weights),
                   "eta": float(params.eta.item()), "grad_norm": gnorm, **info})
        if scfg.checkpoint_every and (step + 1) % scfg.checkpoint_every == 0 and step + 1 < scfg.steps:
            _checkpoint(params, out, f"stage1-step{step + 1}", {"stage": 1, "step": step + 1, "mask_state": asdict(state)})
        if callback is not None:
            callback(step, params)
    ckpt = _checkpoint(
        params, out, "stage1", {"stage": 1, "step": scfg.steps, "mask_state": asdict(state), "config": cfg.to_dict()}
    )
    return TrainResult(params, log.records, ckpt)


def resume_stage1(cfg: RunConfig, checkpoint, data: RunData | None = None, out_dir=None) -> TrainResult:
    """Continue Stage 1 from an intermediate checkpoint written with ``checkpoint_every``."""
    params, meta = load_params(checkpoint)
    if meta.get("stage") != 1:
        raise ConfigError(f"{checkpoint} is not a Stage-1 checkpoint")
    state = MaskState(**meta.get("mask_state", {}))
    return train_stage1(cfg, data, out_dir, params, start_step=int(meta["step"]), state=state)


# ---------------------------------------------------------------------------
# mask quality


def predicted_masks(samples: Sequence[PairedSample], params: ModelParams, delta: float = 0.1):
    """Hard masks for a batch from its own pooled QDA thresholds (per-pair lists)."""
    with no_grad():
        batch = adapt_batch(samples, params)
        gla = gla_loss(batch.V, batch.v_cls, batch.L, batch.l_cls, delta, batch.v_valid, batch.l_valid)
    th = batch_thresholds(gla.pools)
    s_l2v, s_v2l = local_global_scores(batch)
    hv = hard_masks(s_l2v, batch.v_valid, th.tau_v)
    hl = hard_masks(s_v2l, batch.l_valid, th.tau_l)
    out = []
    for i, s in enumerate(samples):
        out.append((hv[i, : s.image.n], hl[i, : s.text.n]))
    return out, th


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = float((pred * truth).sum())
    fp = float((pred * (1 - truth)).sum())
    fn = float(((1 - pred) * truth).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def mask_f1(samples: Sequence[PairedSample], params: ModelParams, delta: float = 0.1) -> dict:
    """Micro F1 of predicted hard masks against ground truth, per modality and pooled."""
    masks, th = predicted_masks(samples, params, delta)
    pv = np.concatenate([m[0] for m in masks])
    pl = np.concatenate([m[1] for m in masks])
    tv = np.concatenate([s.ground_truth[0] for s in samples])
    tl = np.concatenate([s.ground_truth[1] for s in samples])
    return {
        "image": f1_score(pv, tv),
        "text": f1_score(pl, tl),
        "all": f1_score(np.concatenate([pv, pl]), np.concatenate([tv, tl])),
        "tau_v": th.tau_v,
        "tau_l": th.tau_l,
    }


# ---------------------------------------------------------------------------
# frozen stage-1 features


@dataclass
class FrozenFeatures:
    """Adapter outputs of the frozen Stage-1 model for a dataset, as plain arrays."""

    V: np.ndarray
    v_cls: np.ndarray
    L: np.ndarray
    l_cls: np.ndarray
    v_valid: np.ndarray
    l_valid: np.ndarray

    def batch(self, idx) -> AdaptedBatch:
        idx = np.asarray(idx)
        return AdaptedBatch(
            Tensor(self.V[idx]), Tensor(self.v_cls[idx]), Tensor(self.L[idx]), Tensor(self.l_cls[idx]),
            self.v_valid[idx], self.l_valid[idx],
        )


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def frozen_features(params: ModelParams, ds: Dataset, chunk: int = 256) -> FrozenFeatures:
    parts = []
    with no_grad():
        for idx in _chunks(len(ds), chunk):
            parts.append(adapt_batch([ds[int(i)] for i in idx], params))
    nv = max(p.V.shape[1] for p in parts)
    nl = max(p.L.shape[1] for p in parts)

    def cat(get, width=None):
        arrs = [get(p) for p in parts]
        if width is not None:
            arrs = [np.pad(a, [(0, 0), (0, width - a.shape[1])] + [(0, 0)] * (a.ndim - 2)) for a in arrs]
        return np.concatenate(arrs)

    return FrozenFeatures(
        V=cat(lambda p: p.V.data, nv), v_cls=cat(lambda p: p.v_cls.data),
        L=cat(lambda p: p.L.data, nl), l_cls=cat(lambda p: p.l_cls.data),
        v_valid=cat(lambda p: p.v_valid, nv), l_valid=cat(lambda p: p.l_valid, nl),
    )


def batch_taus(batch: AdaptedBatch, delta: float, state: MaskState | None = None):
    """Per-batch QDA thresholds from the batch's GLA pools; refused fits reuse ``state``."""
    with no_grad():
        gla = gla_loss(batch.V, batch.v_cls, batch.L, batch.l_cls, delta, batch.v_valid, batch.l_valid)
    th = batch_thresholds(gla.pools)
    tau_v, tau_l = th.tau_v, th.tau_l
    if state is not None:
        tau_v = state.tau_v if tau_v is None else tau_v
        tau_l = state.tau_l if tau_l is None else tau_l
        state.tau_v, state.tau_l = tau_v, tau_l
    return tau_v, tau_l, th


# ---------------------------------------------------------------------------
# mining


def mining_spaces(params: ModelParams, ds: Dataset, delta: float = 0.1, chunk: int = 64) -> dict:
    """Feature spaces for hard-negative retrieval: teacher globals plus Stage-1 embeddings."""
    f_joint, f_V, f_L = [], [], []
    state = MaskState()
    with no_grad():
        for idx in _chunks(len(ds), chunk):
            samples = [ds[int(i)] for i in idx]
            batch = adapt_batch(samples, params)
            f_joint.append(joint_embed_batch(batch, params=params).data)
            if len(samples) >= 2:
                tau_v, tau_l, _ = batch_taus(batch, delta, state)
            else:
                tau_v, tau_l = state.tau_v, state.tau_l
            s_l2v, s_v2l = local_global_scores(batch)
            mv = hard_masks(s_l2v, batch.v_valid, tau_v)
            ml = hard_masks(s_v2l, batch.l_valid, tau_l)
            a, b = alignment_embeds_batch(batch, mv, ml, params)
            f_V.append(a.data)
            f_L.append(b.data)
    f_V, f_L = np.concatenate(f_V), np.concatenate(f_L)
    return {
        "teacher_text": np.stack([s.teacher_text.cls for s in ds]),
        "teacher_image": np.stack([s.teacher_image.cls for s in ds]),
        "stage1_joint": np.concatenate(f_joint),
        "stage1_t2i": (f_L, f_V),
        "stage1_i2t": (f_V, f_L),
        "stage1_t2t": f_L,
        "stage1_i2i": f_V,
    }


def mine(cfg: RunConfig, params: ModelParams, ds: Dataset, out_dir=None) -> HardNegativeIndex:
    index = build_index(ds.ids, mining_spaces(params, ds, cfg.stage1.delta), cfg.mining.k)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        index.save(Path(out_dir) / "hard_negatives.jsonl")
    return index


# ---------------------------------------------------------------------------
# stage 2


class SegmentCache:
    """Adaptive segmentation of each training image, computed once from frozen features."""

    def __init__(self, frozen: FrozenFeatures, seg: SegmentationConfig):
        self.frozen = frozen
        self.seg = seg
        self._cache: dict[int, Any] = {}

    def __call__(self, i: int):
        if i not in self._cache:
            n = int(self.frozen.v_valid[i].sum())
            s = self.seg
            self._cache[i] = adaptive_segment(self.frozen.V[i, :n], s.t_init, s.dt, s.n_iter, s.r_max, s.k_max)
        return self._cache[i]


def _anchor_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5A2, step, index])


STAGE2_PREFIXES = ("adapter_v", "adapter_l", "vl.", "cls_token", "log_eta")


def stage2_objective(
    cfg: RunConfig,
    ds: Dataset,
    idx: np.ndarray,
    params: ModelParams,
    frozen: FrozenFeatures,
    segments: SegmentCache,
    index: HardNegativeIndex | None,
    step: int,
    state: MaskState,
):
    from .sample_construction import build_group

    s2 = cfg.stage2
    tau_v, tau_l, th = batch_taus(frozen.batch(idx), cfg.stage1.delta, state)
    fb = frozen.batch(idx)
    s_l2v, s_v2l = local_global_scores(fb)

    rows: list[tuple[PairedSample, np.ndarray | None, np.ndarray | None]] = [(ds[int(i)], None, None) for i in idx]
    anchors = list(range(len(idx)))
    plans = []
    recipe_counts: dict[str, int] = {}
    skipped = []
    for a, i in enumerate(idx):
        i = int(i)
        sample = ds[i]
        rng = _anchor_rng(cfg.seed, step, i)
        n_v, n_l = sample.image.n, sample.text.n
        seg = segments(i)
        variant_rows = []
        if tau_v is not None and tau_l is not None:
            score_segments(seg, s_l2v[a, :n_v])
            inter, diff = split_by_threshold(seg, tau_v)
            variants, available = plan_variants(
                sample.id, seg.segments, inter, diff, s_v2l[a, :n_l], tau_l, rng,
                constructed_negatives=s2.constructed_negatives, positive_mode=s2.positive_mode,
            )
            for k, ok in available.items():
                recipe_counts[k] = recipe_counts.get(k, 0) + int(ok)
            for v in variants:
                variant_rows.append((v, len(rows)))
                rows.append((sample, v.image_mask, v.text_mask))
        mined_rows = []
        if s2.use_mined and index is not None:
            for nid in sample_negatives(index, sample.id, cfg.mining.n, rng):
                mined_rows.append(len(rows))
                rows.append((ds.get(nid), None, None))
        plan = build_group(a, variant_rows, mined_rows, anchors)
        if plan is None:
            skipped.append(sample.id)
        else:
            plans.append(plan)
    if not plans:
        raise DegenerateInputError(f"stage 2 step {step}: no anchor has a constructed positive")

    batch = adapt_batch([r[0] for r in rows], params)
    nv, nl = batch.v_valid.shape[1], batch.l_valid.shape[1]
    mv = np.ones((len(rows), nv))
    ml = np.ones((len(rows), nl))
    for r, (_, vm, lm) in enumerate(rows):
        if vm is not None:
            mv[r, : len(vm)] = vm
        if lm is not None:
            ml[r, : len(lm)] = lm
    f = joint_embed_batch(batch, mv, ml, params)

    C = max(len(p.positives) + len(p.negatives) for p in plans)
    cand = np.zeros((len(plans), C), dtype=int)
    positive = np.zeros((len(plans), C))
    valid = np.zeros((len(plans), C))
    for g, p in enumerate(plans):
        members = p.positives + p.negatives
        cand[g, : len(members)] = members
        positive[g, : len(p.positives)] = 1
        valid[g, : len(members)] = 1
    loss = stage2_loss_packed(f[np.array([p.anchor for p in plans])], f[cand], positive, valid, params.eta)
    info = {
        "tau_v": tau_v, "tau_l": tau_l, "qda_errors": th.errors,
        "groups": len(plans), "skipped": skipped, "recipes_available": recipe_counts,
        "embedded_rows": len(rows),
    }
    return loss, info


def train_stage2(
    cfg: RunConfig,
    stage1_params: ModelParams,
    data: RunData | None = None,
    index: HardNegativeIndex | None = None,
    out_dir=None,
    callback: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Stage-2 contrastive training on constructed and mined samples, starting from Stage 1."""
    data = data or load_data(cfg)
    ds = data.train
    out = Path(out_dir) if out_dir is not None else None
    s2 = cfg.stage2
    if s2.use_mined and index is None:
        index = mine(cfg, stage1_params, ds, out)
    frozen = frozen_features(stage1_params, ds)
    segments = SegmentCache(frozen, cfg.segmentation)
    params = stage1_params.copy()
    trainable = params.subset(STAGE2_PREFIXES)
    trainable_names = {p.name for p in trainable}
    log = TrainingLog(out / "stage2_log.jsonl" if out else None)
    state = MaskState()
    last_good = params.copy()
    for step in range(s2.steps):
        idx = batch_indices(len(ds), s2.batch_size, cfg.seed, 2, step)
        params.zero_grad()
        with np.errstate(all="ignore"):
            loss, info = stage2_objective(cfg, ds, idx, params, frozen, segments, index, step, state)
            _finite_or_abort(loss.item(), params, last_good, out, "stage2", step)
            loss.backward()
        for p in params:
            if p.name not in trainable_names:
                p.grad = None
        if not all(np.isfinite(p.grad).all() for p in trainable if p.grad is not None):
            _finite_or_abort(float("nan"), params, last_good, out, "stage2", step)
        last_good = params.copy()
        gnorm = sgd_step(params, s2.lr, s2.eta_lr, s2.clip_norm)
        _finite_or_abort(loss.item(), params, last_good, out, "stage2", step)
        log.write({"stage": 2, "step": step, "loss": loss.item(), "eta": float(params.eta.item()),
                   "grad_norm": gnorm, **info})
        if s2.checkpoint_every and (step + 1) % s2.checkpoint_every == 0 and step + 1 < s2.steps:
            _checkpoint(params, out, f"stage2-step{step + 1}", {"stage": 2, "step": step + 1})
        if callback is not None:
            callback(step, params)
    ckpt = _checkpoint(params, out, "stage2", {"stage": 2, "step": s2.steps, "config": cfg.to_dict()})
    return TrainResult(params, log.records, ckpt)


# ---------------------------------------------------------------------------
# embedding and evaluation


def embed_samples(params: ModelParams, samples: Sequence[PairedSample], chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for idx in _chunks(len(samples), chunk):
            batch = adapt_batch([samples[int(i)] for i in idx], params)
            out.append(joint_embed_batch(batch, params=params).data)
    return np.concatenate(out) if out else np.zeros((0, params.config.d))


def embed_corpus(params: ModelParams, ds: Dataset, out_path=None) -> tuple[list[str], np.ndarray]:
    """Joint embedding of every sample; optionally written as ids.json + embeddings.solt."""
    E = embed_samples(params, list(ds))
    if out_path is not None:
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ids.json").write_text(json.dumps(ds.ids))
        write_solt(out / "embeddings.solt", E)
    return ds.ids, E


def load_embeddings(path) -> dict[str, np.ndarray]:
    p = Path(path)
    ids = json.loads((p / "ids.json").read_text())
    E = read_solt(p / "embeddings.solt")
    return dict(zip(ids, E))


def evaluate(cfg: RunConfig, params: ModelParams, bench: Benchmark, out_path=None, name: str = "model") -> tuple[MetricsReport, np.ndarray]:
    ids = list(bench.samples.ids)
    E = embed_samples(params, list(bench.samples))
    embeds = dict(zip(ids, E))
    b = cfg.benchmark
    report, ind = evaluate_embeddings(embeds, bench.triplets, bench.pool_ids, b.bootstrap_iters, b.ci_level, cfg.seed)
    if out_path is not None:
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{name}.json").write_text(report.to_json())
        (out / f"report_{name}.txt").write_text(report.to_table(name) + "\n")
    return report, ind


@dataclass
class PipelineResult:
    stage1: TrainResult
    stage2: TrainResult
    index: HardNegativeIndex | None
    reports: dict[str, MetricsReport]
    mask_f1: dict


def run_pipeline(cfg: RunConfig, out_dir=None, stage1: TrainResult | None = None) -> PipelineResult:
    """synth -> stage 1 -> mine -> stage 2 -> eval, for both checkpoints."""
    data = load_data(cfg, with_benchmark=True)
    if data.benchmark is None:
        raise ConfigError("a fixture-backed run needs benchmark.path")
    out = Path(out_dir) if out_dir is not None else None
    s1 = stage1 or train_stage1(cfg, data, out)
    f1 = mask_f1(list(data.heldout), s1.params, cfg.stage1.delta)
    index = mine(cfg, s1.params, data.train, out) if cfg.stage2.use_mined else None
    s2 = train_stage2(cfg, s1.params, data, index, out)
    reports = {
        "stage1": evaluate(cfg, s1.params, data.benchmark, out, "stage1")[0],
        "stage2": evaluate(cfg, s2.params, data.benchmark, out, "stage2")[0],
    }
    return PipelineResult(s1, s2, index, reports, f1)
