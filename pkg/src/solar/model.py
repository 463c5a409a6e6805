"""Trainable student: modality adapters, the VL-encoder, projection heads.

All forward functions are batched over pairs.  Sequences of different length
are right-padded with zero rows and a validity mask; padded positions are
excluded as attention keys, so they never influence any output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, DegenerateInputError, FixtureError
from .numerics import DTYPE, Parameter, Tensor, concat, layer_norm, read_solt, write_solt
from .providers import PairedSample

# additive attention bias standing in for log(0); exp() of it is exactly 0.0
MASKED_LOGIT = -1e30


@dataclass(frozen=True)
class ModelConfig:
    image_dim: int
    text_dim: int
    d: int = 32
    heads: int = 4
    hidden: int = 64
    layers: int = 3
    init_temperature: float = 0.07
    tie_adapter_init: bool = False  # start the text adapter as a copy of the image adapter

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.image_dim, self.text_dim, self.d, self.hidden, self.layers) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.init_temperature <= 0:
            raise ConfigError("temperature must be positive")


class ModelParams:
    """Ordered, named parameter set of the student model."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._p = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng([seed, 0x30DE1])
        d, hid = config.d, config.hidden
        p: dict[str, Parameter] = {}

        def affine(name, fan_in, fan_out, bias=True):
            p[f"{name}.w"] = Parameter(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), f"{name}.w")
            if bias:
                p[f"{name}.b"] = Parameter(np.zeros(fan_out), f"{name}.b")

        def norm(name):
            p[f"{name}.g"] = Parameter(np.ones(d), f"{name}.g")
            p[f"{name}.b"] = Parameter(np.zeros(d), f"{name}.b")

        for mod, din in (("adapter_v", config.image_dim), ("adapter_l", config.text_dim)):
            affine(f"{mod}.fc1", din, hid)
            affine(f"{mod}.fc2", hid, d)
        if config.tie_adapter_init:
            if config.image_dim != config.text_dim:
                raise ConfigError("tied adapter initialisation needs equal image and text dims")
            for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"):
                p[f"adapter_l.{k}"].data = p[f"adapter_v.{k}"].data.copy()
        for i in range(config.layers):
            pre = f"vl.{i}"
            norm(f"{pre}.ln1")
            for m in ("q", "k", "v", "o"):
                # a key bias only shifts each query's logits uniformly; softmax cancels it
                affine(f"{pre}.attn.{m}", d, d, bias=m != "k")
            norm(f"{pre}.ln2")
            affine(f"{pre}.ffn.fc1", d, hid)
            affine(f"{pre}.ffn.fc2", hid, d)
        p["cls_token"] = Parameter(rng.standard_normal(d) / math.sqrt(d), "cls_token")
        affine("proj_v", d, d, bias=False)
        affine("proj_l", d, d, bias=False)
        p["log_eta"] = Parameter(np.array(math.log(config.init_temperature)), "log_eta")
        return cls(config, p)

    def __getitem__(self, name: str) -> Parameter:
        return self._p[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._p.values())

    def __len__(self) -> int:
        return len(self._p)

    def names(self) -> list[str]:
        return list(self._p)

    def subset(self, prefixes: Sequence[str]) -> list[Parameter]:
        return [p for n, p in self._p.items() if n.startswith(tuple(prefixes))]

    def zero_grad(self) -> None:
        for p in self._p.values():
            p.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Parameter(p.data, n) for n, p in self._p.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._p.items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self._p.values())

    def equals(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self.names()
        )

    @property
    def eta(self) -> Tensor:
        return self._p["log_eta"].exp()


# ---------------------------------------------------------------------------
# checkpoint directories


def save_params(params: ModelParams, path, meta: dict | None = None) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    for name, p in params._p.items():
        write_solt(root / "params" / f"{name}.solt", p.data)
    manifest = {"model": asdict(params.config), "params": params.names()}
    manifest.update(meta or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_params(path) -> tuple[ModelParams, dict]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FixtureError(f"missing checkpoint manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    config = ModelConfig(**manifest["model"])
    params = {n: Parameter(read_solt(root / "params" / f"{n}.solt"), n) for n in manifest["params"]}
    return ModelParams(config, params), manifest


# ---------------------------------------------------------------------------
# forward pieces


def _affine(x: Tensor, params: ModelParams, name: str) -> Tensor:
    out = x @ params[f"{name}.w"]
    b = f"{name}.b"
    return out + params[b] if b in params._p else out


def adapter(x: Tensor, params: ModelParams, modality: str) -> Tensor:
    name = "adapter_v" if modality == "vision" else "adapter_l"
    return _affine(_affine(x, params, f"{name}.fc1").gelu(), params, f"{name}.fc2")


def _pad(rows: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(r.shape[0] for r in rows)
    out = np.zeros((len(rows), n, rows[0].shape[1]), dtype=DTYPE)
    valid = np.zeros((len(rows), n), dtype=DTYPE)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
        valid[i, : r.shape[0]] = 1.0
    return out, valid


@dataclass
class AdaptedBatch:
    """Adapter outputs of a batch; ``*_valid`` mark non-padding tokens."""

    V: Tensor  # [B, nV, d]
    v_cls: Tensor  # [B, d]
    L: Tensor  # [B, nL, d]
    l_cls: Tensor  # [B, d]
    v_valid: np.ndarray
    l_valid: np.ndarray

    @property
    def size(self) -> int:
        return self.v_cls.shape[0]


def adapt_batch(samples: Sequence[PairedSample], params: ModelParams) -> AdaptedBatch:
    cfg = params.config
    for s in samples:
        if s.image.dim != cfg.image_dim or s.text.dim != cfg.text_dim:
            raise DegenerateInputError(
                f"sample {s.id}: feature dims ({s.image.dim}, {s.text.dim}) do not match "
                f"adapter input dims ({cfg.image_dim}, {cfg.text_dim})"
            )
    V, v_valid = _pad([s.image.locals for s in samples])
    L, l_valid = _pad([s.text.locals for s in samples])
    v_cls = np.stack([s.image.cls for s in samples])
    l_cls = np.stack([s.text.cls for s in samples])
    return AdaptedBatch(
        V=adapter(Tensor(V), params, "vision"),
        v_cls=adapter(Tensor(v_cls), params, "vision"),
        L=adapter(Tensor(L), params, "language"),
        l_cls=adapter(Tensor(l_cls), params, "language"),
        v_valid=v_valid,
        l_valid=l_valid,
    )


def adapt(sample: PairedSample, params: ModelParams):
    """Single-pair adapter pass: (V', v_cls, L', l_cls) as Tensors."""
    b = adapt_batch([sample], params)
    return b.V[0], b.v_cls[0], b.L[0], b.l_cls[0]


def key_bias(mask: np.ndarray) -> np.ndarray:
    """Additive attention bias log(m) per key; m == 0 maps to an excluded key."""
    mask = np.asarray(mask, dtype=DTYPE)
    if np.any((mask < 0) | (mask > 1)):
        raise ValueError("mask weights must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        return np.where(mask > 0, np.log(np.where(mask > 0, mask, 1.0)), MASKED_LOGIT)


def _attention(x: Tensor, kv_src: Tensor, bias: np.ndarray, params: ModelParams, pre: str) -> Tensor:
    cfg = params.config
    B, Tq, d = x.shape
    Tk = kv_src.shape[1]
    h, dh = cfg.heads, cfg.d // cfg.heads
    q = _affine(x, params, f"{pre}.q").reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
    k = _affine(kv_src, params, f"{pre}.k").reshape(B, Tk, h, dh).transpose(0, 2, 3, 1)
    v = _affine(kv_src, params, f"{pre}.v").reshape(B, Tk, h, dh).transpose(0, 2, 1, 3)
    logits = (q @ k) * (1.0 / math.sqrt(dh)) + bias[:, None, None, :]
    out = (logits.softmax(-1) @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
    return _affine(out, params, f"{pre}.o")


def vl_encode_batch(tokens: Tensor, mask: np.ndarray | None, params: ModelParams) -> Tensor:
    """CLS output of the VL-encoder for each sequence in the batch.

    ``mask`` holds per-token weights in [0, 1] (padding must be 0); the CLS
    token is appended last and is never masked.
    """
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    B, k, d = tokens.shape
    if mask is None:
        mask = np.ones((B, k), dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != (B, k):
        raise ValueError(f"mask shape {mask.shape} does not match tokens {(B, k)}")
    empty = np.flatnonzero(mask.sum(axis=1) == 0)
    if empty.size:
        raise DegenerateInputError(f"sequence(s) {empty.tolist()} have every token masked")
    bias = np.concatenate([key_bias(mask), np.zeros((B, 1), dtype=DTYPE)], axis=1)

    cls = params["cls_token"].reshape(1, 1, d) * np.ones((B, 1, 1), dtype=DTYPE)
    x = concat([tokens, cls], axis=1)
    n_layers = params.config.layers
    for i in range(n_layers):
        pre = f"vl.{i}"
        last = i == n_layers - 1
        h = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        # the last layer only needs the CLS query
        q_in = h[:, -1:, :] if last else h
        x = (x[:, -1:, :] if last else x) + _attention(q_in, h, bias, params, f"{pre}.attn")
        h2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        x = x + _affine(_affine(h2, params, f"{pre}.ffn.fc1").gelu(), params, f"{pre}.ffn.fc2")
    return x[:, -1, :]


def vl_encode(tokens, mask, params: ModelParams) -> Tensor:
    """Single-sequence form: tokens [k, d], mask [k] or None -> [d]."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    m = None if mask is None else np.asarray(mask, dtype=DTYPE)[None, :]
    return vl_encode_batch(tokens.reshape(1, *tokens.shape), m, params)[0]


def joint_embed_batch(
    batch: AdaptedBatch,
    image_mask: np.ndarray | None = None,
    text_mask: np.ndarray | None = None,
    params: ModelParams | None = None,
) -> Tensor:
    """Unit-norm joint embeddings f from [V'; L'], optionally with hard masks."""
    vm = batch.v_valid if image_mask is None else batch.v_valid * image_mask
    lm = batch.l_valid if text_mask is None else batch.l_valid * text_mask
    tokens = concat([batch.V, batch.L], axis=1)
    return vl_encode_batch(tokens, np.concatenate([vm, lm], axis=1), params).normalize(-1)


def joint_embed(sample: PairedSample, params: ModelParams) -> Tensor:
    return joint_embed_batch(adapt_batch([sample], params), params=params)[0]


def alignment_embeds_batch(
    batch: AdaptedBatch, M_V: np.ndarray | None, M_L: np.ndarray | None, params: ModelParams
) -> tuple[Tensor, Tensor]:
    """Masked per-modality encodings passed through the projection heads."""
    mv = batch.v_valid if M_V is None else batch.v_valid * M_V
    ml = batch.l_valid if M_L is None else batch.l_valid * M_L
    f_V = (vl_encode_batch(batch.V, mv, params) @ params["proj_v.w"]).normalize(-1)
    f_L = (vl_encode_batch(batch.L, ml, params) @ params["proj_l.w"]).normalize(-1)
    return f_V, f_L


def alignment_embeds(sample: PairedSample, M_V, M_L, params: ModelParams) -> tuple[Tensor, Tensor]:
    b = adapt_batch([sample], params)
    mv = None if M_V is None else np.asarray(M_V, dtype=DTYPE)[None, :]
    ml = None if M_L is None else np.asarray(M_L, dtype=DTYPE)[None, :]
    f_V, f_L = alignment_embeds_batch(b, mv, ml, params)
    return f_V[0], f_L[0]


def unmasked_globals_batch(batch: AdaptedBatch, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Per-modality VL-encoder outputs without intersection masking (no projection)."""
    g_V = vl_encode_batch(batch.V, batch.v_valid, params).normalize(-1)
    g_L = vl_encode_batch(batch.L, batch.l_valid, params).normalize(-1)
    return g_V, g_L
