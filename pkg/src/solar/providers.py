"""Frozen token-level features: fixture loading and a synthetic generator.

The synthetic generator stands in for pretrained backbones.  Every pair is a
*scene*: a few concepts shown in both modalities (the intersection) plus
concepts private to the image or to the text (the difference).  Concepts are
rows of a unit-norm dictionary; image concepts occupy contiguous rectangles
of the patch grid and text concepts occupy contiguous token spans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigError, FixtureError
from .numerics import DTYPE, read_solt, write_solt

VISION = "vision"
LANGUAGE = "language"


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Global (CLS) feature plus per-token local features of one modality."""

    cls: np.ndarray
    locals: np.ndarray
    modality: str
    grid: tuple[int, int] | None = None

    @property
    def n(self) -> int:
        return self.locals.shape[0]

    @property
    def dim(self) -> int:
        return self.locals.shape[1]

    def validate(self, where: str = "") -> None:
        tag = f"{where}: " if where else ""
        if self.modality not in (VISION, LANGUAGE):
            raise FixtureError(f"{tag}unknown modality {self.modality!r}")
        if self.locals.ndim != 2 or self.locals.shape[0] < 1:
            raise FixtureError(f"{tag}locals must be a non-empty n x d matrix, got {self.locals.shape}")
        if self.cls.shape != (self.locals.shape[1],):
            raise FixtureError(
                f"{tag}global feature shape {self.cls.shape} does not match locals {self.locals.shape}"
            )
        if not (np.isfinite(self.cls).all() and np.isfinite(self.locals).all()):
            raise FixtureError(f"{tag}non-finite feature values")
        if self.modality == VISION:
            if self.grid is None or self.grid[0] * self.grid[1] != self.n:
                raise FixtureError(f"{tag}grid {self.grid} does not cover {self.n} patches")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.modality == other.modality
            and tuple(self.grid or ()) == tuple(other.grid or ())
            and np.array_equal(self.cls, other.cls)
            and np.array_equal(self.locals, other.locals)
        )


@dataclass(frozen=True, eq=False)
class PairedSample:
    id: str
    image: FeatureSequence
    text: FeatureSequence
    teacher_image: FeatureSequence
    teacher_text: FeatureSequence
    ground_truth: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self) -> None:
        for name in ("image", "text", "teacher_image", "teacher_text"):
            seq = getattr(self, name)
            if not isinstance(seq, FeatureSequence):
                raise FixtureError(f"sample {self.id}: missing modality {name}")
            seq.validate(f"sample {self.id} {name}")
        if self.image.modality != VISION or self.teacher_image.modality != VISION:
            raise FixtureError(f"sample {self.id}: image features must be vision")
        if self.text.modality != LANGUAGE or self.teacher_text.modality != LANGUAGE:
            raise FixtureError(f"sample {self.id}: text features must be language")
        if self.teacher_image.n != self.image.n or self.teacher_text.n != self.text.n:
            raise FixtureError(f"sample {self.id}: teacher token counts differ from student")
        if self.ground_truth is not None:
            im, tm = self.ground_truth
            if im.shape != (self.image.n,) or tm.shape != (self.text.n,):
                raise FixtureError(f"sample {self.id}: ground-truth mask lengths do not match")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedSample):
            return NotImplemented
        same_gt = (self.ground_truth is None) == (other.ground_truth is None)
        if same_gt and self.ground_truth is not None:
            same_gt = all(np.array_equal(a, b) for a, b in zip(self.ground_truth, other.ground_truth))
        return (
            self.id == other.id
            and same_gt
            and self.image == other.image
            and self.text == other.text
            and self.teacher_image == other.teacher_image
            and self.teacher_text == other.teacher_text
        )


class Dataset(Sequence[PairedSample]):
    """Immutable, validated collection of paired samples with id lookup."""

    def __init__(self, samples: Sequence[PairedSample], validate: bool = True):
        self._samples = tuple(samples)
        self._index = {s.id: i for i, s in enumerate(self._samples)}
        if len(self._index) != len(self._samples):
            raise FixtureError("duplicate sample ids")
        if validate:
            self.validate()

    def validate(self) -> None:
        dims = None
        for s in self._samples:
            s.validate()
            key = (s.image.dim, s.text.dim, s.teacher_image.dim, s.teacher_text.dim)
            if dims is None:
                dims = key
            elif key != dims:
                raise FixtureError(f"sample {s.id}: feature dims {key} differ from dataset dims {dims}")

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self._samples[i], validate=False)
        return self._samples[i]

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[PairedSample]:
        return iter(self._samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self._samples]

    def get(self, sample_id: str) -> PairedSample:
        return self._samples[self._index[sample_id]]

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset([self.get(i) for i in ids], validate=False)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(list(self) + list(other), validate=False)

    @property
    def dims(self) -> dict:
        s = self._samples[0]
        return {
            "image": s.image.dim,
            "text": s.text.dim,
            "teacher_image": s.teacher_image.dim,
            "teacher_text": s.teacher_text.dim,
        }


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    dictionary_size: int = 16
    shared_concepts_per_pair: int = 2
    unique_concepts_per_modality: int = 2
    concept_dim: int = 16
    patch_grid: tuple[int, int] = (8, 8)
    text_length: int = 24
    noise_sigma: float = 0.05
    seed: int = 13
    teacher_dim: int | None = None
    teacher_noise_sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "patch_grid", tuple(self.patch_grid))
        counts = {
            "dictionary_size": self.dictionary_size,
            "concept_dim": self.concept_dim,
            "text_length": self.text_length,
            "patch_grid rows": self.patch_grid[0],
            "patch_grid cols": self.patch_grid[1],
        }
        for name, v in counts.items():
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.shared_concepts_per_pair < 0 or self.unique_concepts_per_modality < 0:
            raise ConfigError("concept counts must be non-negative")
        if self.shared_concepts_per_pair + self.unique_concepts_per_modality < 1:
            raise ConfigError("each modality needs at least one concept")
        if self.noise_sigma < 0 or (self.teacher_noise_sigma or 0) < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.concepts_per_pair > self.dictionary_size:
            raise ConfigError(
                f"{self.concepts_per_pair} distinct concepts per pair exceed dictionary of {self.dictionary_size}"
            )
        per_modality = self.shared_concepts_per_pair + self.unique_concepts_per_modality
        rows, cols = self.patch_grid
        if rows * cols < per_modality:
            raise ConfigError(f"{rows}x{cols} grid cannot hold {per_modality} concept blocks")
        if self.text_length < per_modality:
            raise ConfigError(f"text length {self.text_length} cannot hold {per_modality} spans")

    @property
    def concepts_per_pair(self) -> int:
        return self.shared_concepts_per_pair + 2 * self.unique_concepts_per_modality

    @property
    def t_dim(self) -> int:
        return self.teacher_dim or self.concept_dim

    @property
    def t_noise(self) -> float:
        return self.noise_sigma if self.teacher_noise_sigma is None else self.teacher_noise_sigma

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["patch_grid"] = list(self.patch_grid)
        return d


@dataclass(frozen=True)
class Scene:
    """Concept content of one pair: ordered image blocks and text spans."""

    image_concepts: tuple[int, ...]
    text_concepts: tuple[int, ...]

    @property
    def shared(self) -> frozenset:
        return frozenset(self.image_concepts) & frozenset(self.text_concepts)

    @property
    def concepts(self) -> frozenset:
        return frozenset(self.image_concepts) | frozenset(self.text_concepts)


def _unit_dictionary(rng: np.random.Generator, size: int, dim: int) -> np.ndarray:
    """Orthonormal rows when size <= dim, otherwise random unit vectors."""
    if size <= dim:
        q, r = np.linalg.qr(rng.standard_normal((dim, size)))
        q = q * np.sign(np.diag(r))
        return np.ascontiguousarray(q.T)
    raw = rng.standard_normal((size, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def concept_dictionaries(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Student and teacher dictionaries; fixed for a given seed."""
    rng = np.random.default_rng([cfg.seed, 0xD1C7])
    student = _unit_dictionary(rng, cfg.dictionary_size, cfg.concept_dim)
    teacher = _unit_dictionary(rng, cfg.dictionary_size, cfg.t_dim)
    return student, teacher


def draw_scene(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    k_s, k_u = cfg.shared_concepts_per_pair, cfg.unique_concepts_per_modality
    picked = rng.choice(cfg.dictionary_size, size=k_s + 2 * k_u, replace=False)
    shared, u_img, u_txt = picked[:k_s], picked[k_s : k_s + k_u], picked[k_s + k_u :]
    image = rng.permutation(np.concatenate([shared, u_img]))
    text = rng.permutation(np.concatenate([shared, u_txt]))
    return Scene(tuple(int(c) for c in image), tuple(int(c) for c in text))


def grid_blocks(rows: int, cols: int, k: int, rng: np.random.Generator) -> list[list[int]]:
    """Split the grid into ``k`` contiguous rectangles; patch indices are row-major."""
    if rows * cols < k:
        raise ConfigError(f"{rows}x{cols} grid cannot hold {k} blocks")
    rects = [(0, 0, rows, cols)]
    while len(rects) < k:
        areas = [(r1 - r0) * (c1 - c0) for r0, c0, r1, c1 in rects]
        i = int(np.argmax(areas))
        r0, c0, r1, c1 = rects.pop(i)
        h, w = r1 - r0, c1 - c0
        if h >= w:
            cut = r0 + int(rng.integers(max(1, h // 3), h - max(1, h // 3) + 1)) if h > 2 else r0 + 1
            rects[i:i] = [(r0, c0, cut, c1), (cut, c0, r1, c1)]
        else:
            cut = c0 + int(rng.integers(max(1, w // 3), w - max(1, w // 3) + 1)) if w > 2 else c0 + 1
            rects[i:i] = [(r0, c0, r1, cut), (r0, cut, r1, c1)]
    return [[r * cols + c for r in range(r0, r1) for c in range(c0, c1)] for r0, c0, r1, c1 in rects]


def text_spans(length: int, k: int, rng: np.random.Generator) -> list[list[int]]:
    if length < k:
        raise ConfigError(f"text length {length} cannot hold {k} spans")
    cuts = np.sort(rng.choice(np.arange(1, length), size=k - 1, replace=False)) if k > 1 else []
    bounds = [0, *[int(c) for c in cuts], length]
    return [list(range(bounds[i], bounds[i + 1])) for i in range(k)]


def _sequence(
    assignment: np.ndarray, dictionary: np.ndarray, sigma: float, rng, modality: str, grid=None
) -> FeatureSequence:
    locals_ = dictionary[assignment].copy()
    if sigma > 0:
        locals_ += sigma * rng.standard_normal(locals_.shape)
    mean = locals_.mean(axis=0)
    cls = mean / np.linalg.norm(mean)
    return FeatureSequence(cls=cls, locals=locals_, modality=modality, grid=grid)


def render_scene(
    scene: Scene,
    cfg: SynthConfig,
    rng: np.random.Generator,
    sample_id: str,
    dictionaries: tuple[np.ndarray, np.ndarray] | None = None,
) -> PairedSample:
    student, teacher = dictionaries or concept_dictionaries(cfg)
    rows, cols = cfg.patch_grid
    blocks = grid_blocks(rows, cols, len(scene.image_concepts), rng)
    img_assign = np.empty(rows * cols, dtype=int)
    for concept, block in zip(scene.image_concepts, rng.permutation(len(blocks))):
        img_assign[blocks[block]] = concept
    spans = text_spans(cfg.text_length, len(scene.text_concepts), rng)
    txt_assign = np.empty(cfg.text_length, dtype=int)
    for concept, span in zip(scene.text_concepts, spans):
        txt_assign[span] = concept

    shared = np.array(sorted(scene.shared), dtype=int)
    gt = (np.isin(img_assign, shared).astype(DTYPE), np.isin(txt_assign, shared).astype(DTYPE))
    return PairedSample(
        id=sample_id,
        image=_sequence(img_assign, student, cfg.noise_sigma, rng, VISION, (rows, cols)),
        text=_sequence(txt_assign, student, cfg.noise_sigma, rng, LANGUAGE),
        teacher_image=_sequence(img_assign, teacher, cfg.t_noise, rng, VISION, (rows, cols)),
        teacher_text=_sequence(txt_assign, teacher, cfg.t_noise, rng, LANGUAGE),
        ground_truth=gt,
    )


def synth_generate(cfg: SynthConfig, count: int, start: int = 0, prefix: str = "s") -> Dataset:
    """Generate ``count`` pairs; sample ``i`` depends only on (seed, start + i)."""
    dicts = concept_dictionaries(cfg)
    samples = []
    for i in range(start, start + count):
        rng = np.random.default_rng([cfg.seed, 1, i])
        samples.append(render_scene(draw_scene(cfg, rng), cfg, rng, f"{prefix}{i:06d}", dicts))
    return Dataset(samples, validate=False)


# ---------------------------------------------------------------------------
# synthetic retrieval benchmark


@dataclass(frozen=True)
class BenchmarkTriplet:
    anchor: str
    positive: str
    negative: str
    variant: str | None = None

    def __post_init__(self):
        ids = [self.anchor, self.positive, self.negative] + ([self.variant] if self.variant else [])
        if len(set(ids)) != len(ids):
            raise ValueError(f"triplet ids must be distinct: {ids}")

    def to_dict(self) -> dict:
        d = {"anchor": self.anchor, "positive": self.positive, "negative": self.negative}
        if self.variant is not None:
            d["variant"] = self.variant
        return d


@dataclass
class Benchmark:
    """Triplets plus every sample they (and the distractor pool) reference."""

    triplets: list[BenchmarkTriplet]
    samples: Dataset
    pool_ids: list[str] = field(default_factory=list)

    @property
    def query_ids(self) -> list[str]:
        return [t.anchor for t in self.triplets]

    @property
    def target_ids(self) -> list[str]:
        return [t.positive for t in self.triplets]


def _drop_from(concepts: tuple[int, ...], c: int) -> tuple[int, ...]:
    return tuple(x for x in concepts if x != c)


def positive_scene(scene: Scene, rng: np.random.Generator, p_move: float = 0.5) -> Scene:
    """Same information; optionally one shared concept kept in only one modality."""
    image, text = list(scene.image_concepts), list(scene.text_concepts)
    shared = sorted(scene.shared)
    if shared and rng.random() < p_move:
        c = shared[int(rng.integers(len(shared)))]
        if rng.random() < 0.5 and len(image) > 1:
            image = list(_drop_from(tuple(image), c))
        elif len(text) > 1:
            text = list(_drop_from(tuple(text), c))
    return Scene(tuple(rng.permutation(image).tolist()), tuple(rng.permutation(text).tolist()))


def negative_scene(
    scene: Scene, rng: np.random.Generator, dictionary_size: int, p_delete: float = 0.5
) -> Scene:
    """Differs in one piece of modality-specific content: deleted or replaced."""
    image, text = list(scene.image_concepts), list(scene.text_concepts)
    shared = scene.shared
    u_img = [c for c in image if c not in shared]
    u_txt = [c for c in text if c not in shared]
    options = [("image", c) for c in u_img] + [("text", c) for c in u_txt]
    if not options:
        options = [("image", c) for c in image] + [("text", c) for c in text]
    side, c = options[int(rng.integers(len(options)))]
    target = image if side == "image" else text
    unused = [x for x in range(dictionary_size) if x not in scene.concepts]
    if (rng.random() < p_delete and len(target) > 1) or not unused:
        target.remove(c)
    else:
        target[target.index(c)] = int(unused[int(rng.integers(len(unused)))])
    return Scene(tuple(rng.permutation(image).tolist()), tuple(rng.permutation(text).tolist()))


def synth_benchmark(
    cfg: SynthConfig,
    n_triplets: int = 200,
    n_distractors: int = 5000,
    variant_fraction: float = 0.2,
    p_move: float = 0.5,
    p_delete: float = 0.5,
) -> Benchmark:
    """Anchor/positive/negative triplets, optional text variants, and distractors.

    Uses random streams disjoint from `synth_generate`, so benchmark pairs never
    coincide with training pairs generated from the same config.
    """
    dicts = concept_dictionaries(cfg)
    samples: list[PairedSample] = []
    triplets = []
    for i in range(n_triplets):
        rng = np.random.default_rng([cfg.seed, 2, i])
        scene = draw_scene(cfg, rng)
        anchor = render_scene(scene, cfg, rng, f"a{i:05d}", dicts)
        pos = render_scene(positive_scene(scene, rng, p_move), cfg, rng, f"p{i:05d}", dicts)
        neg = render_scene(
            negative_scene(scene, rng, cfg.dictionary_size, p_delete), cfg, rng, f"n{i:05d}", dicts
        )
        samples += [anchor, pos, neg]
        variant_id = None
        if rng.random() < variant_fraction:
            reshuffled = Scene(scene.image_concepts, tuple(rng.permutation(scene.text_concepts).tolist()))
            redo = render_scene(reshuffled, cfg, rng, f"v{i:05d}", dicts)
            variant = replace(
                redo,
                image=anchor.image,
                teacher_image=anchor.teacher_image,
                ground_truth=(anchor.ground_truth[0], redo.ground_truth[1]),
            )
            samples.append(variant)
            variant_id = variant.id
        triplets.append(BenchmarkTriplet(anchor.id, pos.id, neg.id, variant_id))
    distractors = []
    for j in range(n_distractors):
        rng = np.random.default_rng([cfg.seed, 3, j])
        distractors.append(render_scene(draw_scene(cfg, rng), cfg, rng, f"d{j:06d}", dicts))
    samples += distractors
    pool = [t.positive for t in triplets] + [t.negative for t in triplets] + [d.id for d in distractors]
    return Benchmark(triplets=triplets, samples=Dataset(samples, validate=False), pool_ids=pool)


# ---------------------------------------------------------------------------
# fixture directories

_SEQS = ("image", "text", "teacher_image", "teacher_text")


def save_fixture(dataset: Dataset, path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one SOLT file per tensor."""
    root = Path(path)
    tdir = root / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset:
        entry: dict = {"id": s.id}
        for name in _SEQS:
            seq: FeatureSequence = getattr(s, name)
            cls_f, loc_f = f"{s.id}.{name}.cls.solt", f"{s.id}.{name}.locals.solt"
            write_solt(tdir / cls_f, seq.cls)
            write_solt(tdir / loc_f, seq.locals)
            entry[name] = {
                "modality": seq.modality,
                "cls": f"tensors/{cls_f}",
                "locals": f"tensors/{loc_f}",
                "grid": list(seq.grid) if seq.grid is not None else None,
            }
        if s.ground_truth is not None:
            im_f, tx_f = f"{s.id}.gt.image.solt", f"{s.id}.gt.text.solt"
            write_solt(tdir / im_f, s.ground_truth[0])
            write_solt(tdir / tx_f, s.ground_truth[1])
            entry["ground_truth"] = {"image_mask": f"tensors/{im_f}", "text_mask": f"tensors/{tx_f}"}
        entries.append(entry)
    manifest = {"format": "solar-fixture", "version": 1, "samples": entries}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_fixture(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FixtureError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    samples = []
    for entry in manifest.get("samples", []):
        sid = entry.get("id")
        if sid is None:
            raise FixtureError("manifest entry without id")
        seqs = {}
        for name in _SEQS:
            spec = entry.get(name)
            if spec is None:
                raise FixtureError(f"sample {sid}: missing modality {name}")
            grid = spec.get("grid")
            try:
                seqs[name] = FeatureSequence(
                    cls=read_solt(root / spec["cls"]),
                    locals=read_solt(root / spec["locals"]),
                    modality=spec["modality"],
                    grid=tuple(grid) if grid is not None else None,
                )
            except FixtureError as exc:
                raise FixtureError(f"sample {sid}: {exc}") from None
        gt = None
        if entry.get("ground_truth"):
            g = entry["ground_truth"]
            try:
                gt = (read_solt(root / g["image_mask"]), read_solt(root / g["text_mask"]))
            except FixtureError as exc:
                raise FixtureError(f"sample {sid}: {exc}") from None
        samples.append(PairedSample(id=sid, ground_truth=gt, **seqs))
    return Dataset(samples, validate=True)


def save_benchmark(triplets: Sequence[BenchmarkTriplet], path) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_dict()) + "\n")


def load_benchmark(path) -> list[BenchmarkTriplet]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(BenchmarkTriplet(d["anchor"], d["positive"], d["negative"], d.get("variant")))
    return out
