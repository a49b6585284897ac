"""Synthetic image/sound feature streams with VA, EXPR, AU and MTL labels.

Each sample is driven by a latent vector ``z``. Labels are fixed functions of
``z`` and the features are noisy linear projections of it, so every task can
be learned from the features without being trivially separable.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataError, HeaderError, ParameterError, TruncatedError, VersionError
from .model import AU_COUNT, EXPR_CLASSES
from .tasks import AU, EXPR, MTL, SOURCE_TASKS, TASKS, VA, Labels

SPLITS = ("train", "val")
MAGIC = b"MTLD"
FORMAT_VERSION = 1

# bits of the per-record label mask byte
_HAS_VA, _HAS_EXPR, _HAS_AU, _LABELED = 1, 2, 4, 8

# tanh input scale for valence/arousal; keeps the labels in tanh's near-linear range
VA_SCALE = 0.5


@dataclass
class DatasetSpec:
    train_va: int = 2000
    train_expr: int = 2000
    train_au: int = 2000
    train_mtl: int = 2000
    val_va: int = 500
    val_expr: int = 500
    val_au: int = 500
    val_mtl: int = 500
    d_z: int = 16
    noise: float = 0.1
    seed: int = 0
    n_img: int = 6
    d_img: int = 512
    d_snd: int = 1000
    withhold: float = 0.0  # fraction of non-MTL training labels withheld
    keep_latent: bool = False

    def __post_init__(self):
        for split in SPLITS:
            for task in TASKS:
                if self.count(split, task) < 0:
                    raise ParameterError(f"{split}_{task.lower()} must be non-negative")
        if self.d_z < 1 or self.n_img < 1 or self.d_img < 1 or self.d_snd < 1:
            raise ParameterError("dimensions must be positive")
        if self.noise < 0:
            raise ParameterError(f"noise must be non-negative, got {self.noise}")
        if not 0.0 <= self.withhold < 1.0:
            raise ParameterError(f"withhold must lie in [0, 1), got {self.withhold}")

    def count(self, split: str, task: str) -> int:
        return int(getattr(self, f"{split}_{task.lower()}"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Sample:
    task: str
    img_seq: np.ndarray  # n_img x d_img
    snd: np.ndarray  # d_snd
    labels: dict  # task -> label value, only for annotated groups


@dataclass
class Batch:
    task: str
    img: np.ndarray  # N x n_img x d_img
    snd: np.ndarray  # N x d_snd
    labels: Labels
    labeled: np.ndarray  # N booleans

    def __len__(self) -> int:
        return self.img.shape[0]

    @property
    def fully_labeled(self) -> bool:
        return bool(self.labeled.all())


@dataclass
class TaskPart:
    """All samples of one task within one split, stored column-wise."""

    task: str
    img: np.ndarray
    snd: np.ndarray
    va: Optional[np.ndarray] = None
    expr: Optional[np.ndarray] = None
    au: Optional[np.ndarray] = None
    labeled: np.ndarray = field(default=None)
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.labeled is None:
            self.labeled = np.ones(self.img.shape[0], dtype=bool)

    def __len__(self) -> int:
        return self.img.shape[0]

    def labels(self, rows=slice(None)) -> Labels:
        return Labels(
            va=None if self.va is None else self.va[rows],
            expr=None if self.expr is None else self.expr[rows],
            au=None if self.au is None else self.au[rows],
        )

    def batch(self, rows) -> Batch:
        return Batch(self.task, self.img[rows], self.snd[rows], self.labels(rows), self.labeled[rows])

    def select(self, rows) -> "TaskPart":
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return TaskPart(self.task, self.img[rows], self.snd[rows], pick(self.va), pick(self.expr),
                        pick(self.au), self.labeled[rows], pick(self.z))

    def arrays(self) -> list:
        return [self.img, self.snd, self.va, self.expr, self.au, self.labeled, self.z]


@dataclass
class Dataset:
    spec: DatasetSpec
    parts: dict  # (split, task) -> TaskPart

    def part(self, split: str, task: str) -> TaskPart:
        return self.parts[(split, task)]

    def counts(self) -> dict:
        return {f"{s}/{t}": len(self.parts[(s, t)]) for s in SPLITS for t in TASKS}

    def __len__(self) -> int:
        return sum(len(p) for p in self.parts.values())

    def samples(self, split: str, task: str) -> Iterator[Sample]:
        part = self.part(split, task)
        for i in range(len(part)):
            labels = {}
            if part.labeled[i]:
                if part.va is not None:
                    labels[VA] = part.va[i]
                if part.expr is not None:
                    labels[EXPR] = int(part.expr[i])
                if part.au is not None:
                    labels[AU] = part.au[i]
            yield Sample(task, part.img[i], part.snd[i], labels)

    def labeled_only(self) -> "Dataset":
        """Copy without the samples whose labels were withheld."""
        return Dataset(self.spec, {k: p.select(p.labeled) for k, p in self.parts.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.spec != other.spec or set(self.parts) != set(other.parts):
            return False
        for key, part in self.parts.items():
            for a, b in zip(part.arrays(), other.parts[key].arrays()):
                if (a is None) != (b is None):
                    return False
                if a is not None and (a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes()):
                    return False
        return True


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class _Projections:
    w_va: np.ndarray
    w_expr: np.ndarray
    w_au: np.ndarray
    a_frame: np.ndarray
    a_drift: np.ndarray
    a_snd: np.ndarray

    @classmethod
    def draw(cls, spec: DatasetSpec, rng: np.random.Generator) -> "_Projections":
        s = 1.0 / math.sqrt(spec.d_z)
        return cls(
            w_va=rng.normal(0.0, s, (2, spec.d_z)),
            w_expr=rng.normal(0.0, s, (EXPR_CLASSES, spec.d_z)),
            w_au=rng.normal(0.0, s, (AU_COUNT, spec.d_z)),
            a_frame=rng.normal(0.0, s, (spec.d_img, spec.d_z)),
            a_drift=rng.normal(0.0, s, (spec.d_img, spec.d_z)),
            a_snd=rng.normal(0.0, s, (spec.d_snd, spec.d_z)),
        )


def label_functions(proj: _Projections, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    va = np.tanh(VA_SCALE * z @ proj.w_va.T)
    expr = np.argmax(z @ proj.w_expr.T, axis=1).astype(np.uint8)
    au = (z @ proj.w_au.T > 0).astype(np.uint8)  # sigmoid(.) > 0.5
    return va, expr, au


def _generate_part(spec, proj, task, n, rng) -> TaskPart:
    z = rng.standard_normal((n, spec.d_z))
    va, expr, au = label_functions(proj, z)
    base = z @ proj.a_frame.T
    drift = z @ proj.a_drift.T
    offsets = (np.arange(spec.n_img) - (spec.n_img - 1) / 2.0) / spec.n_img
    img = base[:, None, :] + offsets[None, :, None] * drift[:, None, :]
    img = img + spec.noise * rng.standard_normal(img.shape)
    snd = z @ proj.a_snd.T + spec.noise * rng.standard_normal((n, spec.d_snd))
    return TaskPart(
        task=task,
        img=img,
        snd=snd,
        va=va if task in (VA, MTL) else None,
        expr=expr if task in (EXPR, MTL) else None,
        au=au if task in (AU, MTL) else None,
        labeled=np.ones(n, dtype=bool),
        z=z if spec.keep_latent else None,
    )


def generate_dataset(spec: DatasetSpec) -> Dataset:
    proj_seq, sample_seq, withhold_seq = np.random.SeedSequence(spec.seed).spawn(3)
    proj = _Projections.draw(spec, np.random.default_rng(proj_seq))
    rng = np.random.default_rng(sample_seq)
    parts = {}
    for split in SPLITS:
        for task in TASKS:
            parts[(split, task)] = _generate_part(spec, proj, task, spec.count(split, task), rng)
    ds = Dataset(spec, parts)
    if spec.withhold > 0:
        withhold_labels(ds, spec.withhold, np.random.default_rng(withhold_seq))
    return ds


def generating_projections(spec: DatasetSpec) -> _Projections:
    """The projections :func:`generate_dataset` uses for ``spec`` (for label recomputation)."""
    proj_seq = np.random.SeedSequence(spec.seed).spawn(3)[0]
    return _Projections.draw(spec, np.random.default_rng(proj_seq))


def withhold_labels(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Mark ``fraction`` of each non-MTL training part unlabeled, in place; values are zeroed."""
    for task in SOURCE_TASKS:
        part = ds.part("train", task)
        n_hidden = int(round(fraction * len(part)))
        hidden = rng.permutation(len(part))[:n_hidden]
        part.labeled[hidden] = False
        for arr in (part.va, part.expr, part.au):
            if arr is not None:
                arr[hidden] = 0
    return ds


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def iterations_per_epoch(ds: Dataset, batch_size: int, split: str = "train") -> int:
    return math.ceil(max(len(ds.part(split, t)) for t in TASKS) / batch_size)


def epoch_iterator(ds: Dataset, batch_size: int, seed: int, epoch: int = 0,
                   split: str = "train") -> Iterator[tuple[str, Batch]]:
    """Yield ``(task, batch)`` in the order VA, EXPR, AU, MTL, VA, ... for one epoch.

    The number of iterations is set by the largest task; smaller tasks are
    cycled through fresh permutations so each task sees as many draws as the
    largest one. The order depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    sizes = {t: len(ds.part(split, t)) for t in TASKS}
    empty = [t for t, n in sizes.items() if n == 0]
    if empty:
        raise DataError(f"no {split} samples for task(s) {', '.join(empty)}")
    n_max = max(sizes.values())
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    streams = {}
    for t in TASKS:
        reps = math.ceil(n_max / sizes[t])
        streams[t] = np.concatenate([rng.permutation(sizes[t]) for _ in range(reps)])[:n_max]
    for k in range(math.ceil(n_max / batch_size)):
        for t in TASKS:
            rows = streams[t][k * batch_size:(k + 1) * batch_size]
            yield t, ds.part(split, t).batch(rows)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _record_dtype(spec: DatasetSpec, with_latent: bool) -> np.dtype:
    cols = [
        ("length", "<u4"),
        ("split", "u1"),
        ("task", "u1"),
        ("mask", "u1"),
        ("img", "<f8", (spec.n_img * spec.d_img,)),
        ("snd", "<f8", (spec.d_snd,)),
        ("va", "<f8", (2,)),
        ("expr", "u1"),
        ("au", "u1", (AU_COUNT,)),
    ]
    if with_latent:
        cols.append(("z", "<f8", (spec.d_z,)))
    return np.dtype(cols)


def save_dataset(ds: Dataset, path) -> None:
    spec = ds.spec
    with_latent = any(p.z is not None for p in ds.parts.values())
    dtype = _record_dtype(spec, with_latent)
    header = json.dumps({"spec": spec.to_dict(), "counts": ds.counts(), "latent": with_latent}).encode()
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header,
              struct.pack("<Q", len(ds))]
    for si, split in enumerate(SPLITS):
        for ti, task in enumerate(TASKS):
            part = ds.part(split, task)
            n = len(part)
            rec = np.zeros(n, dtype=dtype)
            rec["length"] = dtype.itemsize - 4
            rec["split"] = si
            rec["task"] = ti
            mask = np.full(n, (_HAS_VA if part.va is not None else 0)
                           | (_HAS_EXPR if part.expr is not None else 0)
                           | (_HAS_AU if part.au is not None else 0), dtype=np.uint8)
            mask[part.labeled] |= _LABELED
            rec["mask"] = mask
            rec["img"] = part.img.reshape(n, spec.n_img * spec.d_img)
            rec["snd"] = part.snd
            if part.va is not None:
                rec["va"] = part.va
            if part.expr is not None:
                rec["expr"] = part.expr
            if part.au is not None:
                rec["au"] = part.au
            if with_latent:
                rec["z"] = part.z
            chunks.append(rec.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise HeaderError(f"{path}: not a dataset file (bad magic)")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: dataset format version {version}, expected {FORMAT_VERSION}")
    offset = 10
    if len(raw) < offset + hlen + 8:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[offset:offset + hlen].decode())
        spec = DatasetSpec.from_dict(header["spec"])
        counts = header["counts"]
        with_latent = bool(header["latent"])
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    offset += hlen
    (n_records,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    dtype = _record_dtype(spec, with_latent)
    if n_records != sum(counts.values()):
        raise HeaderError(f"{path}: record count {n_records} disagrees with per-task counts")
    if len(raw) - offset < n_records * dtype.itemsize:
        raise TruncatedError(f"{path}: expected {n_records} records, payload is short")
    if len(raw) - offset > n_records * dtype.itemsize:
        raise HeaderError(f"{path}: trailing bytes after {n_records} records")
    rec = np.frombuffer(raw, dtype=dtype, count=n_records, offset=offset)
    if n_records and (rec["length"] != dtype.itemsize - 4).any():
        raise HeaderError(f"{path}: record length prefix does not match the header dimensions")
    parts = {}
    for si, split in enumerate(SPLITS):
        for ti, task in enumerate(TASKS):
            sel = rec[(rec["split"] == si) & (rec["task"] == ti)]
            n = len(sel)
            if n != counts.get(f"{split}/{task}", -1):
                raise HeaderError(f"{path}: {split}/{task} holds {n} records, header says {counts.get(f'{split}/{task}')}")
            default_mask = {VA: _HAS_VA, EXPR: _HAS_EXPR, AU: _HAS_AU, MTL: _HAS_VA | _HAS_EXPR | _HAS_AU}[task]
            mask = int(sel["mask"][0]) if n else default_mask
            parts[(split, task)] = TaskPart(
                task=task,
                img=sel["img"].reshape(n, spec.n_img, spec.d_img).astype(np.float64),
                snd=np.array(sel["snd"], dtype=np.float64),
                va=np.array(sel["va"], dtype=np.float64) if mask & _HAS_VA else None,
                expr=np.array(sel["expr"], dtype=np.uint8) if mask & _HAS_EXPR else None,
                au=np.array(sel["au"], dtype=np.uint8) if mask & _HAS_AU else None,
                labeled=(sel["mask"] & _LABELED).astype(bool),
                z=np.array(sel["z"], dtype=np.float64) if with_latent else None,
            )
    return Dataset(spec, parts)
