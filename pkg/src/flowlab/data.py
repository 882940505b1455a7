"""Core data types: latent datasets, Gaussian-mixture synthesis, seeded
random streams, and the binary dataset file format.

Everything downstream treats a :class:`LatentDataset` as immutable; pruning
and splitting return new instances that keep the original sample ids, so
selections made on the full dataset stay meaningful on any subset.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ValidationError

MAGIC = b"LFSD"
FORMAT_VERSION = 1
_FLAG_LABELS = 1


def stream_id(name: str) -> int:
    """Map a purpose name to a 64-bit stream id (blake2b-8, little-endian).

    This is the documented hash through which one master seed fans out into
    independent per-module streams.
    """
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


class Rng:
    """A named, seeded random stream.

    Wraps a Philox generator keyed by ``(seed, stream)``: identical pairs
    reproduce bit-identical draw sequences across runs and platforms.
    Instances are stateful and must not be shared across workers; derive a
    fresh stream per worker with :meth:`child`.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: int | str) -> "Rng":
        """Derive an independent stream from this one, keyed by ``tag``."""
        if isinstance(tag, str):
            tag_id = stream_id(tag)
        else:
            tag_id = int(tag) & 0xFFFFFFFFFFFFFFFF
        mixed = hashlib.blake2b(
            struct.pack("<QQ", self.stream, tag_id), digest_size=8
        ).digest()
        return Rng(self.seed, int.from_bytes(mixed, "little"))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LatentDataset:
    """An n x d matrix of target samples with stable ids.

    ``embeddings`` (n x e), when present, are the selection-space
    coordinates used by clustering criteria; they are ingested, never
    computed here.  ``labels`` carry class/cluster tags (for GMM data, the
    generating component index).
    """

    data: np.ndarray
    ids: np.ndarray
    embeddings: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"dataset matrix must be n x d with n,d >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("dataset contains non-finite entries")
        ids = _freeze(np.asarray(self.ids, dtype=np.int64))
        if ids.shape != (data.shape[0],):
            raise ValidationError(f"ids shape {ids.shape} does not match n={data.shape[0]}")
        if np.unique(ids).size != ids.size:
            raise ValidationError("sample ids must be unique")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)
        if self.embeddings is not None:
            emb = _freeze(np.asarray(self.embeddings, dtype=np.float64))
            if emb.ndim != 2 or emb.shape[0] != data.shape[0]:
                raise ValidationError(
                    f"embeddings row count {emb.shape[0] if emb.ndim == 2 else '?'} != n={data.shape[0]}"
                )
            if not np.all(np.isfinite(emb)):
                raise ValidationError("embeddings contain non-finite entries")
            object.__setattr__(self, "embeddings", emb)
        if self.labels is not None:
            lab = _freeze(np.asarray(self.labels, dtype=np.int32))
            if lab.shape != (data.shape[0],):
                raise ValidationError(f"labels shape {lab.shape} does not match n={data.shape[0]}")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def selection_space(self) -> np.ndarray:
        """Coordinates used by selection criteria: embeddings if ingested,
        otherwise the raw latent rows."""
        return self.embeddings if self.embeddings is not None else self.data

    def row_of_id(self, sample_id: int) -> int:
        rows = np.nonzero(self.ids == sample_id)[0]
        if rows.size == 0:
            raise ValidationError(f"sample id {sample_id} not in dataset")
        return int(rows[0])

    def take(self, rows: np.ndarray) -> "LatentDataset":
        """New dataset from row positions; ids are carried along."""
        rows = np.asarray(rows, dtype=np.int64)
        return LatentDataset(
            data=self.data[rows],
            ids=self.ids[rows],
            embeddings=None if self.embeddings is None else self.embeddings[rows],
            labels=None if self.labels is None else self.labels[rows],
        )

    def subset_by_ids(self, kept_ids) -> "LatentDataset":
        """New dataset restricted to ``kept_ids`` (in increasing id order)."""
        kept = np.asarray(sorted(int(i) for i in kept_ids), dtype=np.int64)
        id_to_row = {int(s): r for r, s in enumerate(self.ids)}
        missing = [int(i) for i in kept if int(i) not in id_to_row]
        if missing:
            raise ValidationError(f"ids not present in dataset: {missing[:5]}")
        rows = np.array([id_to_row[int(i)] for i in kept], dtype=np.int64)
        return self.take(rows)

    def drop_label(self, label: int) -> "LatentDataset":
        """New dataset with every sample of the given label removed."""
        if self.labels is None:
            raise ValidationError("dataset has no labels to drop by")
        mask = self.labels != label
        if not mask.any():
            raise ValidationError(f"dropping label {label} would empty the dataset")
        return self.take(np.nonzero(mask)[0])


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture: per component a (weight, mean, scale).

    Scales may be zero (degenerate point mass) but never negative; weights
    must sum to 1 within 1e-9.
    """

    weights: np.ndarray
    means: np.ndarray  # k x d
    scales: np.ndarray
    seed: int = 0

    def __post_init__(self):
        w = _freeze(np.asarray(self.weights, dtype=np.float64))
        mu = _freeze(np.asarray(self.means, dtype=np.float64))
        s = _freeze(np.asarray(self.scales, dtype=np.float64))
        if mu.ndim != 2 or mu.shape[0] < 1:
            raise ValidationError("means must be a k x d matrix")
        k = mu.shape[0]
        if w.shape != (k,) or s.shape != (k,):
            raise ValidationError("weights, means, scales must agree on component count")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"component weights sum to {w.sum()!r}, expected 1 within 1e-9")
        if np.any(w < 0):
            raise ValidationError("component weights must be non-negative")
        if np.any(s < 0):
            raise ValidationError("component scales must be non-negative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", s)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return self.means.shape[0]


def make_gmm_spec(
    d: int,
    components: int = 4,
    mean_scale: float = 1.0,
    scale: float = 1.0,
    seed: int = 0,
) -> GmmSpec:
    """One admissible mixture instantiation: equal weights, means drawn
    i.i.d. N(0, mean_scale^2 I) under ``seed``, shared isotropic scale."""
    if components < 1:
        raise ValidationError("components must be >= 1")
    rng = Rng(seed, stream_id("gmm-spec"))
    means = mean_scale * rng.generator.standard_normal((components, d))
    weights = np.full(components, 1.0 / components)
    return GmmSpec(weights=weights, means=means, scales=np.full(components, float(scale)), seed=seed)


def generate_gmm(spec: GmmSpec, n: int, rng: Rng | None = None) -> LatentDataset:
    """Draw ``n`` samples: pick a component by weight, add isotropic noise.

    The generating component index is recorded in ``labels``.  Values are
    rounded through float32 once at creation so the on-disk format
    round-trips bit-exactly.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if rng is None:
        rng = Rng(spec.seed, stream_id("gmm-samples"))
    g = rng.generator
    comps = g.choice(spec.k, size=n, p=spec.weights)
    noise = g.standard_normal((n, spec.d))
    data = spec.means[comps] + spec.scales[comps][:, None] * noise
    data = data.astype(np.float32).astype(np.float64)
    return LatentDataset(data=data, ids=np.arange(n, dtype=np.int64), labels=comps.astype(np.int32))


def sample_source(rng: Rng, m: int, d: int) -> np.ndarray:
    """m i.i.d. standard-normal source rows (the x0 ~ N(0, I) prior)."""
    if m < 1 or d < 1:
        raise ValidationError("m and d must be >= 1")
    return rng.generator.standard_normal((m, d))


def split_train_val(ds: LatentDataset, n_val: int, rng: Rng) -> tuple[LatentDataset, LatentDataset]:
    """Disjoint (train, val) split by random row permutation; ids preserved."""
    if not 1 <= n_val < ds.n:
        raise ValidationError(f"n_val must be in [1, n), got {n_val} with n={ds.n}")
    perm = rng.generator.permutation(ds.n)
    return ds.take(np.sort(perm[n_val:])), ds.take(np.sort(perm[:n_val]))


# --- binary dataset format -------------------------------------------------
#
# magic "LFSD" | version u32 | n u64 | d u64 | e u64 | flags u32
# then n*d f32 row-major data, n*e f32 embeddings if e > 0,
# n i32 labels if flags bit 0.  All little-endian.

_HEADER = struct.Struct("<4sIQQQI")


def save_dataset(ds: LatentDataset, path) -> None:
    """Write the binary layout above.  Refuses datasets whose ids are not
    dense 0..n-1: the format has no id section, so pruned views must be
    persisted as selection id-lists and reapplied on load."""
    if not np.array_equal(ds.ids, np.arange(ds.n)):
        raise ValidationError(
            "dataset ids are not dense 0..n-1; save the parent dataset plus a selection file instead"
        )
    e = 0 if ds.embeddings is None else ds.embeddings.shape[1]
    flags = _FLAG_LABELS if ds.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.n, ds.d, e, flags))
        fh.write(np.ascontiguousarray(ds.data, dtype="<f4").tobytes())
        if e:
            fh.write(np.ascontiguousarray(ds.embeddings, dtype="<f4").tobytes())
        if ds.labels is not None:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def _read_exact(fh, nbytes: int, what: str) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise DataFormatError(f"truncated payload while reading {what}: wanted {nbytes} bytes, got {len(buf)}")
    return buf


def load_dataset(path) -> LatentDataset:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataFormatError("file too short for header")
        magic, version, n, d, e, flags = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported format version {version}")
        if n < 1 or d < 1:
            raise DataFormatError(f"header declares n={n}, d={d}; both must be >= 1")
        data = np.frombuffer(_read_exact(fh, 4 * n * d, "data matrix"), dtype="<f4").reshape(n, d)
        emb = None
        if e:
            emb = np.frombuffer(_read_exact(fh, 4 * n * e, "embeddings"), dtype="<f4").reshape(n, e)
        labels = None
        if flags & _FLAG_LABELS:
            labels = np.frombuffer(_read_exact(fh, 4 * n, "labels"), dtype="<i4")
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after declared payload")
    return LatentDataset(
        data=data.astype(np.float64),
        ids=np.arange(n, dtype=np.int64),
        embeddings=None if emb is None else emb.astype(np.float64),
        labels=labels,
    )
