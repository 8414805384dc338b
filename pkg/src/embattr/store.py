"""Embedding matrices, dataset manifests, and query-pool assembly.

File formats
------------
Embedding file (``.aemb``), little-endian throughout:

====== ====== =====================================
offset size   field
====== ====== =====================================
0      4      magic ``AEMB``
4      4      u32 version, currently 1
8      4      u32 dim
12     8      u64 count
20     1      u8 normalized flag (0 or 1)
21     15     reserved, must be zero
36     4*N*D  float32 payload, row-major
====== ====== =====================================

A sidecar file next to it (same path with extension replaced by ``.ids``)
holds one UTF-8 image id per line, exactly ``count`` lines. Writing is
canonical, so load followed by write reproduces a valid file byte for byte.

Manifest file: UTF-8 text, one record per line, tab-separated fields
``image_id  role  model_id  split  prompt_type  source``. Distractor records
have an empty model_id.

Loaded objects are immutable after construction and safe to share across
threads; all operations here are read-only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DataError, EmptyCaseError, FormatError

MAGIC = b"AEMB"
VERSION = 1
HEADER_SIZE = 36
_HEADER = struct.Struct("<4sIIQB15s")

ROLES = ("exemplar", "synthesized", "distractor")
SPLITS = ("train", "val", "test")

# Loader tolerance on row norms when the header claims unit rows.
NORM_ATOL = 1e-4


def ids_path(path: str | Path) -> Path:
    """Sidecar id file that accompanies an embedding file."""
    return Path(path).with_suffix(".ids")


@dataclass(eq=False)
class EmbeddingMatrix:
    """Dense float32 feature matrix with one unit-normalizable row per image."""

    dim: int
    count: int
    data: np.ndarray  # (count, dim) float32
    ids: list[str]
    normalized: bool = False
    _index: dict[str, int] | None = field(default=None, repr=False)

    def row(self, image_id: str) -> np.ndarray:
        return self.data[self.index()[image_id]]

    def rows(self, image_ids: list[str] | tuple[str, ...]) -> np.ndarray:
        idx = self.index()
        return self.data[np.fromiter((idx[i] for i in image_ids), dtype=np.int64, count=len(image_ids))]

    def index(self) -> dict[str, int]:
        """id -> row position, built on first use."""
        if self._index is None:
            self._index = {image_id: i for i, image_id in enumerate(self.ids)}
        return self._index


def _validate_rows(data: np.ndarray, ids: list[str], normalized: bool) -> None:
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        bad = [ids[i] for i in np.flatnonzero(~finite)[:20]]
        raise DataError(f"non-finite values in rows: {bad}")
    if normalized:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0) > NORM_ATOL
        if off.any():
            bad = [ids[i] for i in np.flatnonzero(off)[:20]]
            raise DataError(f"header claims unit rows but these are not: {bad}")


def load_embeddings(path: str | Path, mmap: bool = True) -> EmbeddingMatrix:
    """Load an embedding file plus its id sidecar.

    With ``mmap=True`` the payload is memory-mapped read-only, which is the
    intended mode for large candidate pools; validation still touches every
    row once.
    """
    path = Path(path)
    raw = path.open("rb")
    with raw:
        header = raw.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise FormatError(f"{path}: file shorter than header")
        magic, version, dim, count, norm_flag, reserved = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if norm_flag not in (0, 1):
            raise FormatError(f"{path}: normalized flag must be 0 or 1, got {norm_flag}")
        if reserved != b"\x00" * 15:
            raise FormatError(f"{path}: reserved header bytes not zero")
        if dim == 0:
            raise FormatError(f"{path}: dim must be positive")
    expected = HEADER_SIZE + 4 * dim * count
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{path}: payload holds {(actual - HEADER_SIZE) // 4} floats, "
            f"header promises {dim * count}"
        )

    if mmap and count > 0:
        data = np.memmap(path, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=(count, dim))
        data = data.view(np.ndarray)
    else:
        with path.open("rb") as f:
            f.seek(HEADER_SIZE)
            data = np.fromfile(f, dtype="<f4", count=count * dim).reshape(count, dim)
    data.flags.writeable = False

    sidecar = ids_path(path)
    if not sidecar.exists():
        raise FormatError(f"missing id sidecar {sidecar}")
    with sidecar.open("r", encoding="utf-8") as f:
        ids = f.read().splitlines()
    if len(ids) != count:
        raise ConsistencyError(f"{sidecar}: {len(ids)} ids for {count} rows")
    if len(set(ids)) != len(ids):
        raise ConsistencyError(f"{sidecar}: duplicate image ids")

    _validate_rows(data, ids, bool(norm_flag))
    return EmbeddingMatrix(dim=dim, count=count, data=data, ids=ids, normalized=bool(norm_flag))


def write_embeddings(m: EmbeddingMatrix, path: str | Path) -> Path:
    """Write matrix and id sidecar in canonical form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(MAGIC, VERSION, m.dim, m.count, int(m.normalized), b"\x00" * 15)
    payload = np.ascontiguousarray(m.data, dtype="<f4")
    with path.open("wb") as f:
        f.write(header)
        f.write(payload.tobytes())
    with ids_path(path).open("w", encoding="utf-8", newline="\n") as f:
        for image_id in m.ids:
            f.write(image_id + "\n")
    return path


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Rescale every row to unit L2 norm.

    Already-normalized matrices are returned as-is, which makes repeated
    application bitwise stable. Zero-norm rows are a hard error: silently
    skipping them would desynchronize ids from rows.
    """
    if m.normalized:
        return m
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    zero = norms == 0.0
    if zero.any():
        bad = [m.ids[i] for i in np.flatnonzero(zero)[:20]]
        raise DataError(f"zero-norm rows cannot be normalized: {bad}")
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    data.flags.writeable = False
    return EmbeddingMatrix(dim=m.dim, count=m.count, data=data, ids=m.ids, normalized=True)


@dataclass(frozen=True, slots=True)
class ManifestRecord:
    image_id: str
    role: str
    model_id: str
    split: str
    prompt_type: str
    source: str


@dataclass(eq=False)
class DatasetManifest:
    """All image records plus derived per-role and per-model views."""

    records: list[ManifestRecord]

    def __post_init__(self) -> None:
        roles: dict[str, str] = {}
        for r in self.records:
            if r.role not in ROLES:
                raise ConsistencyError(f"{r.image_id}: unknown role {r.role!r}")
            if r.split not in SPLITS:
                raise ConsistencyError(f"{r.image_id}: unknown split {r.split!r}")
            if r.role == "distractor":
                if r.model_id:
                    raise ConsistencyError(f"{r.image_id}: distractor with model_id {r.model_id!r}")
            elif not r.model_id:
                raise ConsistencyError(f"{r.image_id}: {r.role} record needs a model_id")
            if r.image_id in roles:
                raise ConsistencyError(f"duplicate image_id {r.image_id!r}")
            roles[r.image_id] = r.role

        self.exemplars_by_model: dict[str, list[ManifestRecord]] = {}
        self.synth_by_model: dict[str, list[ManifestRecord]] = {}
        self.distractors: list[ManifestRecord] = []
        for r in self.records:
            if r.role == "exemplar":
                self.exemplars_by_model.setdefault(r.model_id, []).append(r)
            elif r.role == "synthesized":
                self.synth_by_model.setdefault(r.model_id, []).append(r)
            else:
                self.distractors.append(r)

        missing = sorted(set(self.synth_by_model) - set(self.exemplars_by_model))
        if missing:
            raise ConsistencyError(f"models with synthesized images but no exemplars: {missing[:10]}")


def load_manifest(path: str | Path) -> DatasetManifest:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            records.append(ManifestRecord(*parts))
    return DatasetManifest(records)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for r in manifest.records:
            f.write(f"{r.image_id}\t{r.role}\t{r.model_id}\t{r.split}\t{r.prompt_type}\t{r.source}\n")
    return path


@dataclass(eq=False)
class QueryPool:
    """One test case: synthesized queries against exemplars plus distractors."""

    name: str
    query_ids: list[str]
    query_models: dict[str, str]  # query id -> model id
    candidate_ids: list[str]
    truth: dict[str, frozenset[str]]  # model id -> exemplar id set


def build_query_pool(
    manifest: DatasetManifest,
    split: str,
    source: str = "",
    prompt_type: str = "",
    distractor_count: int | None = None,
    seed: int = 0,
    name: str | None = None,
) -> QueryPool:
    """Assemble a deterministic test case from manifest filters.

    Queries are the synthesized records matching (split, source, prompt_type);
    empty filter strings match everything. Candidate exemplars are all
    exemplar records of the same (split, source) universe, so exemplars of
    sibling models act as hard negatives. Distractors are drawn from the
    shared distractor pool (any split/source) by seeded uniform sampling
    without replacement; ``None`` takes the whole pool. The PRNG is numpy's
    PCG64, which pins the sample to the seed across runs and platforms.
    """
    if split not in SPLITS:
        raise ConsistencyError(f"unknown split {split!r}")

    def match(r: ManifestRecord, with_prompt: bool) -> bool:
        if r.split != split:
            return False
        if source and r.source != source:
            return False
        if with_prompt and prompt_type and r.prompt_type != prompt_type:
            return False
        return True

    queries = [r for rs in manifest.synth_by_model.values() for r in rs if match(r, with_prompt=True)]
    if not queries:
        raise EmptyCaseError(
            f"no synthesized records for split={split!r} source={source!r} prompt_type={prompt_type!r}"
        )
    queries.sort(key=lambda r: r.image_id)
    query_models = {r.image_id: r.model_id for r in queries}

    exemplar_ids = sorted(
        r.image_id
        for rs in manifest.exemplars_by_model.values()
        for r in rs
        if match(r, with_prompt=False)
    )
    truth = {}
    for model_id in sorted({r.model_id for r in queries}):
        truth[model_id] = frozenset(r.image_id for r in manifest.exemplars_by_model[model_id])
    # Truth exemplars can sit outside the (split, source) universe only if the
    # manifest mixes splits within a model; pull them in so candidates cover truth.
    covered = set(exemplar_ids)
    extra = sorted({i for ids in truth.values() for i in ids if i not in covered})
    exemplar_ids.extend(extra)

    pool = sorted(r.image_id for r in manifest.distractors)
    if distractor_count is None:
        distractor_count = len(pool)
    if distractor_count > len(pool):
        raise DataError(f"asked for {distractor_count} distractors, only {len(pool)} available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=distractor_count, replace=False) if pool else []
    distractor_ids = [pool[i] for i in chosen]

    candidate_ids = exemplar_ids + distractor_ids
    overlap = set(query_models) & set(candidate_ids)
    if overlap:
        raise ConsistencyError(f"queries also appear as candidates: {sorted(overlap)[:10]}")
    return QueryPool(
        name=name or f"{source or 'all'}/{prompt_type or 'all'}",
        query_ids=[r.image_id for r in queries],
        query_models=query_models,
        candidate_ids=candidate_ids,
        truth=truth,
    )
