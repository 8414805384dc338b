"""Learnable feature mappers, the symmetric contrastive loss, and gradients.

A mapper carries two independent branches: ``train_side`` is applied to
exemplar (training-image) features, ``synth_side`` to synthesized-image
features. Supported kinds:

* ``affine``  - square weight matrix plus bias per branch, identity-initialized.
* ``channel`` - per-dimension scale per branch, ones-initialized.
* ``mlp2``    - two square layers with a ReLU between, per branch. Initialized
  to an exact identity on unit-norm inputs via ``relu(x + 1) - 1``.

Mapped rows are always re-normalized to unit L2 norm, and every gradient here
is differentiated through that renormalization.

Checkpoint format (``.amap``), little-endian: magic ``AMAP``, u32 version=1,
u32 kind code (0 affine, 1 channel, 2 mlp2), u32 dim, then all parameters as
raw float32 in the order given by ``PARAM_LAYOUT`` (row-major for matrices).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BatchTooSmall, DataError, FormatError, ShapeError

TRAIN_SIDE = "train_side"
SYNTH_SIDE = "synth_side"
BRANCHES = (TRAIN_SIDE, SYNTH_SIDE)

KINDS = ("affine", "channel", "mlp2")
_KIND_CODES = {"affine": 0, "channel": 1, "mlp2": 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

CKPT_MAGIC = b"AMAP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIII")


def param_layout(kind: str, dim: int) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order used for checkpoints and optimizer state."""
    if kind == "affine":
        per = [("W", (dim, dim)), ("b", (dim,))]
    elif kind == "channel":
        per = [("scale", (dim,))]
    elif kind == "mlp2":
        per = [("W1", (dim, dim)), ("b1", (dim,)), ("W2", (dim, dim)), ("b2", (dim,))]
    else:
        raise ValueError(f"unknown mapper kind {kind!r}")
    return [(f"{branch}.{name}", shape) for branch in BRANCHES for name, shape in per]


@dataclass(eq=False)
class Mapper:
    kind: str
    dim: int
    params: dict[str, np.ndarray]

    def copy(self) -> Mapper:
        return Mapper(self.kind, self.dim, {k: v.copy() for k, v in self.params.items()})

    def check_finite(self) -> None:
        for key, value in self.params.items():
            if not np.isfinite(value).all():
                raise DataError(f"mapper parameter {key} contains NaN/inf")


def init_mapper(kind: str, dim: int) -> Mapper:
    """Identity-initialized mapper: maps any unit-norm input to itself."""
    params: dict[str, np.ndarray] = {}
    for key, shape in param_layout(kind, dim):
        name = key.split(".", 1)[1]
        if name in ("W", "W1", "W2"):
            params[key] = np.eye(dim)
        elif name == "scale":
            params[key] = np.ones(dim)
        elif name == "b1":
            params[key] = np.ones(dim)  # shifts unit-norm coords into relu's linear region
        elif name == "b2":
            params[key] = -np.ones(dim)
        else:
            params[key] = np.zeros(shape)
    return Mapper(kind=kind, dim=dim, params=params)


def save_mapper(m: Mapper, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, _KIND_CODES[m.kind], m.dim))
        for key, shape in param_layout(m.kind, m.dim):
            arr = m.params[key]
            if arr.shape != shape:
                raise ShapeError(f"{key}: expected {shape}, found {arr.shape}")
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_mapper(path: str | Path) -> Mapper:
    path = Path(path)
    with path.open("rb") as f:
        header = f.read(_CKPT_HEADER.size)
        if len(header) < _CKPT_HEADER.size:
            raise FormatError(f"{path}: file shorter than header")
        magic, version, code, dim = _CKPT_HEADER.unpack(header)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if code not in _CODE_KINDS:
            raise FormatError(f"{path}: unknown mapper kind code {code}")
        kind = _CODE_KINDS[code]
        params = {}
        for key, shape in param_layout(kind, dim):
            n = int(np.prod(shape))
            buf = f.read(4 * n)
            if len(buf) < 4 * n:
                raise FormatError(f"{path}: truncated parameter payload at {key}")
            params[key] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after parameters")
    return Mapper(kind=kind, dim=dim, params=params)


def _branch_params(m: Mapper, branch: str, dtype: np.dtype) -> dict[str, np.ndarray]:
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    prefix = branch + "."
    return {
        key[len(prefix):]: np.asarray(value, dtype=dtype)
        for key, value in m.params.items()
        if key.startswith(prefix)
    }


def _branch_pre(m: Mapper, branch: str, X: np.ndarray) -> np.ndarray:
    p = _branch_params(m, branch, X.dtype)
    if m.kind == "affine":
        return X @ p["W"].T + p["b"]
    if m.kind == "channel":
        return X * p["scale"]
    h1 = X @ p["W1"].T + p["b1"]
    return np.maximum(h1, 0.0) @ p["W2"].T + p["b2"]


def _renorm(pre: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(pre, axis=1)
    zero = norms == 0.0
    if zero.any():
        raise DataError(f"mapped rows collapsed to zero norm at indices {np.flatnonzero(zero)[:10]}")
    return pre / norms[:, None], norms


def map_forward(m: Mapper, branch: str, X: np.ndarray) -> np.ndarray:
    """Apply one branch to rows of X and re-normalize each output row.

    Computation happens in X's floating dtype: float32 inputs stay float32
    (the retrieval fast path), float64 inputs stay float64 (training).
    """
    X = np.asarray(X)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != m.dim:
        raise ShapeError(f"expected (*, {m.dim}) input, got {X.shape}")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    out, _ = _renorm(_branch_pre(m, branch, X))
    return out[0] if single else out


def nt_xent(T: np.ndarray, S: np.ndarray, temperature: float) -> float:
    """Symmetric normalized-temperature cross-entropy over in-batch pairs.

    Row i of T and row i of S are a positive pair; all other in-batch rows
    act as negatives. Both softmax directions (exemplar->synthesized and
    synthesized->exemplar) are summed per pair, then averaged over the batch.
    Each direction is a proper softmax cross-entropy, so the value is >= 0.
    """
    T = np.asarray(T, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if T.shape != S.shape or T.ndim != 2:
        raise ShapeError(f"paired batches must share shape, got {T.shape} vs {S.shape}")
    if T.shape[0] < 2:
        raise BatchTooSmall(f"need at least 2 pairs for in-batch negatives, got {T.shape[0]}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = (T @ S.T) / temperature
    diag = np.diagonal(logits)
    row = _logsumexp(logits, axis=1) - diag
    col = _logsumexp(logits, axis=0) - diag
    return float(np.mean(row + col))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    return (peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))).squeeze(axis)


def ortho_reg(m: Mapper) -> float:
    """Frobenius-norm pull of both branch weight matrices toward orthogonality.

    Defined for affine mappers as half the sum of ||W^T W - I||_F over the two
    branches (norms unsquared). Other kinds have no such penalty and return 0.
    """
    if m.kind != "affine":
        return 0.0
    total = 0.0
    for branch in BRANCHES:
        W = m.params[f"{branch}.W"]
        gram_err = W.T @ W - np.eye(m.dim)
        total += np.linalg.norm(gram_err, "fro")
    return 0.5 * total


@dataclass(eq=False)
class LossValue:
    contrastive: float
    regularizer: float
    total: float
    gradients: dict[str, np.ndarray]


def loss_value(
    m: Mapper,
    X_train: np.ndarray,
    X_synth: np.ndarray,
    temperature: float,
    reg_weight: float,
) -> float:
    """Total attribution loss without gradients (finite-difference friendly)."""
    T = map_forward(m, TRAIN_SIDE, np.asarray(X_train, dtype=np.float64))
    S = map_forward(m, SYNTH_SIDE, np.asarray(X_synth, dtype=np.float64))
    return nt_xent(T, S, temperature) + reg_weight * ortho_reg(m)


def loss_and_grad(
    m: Mapper,
    X_train: np.ndarray,
    X_synth: np.ndarray,
    temperature: float,
    reg_weight: float,
) -> LossValue:
    """Attribution loss and exact analytic gradients for all mapper parameters.

    The contrastive gradient is backpropagated through the row renormalization
    inside the mapper; the orthogonality term contributes its (subdifferential)
    gradient, taken as zero exactly at the orthogonal manifold where the
    Frobenius norm is not smooth.
    """
    Xt = np.asarray(X_train, dtype=np.float64)
    Xs = np.asarray(X_synth, dtype=np.float64)
    if Xt.shape != Xs.shape or Xt.ndim != 2:
        raise ShapeError(f"paired batches must share shape, got {Xt.shape} vs {Xs.shape}")
    if Xt.shape[1] != m.dim:
        raise ShapeError(f"expected (*, {m.dim}) batches, got {Xt.shape}")
    B = Xt.shape[0]
    if B < 2:
        raise BatchTooSmall(f"need at least 2 pairs for in-batch negatives, got {B}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    caches = {}
    outs = {}
    for branch, X in ((TRAIN_SIDE, Xt), (SYNTH_SIDE, Xs)):
        pre, cache = _branch_forward(m, branch, X)
        unit, norms = _renorm(pre)
        caches[branch] = (X, cache, unit, norms)
        outs[branch] = unit
    T, S = outs[TRAIN_SIDE], outs[SYNTH_SIDE]

    logits = (T @ S.T) / temperature
    diag = np.diagonal(logits)
    row_lse = _logsumexp(logits, axis=1)
    col_lse = _logsumexp(logits, axis=0)
    contrastive = float(np.mean((row_lse - diag) + (col_lse - diag)))

    P_row = np.exp(logits - row_lse[:, None])
    P_col = np.exp(logits - col_lse[None, :])
    G_logits = (P_row + P_col - 2.0 * np.eye(B)) / B
    G_T = (G_logits @ S) / temperature
    G_S = (G_logits.T @ T) / temperature

    grads: dict[str, np.ndarray] = {}
    for branch, G_unit in ((TRAIN_SIDE, G_T), (SYNTH_SIDE, G_S)):
        X, cache, unit, norms = caches[branch]
        G_pre = (G_unit - np.sum(G_unit * unit, axis=1, keepdims=True) * unit) / norms[:, None]
        _branch_backward(m, branch, X, cache, G_pre, grads)

    reg = 0.0
    if m.kind == "affine":
        eye = np.eye(m.dim)
        for branch in BRANCHES:
            W = m.params[f"{branch}.W"]
            gram_err = W.T @ W - eye
            norm = np.linalg.norm(gram_err, "fro")
            reg += 0.5 * norm
            if norm > 0.0:
                grads[f"{branch}.W"] += reg_weight * (W @ gram_err) / norm

    total = contrastive + reg_weight * reg
    return LossValue(contrastive=contrastive, regularizer=reg, total=total, gradients=grads)


def _branch_forward(m: Mapper, branch: str, X: np.ndarray):
    p = _branch_params(m, branch, X.dtype)
    if m.kind == "affine":
        return X @ p["W"].T + p["b"], None
    if m.kind == "channel":
        return X * p["scale"], None
    h1 = X @ p["W1"].T + p["b1"]
    z = np.maximum(h1, 0.0)
    return z @ p["W2"].T + p["b2"], (h1, z, p["W2"])


def _branch_backward(
    m: Mapper,
    branch: str,
    X: np.ndarray,
    cache,
    G_pre: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    if m.kind == "affine":
        grads[f"{branch}.W"] = G_pre.T @ X
        grads[f"{branch}.b"] = G_pre.sum(axis=0)
    elif m.kind == "channel":
        grads[f"{branch}.scale"] = (G_pre * X).sum(axis=0)
    else:
        h1, z, W2 = cache
        grads[f"{branch}.W2"] = G_pre.T @ z
        grads[f"{branch}.b2"] = G_pre.sum(axis=0)
        G_z = G_pre @ W2
        G_h1 = G_z * (h1 > 0.0)
        grads[f"{branch}.W1"] = G_h1.T @ X
        grads[f"{branch}.b1"] = G_h1.sum(axis=0)
