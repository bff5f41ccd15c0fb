"""Checkpoint merging as a post-hoc learning-rate decay.

Merging checkpoints ``theta_n .. theta_{n+k}`` with weights ``c`` is the
same as applying the updates between them with per-step gradient weights
``w``: ``w_i`` is the suffix sum ``c_i + ... + c_k``, and conversely
``c_j = w_j - w_{j+1}``. Learning rates are folded into the stored update
vectors.
"""
from dataclasses import dataclass
import struct

import numpy as np

from .exceptions import InvalidInputError

TOL = 1e-12
MAGIC = b"WSM1"
VERSION = 1


@dataclass(frozen=True)
class GradientWeights:
    w: tuple

    def __post_init__(self):
        arr = np.asarray(self.w, dtype=np.float64).ravel()
        w = tuple(arr.tolist())
        object.__setattr__(self, "w", w)
        if not w:
            raise InvalidInputError("gradient weights must not be empty")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("gradient weights must be finite")
        if w[0] > 1.0 + TOL:
            raise InvalidInputError(f"w[0] = {w[0]} exceeds 1")
        rising = np.flatnonzero(arr[1:] > arr[:-1])
        if rising.size:
            i = int(rising[0]) + 1
            raise InvalidInputError(f"w[{i}] = {w[i]} > w[{i - 1}] = {w[i - 1]}: not non-increasing")
        if w[-1] < -TOL:
            raise InvalidInputError(f"w[{len(w) - 1}] = {w[-1]} is negative")

    def __len__(self):
        return len(self.w)


@dataclass(frozen=True)
class MergeWeights:
    c: tuple

    def __post_init__(self):
        arr = np.asarray(self.c, dtype=np.float64).ravel()
        c = tuple(arr.tolist())
        object.__setattr__(self, "c", c)
        if len(c) < 1:
            raise InvalidInputError("merge weights must not be empty")
        bad = np.flatnonzero(~(np.isfinite(arr) & (arr >= 0)))
        if bad.size:
            j = int(bad[0])
            raise InvalidInputError(f"c[{j}] = {c[j]} must be finite and non-negative")
        total = float(np.sum(arr))
        if abs(total - 1.0) > TOL * max(1, len(c)):
            raise InvalidInputError(f"merge weights sum to {total!r}, not 1")

    def __len__(self):
        return len(self.c)


@dataclass(frozen=True)
class CheckpointSeries:
    vectors: np.ndarray
    base_index: int = 0

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] < 1 or vecs.shape[1] < 1:
            raise InvalidInputError("checkpoint series needs >= 1 vector of dimension >= 1, all equal length")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)

    @property
    def dimension(self):
        return self.vectors.shape[1]


def _as_gradient_weights(w):
    return w if isinstance(w, GradientWeights) else GradientWeights(tuple(w))


def _as_merge_weights(c):
    return c if isinstance(c, MergeWeights) else MergeWeights(tuple(c))


def decay_to_merge_weights(w):
    """Checkpoint weights that reproduce the gradient-decay schedule ``w``."""
    w = np.asarray(_as_gradient_weights(w).w)
    c = np.empty(w.size + 1)
    c[0] = 1.0 - w[0]
    c[1:-1] = w[:-1] - w[1:]
    c[-1] = w[-1]
    # endpoints are only clipped by tolerance-level excursions from [0, 1]
    np.maximum(c, 0.0, out=c)
    return MergeWeights(tuple(c))


def merge_to_gradient_weights(c):
    """Effective per-step gradient weights of merge weights ``c`` (suffix sums)."""
    c = np.asarray(_as_merge_weights(c).c)
    if c.size < 2:
        raise InvalidInputError("need at least two checkpoints to define gradient weights")
    w = np.cumsum(c[:0:-1])[::-1]
    np.minimum(w, 1.0, out=w)
    return GradientWeights(tuple(w))


def merge_checkpoints(series, c):
    if not isinstance(series, CheckpointSeries):
        series = CheckpointSeries(series)
    c = _as_merge_weights(c)
    if len(c) != series.vectors.shape[0]:
        raise InvalidInputError(f"{len(c)} merge weights for {series.vectors.shape[0]} checkpoints")
    return np.asarray(c.c) @ series.vectors


def top_n_average(checkpoints, n):
    """Uniform average of the ``n`` best-scoring checkpoints.

    Equal scores favour the later checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise InvalidInputError("no checkpoints given")
    if not 1 <= n <= len(checkpoints):
        raise InvalidInputError(f"n = {n} outside [1, {len(checkpoints)}]")
    order = sorted(range(len(checkpoints)), key=lambda i: (checkpoints[i][1], i), reverse=True)
    chosen = np.array([np.asarray(checkpoints[i][0], dtype=np.float64) for i in order[:n]])
    return chosen.mean(axis=0)


@dataclass(frozen=True)
class Equivalence:
    merged: np.ndarray
    decayed: np.ndarray
    max_abs_diff: float


def checkpoints_from_updates(theta_n, gradients):
    """``theta_{n+j} = theta_n - sum_{i<=j} g_{n+i-1}`` for j = 0..k."""
    g = np.asarray(gradients, dtype=np.float64)
    out = np.empty((g.shape[0] + 1, g.shape[1]))
    out[0] = theta_n
    if g.shape[1] > 256:
        # row-wise accumulation beats an axis-0 cumsum on wide rows; same
        # summation order, so identical results
        out[1] = g[0]
        for j in range(1, g.shape[0]):
            np.add(out[j], g[j], out=out[j + 1])
    else:
        np.cumsum(g, axis=0, out=out[1:])
    np.subtract(theta_n, out[1:], out=out[1:])
    return out


def simulate_equivalence(gradients, theta_n, w):
    """Compare merging with ``decay_to_merge_weights(w)`` against direct decay."""
    theta_n = np.asarray(theta_n, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    w = _as_gradient_weights(w)
    if theta_n.ndim != 1:
        raise InvalidInputError("theta_n must be a vector")
    if g.ndim != 2 or g.shape[1] != theta_n.size:
        raise InvalidInputError(f"gradients must have shape (k, {theta_n.size})")
    if g.shape[0] != len(w):
        raise InvalidInputError(f"{g.shape[0]} gradients for {len(w)} decay weights")
    series = CheckpointSeries(checkpoints_from_updates(theta_n, g))
    merged = merge_checkpoints(series, decay_to_merge_weights(w))
    decayed = theta_n - np.asarray(w.w) @ g
    return Equivalence(merged, decayed, float(np.max(np.abs(merged - decayed))))


# -- file formats ----------------------------------------------------------


def write_checkpoint(path, vector):
    vec = np.ascontiguousarray(vector, dtype="<f8")
    if vec.ndim != 1:
        raise InvalidInputError("checkpoint must be a vector")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, vec.size) + vec.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a WSM1 checkpoint")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    if len(data) != 16 + 8 * count:
        raise InvalidInputError(f"{path}: payload holds {len(data) - 16} bytes, header says {8 * count}")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)


def parse_weights(text):
    """Parse one CSV row such as ``"1,0.5,0.25"`` into floats."""
    row = text.strip().splitlines()
    if len(row) != 1:
        raise InvalidInputError("weights CSV must contain exactly one row")
    try:
        return [float(x) for x in row[0].split(",")]
    except ValueError:
        raise InvalidInputError(f"bad weights row {row[0]!r}") from None


def format_weights(values):
    return ",".join(repr(float(v)) for v in values) + "\n"
