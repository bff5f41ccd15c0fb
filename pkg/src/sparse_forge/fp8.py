"""Software FP8 E4M3 codec, block quantization and precision audits.

E4M3 here is the OCP "FN" variant: exponent bias 7, no infinities, one NaN
pattern per sign (``S.1111.111``), largest finite magnitude 448, smallest
subnormal 2**-9. Encoding rounds to nearest even and saturates.
"""
from dataclasses import dataclass
import enum
import struct
import warnings

import numpy as np

from ._validation import as_float_matrix
from .exceptions import InvalidInputError

E4M3_MAX = 448.0
MIN_SUBNORMAL = 2.0**-9
MIN_NORMAL = 2.0**-6
NAN_CODE = 0x7F


def _build_table():
    table = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0xF and man == 0x7:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * man * MIN_SUBNORMAL
        else:
            table[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return table


DECODE_TABLE = _build_table()
# magnitudes of codes 0x00..0x7E, ascending
_POSITIVE = DECODE_TABLE[:NAN_CODE]


def e4m3_decode(code):
    """Exact value of one or more E4M3 codes (NaN pattern decodes to NaN)."""
    c = np.asarray(code)
    if c.dtype.kind not in "ui":
        raise InvalidInputError("codes must be integers")
    if np.any((c < 0) | (c > 255)):
        raise InvalidInputError("codes must be bytes in [0, 255]")
    out = DECODE_TABLE[c.astype(np.intp)]
    return float(out) if out.ndim == 0 else out


def e4m3_round(x):
    """Round reals onto the E4M3 value grid (RNE, saturating), keeping NaN."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    _, exp = np.frexp(np.maximum(mag, MIN_NORMAL))
    # frexp gives mag = m * 2**exp with m in [0.5, 1); 3 mantissa bits below
    # the leading one means a spacing of 2**(exp - 4). Subnormals share the
    # spacing of the lowest binade.
    quantum = np.ldexp(1.0, exp - 4)
    rounded = np.rint(mag / quantum) * quantum
    rounded = np.minimum(rounded, E4M3_MAX)
    return np.copysign(rounded, x)


def e4m3_encode(x):
    """Encode reals as E4M3 codes (``uint8``); NaN becomes ``0x7F``."""
    x = np.asarray(x, dtype=np.float64)
    nan = np.isnan(x)
    r = e4m3_round(np.where(nan, 0.0, x))
    mag_code = np.searchsorted(_POSITIVE, np.abs(r)).astype(np.uint8)
    code = np.where(np.signbit(r), mag_code | 0x80, mag_code)
    code = np.where(nan, NAN_CODE, code).astype(np.uint8)
    return int(code) if code.ndim == 0 else code


class Layout(enum.Enum):
    """Quantization block shape."""

    ACT_GRAD = (1, 128)
    WEIGHT = (128, 128)

    @property
    def tag(self):
        return 0 if self is Layout.ACT_GRAD else 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, Layout):
            return value
        names = {"act_grad": cls.ACT_GRAD, "weight": cls.WEIGHT, 0: cls.ACT_GRAD, 1: cls.WEIGHT}
        try:
            return names[value]
        except (KeyError, TypeError):
            raise InvalidInputError(f"unknown layout {value!r}") from None


@dataclass(frozen=True)
class QuantTensor:
    shape: tuple
    layout: Layout
    codes: np.ndarray  # uint8, shape == self.shape
    scales: np.ndarray  # float32, one per block, shape == block grid

    @property
    def block_grid(self):
        br, bc = self.layout.value
        return (-(-self.shape[0] // br), -(-self.shape[1] // bc))

    @property
    def nan_count(self):
        return int(np.count_nonzero((self.codes & 0x7F) == NAN_CODE))


@dataclass(frozen=True)
class PrecisionReport:
    layer: str
    underflow_rate: float
    distortion: float
    flagged: bool
    error: str = None


def _block_view(x, layout):
    """Pad ``x`` with zeros up to whole blocks and return ``(grid_r, br, grid_c, bc)``."""
    br, bc = layout.value
    rows, cols = x.shape
    gr, gc = -(-rows // br), -(-cols // bc)
    padded = np.zeros((gr * br, gc * bc), dtype=x.dtype)
    padded[:rows, :cols] = x
    return padded.reshape(gr, br, gc, bc)


def _expand_scales(scales, layout, shape):
    br, bc = layout.value
    full = np.repeat(np.repeat(scales.astype(np.float64), br, axis=0), bc, axis=1)
    return full[: shape[0], : shape[1]]


def quantize(tensor, layout="act_grad"):
    """Block-quantize a matrix: per block ``scale = fp32(amax / 448)``.

    All-zero blocks get scale 1. Partial edge blocks use their own amax.
    """
    layout = Layout.parse(layout)
    x = as_float_matrix(tensor, "tensor")
    blocks = _block_view(x, layout)
    amax = np.abs(blocks).max(axis=(1, 3))
    scales = np.where(amax > 0, amax / E4M3_MAX, 1.0).astype(np.float32)
    # an fp32 scale can underflow to 0 for denormal-range amax
    scales = np.where(scales > 0, scales, np.float32(np.finfo(np.float32).smallest_subnormal))
    scales = np.where(amax > 0, scales, np.float32(1.0))
    codes = e4m3_encode(x / _expand_scales(scales, layout, x.shape))
    return QuantTensor(x.shape, layout, codes, scales)


def dequantize(q):
    """``decode(code) * scale`` per element. NaN codes propagate as NaN and
    raise a ``RuntimeWarning``."""
    out = DECODE_TABLE[q.codes.astype(np.intp)] * _expand_scales(q.scales, q.layout, q.shape)
    if q.nan_count:
        warnings.warn(f"{q.nan_count} NaN code(s) in quantized tensor", RuntimeWarning, stacklevel=2)
    return out


def _check_pair(original, q):
    x = np.asarray(original, dtype=np.float64)
    shape = q.shape if isinstance(q, QuantTensor) else np.shape(q)
    if x.shape != tuple(shape):
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {tuple(shape)}")
    recon = dequantize(q) if isinstance(q, QuantTensor) else np.asarray(q, dtype=np.float64)
    return x, recon


def underflow_rate(original, q, nonzero_only=False):
    """Share of elements that were nonzero but dequantize to zero.

    The denominator is every element, or only the nonzero originals when
    ``nonzero_only`` is set.
    """
    x, recon = _check_pair(original, q)
    lost = np.count_nonzero((x != 0) & (recon == 0))
    denom = np.count_nonzero(x) if nonzero_only else x.size
    return lost / denom if denom else 0.0


def cosine_similarity(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def distortion(original, q, per_block=False):
    """Cosine similarity between the original and the reconstruction.

    ``q`` may be a :class:`QuantTensor` or an already reconstructed matrix.
    With ``per_block`` the similarity is averaged over quantization blocks
    (needs a ``QuantTensor`` for the layout).
    """
    x, recon = _check_pair(original, q)
    if not per_block:
        return cosine_similarity(x, recon)
    if not isinstance(q, QuantTensor):
        raise InvalidInputError("per-block distortion needs a QuantTensor")
    bx = _block_view(x, q.layout)
    brc = _block_view(recon, q.layout)
    sims = [
        cosine_similarity(bx[i, :, j, :], brc[i, :, j, :])
        for i in range(bx.shape[0])
        for j in range(bx.shape[2])
    ]
    return float(np.mean(sims))


def transpose_quantized(q):
    """Transpose a weight-layout tensor without requantizing.

    Square blocks map onto square blocks, so codes and the scale grid are
    simply transposed.
    """
    if q.layout is not Layout.WEIGHT:
        raise InvalidInputError("only the weight [128, 128] layout can be transposed in place")
    return QuantTensor(
        (q.shape[1], q.shape[0]),
        q.layout,
        np.ascontiguousarray(q.codes.T),
        np.ascontiguousarray(q.scales.T),
    )


def audit(layers, underflow_threshold=0.01, distortion_threshold=0.999):
    """Quantize each ``(name, matrix, layout)`` and report its health.

    A layer is flagged when underflow exceeds ``underflow_threshold`` or
    distortion falls below ``distortion_threshold``. Bad layers produce a
    report carrying the error instead of aborting the audit.
    """
    reports = []
    for name, matrix, layout in layers:
        try:
            q = quantize(matrix, layout)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                u = underflow_rate(matrix, q)
                d = distortion(matrix, q)
        except InvalidInputError as exc:
            reports.append(PrecisionReport(str(name), float("nan"), float("nan"), True, str(exc)))
            continue
        flagged = bool(u > underflow_threshold or d < distortion_threshold)
        reports.append(PrecisionReport(str(name), u, d, flagged))
    return reports


# -- file formats ----------------------------------------------------------

MAGIC = b"FP8T"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")


def write_tensor(path, matrix, layout="act_grad"):
    layout = Layout.parse(layout)
    x = np.ascontiguousarray(as_float_matrix(matrix, "matrix"), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1], layout.tag))
        fh.write(x.tobytes())


def read_tensor(path):
    """Return ``(matrix, layout)`` from an FP8T tensor file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, version, rows, cols, tag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: not an FP8T tensor file")
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + 8 * rows * cols:
        raise InvalidInputError(f"{path}: payload size does not match {rows}x{cols}")
    matrix = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
    return matrix, Layout.parse(tag)


AUDIT_HEADER = ["layer", "underflow_rate", "distortion", "flag"]


def audit_rows(reports):
    for r in reports:
        yield [r.layer, repr(r.underflow_rate), repr(r.distortion), int(r.flagged)]
