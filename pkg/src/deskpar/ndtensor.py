"""Dense tensor kernels with explicit backward functions.

Values are plain ``numpy.ndarray`` objects. Every forward kernel ``op`` has a
matching ``op_backward`` that takes the upstream gradient followed by the same
inputs the forward saw; nothing is taped, so callers decide what to keep
around (which is what activation checkpointing needs).

Three dtypes are in play: float64 (equivalence tests), float32 (compute
precision) and an emulated e4m3 float8 stored as float32 values restricted to
the e4m3 grid.
"""

from __future__ import annotations

import enum
import hashlib
import math

import numpy as np
from scipy.special import ndtr, ndtri


class DType(enum.Enum):
    F64 = "float64"
    F32 = "float32"
    F8E4M3_EMULATED = "float8_e4m3"

    @property
    def np(self) -> np.dtype:
        return np.dtype(np.float32 if self is DType.F8E4M3_EMULATED else self.value)

    @property
    def itemsize(self) -> int:
        return {DType.F64: 8, DType.F32: 4, DType.F8E4M3_EMULATED: 1}[self]

    @classmethod
    def parse(cls, value: "DType | str | np.dtype") -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            key = value.lower()
            aliases = {"f64": "float64", "fp64": "float64", "f32": "float32",
                       "fp32": "float32", "f8": "float8_e4m3", "e4m3": "float8_e4m3"}
            key = aliases.get(key, key)
            for member in cls:
                if member.value == key:
                    return member
            raise ValueError(f"unknown dtype {value!r}")
        return cls(np.dtype(value).name)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op}: non-finite values in result")
    return x


def _same_dtype(op: str, *arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays}
    if len(dtypes) != 1:
        raise TypeError(f"{op}: dtype mismatch {sorted(str(d) for d in dtypes)}")


# --------------------------------------------------------------------------
# matmul


def _rows(x: np.ndarray) -> np.ndarray:
    """View ``x[..., k]`` as a 2-D ``[rows, k]`` matrix (works for empty extents)."""
    return x.reshape(math.prod(x.shape[:-1]), x.shape[-1])


def _mm2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum reduces each output element over k in a fixed order, so results
    # are invariant under taking row or column subsets (BLAS is not).
    return np.einsum("ik,kj->ij", np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` are treated as rows."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    _same_dtype("matmul", a, b)
    lead = a.shape[:-1]
    out = _mm2(_rows(a), b).reshape(*lead, b.shape[1])
    return check_finite(out, "matmul")


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a2 = _rows(a)
    d2 = _rows(d_out)
    d_a = _mm2(d2, b.T).reshape(a.shape)
    d_b = _mm2(a2.T, d2)
    return d_a, d_b


def matmul_backward_input(d_out: np.ndarray, b: np.ndarray) -> np.ndarray:
    lead = d_out.shape[:-1]
    return _mm2(_rows(d_out), b.T).reshape(*lead, b.shape[0])


def matmul_backward_weight(d_out: np.ndarray, a: np.ndarray) -> np.ndarray:
    return _mm2(_rows(a).T, _rows(d_out))


# --------------------------------------------------------------------------
# pointwise and shape ops


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return check_finite(a + b, "add")


def add_backward(d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return d_out, d_out


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return check_finite(a * b, "mul")


def mul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return d_out * b, d_out * a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return check_finite(x * _sigmoid(x), "silu")


def silu_backward(d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return d_out * (s * (1.0 + x * (1.0 - s)))


def transpose(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, axes))


def transpose_backward(d_out: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(d_out, np.argsort(axes)))


def reshape(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(shape)


def reshape_backward(d_out: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(d_out).reshape(shape)


def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(d_out: np.ndarray, ids: np.ndarray, num_rows: int) -> np.ndarray:
    """Scatter-add rows of ``d_out`` into a zero table (fixed flat-index order)."""
    d_table = np.zeros((num_rows, d_out.shape[-1]), dtype=d_out.dtype)
    np.add.at(d_table, np.asarray(ids).reshape(-1), _rows(d_out))
    return d_table


# --------------------------------------------------------------------------
# rotary embedding


def precompute_freqs_cis(seq_len: int, head_dim: int, theta: float = 10000.0,
                         dtype=np.float64) -> np.ndarray:
    """Rotation table of shape ``(seq_len, head_dim // 2, 2)`` holding (cos, sin)."""
    if head_dim % 2:
        raise ShapeError("rotary embedding needs an even head dim")
    inv = 1.0 / theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1).astype(dtype)


def rotary_apply(x: np.ndarray, freqs_cis: np.ndarray) -> np.ndarray:
    """Rotate (even, odd) feature pairs of ``x[..., seq, heads, hd]``."""
    seq, _, hd = x.shape[-3:]
    if freqs_cis.shape != (seq, hd // 2, 2):
        raise ShapeError(f"rotary_apply: freqs {freqs_cis.shape} vs x {x.shape}")
    cos = freqs_cis[:, None, :, 0]
    sin = freqs_cis[:, None, :, 1]
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rotary_backward(d_out: np.ndarray, freqs_cis: np.ndarray) -> np.ndarray:
    inverse = freqs_cis.copy()
    inverse[..., 1] = -inverse[..., 1]
    return rotary_apply(d_out, inverse)


# --------------------------------------------------------------------------
# normalisation, softmax, attention, loss


def rms_norm(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("rms_norm over an empty feature dim")
    if w.shape != (d,):
        raise ShapeError(f"rms_norm: weight {w.shape} vs features {d}")
    rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return check_finite(x * rstd * w, "rms_norm")


def rms_norm_backward(d_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                      eps: float) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * rstd
    d_w = (d_out * xhat).reshape(-1, d).sum(axis=0)
    g = d_out * w
    d_x = rstd * (g - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
    return d_x, d_w


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _scores(q: np.ndarray, k: np.ndarray, causal: bool) -> np.ndarray:
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if causal:
        sq, sk = s.shape[-2:]
        mask = np.triu(np.ones((sq, sk), dtype=bool), k=1 + (sk - sq))
        s = np.where(mask, -np.inf, s)
    return s


def _check_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"sdpa: q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[-2] < 1:
        raise ShapeError("sdpa: empty sequence")


def sdpa(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = True) -> np.ndarray:
    """Scaled dot-product attention over ``[..., heads, seq, head_dim]``."""
    _check_attention(q, k, v)
    p = softmax(_scores(q, k, causal))
    return check_finite(np.matmul(p, v), "sdpa")


def sdpa_backward(d_out: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  causal: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = softmax(_scores(q, k, causal))
    d_v = np.matmul(np.swapaxes(p, -1, -2), d_out)
    d_p = np.matmul(d_out, np.swapaxes(v, -1, -2))
    d_s = p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True))
    d_q = np.matmul(d_s, k) * scale
    d_k = np.matmul(np.swapaxes(d_s, -1, -2), q) * scale
    return d_q, d_k, d_v


def _check_targets(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross entropy: logits {logits.shape}, targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("cross entropy: target index out of range")
    return targets


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = _check_targets(logits, targets)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(len(targets)), targets]))
    if not math.isfinite(loss):
        raise NonFiniteError("softmax_cross_entropy: non-finite loss")
    return loss


def softmax_cross_entropy_backward(logits: np.ndarray, targets: np.ndarray,
                                   d_loss: float = 1.0) -> np.ndarray:
    targets = _check_targets(logits, targets)
    g = softmax(logits, axis=1)
    g[np.arange(len(targets)), targets] -= 1.0
    return g * (d_loss / logits.shape[0])


# --------------------------------------------------------------------------
# counter-based random numbers and parameter init

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):  # wraparound is the point
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def counter_key(*parts: int) -> np.uint64:
    """Fold integers into one 64-bit key; order matters, nothing is stateful."""
    h = np.uint64(0x243F6A8885A308D3)
    for p in parts:
        h = _splitmix(h ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))[()]
    return np.uint64(h)


def counter_uniform(key: np.uint64, index: np.ndarray) -> np.ndarray:
    """Uniform doubles in (0, 1), element ``i`` depending only on (key, index[i])."""
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _splitmix(key + (idx + np.uint64(1)) * _GOLDEN)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


INIT_STD = 0.02
_TRUNC = 2.0  # truncation at +-2 std


def param_init_kind(name: str) -> str:
    return "ones" if name.endswith("norm.weight") else "trunc_normal"


def init_param(name: str, global_shape: tuple[int, ...], master_seed: int,
               region: tuple[slice, ...] | None = None,
               dtype: DType | str = DType.F64) -> np.ndarray:
    """Materialise parameter ``name`` (or the hyperrectangle ``region`` of it).

    Element ``i`` (flat, row-major, global indexing) is a function of
    ``(master_seed, hash(name), i)`` only, so any shard equals the matching
    slice of the full tensor.
    """
    if not name:
        raise ValueError("parameter name must be non-empty")
    shape = tuple(int(s) for s in global_shape)
    np_dtype = DType.parse(dtype).np
    region = tuple(region) if region is not None else tuple(slice(0, s) for s in shape)
    if len(region) != len(shape):
        raise ShapeError(f"region rank {len(region)} vs shape {shape}")
    ranges = [np.arange(*sl.indices(s)) for sl, s in zip(region, shape)]
    local_shape = tuple(len(r) for r in ranges)
    if param_init_kind(name) == "ones":
        return np.ones(local_shape, dtype=np_dtype)
    flat = np.zeros(local_shape, dtype=np.int64)
    stride = 1
    for axis in range(len(shape) - 1, -1, -1):
        view = [1] * len(shape)
        view[axis] = local_shape[axis]
        flat = flat + ranges[axis].reshape(view) * stride
        stride *= shape[axis]
    u = counter_uniform(counter_key(master_seed, stable_hash(name)), flat)
    lo, hi = ndtr(-_TRUNC), ndtr(_TRUNC)
    return (ndtri(lo + u * (hi - lo)) * INIT_STD).astype(np_dtype)


# --------------------------------------------------------------------------
# e4m3 (fn variant: no infinities, S.1111.111 is NaN)

_E4M3_BIAS = 7
_E4M3_MANT = 3


def e4m3_decode(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).astype(np.int64)
    sign = np.where(bits & 0x80, -1.0, 1.0)
    exp = (bits >> 3) & 0xF
    mant = bits & 0x7
    normal = sign * (1.0 + mant / 8.0) * np.exp2(exp - _E4M3_BIAS)
    subnormal = sign * (mant / 8.0) * 2.0 ** (1 - _E4M3_BIAS)
    out = np.where(exp == 0, subnormal, normal)
    return np.where((exp == 0xF) & (mant == 0x7), np.nan, out)


def e4m3_table() -> np.ndarray:
    """All 256 decoded bit patterns (NaN for the two NaN encodings)."""
    return e4m3_decode(np.arange(256, dtype=np.uint8))


E4M3_MAX = 448.0
_E4M3_MIN_NORMAL_EXP = 1 - _E4M3_BIAS


def quantize_e4m3(x: np.ndarray) -> np.ndarray:
    """Round to the nearest e4m3 value (ties to even), saturating at +-448."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFiniteError("quantize_e4m3: non-finite input")
    mag = np.abs(x)
    with np.errstate(divide="ignore"):
        e = np.floor(np.log2(np.where(mag > 0, mag, 1.0)))
    e = np.maximum(e, _E4M3_MIN_NORMAL_EXP)
    spacing = np.exp2(e - _E4M3_MANT)
    q = np.round(mag / spacing) * spacing
    q = np.minimum(q, E4M3_MAX)
    return (np.sign(x) * q).astype(np.float32)


def e4m3_encode(x: np.ndarray) -> np.ndarray:
    """Bit patterns of already-representable values (raises otherwise)."""
    table = e4m3_table()
    finite = np.where(np.isfinite(table))[0]
    lookup = {float(table[i]): i for i in finite if not (table[i] == 0 and i == 0x80)}
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    try:
        codes = [lookup[float(v)] for v in flat]
    except KeyError as exc:
        raise ValueError(f"value {exc.args[0]} is not representable in e4m3") from None
    return np.array(codes, dtype=np.uint8).reshape(np.shape(x))
