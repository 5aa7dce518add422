"""Low-precision surrogates of score models and their wire format.

A forest's real parameters fall into two groups: split thresholds and leaf
probabilities. Each group gets its own affine uniform grid
``offset + i * step`` (``i < 2**bits``); every value is replaced by the code
of its nearest level, ties going to the lower code. Tree topology and split
features travel unquantized.

Wire format, little-endian::

    magic    4s   b"QMX1"
    version  u8   1
    learner  u8
    bits     u8   leaf code width, 0 = unquantized float64
    tbits    u8   threshold code width, 0 = unquantized float64
    dim      u16
    trees    u16
    leaf_step f64, leaf_offset f64, thr_step f64, thr_offset f64
    nodes    u32  (one real parameter per node)
    structure     preorder leaf flags (1 bit per node) followed by the split
                  feature of every internal node (ceil(log2 dim) bits each),
                  zero-padded to a byte
    payload       per node in preorder: threshold code (tbits) for internal
                  nodes, leaf code (bits) for leaves, zero-padded to a byte;
                  or ``nodes`` float64 values when unquantized
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CorruptPayloadError, InvalidSpecError
from .scoring import Learner, ScoreModel

MAGIC = b"QMX1"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBHHddddI")
HEADER_SIZE = _HEADER.size
MAX_BITS = 32


@dataclass(frozen=True)
class QuantSpec:
    """``bits=None`` sends float64 parameters unchanged.

    ``threshold_bits`` fixes the precision of split thresholds independently
    of the leaf precision; ``None`` quantizes thresholds at ``bits`` as well.
    """

    bits: int | None = None
    threshold_bits: int | None = 8
    mode: str = "affine-per-model"

    def __post_init__(self):
        if self.mode != "affine-per-model":
            raise InvalidSpecError(f"unknown quantization mode {self.mode!r}")
        for name in ("bits", "threshold_bits"):
            b = getattr(self, name)
            if b is not None and not (isinstance(b, (int, np.integer)) and 1 <= b <= MAX_BITS):
                raise InvalidSpecError(f"{name} must be an integer in 1..{MAX_BITS} or None, got {b!r}")

    @property
    def quantized(self) -> bool:
        return self.bits is not None

    @property
    def effective_threshold_bits(self) -> int | None:
        if self.bits is None:
            return None
        return self.threshold_bits if self.threshold_bits is not None else self.bits

    @classmethod
    def parse(cls, text: str, threshold_bits: int | None = 8) -> "QuantSpec":
        text = str(text).strip().lower()
        if text in ("none", "unquantized", "full"):
            return cls(None, threshold_bits)
        try:
            bits = int(text)
        except ValueError:
            raise InvalidSpecError(f"cannot parse bit width {text!r}") from None
        if bits == 0:
            raise InvalidSpecError("bit width 0 is not a quantizer; use 'none'")
        return cls(bits, threshold_bits)

    @property
    def label(self) -> str:
        return "none" if self.bits is None else str(self.bits)


def affine_grid(values: np.ndarray, bits: int) -> tuple[float, float]:
    """``(offset, step)`` of the ``2**bits``-level grid spanning ``values``."""
    if bits < 1:
        raise InvalidSpecError(f"bits must be >= 1, got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    step = (hi - lo) / ((1 << bits) - 1) if hi > lo else 1.0
    if step == 0.0:
        step = 1.0
    return lo, step


def quantize_values(values, bits: int, offset: float | None = None, step: float | None = None):
    """Nearest-level codes of ``values`` on an affine grid (ties to the lower code)."""
    values = np.asarray(values, dtype=np.float64)
    if offset is None or step is None:
        offset, step = affine_grid(values, bits)
    top = (1 << bits) - 1
    lower = np.clip(np.floor((values - offset) / step), 0, top)
    upper = np.minimum(lower + 1, top)
    d_lo = np.abs(values - (offset + lower * step))
    d_hi = np.abs(offset + upper * step - values)
    codes = np.where(d_hi < d_lo, upper, lower).astype(np.uint64)
    return codes, offset, step


def dequantize_values(codes, offset: float, step: float) -> np.ndarray:
    return offset + np.asarray(codes, dtype=np.float64) * step


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Quantized (or raw) forest parameters plus the unquantized structure."""

    learner: int
    dim: int
    bits: int  # 0 = unquantized
    threshold_bits: int
    n_trees: int
    is_leaf: np.ndarray
    features: np.ndarray  # split feature of each internal node, preorder
    codes: np.ndarray | None  # uint64 per node when quantized
    raw: np.ndarray | None  # float64 per node when unquantized
    leaf_step: float = 0.0
    leaf_offset: float = 0.0
    thr_step: float = 0.0
    thr_offset: float = 0.0

    @property
    def param_count(self) -> int:
        return len(self.is_leaf)

    @property
    def quantized(self) -> bool:
        return self.bits > 0

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        same = (
            (self.learner, self.dim, self.bits, self.threshold_bits, self.n_trees)
            == (other.learner, other.dim, other.bits, other.threshold_bits, other.n_trees)
            and np.array_equal(self.is_leaf, other.is_leaf)
            and np.array_equal(self.features, other.features)
        )
        if not same:
            return False
        if self.quantized:
            return (
                np.array_equal(self.codes, other.codes)
                and struct.pack("<4d", self.leaf_step, self.leaf_offset, self.thr_step, self.thr_offset)
                == struct.pack("<4d", other.leaf_step, other.leaf_offset, other.thr_step, other.thr_offset)
            )
        return self.raw.tobytes() == other.raw.tobytes()

    __hash__ = None

    def decoded_params(self) -> np.ndarray:
        if not self.quantized:
            return self.raw.copy()
        codes = self.codes
        return np.where(
            self.is_leaf,
            dequantize_values(codes, self.leaf_offset, self.leaf_step),
            dequantize_values(codes, self.thr_offset, self.thr_step),
        )


def quantize_model(model: ScoreModel, spec: QuantSpec) -> QuantizedModel:
    """Apply the quantizer to a trained forest. Pure and deterministic."""
    if model.n_nodes < 1:
        raise InvalidSpecError("model has no parameters")
    is_leaf = model.is_leaf.copy()
    features = model.feature[~is_leaf].astype(np.int64)
    common = dict(learner=int(model.learner), dim=model.dim, n_trees=model.n_trees, is_leaf=is_leaf, features=features)
    if not spec.quantized:
        return QuantizedModel(bits=0, threshold_bits=0, codes=None, raw=model.params.astype(np.float64).copy(), **common)

    bits, tbits = spec.bits, spec.effective_threshold_bits
    params = model.params
    codes = np.zeros(model.n_nodes, dtype=np.uint64)
    if tbits == bits and spec.threshold_bits is None:
        # one grid over the whole parameter vector
        c, off, step = quantize_values(params, bits)
        return QuantizedModel(
            bits=bits, threshold_bits=tbits, codes=c, raw=None,
            leaf_step=step, leaf_offset=off, thr_step=step, thr_offset=off, **common,
        )
    lc, l_off, l_step = quantize_values(params[is_leaf], bits)
    tc, t_off, t_step = quantize_values(params[~is_leaf], tbits)
    codes[is_leaf] = lc
    codes[~is_leaf] = tc
    return QuantizedModel(
        bits=bits, threshold_bits=tbits, codes=codes, raw=None,
        leaf_step=l_step, leaf_offset=l_off, thr_step=t_step, thr_offset=t_off, **common,
    )


def dequantize(qm: QuantizedModel) -> ScoreModel:
    """Evaluatable surrogate whose real parameters are the decoded levels."""
    right, offsets, ok = _kernels.parse_preorder(qm.is_leaf, qm.n_trees)
    if not ok:
        raise CorruptPayloadError("leaf flags do not describe the declared number of trees")
    feature = np.full(qm.param_count, _kernels.LEAF, dtype=np.int32)
    feature[~qm.is_leaf] = qm.features
    return ScoreModel(
        dim=qm.dim,
        feature=feature,
        right=right,
        params=qm.decoded_params(),
        tree_offsets=offsets,
        learner=Learner(qm.learner),
    )


# -- bit packing ------------------------------------------------------------


def _pack_fields(values: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """LSB-first bit stream of ``values[i]`` written in ``widths[i]`` bits."""
    values = np.asarray(values, dtype=np.uint64)
    widths = np.asarray(widths, dtype=np.int64)
    if values.size == 0:
        return np.zeros(0, dtype=np.uint8)
    wmax = int(widths.max())
    if wmax == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(wmax, dtype=np.uint64)
    bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return bits[np.arange(wmax)[None, :] < widths[:, None]]


def _unpack_fields(bits: np.ndarray, widths: np.ndarray) -> np.ndarray:
    widths = np.asarray(widths, dtype=np.int64)
    if widths.size == 0:
        return np.zeros(0, dtype=np.uint64)
    wmax = int(widths.max())
    starts = np.concatenate([[0], np.cumsum(widths)[:-1]])
    j = np.arange(wmax)
    pos = np.minimum(starts[:, None] + j[None, :], max(len(bits) - 1, 0))
    mask = j[None, :] < widths[:, None]
    b = np.where(mask, bits[pos] if len(bits) else 0, 0).astype(np.uint64)
    return (b << j.astype(np.uint64)[None, :]).sum(axis=1, dtype=np.uint64)


def _to_bytes(bitstream: np.ndarray) -> bytes:
    return np.packbits(bitstream, bitorder="little").tobytes()


def feature_bits(dim: int) -> int:
    return max(1, (dim - 1).bit_length())


def _structure_bits(n_nodes: int, n_internal: int, dim: int) -> int:
    return n_nodes + n_internal * feature_bits(dim)


def serialize(qm: QuantizedModel) -> bytes:
    header = _HEADER.pack(
        MAGIC, VERSION, qm.learner, qm.bits, qm.threshold_bits, qm.dim, qm.n_trees,
        qm.leaf_step, qm.leaf_offset, qm.thr_step, qm.thr_offset, qm.param_count,
    )
    fb = feature_bits(qm.dim)
    structure = np.concatenate([
        qm.is_leaf.astype(np.uint8),
        _pack_fields(qm.features, np.full(len(qm.features), fb)),
    ])
    if qm.quantized:
        widths = np.where(qm.is_leaf, qm.bits, qm.threshold_bits)
        payload = _to_bytes(_pack_fields(qm.codes, widths))
    else:
        payload = qm.raw.astype("<f8").tobytes()
    return header + _to_bytes(structure) + payload


def deserialize(data: bytes) -> QuantizedModel:
    """Inverse of :func:`serialize`; raises :class:`CorruptPayloadError` on any defect."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise CorruptPayloadError(f"payload shorter than the {HEADER_SIZE}-byte header", len(data))
    (magic, version, learner, bits, tbits, dim, n_trees,
     l_step, l_off, t_step, t_off, n_nodes) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptPayloadError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptPayloadError(f"unsupported version {version}", 4)
    if learner not in {int(x) for x in Learner}:
        raise CorruptPayloadError(f"unknown learner id {learner}", 5)
    if bits > MAX_BITS or tbits > MAX_BITS or (bits == 0) != (tbits == 0):
        raise CorruptPayloadError(f"invalid code widths bits={bits} threshold_bits={tbits}", 6)
    if dim < 1:
        raise CorruptPayloadError("dimension must be positive", 8)
    if n_trees < 1 or n_nodes < n_trees:
        raise CorruptPayloadError(f"{n_trees} trees cannot hold {n_nodes} nodes", 10)
    if bits and not all(np.isfinite(v) for v in (l_step, l_off, t_step, t_off)):
        raise CorruptPayloadError("non-finite quantization metadata", 12)
    if bits and (l_step <= 0 or t_step <= 0):
        raise CorruptPayloadError("quantization steps must be positive", 12)

    pos = HEADER_SIZE
    flag_bytes = (n_nodes + 7) // 8
    if len(data) < pos + flag_bytes:
        raise CorruptPayloadError("truncated structure section", len(data))
    flags = np.unpackbits(np.frombuffer(data, np.uint8, flag_bytes, pos), bitorder="little")[:n_nodes]
    is_leaf = flags.astype(bool)
    n_internal = int(n_nodes - is_leaf.sum())
    fb = feature_bits(dim)
    s_bytes = (_structure_bits(n_nodes, n_internal, dim) + 7) // 8
    if len(data) < pos + s_bytes:
        raise CorruptPayloadError("truncated structure section", len(data))
    s_bits = np.unpackbits(np.frombuffer(data, np.uint8, s_bytes, pos), bitorder="little")
    features = _unpack_fields(s_bits[n_nodes:], np.full(n_internal, fb)).astype(np.int64)
    if n_internal and features.max() >= dim:
        raise CorruptPayloadError(f"split feature {int(features.max())} outside dimension {dim}", pos)
    _, _, ok = _kernels.parse_preorder(is_leaf, n_trees)
    if not ok:
        raise CorruptPayloadError(f"leaf flags do not form {n_trees} complete trees", pos)
    pos += s_bytes

    if bits:
        widths = np.where(is_leaf, bits, tbits)
        p_bytes = (int(widths.sum()) + 7) // 8
    else:
        p_bytes = 8 * n_nodes
    if len(data) != pos + p_bytes:
        raise CorruptPayloadError(
            f"expected {pos + p_bytes} bytes, got {len(data)}", min(len(data), pos + p_bytes)
        )
    if bits:
        p_bits = np.unpackbits(np.frombuffer(data, np.uint8, p_bytes, pos), bitorder="little")
        codes = _unpack_fields(p_bits, widths)
        raw = None
    else:
        codes = None
        raw = np.frombuffer(data, "<f8", n_nodes, pos).astype(np.float64)
        if not np.all(np.isfinite(raw)):
            raise CorruptPayloadError("non-finite parameter value", pos)
    return QuantizedModel(
        learner=learner, dim=dim, bits=bits, threshold_bits=tbits, n_trees=n_trees,
        is_leaf=is_leaf, features=features, codes=codes, raw=raw,
        leaf_step=l_step, leaf_offset=l_off, thr_step=t_step, thr_offset=t_off,
    )


def payload_size(model: QuantizedModel | ScoreModel | None) -> int:
    """Bytes on the wire; a plain :class:`ScoreModel` is sent unquantized."""
    if model is None:
        return 0
    if isinstance(model, ScoreModel):
        model = quantize_model(model, QuantSpec(None))
    n_internal = model.param_count - int(model.is_leaf.sum())
    s_bytes = (_structure_bits(model.param_count, n_internal, model.dim) + 7) // 8
    if model.quantized:
        p_bits = int(model.is_leaf.sum()) * model.bits + n_internal * model.threshold_bits
        p_bytes = (p_bits + 7) // 8
    else:
        p_bytes = 8 * model.param_count
    return HEADER_SIZE + s_bytes + p_bytes


# -- communication accounting ---------------------------------------------

MODEL = "model"
FASTLSU = "fastlsu"


class CommLedger:
    """Every simulated transmission, in bits, keyed by sender, receiver and kind."""

    def __init__(self):
        self._messages: list[tuple[int, int, str, int]] = []

    def record(self, sender: int, receiver: int, kind: str, n_bits: int) -> None:
        if n_bits < 0:
            raise ValueError("negative message size")
        self._messages.append((sender, receiver, kind, int(n_bits)))

    def record_bytes(self, sender: int, receiver: int, kind: str, n_bytes: int) -> None:
        self.record(sender, receiver, kind, 8 * n_bytes)

    @property
    def messages(self) -> list[tuple[int, int, str, int]]:
        return list(self._messages)

    def total_bits(self, kind: str | None = None) -> int:
        return sum(b for _, _, k, b in self._messages if kind is None or k == kind)

    def total_bytes(self, kind: str | None = None) -> float:
        return self.total_bits(kind) / 8

    def kb(self, kind: str | None = None) -> float:
        """Kilobytes, 1 kb = 1000 bytes."""
        return self.total_bytes(kind) / 1000

    def sent_bits(self, agent: int, kind: str | None = None) -> int:
        return sum(b for s, _, k, b in self._messages if s == agent and (kind is None or k == kind))

    def received_bits(self, agent: int, kind: str | None = None) -> int:
        return sum(b for _, r, k, b in self._messages if r == agent and (kind is None or k == kind))

    def by_agent(self) -> dict[int, dict[str, dict[str, float]]]:
        """``{agent: {kind: {"sent": bytes, "received": bytes}}}``."""
        out: dict = defaultdict(lambda: defaultdict(lambda: {"sent": 0.0, "received": 0.0}))
        for s, r, k, b in self._messages:
            out[s][k]["sent"] += b / 8
            out[r][k]["received"] += b / 8
        return {a: dict(v) for a, v in out.items()}
