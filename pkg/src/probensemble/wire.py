"""Bit-exact binary wire format for the three message kinds.

Layout (all multi-byte integers little-endian):

    offset  size  field
    0       2     magic 0x50 0x45 ("PE")
    2       1     version (0x01)
    3       1     kind (0x01 contribution, 0x02 broadcast, 0x03 parameters)
    4       4     client_id   u32 (0 = server)
    8       4     round       u32
    12      4     n_samples   u32 (n_params for parameter messages)
    16      2     n_classes   u16 (0 for parameter messages)
    18      2     reserved    u16 (written 0, ignored on read)

Body of probability messages: per sample, sample_id u64 followed by
n_classes float32 probabilities. Body of parameter messages: n_params
float32 values. Probabilities are float64 in memory and quantized to
float32 on the wire; decoding re-validates each row as a simplex at the
wire tolerance 1e-4 and renormalizes, so quantization drift never leaks
into downstream invariants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    LengthMismatchError,
    OversizeError,
    SimplexViolationError,
    TruncatedError,
    WireFormatError,
)

MAGIC = b"PE"
VERSION = 1

KIND_CONTRIBUTION = 0x01
KIND_BROADCAST = 0x02
KIND_PARAMETERS = 0x03

_HEADER = struct.Struct("<2sBBIIIHH")
HEADER_SIZE = _HEADER.size  # 20

WIRE_TOL = 1e-4
MAX_MESSAGE_SIZE = 2**31

SERVER_ID = 0


def probability_body_size(n_samples: int, n_classes: int) -> int:
    return n_samples * (8 + 4 * n_classes)


def probability_message_size(n_samples: int, n_classes: int) -> int:
    """Total serialized size of a contribution or broadcast."""
    return HEADER_SIZE + probability_body_size(n_samples, n_classes)


def parameter_message_size(n_params: int) -> int:
    return HEADER_SIZE + 4 * n_params


def _check_entries(sample_ids: np.ndarray, probs: np.ndarray, tol: float) -> None:
    if probs.ndim != 2:
        raise WireFormatError("probs must be a 2-D array")
    if len(sample_ids) != probs.shape[0]:
        raise LengthMismatchError("sample_ids and probs row count differ")
    if len(sample_ids) > 1 and not np.all(np.diff(sample_ids.astype(np.int64)) > 0):
        raise WireFormatError("sample_ids must be strictly increasing")
    if np.any(probs < 0.0):
        raise SimplexViolationError("negative probability entry")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SimplexViolationError(
            f"row {i} sums to {sums[i]:.8f}, off by more than {tol}"
        )


@dataclass(frozen=True)
class ContributionMessage:
    """One client's probabilities over the reference samples of a round."""

    client_id: int
    round: int
    sample_ids: np.ndarray   # uint64, strictly increasing
    probs: np.ndarray        # float64, shape (n_samples, n_classes)

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", np.asarray(self.sample_ids, dtype=np.uint64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        _check_entries(self.sample_ids, self.probs, WIRE_TOL)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    kind = KIND_CONTRIBUTION


@dataclass(frozen=True)
class EnsembleBroadcast:
    """Per-sample fused distributions pushed back to the clients."""

    round: int
    sample_ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", np.asarray(self.sample_ids, dtype=np.uint64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        _check_entries(self.sample_ids, self.probs, WIRE_TOL)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    client_id = SERVER_ID
    kind = KIND_BROADCAST


@dataclass(frozen=True)
class ParameterMessage:
    """Flat trainable-parameter vector, the FedAvg-style payload."""

    client_id: int
    round: int
    params: np.ndarray       # float64 in memory, float32 on the wire

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64).ravel())

    @property
    def n_params(self) -> int:
        return len(self.params)

    kind = KIND_PARAMETERS


Message = ContributionMessage | EnsembleBroadcast | ParameterMessage


def serialized_size(msg: Message) -> int:
    if isinstance(msg, ParameterMessage):
        return parameter_message_size(msg.n_params)
    return probability_message_size(msg.n_samples, msg.n_classes)


def serialize(msg: Message) -> bytes:
    """Encode a message; the result round-trips bit-exactly through deserialize."""
    size = serialized_size(msg)
    if size > MAX_MESSAGE_SIZE:
        raise OversizeError(f"serialized message would be {size} bytes")

    if isinstance(msg, ParameterMessage):
        header = _HEADER.pack(MAGIC, VERSION, KIND_PARAMETERS,
                              msg.client_id, msg.round, msg.n_params, 0, 0)
        body = msg.params.astype("<f4").tobytes()
        return header + body

    header = _HEADER.pack(MAGIC, VERSION, msg.kind,
                          msg.client_id, msg.round, msg.n_samples, msg.n_classes, 0)
    n, c = msg.n_samples, msg.n_classes
    body = np.empty((n, 8 + 4 * c), dtype=np.uint8)
    body[:, :8] = msg.sample_ids.astype("<u8").view(np.uint8).reshape(n, 8)
    body[:, 8:] = msg.probs.astype("<f4").view(np.uint8).reshape(n, 4 * c)
    return header + body.tobytes()


def deserialize(data: bytes) -> Message:
    """Decode and validate a serialized message.

    Probability rows are checked against the wire simplex tolerance and
    renormalized to sum to exactly 1 in float64.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, kind, client_id, round_, count, n_classes, _reserved = \
        _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")

    body = data[HEADER_SIZE:]
    if kind == KIND_PARAMETERS:
        expected = 4 * count
        if len(body) < expected:
            raise TruncatedError(f"parameter body has {len(body)} of {expected} bytes")
        if len(body) > expected:
            raise WireFormatError(f"{len(body) - expected} trailing bytes")
        params = np.frombuffer(body, dtype="<f4").astype(np.float64)
        return ParameterMessage(client_id=client_id, round=round_, params=params)

    if kind not in (KIND_CONTRIBUTION, KIND_BROADCAST):
        raise WireFormatError(f"unknown message kind 0x{kind:02x}")

    stride = 8 + 4 * n_classes
    expected = count * stride
    if len(body) < expected:
        raise TruncatedError(f"probability body has {len(body)} of {expected} bytes")
    if len(body) > expected:
        raise WireFormatError(f"{len(body) - expected} trailing bytes")

    raw = np.frombuffer(body, dtype=np.uint8).reshape(count, stride) if count \
        else np.empty((0, stride), dtype=np.uint8)
    sample_ids = raw[:, :8].copy().view("<u8").reshape(count)
    probs = raw[:, 8:].copy().view("<f4").reshape(count, n_classes).astype(np.float64)

    _check_entries(sample_ids, probs, WIRE_TOL)
    if count:
        probs = probs / probs.sum(axis=1, keepdims=True)

    if kind == KIND_CONTRIBUTION:
        return ContributionMessage(client_id=client_id, round=round_,
                                   sample_ids=sample_ids, probs=probs)
    return EnsembleBroadcast(round=round_, sample_ids=sample_ids, probs=probs)


def messages_equal(a: Message, b: Message, atol: float = 1e-5) -> bool:
    """Round-trip equality at 32-bit float precision."""
    if type(a) is not type(b) or a.round != b.round or a.client_id != b.client_id:
        return False
    if isinstance(a, ParameterMessage):
        return a.n_params == b.n_params and np.allclose(a.params, b.params, atol=atol)
    return (a.n_samples == b.n_samples
            and a.n_classes == b.n_classes
            and bool(np.all(a.sample_ids == b.sample_ids))
            and np.allclose(a.probs, b.probs, atol=atol))
