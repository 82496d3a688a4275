"""Simulated secure aggregation with pairwise additive masks.

Values are encoded as fixed-point integers in the ring Z/2^64. Client ``i``
adds ``+PRG(seed_ij)`` for every peer ``j > i`` and ``-PRG(seed_ij)`` for
every ``j < i``; the masks cancel exactly in the ring sum, so the server
recovers the sum of the encoded inputs and nothing else. There is no key
agreement or dropout recovery: every registered client must report.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.stats import chisquare

from ._rng import seed_sequence

logger = logging.getLogger(__name__)

RING_BITS = 64


class SecAggError(RuntimeError):
    pass


class MissingShareError(SecAggError):
    pass


class RoundTagMismatchError(SecAggError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point encoding into uint64 ring elements.

    ``clip`` bounds input magnitudes in real units; larger values are
    saturated. Sums of up to ``2**(63 - frac_bits) / clip`` clipped values
    decode without wrap-around.
    """

    frac_bits: int = 24
    clip: float = 2.0 ** 30

    @property
    def scale(self) -> float:
        return float(1 << self.frac_bits)

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot encode non-finite values")
        over = np.abs(v) > self.clip
        if np.any(over):
            logger.warning("saturating %d values beyond clip bound %g", int(over.sum()), self.clip)
            v = np.clip(v, -self.clip, self.clip)
        return np.rint(v * self.scale).astype(np.int64).view(np.uint64)

    def decode(self, ring) -> np.ndarray:
        return np.asarray(ring, dtype=np.uint64).view(np.int64) / self.scale

    def quantize(self, values) -> np.ndarray:
        """What survives an encode/decode round trip."""
        return self.decode(self.encode(values))


@dataclass(frozen=True)
class PairwiseKeys:
    """Symmetric pairwise mask seeds derived from one session seed."""

    session_seed: int
    clients: tuple

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(sorted(int(c) for c in self.clients)))
        if len(set(self.clients)) != len(self.clients):
            raise ValueError("client ids must be unique")

    def pair_seed(self, i: int, j: int) -> np.random.SeedSequence:
        lo, hi = min(i, j), max(i, j)
        return seed_sequence(self.session_seed, "pair", lo, hi)

    def prg(self, i: int, j: int, round_tag: int, size: int) -> np.ndarray:
        lo, hi = min(i, j), max(i, j)
        ss = seed_sequence(self.session_seed, "pair", lo, hi, int(round_tag))
        return np.random.Philox(ss).random_raw(size).astype(np.uint64)


@dataclass
class MaskedShare:
    client_id: int
    round_tag: int
    elements: np.ndarray

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.uint64)


def mask(vector, client_id: int, round_tag: int, keys: PairwiseKeys,
         codec: FixedPointCodec = FixedPointCodec()) -> MaskedShare:
    """Encode ``vector`` and add this client's pairwise masks."""
    if client_id not in keys.clients:
        raise ValueError(f"client {client_id} is not registered in the session")
    share = codec.encode(np.atleast_1d(vector)).copy()
    size = share.shape[0]
    with np.errstate(over="ignore"):
        for peer in keys.clients:
            if peer == client_id:
                continue
            pad = keys.prg(client_id, peer, round_tag, size)
            if client_id < peer:
                share += pad
            else:
                share -= pad
    return MaskedShare(client_id, round_tag, share)


def ring_sum(shares: Iterable[MaskedShare]) -> np.ndarray:
    total = None
    with np.errstate(over="ignore"):
        for s in shares:
            total = s.elements.copy() if total is None else total + s.elements
    return total


def secure_sum(shares, codec: FixedPointCodec = FixedPointCodec(),
               clients: Optional[Iterable[int]] = None, round_tag: Optional[int] = None) -> np.ndarray:
    """Decode the ring sum of one round's masked shares.

    ``clients`` lists the registered ids; a registered client without a
    share is an error because its masks would never cancel.
    """
    shares = list(shares)
    if not shares:
        raise MissingShareError("no shares to aggregate")
    tags = {s.round_tag for s in shares}
    if round_tag is not None:
        tags.add(int(round_tag))
    if len(tags) != 1:
        raise RoundTagMismatchError(f"shares carry different round tags: {sorted(tags)}")
    ids = [s.client_id for s in shares]
    if len(set(ids)) != len(ids):
        raise SecAggError("duplicate share from one client")
    if clients is not None:
        missing = sorted(set(clients) - set(ids))
        if missing:
            raise MissingShareError(f"missing shares from clients {missing}")
        extra = sorted(set(ids) - set(clients))
        if extra:
            raise SecAggError(f"shares from unregistered clients {extra}")
    sizes = {s.elements.shape for s in shares}
    if len(sizes) != 1:
        raise SecAggError("shares have different lengths")
    return codec.decode(ring_sum(shares))


# ---------------------------------------------------------------------------
# Session with a recorded transcript
# ---------------------------------------------------------------------------


@dataclass
class Transcript:
    """Everything the server observes, plus a private log for auditing.

    ``messages`` is the server's view. ``private_inputs`` maps
    ``(round_tag, client_id)`` to the plaintext a client submitted; it never
    reaches the server and exists only so an audit can check for leaks.
    """

    messages: list = field(default_factory=list)
    private_inputs: dict = field(default_factory=dict)

    def record_share(self, share: MaskedShare, n_clients: int) -> None:
        self.messages.append({"kind": "masked_share", "client": share.client_id,
                              "tag": share.round_tag, "n_clients": n_clients,
                              "elements": share.elements.copy()})

    def record_sum(self, tag: int, values: np.ndarray) -> None:
        self.messages.append({"kind": "aggregate", "tag": tag, "values": np.array(values)})

    def record_raw(self, client: int, tag: int, values) -> None:
        """A client sending its plaintext directly. Only fault-injection tests use this."""
        self.messages.append({"kind": "raw", "client": client, "tag": tag,
                              "values": np.array(values, dtype=np.float64)})


class SecureAggregator:
    """Runs masking on the client side and summation on the server side.

    Each :meth:`sum` call is one synchronization barrier: it takes the
    plaintext vectors of the participating clients, masks each as that
    client would, and returns only the decoded sum.
    """

    def __init__(self, session_seed: int, codec: FixedPointCodec = FixedPointCodec(),
                 transcript: Optional[Transcript] = None):
        self.session_seed = session_seed
        self.codec = codec
        self.transcript = transcript

    def sum(self, vectors: dict, round_tag: int) -> np.ndarray:
        keys = PairwiseKeys(self.session_seed, tuple(vectors))
        shares = []
        for cid, vec in vectors.items():
            share = mask(vec, cid, round_tag, keys, self.codec)
            if self.transcript is not None:
                self.transcript.private_inputs[(round_tag, cid)] = np.atleast_1d(
                    np.asarray(vec, dtype=np.float64)).copy()
                self.transcript.record_share(share, len(vectors))
            shares.append(share)
        total = secure_sum(shares, self.codec, clients=keys.clients, round_tag=round_tag)
        if self.transcript is not None:
            self.transcript.record_sum(round_tag, total)
        return total


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    passed: bool
    findings: list
    n_shares: int
    n_aggregates: int
    uniformity_pvalue: Optional[float]


def byte_uniformity_pvalue(elements: np.ndarray) -> Optional[float]:
    """Chi-square p-value of the byte histogram against uniform."""
    data = np.asarray(elements, dtype=np.uint64).view(np.uint8)
    if data.size < 256 * 5:
        return None
    counts = np.bincount(data, minlength=256)
    return float(chisquare(counts).pvalue)


def privacy_audit(transcript: Transcript, codec: FixedPointCodec = FixedPointCodec(),
                  alpha: float = 0.01) -> AuditReport:
    """Check that the server view holds only masked shares and sums.

    Flags raw plaintext messages, multi-client shares equal to the plain
    encoding of the submitting client's input, and share bytes that are not
    uniform at level ``alpha``.
    """
    findings = []
    masked = []
    n_shares = n_aggregates = 0
    for msg in transcript.messages:
        kind = msg["kind"]
        if kind == "aggregate":
            n_aggregates += 1
            continue
        if kind != "masked_share":
            findings.append(f"unmasked {kind} message from client {msg.get('client')} "
                            f"(tag {msg.get('tag')})")
            continue
        n_shares += 1
        if msg["n_clients"] < 2:
            continue
        masked.append(msg["elements"])
        plain = transcript.private_inputs.get((msg["tag"], msg["client"]))
        if plain is not None and np.array_equal(codec.encode(plain), msg["elements"]):
            findings.append(f"share from client {msg['client']} (tag {msg['tag']}) is unmasked")
    pvalue = None
    if masked:
        pvalue = byte_uniformity_pvalue(np.concatenate(masked))
        if pvalue is not None and pvalue <= alpha:
            findings.append(f"masked share bytes are not uniform (p={pvalue:.3g})")
    return AuditReport(not findings, findings, n_shares, n_aggregates, pvalue)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IHI")
_LENGTH = struct.Struct("<I")


def encode_frame(share: MaskedShare) -> bytes:
    """``round tag u32 | client id u16 | count u32 | elements u64``, little-endian."""
    body = np.ascontiguousarray(share.elements, dtype="<u8").tobytes()
    return _HEADER.pack(share.round_tag, share.client_id, share.elements.shape[0]) + body


def decode_frame(frame: bytes) -> MaskedShare:
    if len(frame) < _HEADER.size:
        raise SecAggError("frame shorter than its header")
    tag, cid, count = _HEADER.unpack_from(frame)
    body = frame[_HEADER.size:]
    if len(body) != 8 * count:
        raise SecAggError(f"frame declares {count} elements but carries {len(body)} bytes")
    return MaskedShare(cid, tag, np.frombuffer(body, dtype="<u8").astype(np.uint64))


def _recv_exact(sock_file, n: int) -> bytes:
    data = sock_file.read(n)
    if data is None or len(data) != n:
        raise SecAggError("connection closed mid-frame")
    return data


def write_frame(stream, share: MaskedShare) -> None:
    frame = encode_frame(share)
    stream.write(_LENGTH.pack(len(frame)) + frame)
    stream.flush()


def read_frame(stream) -> MaskedShare:
    (length,) = _LENGTH.unpack(_recv_exact(stream, _LENGTH.size))
    return decode_frame(_recv_exact(stream, length))


class SumServer(socketserver.ThreadingTCPServer):
    """Collects one length-prefixed share per client over TCP.

    Once every registered client has connected, :attr:`result` holds the
    decoded sum and each connection receives it back as a share frame from
    client id ``0xFFFF`` whose elements are the ring sum.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, clients, codec: FixedPointCodec = FixedPointCodec()):
        super().__init__(address, _SumHandler)
        self.clients = set(clients)
        self.codec = codec
        self.shares = {}
        self.result = None
        self.error = None
        self._lock = threading.Condition()

    def submit(self, share: MaskedShare) -> np.ndarray:
        with self._lock:
            self.shares[share.client_id] = share
            if set(self.shares) >= self.clients:
                try:
                    self.result = ring_sum(self.shares.values())
                    secure_sum(self.shares.values(), self.codec, clients=self.clients)
                except SecAggError as exc:
                    self.error = exc
                self._lock.notify_all()
            while self.result is None and self.error is None:
                self._lock.wait(timeout=30)
                if self.result is None and self.error is None:
                    raise SecAggError("timed out waiting for the other clients")
            if self.error is not None:
                raise self.error
            return self.result


class _SumHandler(socketserver.StreamRequestHandler):
    def handle(self):
        share = read_frame(self.rfile)
        total = self.server.submit(share)
        write_frame(self.wfile, MaskedShare(0xFFFF, share.round_tag, total))


def submit_share(address, share: MaskedShare, timeout: float = 30.0) -> np.ndarray:
    """Send one share to a :class:`SumServer` and return the ring sum."""
    with socket.create_connection(address, timeout=timeout) as sock:
        stream = sock.makefile("rwb")
        write_frame(stream, share)
        return read_frame(stream).elements
