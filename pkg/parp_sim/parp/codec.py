"""
Canonical binary layouts for PARP requests, responses, RPC calls and block headers.

All integers are fixed-width big-endian. Variable fields carry a 4-byte length prefix.
The digests that the signatures cover are taken over these exact encodings.
"""
from dataclasses import dataclass
from enum import IntEnum
import struct

from .crypto import ADDRESS_SIZE, DIGEST_SIZE, SIGNATURE_SIZE, digest
from .errors import ParpError

U64_MAX = 2**64 - 1
# Every request field except the gamma payload and its length prefix.
REQUEST_OVERHEAD = 8 + DIGEST_SIZE + 8 + DIGEST_SIZE + 2 * SIGNATURE_SIZE
# Every fixed-width response field; result and proof length prefixes are excluded.
RESPONSE_OVERHEAD = 8 + 8 + 8 + DIGEST_SIZE + 2 * SIGNATURE_SIZE
HEADER_SIZE = DIGEST_SIZE + 8 + DIGEST_SIZE + DIGEST_SIZE + 8
ERROR_PREFIX = b"ERR:"


class CodecError(ParpError):
    """Base class for every decoding and encoding failure."""


class Truncated(CodecError):
    """The input ended before a field was complete."""


class BadLengthPrefix(CodecError):
    """A length prefix points past the end of the input."""


class UnknownMethodTag(CodecError):
    """The RPC call starts with a tag no method uses."""


class TrailingBytes(CodecError):
    """Bytes were left over after the last field."""


class FieldRange(CodecError):
    """A field does not fit its declared width."""


class Method(IntEnum):
    """RPC methods a light client can pay for."""

    GET_BALANCE = 0x01
    SEND_TRANSACTION = 0x02
    GET_CHANNEL_STATUS = 0x03

    @property
    def fee_key(self):
        """Return the snake_case name used in the fee schedule."""
        return self.name.lower()


# Width of a successful result, used to tell error results apart.
RESULT_WIDTH = {Method.GET_BALANCE: 8, Method.SEND_TRANSACTION: DIGEST_SIZE, Method.GET_CHANNEL_STATUS: 1}


def u64(value):
    """Encode an unsigned 64-bit integer."""
    if not 0 <= value <= U64_MAX:
        raise FieldRange(f"{value} does not fit in 64 bits.")
    return struct.pack(">Q", value)


def u32(value):
    """Encode an unsigned 32-bit integer."""
    if not 0 <= value < 2**32:
        raise FieldRange(f"{value} does not fit in 32 bits.")
    return struct.pack(">I", value)


def prefixed(data):
    """Encode a byte string with its 4-byte length prefix."""
    return u32(len(data)) + bytes(data)


def fixed(data, size, name):
    """Check that a fixed-width field has exactly size bytes and return it."""
    if len(data) != size:
        raise FieldRange(f"{name} must be {size} bytes, got {len(data)}.", field=name)
    return bytes(data)


class Reader:
    """A cursor over untrusted bytes that raises structured errors instead of IndexError."""

    def __init__(self, data):
        """Start reading at offset zero."""
        self.data = bytes(data)
        self.offset = 0

    def remaining(self):
        """Return how many bytes are left."""
        return len(self.data) - self.offset

    def take(self, size):
        """Consume exactly size bytes."""
        if size > self.remaining():
            raise Truncated(f"Needed {size} bytes at offset {self.offset}, {self.remaining()} left.")
        start = self.offset
        end = start + size
        self.offset = end
        return self.data[start:end]

    def uint(self, size):
        """Consume a big-endian unsigned integer of size bytes."""
        return int.from_bytes(self.take(size), "big")

    def u64(self):
        """Consume an unsigned 64-bit integer."""
        return self.uint(8)

    def prefixed(self):
        """Consume a 4-byte length prefix and the payload it announces."""
        size = self.uint(4)
        if size > self.remaining():
            raise BadLengthPrefix(f"Length prefix {size} exceeds the {self.remaining()} bytes left.")
        return self.take(size)

    def finish(self):
        """Require that every byte was consumed."""
        if self.remaining():
            raise TrailingBytes(f"{self.remaining()} unexpected bytes after the last field.")


@dataclass(frozen=True)
class RpcCall:
    """The gamma payload: a method tag plus its method-specific parameters."""

    method: Method
    address: bytes = b""
    payload: bytes = b""
    channel_id: int = 0

    @classmethod
    def get_balance(cls, address):
        """Build a balance query for a 20-byte address."""
        return cls(Method.GET_BALANCE, address=bytes(address))

    @classmethod
    def send_transaction(cls, payload):
        """Build a transaction submission."""
        return cls(Method.SEND_TRANSACTION, payload=bytes(payload))

    @classmethod
    def get_channel_status(cls, channel_id):
        """Build a channel status query."""
        return cls(Method.GET_CHANNEL_STATUS, channel_id=channel_id)


def encode_call(call):
    """Encode an RpcCall; the tag fixes the layout of what follows."""
    tag = bytes([call.method])
    if call.method == Method.GET_BALANCE:
        return tag + fixed(call.address, ADDRESS_SIZE, "address")
    if call.method == Method.SEND_TRANSACTION:
        return tag + prefixed(call.payload)
    if call.method == Method.GET_CHANNEL_STATUS:
        return tag + u64(call.channel_id)
    raise UnknownMethodTag(f"No layout for method {call.method!r}.")


def decode_call(data):
    """Decode an RpcCall, rejecting unknown tags and trailing bytes."""
    reader = Reader(data)
    tag = reader.uint(1)
    try:
        method = Method(tag)
    except ValueError as err:
        raise UnknownMethodTag(f"Unknown method tag 0x{tag:02x}.", tag=tag) from err
    if method == Method.GET_BALANCE:
        call = RpcCall.get_balance(reader.take(ADDRESS_SIZE))
    elif method == Method.SEND_TRANSACTION:
        call = RpcCall.send_transaction(reader.prefixed())
    else:
        call = RpcCall.get_channel_status(reader.u64())
    reader.finish()
    return call


@dataclass(frozen=True)
class ParpRequest:
    """A paid, signed request: req = (alpha, h_B, a, gamma, h_req, sigma_a, sigma_req)."""

    alpha: int
    h_b: bytes
    a: int
    gamma: bytes
    h_req: bytes
    sigma_a: bytes
    sigma_req: bytes

    @property
    def call(self):
        """Return the decoded RPC call carried in gamma."""
        return decode_call(self.gamma)


@dataclass(frozen=True)
class ParpResponse:
    """A signed response: res = (alpha, m_B, a, result, proof, h_req, sigma_req, sigma_res)."""

    alpha: int
    m_b: int
    a: int
    result: bytes
    proof: bytes
    h_req: bytes
    sigma_req: bytes
    sigma_res: bytes


def request_preimage(alpha, h_b, a, gamma):
    """Return the bytes h_req is taken over."""
    return u64(alpha) + fixed(h_b, DIGEST_SIZE, "h_B") + u64(a) + prefixed(gamma)


def request_digest(request):
    """Recompute h_req from the request's own fields."""
    return digest(request_preimage(request.alpha, request.h_b, request.a, request.gamma))


def encode_request(request):
    """Encode a request in field order."""
    return b"".join(
        [
            request_preimage(request.alpha, request.h_b, request.a, request.gamma),
            fixed(request.h_req, DIGEST_SIZE, "h_req"),
            fixed(request.sigma_a, SIGNATURE_SIZE, "sigma_a"),
            fixed(request.sigma_req, SIGNATURE_SIZE, "sigma_req"),
        ]
    )


def decode_request(data):
    """Decode a request; gamma must itself be a well-formed RPC call."""
    reader = Reader(data)
    request = ParpRequest(
        alpha=reader.u64(),
        h_b=reader.take(DIGEST_SIZE),
        a=reader.u64(),
        gamma=reader.prefixed(),
        h_req=reader.take(DIGEST_SIZE),
        sigma_a=reader.take(SIGNATURE_SIZE),
        sigma_req=reader.take(SIGNATURE_SIZE),
    )
    reader.finish()
    decode_call(request.gamma)
    return request


def response_preimage(response):
    """Return the bytes h_res is taken over: the response encoding without sigma_res."""
    return b"".join(
        [
            u64(response.alpha),
            u64(response.m_b),
            u64(response.a),
            prefixed(response.result),
            prefixed(response.proof),
            fixed(response.h_req, DIGEST_SIZE, "h_req"),
            fixed(response.sigma_req, SIGNATURE_SIZE, "sigma_req"),
        ]
    )


def response_digest(response):
    """Recompute h_res from the response's own fields."""
    return digest(response_preimage(response))


def encode_response(response):
    """Encode a response in field order."""
    return response_preimage(response) + fixed(response.sigma_res, SIGNATURE_SIZE, "sigma_res")


def decode_response(data):
    """Decode a response."""
    reader = Reader(data)
    response = ParpResponse(
        alpha=reader.u64(),
        m_b=reader.u64(),
        a=reader.u64(),
        result=reader.prefixed(),
        proof=reader.prefixed(),
        h_req=reader.take(DIGEST_SIZE),
        sigma_req=reader.take(SIGNATURE_SIZE),
        sigma_res=reader.take(SIGNATURE_SIZE),
    )
    reader.finish()
    return response


@dataclass(frozen=True)
class BlockHeader:
    """A block header; its hash is the digest of its 112-byte encoding."""

    parent_hash: bytes
    height: int
    state_root: bytes
    tx_root: bytes
    timestamp: int

    @property
    def hash(self):
        """Return the block hash."""
        return digest(encode_header(self))


def encode_header(header):
    """Encode parent_hash || height || state_root || tx_root || timestamp."""
    return b"".join(
        [
            fixed(header.parent_hash, DIGEST_SIZE, "parent_hash"),
            u64(header.height),
            fixed(header.state_root, DIGEST_SIZE, "state_root"),
            fixed(header.tx_root, DIGEST_SIZE, "tx_root"),
            u64(header.timestamp),
        ]
    )


def decode_header(data):
    """Decode a header preimage."""
    reader = Reader(data)
    header = BlockHeader(
        parent_hash=reader.take(DIGEST_SIZE),
        height=reader.u64(),
        state_root=reader.take(DIGEST_SIZE),
        tx_root=reader.take(DIGEST_SIZE),
        timestamp=reader.u64(),
    )
    reader.finish()
    return header


def error_result(code):
    """Build the result bytes of a call that could not be executed."""
    return ERROR_PREFIX + code.encode("ascii")


def is_error_result(method, result):
    """Tell whether result is an error result rather than a success value of this method."""
    return result.startswith(ERROR_PREFIX) and len(result) != RESULT_WIDTH[method]


def overhead_delta(measured, reference):
    """Return the signed percentage difference of measured against reference."""
    return (measured - reference) * 100.0 / reference
