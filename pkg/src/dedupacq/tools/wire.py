"""Framed binary protocol between acquisition clients and the evidence store.

Frame layout (little-endian)::

    magic "DFD1" | u8 message type | u32 body length | body

Requests are answered strictly in order on one connection; concurrency
comes from opening several connections.
"""

import logging
import math
import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar, Dict, List, Optional, Sequence, Tuple, Type, Union

from ..errors import (
    BatchTooLarge,
    ConfigError,
    DanglingDigest,
    DedupAcqError,
    DigestMismatch,
    FrameTooLarge,
    FrameTooShort,
    InvalidManifest,
    NotFound,
    ProtocolError,
    RemoteError,
    StorageError,
    Unreachable,
    UnsupportedVersion,
)
from ..models.digest import DIGEST_SIZE, Digest

logger = logging.getLogger(__name__)

MAGIC = b"DFD1"
HEADER = struct.Struct("<4sBI")
MAX_BODY = 96 * 1024 * 1024
PROTOCOL_VERSION = 1
DEFAULT_PORT = 7311
DEFAULT_TIMEOUT = 30.0
DEFAULT_ATTEMPTS = 3
MAX_ERROR_TEXT = 0xFFFF
# digests named in a DANGLING_DIGEST error; 65 bytes each keeps the text in bounds
MAX_LISTED_DIGESTS = 1000

_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")
_STATS = struct.Struct("<4Q")


class MessageType(IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    CHECK = 3
    CHECK_RESP = 4
    PUT = 5
    PUT_ACK = 6
    MANIFEST_COMMIT = 7
    MANIFEST_ACK = 8
    GET = 9
    DATA = 10
    GET_MANIFEST = 11
    MANIFEST_DOC = 12
    STATS_REQ = 13
    STATS_RESP = 14
    ERROR = 15


class ErrorCode(IntEnum):
    UNSUPPORTED_VERSION = 1
    PROTOCOL_ERROR = 2
    NOT_FOUND = 3
    DIGEST_MISMATCH = 4
    DANGLING_DIGEST = 5
    INVALID_MANIFEST = 6
    BATCH_TOO_LARGE = 7
    STORAGE_ERROR = 8
    INTERNAL = 9
    UNEXPECTED_MESSAGE = 10


class PutStatus(IntEnum):
    STORED = 0
    ALREADY_PRESENT = 1
    DIGEST_MISMATCH = 2


def _expect(body: bytes, size: int, what: str) -> None:
    if len(body) != size:
        raise ProtocolError(f"{what} body must be {size} bytes, got {len(body)}")


def _digest_at(body: bytes, offset: int) -> Digest:
    return Digest(bytes(body[offset : offset + DIGEST_SIZE]))


def _length_prefixed(body: bytes, what: str) -> bytes:
    if len(body) < _U64.size:
        raise ProtocolError(f"{what} body too short")
    (length,) = _U64.unpack_from(body, 0)
    payload = body[_U64.size :]
    if len(payload) != length:
        raise ProtocolError(
            f"{what} declares {length} payload bytes, carries {len(payload)}"
        )
    return bytes(payload)


@dataclass(frozen=True)
class Hello:
    TYPE: ClassVar[MessageType] = MessageType.HELLO
    version: int = PROTOCOL_VERSION

    def encode_body(self) -> bytes:
        return _U16.pack(self.version)

    @classmethod
    def decode_body(cls, body: bytes) -> "Hello":
        _expect(body, 2, "HELLO")
        return cls(_U16.unpack(body)[0])


@dataclass(frozen=True)
class HelloAck:
    TYPE: ClassVar[MessageType] = MessageType.HELLO_ACK
    version: int = PROTOCOL_VERSION

    def encode_body(self) -> bytes:
        return _U16.pack(self.version)

    @classmethod
    def decode_body(cls, body: bytes) -> "HelloAck":
        _expect(body, 2, "HELLO_ACK")
        return cls(_U16.unpack(body)[0])


@dataclass(frozen=True)
class Check:
    TYPE: ClassVar[MessageType] = MessageType.CHECK
    digests: Tuple[Digest, ...]

    def encode_body(self) -> bytes:
        if len(self.digests) > 0xFFFF:
            raise ProtocolError(f"CHECK of {len(self.digests)} digests")
        return _U16.pack(len(self.digests)) + b"".join(d.raw for d in self.digests)

    @classmethod
    def decode_body(cls, body: bytes) -> "Check":
        if len(body) < 2:
            raise ProtocolError("CHECK body too short")
        (count,) = _U16.unpack_from(body, 0)
        _expect(body, 2 + count * DIGEST_SIZE, "CHECK")
        return cls(tuple(_digest_at(body, 2 + i * DIGEST_SIZE) for i in range(count)))


@dataclass(frozen=True)
class CheckResp:
    """Presence bitmap; bit i (LSB-first within each byte) answers digest i."""

    TYPE: ClassVar[MessageType] = MessageType.CHECK_RESP
    bitmap: bytes

    @classmethod
    def from_flags(cls, flags: Sequence[bool]) -> "CheckResp":
        bitmap = bytearray(math.ceil(len(flags) / 8))
        for i, present in enumerate(flags):
            if present:
                bitmap[i // 8] |= 1 << (i % 8)
        return cls(bytes(bitmap))

    def flags(self, count: int) -> List[bool]:
        if len(self.bitmap) != math.ceil(count / 8):
            raise ProtocolError(
                f"CHECK_RESP of {len(self.bitmap)} bytes cannot answer {count} digests"
            )
        return [bool(self.bitmap[i // 8] >> (i % 8) & 1) for i in range(count)]

    def encode_body(self) -> bytes:
        return self.bitmap

    @classmethod
    def decode_body(cls, body: bytes) -> "CheckResp":
        return cls(bytes(body))


@dataclass(frozen=True)
class Put:
    TYPE: ClassVar[MessageType] = MessageType.PUT
    digest: Digest
    payload: bytes

    def encode_body(self) -> bytes:
        return self.digest.raw + _U64.pack(len(self.payload)) + self.payload

    @classmethod
    def decode_body(cls, body: bytes) -> "Put":
        if len(body) < DIGEST_SIZE:
            raise ProtocolError("PUT body too short")
        payload = _length_prefixed(body[DIGEST_SIZE:], "PUT")
        return cls(_digest_at(body, 0), payload)


@dataclass(frozen=True)
class PutAck:
    TYPE: ClassVar[MessageType] = MessageType.PUT_ACK
    status: PutStatus

    def encode_body(self) -> bytes:
        return bytes([self.status])

    @classmethod
    def decode_body(cls, body: bytes) -> "PutAck":
        _expect(body, 1, "PUT_ACK")
        try:
            return cls(PutStatus(body[0]))
        except ValueError as e:
            raise ProtocolError(f"Unknown PUT_ACK status {body[0]}") from e


@dataclass(frozen=True)
class ManifestCommit:
    TYPE: ClassVar[MessageType] = MessageType.MANIFEST_COMMIT
    document: bytes

    def encode_body(self) -> bytes:
        return self.document

    @classmethod
    def decode_body(cls, body: bytes) -> "ManifestCommit":
        return cls(bytes(body))


@dataclass(frozen=True)
class ManifestAck:
    TYPE: ClassVar[MessageType] = MessageType.MANIFEST_ACK
    manifest_id: str

    def encode_body(self) -> bytes:
        return Digest.from_hex(self.manifest_id).raw

    @classmethod
    def decode_body(cls, body: bytes) -> "ManifestAck":
        _expect(body, DIGEST_SIZE, "MANIFEST_ACK")
        return cls(bytes(body).hex())


@dataclass(frozen=True)
class Get:
    TYPE: ClassVar[MessageType] = MessageType.GET
    digest: Digest

    def encode_body(self) -> bytes:
        return self.digest.raw

    @classmethod
    def decode_body(cls, body: bytes) -> "Get":
        _expect(body, DIGEST_SIZE, "GET")
        return cls(_digest_at(body, 0))


@dataclass(frozen=True)
class Data:
    TYPE: ClassVar[MessageType] = MessageType.DATA
    payload: bytes

    def encode_body(self) -> bytes:
        return _U64.pack(len(self.payload)) + self.payload

    @classmethod
    def decode_body(cls, body: bytes) -> "Data":
        return cls(_length_prefixed(body, "DATA"))


@dataclass(frozen=True)
class GetManifest:
    TYPE: ClassVar[MessageType] = MessageType.GET_MANIFEST
    manifest_id: str

    def encode_body(self) -> bytes:
        return Digest.from_hex(self.manifest_id).raw

    @classmethod
    def decode_body(cls, body: bytes) -> "GetManifest":
        _expect(body, DIGEST_SIZE, "GET_MANIFEST")
        return cls(bytes(body).hex())


@dataclass(frozen=True)
class ManifestDoc:
    TYPE: ClassVar[MessageType] = MessageType.MANIFEST_DOC
    document: bytes

    def encode_body(self) -> bytes:
        return self.document

    @classmethod
    def decode_body(cls, body: bytes) -> "ManifestDoc":
        return cls(bytes(body))


@dataclass(frozen=True)
class StatsReq:
    TYPE: ClassVar[MessageType] = MessageType.STATS_REQ

    def encode_body(self) -> bytes:
        return b""

    @classmethod
    def decode_body(cls, body: bytes) -> "StatsReq":
        _expect(body, 0, "STATS_REQ")
        return cls()


@dataclass(frozen=True)
class StatsResp:
    TYPE: ClassVar[MessageType] = MessageType.STATS_RESP
    unique_artifacts: int
    logical_bytes: int
    physical_bytes: int
    manifest_count: int

    def encode_body(self) -> bytes:
        return _STATS.pack(
            self.unique_artifacts,
            self.logical_bytes,
            self.physical_bytes,
            self.manifest_count,
        )

    @classmethod
    def decode_body(cls, body: bytes) -> "StatsResp":
        _expect(body, _STATS.size, "STATS_RESP")
        return cls(*_STATS.unpack(body))


@dataclass(frozen=True)
class Error:
    TYPE: ClassVar[MessageType] = MessageType.ERROR
    code: int
    text: str = ""

    def encode_body(self) -> bytes:
        text = self.text.encode("utf-8")
        if len(text) > MAX_ERROR_TEXT:
            # cut on a character boundary so the peer can still decode it
            text = text[:MAX_ERROR_TEXT].decode("utf-8", "ignore").encode("utf-8")
        return _U16.pack(self.code) + _U16.pack(len(text)) + text

    @classmethod
    def decode_body(cls, body: bytes) -> "Error":
        if len(body) < 4:
            raise ProtocolError("ERROR body too short")
        (code,) = _U16.unpack_from(body, 0)
        (length,) = _U16.unpack_from(body, 2)
        _expect(body, 4 + length, "ERROR")
        try:
            text = bytes(body[4:]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"ERROR text is not UTF-8: {e}") from e
        return cls(code, text)


Message = Union[
    Hello,
    HelloAck,
    Check,
    CheckResp,
    Put,
    PutAck,
    ManifestCommit,
    ManifestAck,
    Get,
    Data,
    GetManifest,
    ManifestDoc,
    StatsReq,
    StatsResp,
    Error,
]

MESSAGE_CLASSES: Dict[MessageType, Type] = {
    cls.TYPE: cls
    for cls in (
        Hello,
        HelloAck,
        Check,
        CheckResp,
        Put,
        PutAck,
        ManifestCommit,
        ManifestAck,
        Get,
        Data,
        GetManifest,
        ManifestDoc,
        StatsReq,
        StatsResp,
        Error,
    )
}

#: Requests safe to resend after a lost connection
IDEMPOTENT = frozenset(
    {MessageType.CHECK, MessageType.GET, MessageType.STATS_REQ, MessageType.PUT}
)


def decode_header(header: bytes) -> Tuple[MessageType, int]:
    if len(header) < HEADER.size:
        raise FrameTooShort(
            f"Frame header needs {HEADER.size} bytes, got {len(header)}"
        )
    magic, type_code, length = HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise ProtocolError(f"Bad frame magic {magic!r}")
    try:
        msg_type = MessageType(type_code)
    except ValueError as e:
        raise ProtocolError(f"Unknown message type {type_code}") from e
    if length > MAX_BODY:
        raise FrameTooLarge(length, MAX_BODY)
    return msg_type, length


def decode_body(msg_type: MessageType, body: bytes) -> Message:
    try:
        decoded: Message = MESSAGE_CLASSES[msg_type].decode_body(body)
        return decoded
    except struct.error as e:
        raise ProtocolError(f"Malformed {msg_type.name} body: {e}") from e


def encode_frame(msg: Message) -> bytes:
    body = msg.encode_body()
    if len(body) > MAX_BODY:
        raise FrameTooLarge(len(body), MAX_BODY)
    return HEADER.pack(MAGIC, msg.TYPE, len(body)) + body


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame; never reads past the declared body length."""
    msg_type, length = decode_header(data)
    available = len(data) - HEADER.size
    if available < length:
        raise FrameTooShort(f"Frame declares {length} body bytes, {available} present")
    if available > length:
        raise ProtocolError(f"{available - length} trailing bytes after frame")
    return decode_body(msg_type, data[HEADER.size :])


def error_frame(exc: BaseException) -> Error:
    """Map an exception to the ERROR message the client maps back."""
    if isinstance(exc, UnsupportedVersion):
        return Error(ErrorCode.UNSUPPORTED_VERSION, str(exc.version))
    if isinstance(exc, NotFound):
        return Error(ErrorCode.NOT_FOUND, exc.what)
    if isinstance(exc, DigestMismatch):
        return Error(ErrorCode.DIGEST_MISMATCH, f"{exc.claimed} {exc.actual}")
    if isinstance(exc, DanglingDigest):
        listed = exc.missing[:MAX_LISTED_DIGESTS]
        unlisted = len(exc.missing) - len(listed) + exc.unlisted
        text = " ".join(listed) + (f" +{unlisted}" if unlisted else "")
        return Error(ErrorCode.DANGLING_DIGEST, text)
    if isinstance(exc, InvalidManifest):
        return Error(ErrorCode.INVALID_MANIFEST, str(exc))
    if isinstance(exc, BatchTooLarge):
        return Error(ErrorCode.BATCH_TOO_LARGE, f"{exc.size} {exc.limit}")
    if isinstance(exc, StorageError):
        return Error(ErrorCode.STORAGE_ERROR, str(exc))
    if isinstance(exc, ProtocolError):
        return Error(ErrorCode.PROTOCOL_ERROR, str(exc))
    return Error(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")


def remote_exception(err: Error) -> DedupAcqError:
    """Typed exception for an ERROR frame received from the server."""
    words = err.text.split()
    try:
        if err.code == ErrorCode.UNSUPPORTED_VERSION:
            return UnsupportedVersion(int(err.text))
        if err.code == ErrorCode.NOT_FOUND:
            return NotFound(err.text)
        if err.code == ErrorCode.DIGEST_MISMATCH:
            return DigestMismatch(words[0], words[1])
        if err.code == ErrorCode.DANGLING_DIGEST:
            listed = [w for w in words if not w.startswith("+")]
            unlisted = sum(int(w[1:]) for w in words if w.startswith("+"))
            return DanglingDigest(listed, unlisted)
        if err.code == ErrorCode.INVALID_MANIFEST:
            return InvalidManifest(err.text)
        if err.code == ErrorCode.BATCH_TOO_LARGE:
            return BatchTooLarge(int(words[0]), int(words[1]))
        if err.code == ErrorCode.STORAGE_ERROR:
            return StorageError(err.text)
        if err.code in (ErrorCode.PROTOCOL_ERROR, ErrorCode.UNEXPECTED_MESSAGE):
            return ProtocolError(err.text)
    except (ValueError, IndexError):
        pass
    return RemoteError(err.code, err.text)


def parse_endpoint(text: str) -> Tuple[str, int]:
    """Split ``host:port`` (``[v6]:port`` for IPv6); the port defaults to 7311."""
    host, port = text.strip(), DEFAULT_PORT
    if host.startswith("["):
        inner, _, rest = host[1:].partition("]")
        host = inner
        if rest.startswith(":"):
            port = _port(rest[1:], text)
    elif host.count(":") == 1:
        host, _, raw_port = host.partition(":")
        port = _port(raw_port, text)
    if not host:
        raise ConfigError(f"Invalid endpoint {text!r}")
    return host, port


def _port(raw: str, text: str) -> int:
    if not raw.isdigit() or not 0 < int(raw) < 65536:
        raise ConfigError(f"Invalid port in endpoint {text!r}")
    return int(raw)


class FramedConnection:
    """Frame-level send/receive over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg: Message) -> None:
        frame = encode_frame(msg)
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)

    def recv_exact(self, size: int) -> bytes:
        buf = bytearray(size)
        view = memoryview(buf)
        got = 0
        while got < size:
            n = self.sock.recv_into(view[got:], size - got)
            if n == 0:
                raise FrameTooShort(f"Connection closed after {got} of {size} bytes")
            got += n
        self.bytes_received += size
        return bytes(buf)

    def recv(self) -> Optional[Message]:
        """Next message, or None when the peer closed between frames."""
        first = self.sock.recv(HEADER.size)
        if not first:
            return None
        header = first
        if len(first) < HEADER.size:
            header += self.recv_exact(HEADER.size - len(first))
        else:
            self.bytes_received += len(first)
        msg_type, length = decode_header(header)
        body = self.recv_exact(length) if length else b""
        return decode_body(msg_type, body)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ProtocolClient:
    """One handshaken connection with timeout and bounded retry.

    Only idempotent requests (CHECK, GET, STATS_REQ, PUT) are resent after a
    transport failure; anything else fails on the first broken connection.
    """

    def __init__(
        self,
        endpoint: Union[str, Tuple[str, int]],
        timeout: float = DEFAULT_TIMEOUT,
        attempts: int = DEFAULT_ATTEMPTS,
    ):
        if isinstance(endpoint, str):
            endpoint = parse_endpoint(endpoint)
        if attempts < 1:
            raise ConfigError("attempts must be >= 1")
        self.endpoint = endpoint
        self.timeout = timeout
        self.attempts = attempts
        self._conn: Optional[FramedConnection] = None

    def _connect(self) -> FramedConnection:
        if self._conn is not None:
            return self._conn
        sock = socket.create_connection(self.endpoint, timeout=self.timeout)
        conn = FramedConnection(sock)
        try:
            conn.send(Hello(PROTOCOL_VERSION))
            reply = conn.recv()
        except BaseException:
            conn.close()
            raise
        if isinstance(reply, Error):
            conn.close()
            raise remote_exception(reply)
        if not isinstance(reply, HelloAck) or reply.version != PROTOCOL_VERSION:
            conn.close()
            raise ProtocolError(f"Unexpected handshake reply {reply!r}")
        logger.debug("Connected to %s:%d", *self.endpoint)
        self._conn = conn
        return conn

    def _drop(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def call(self, msg: Message) -> Message:
        attempts = self.attempts if msg.TYPE in IDEMPOTENT else 1
        last: Optional[BaseException] = None
        for attempt in range(attempts):
            try:
                conn = self._connect()
                conn.send(msg)
                reply = conn.recv()
                if reply is None:
                    raise FrameTooShort("Server closed the connection")
                break
            except (OSError, FrameTooShort) as e:
                self._drop()
                last = e
                logger.debug(
                    "%s to %s:%d failed (attempt %d/%d): %s",
                    msg.TYPE.name,
                    *self.endpoint,
                    attempt + 1,
                    attempts,
                    e,
                )
                if attempt + 1 < attempts:
                    time.sleep(0.05 * 2**attempt)
            except ProtocolError:
                # the stream position is unknown after a bad reply
                self._drop()
                raise
        else:
            raise Unreachable(
                f"{self.endpoint[0]}:{self.endpoint[1]} did not answer "
                f"{msg.TYPE.name} after {attempts} attempt(s): {last}"
            )
        if isinstance(reply, Error):
            raise remote_exception(reply)
        return reply

    def close(self) -> None:
        self._drop()

    def __enter__(self) -> "ProtocolClient":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def client_call(
    endpoint: Union[str, Tuple[str, int]],
    msg: Message,
    timeout: float = DEFAULT_TIMEOUT,
    attempts: int = DEFAULT_ATTEMPTS,
) -> Message:
    """One request/response exchange on a fresh connection."""
    with ProtocolClient(endpoint, timeout, attempts) as client:
        return client.call(msg)
