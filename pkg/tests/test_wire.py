"""Tests for the framed wire protocol."""

import json
import random
import socket
import struct
import threading
from pathlib import Path
from unittest.mock import Mock, patch

import pytest

from src.dedupacq.errors import (
    BatchTooLarge,
    ConfigError,
    DanglingDigest,
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
from src.dedupacq.models import Digest
from src.dedupacq.tools.hashing import content_hash
from src.dedupacq.tools.wire import (
    HEADER,
    MAGIC,
    MAX_BODY,
    MAX_LISTED_DIGESTS,
    Check,
    CheckResp,
    Data,
    Error,
    ErrorCode,
    FramedConnection,
    Get,
    GetManifest,
    Hello,
    HelloAck,
    ManifestAck,
    ManifestCommit,
    ManifestDoc,
    MessageType,
    ProtocolClient,
    Put,
    PutAck,
    PutStatus,
    StatsReq,
    StatsResp,
    client_call,
    decode_frame,
    decode_header,
    encode_frame,
    error_frame,
    parse_endpoint,
    remote_exception,
)

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_frames.json").read_text())

GOLDEN_MESSAGES = {
    "hello": Hello(1),
    "hello_ack": HelloAck(1),
    "stats_req": StatsReq(),
    "stats_resp": StatsResp(3, 500, 300, 2),
    "put_ack_already_present": PutAck(PutStatus.ALREADY_PRESENT),
    "error_not_found": Error(ErrorCode.NOT_FOUND, "abc"),
    "check_resp_nine": CheckResp.from_flags(
        [True, False, True, True, False, False, False, False, True]
    ),
    "data_hi": Data(b"hi"),
}


class TestFrames:
    """Test cases for frame encoding."""

    @pytest.mark.parametrize("name", sorted(GOLDEN_MESSAGES))
    def test_golden_encoding(self, name: str) -> None:
        """Test frames match their recorded byte form."""
        expected = bytes.fromhex(GOLDEN[name])
        assert encode_frame(GOLDEN_MESSAGES[name]) == expected
        assert decode_frame(expected) == GOLDEN_MESSAGES[name]

    def test_check_layout(self) -> None:
        """Test CHECK carries a count then raw digests."""
        digests = tuple(content_hash(bytes([n])) for n in range(3))
        frame = encode_frame(Check(digests))
        msg_type, length = decode_header(frame)
        assert msg_type is MessageType.CHECK
        assert length == 98
        assert frame[HEADER.size : HEADER.size + 2] == b"\x03\x00"
        assert frame[HEADER.size + 2 : HEADER.size + 34] == digests[0].raw

    def test_put_layout(self) -> None:
        """Test PUT carries digest, length and payload."""
        digest = content_hash(b"abc")
        frame = encode_frame(Put(digest, b"abc"))
        body = frame[HEADER.size :]
        assert body[:32] == digest.raw
        assert struct.unpack_from("<Q", body, 32) == (3,)
        assert body[40:] == b"abc"
        assert decode_frame(frame) == Put(digest, b"abc")

    def test_manifest_ack_carries_raw_id(self) -> None:
        """Test manifest ids travel as 32 raw bytes."""
        manifest_id = "ab" * 32
        frame = encode_frame(ManifestAck(manifest_id))
        assert len(frame) == HEADER.size + 32
        assert decode_frame(frame) == ManifestAck(manifest_id)

    def test_bad_magic(self) -> None:
        """Test frames must start with the magic."""
        frame = bytearray(bytes.fromhex(GOLDEN["hello"]))
        frame[0:4] = b"XXXX"
        with pytest.raises(ProtocolError, match="magic"):
            decode_frame(bytes(frame))

    def test_unknown_type(self) -> None:
        """Test message types outside 1..15 are rejected."""
        with pytest.raises(ProtocolError):
            decode_header(HEADER.pack(MAGIC, 99, 0))

    def test_short_header(self) -> None:
        """Test a truncated header is FrameTooShort."""
        with pytest.raises(FrameTooShort):
            decode_header(MAGIC + b"\x01")

    def test_truncated_body(self) -> None:
        """Test a body shorter than declared is FrameTooShort."""
        frame = bytes.fromhex(GOLDEN["hello"])
        with pytest.raises(FrameTooShort):
            decode_frame(frame[:-1])

    def test_trailing_bytes(self) -> None:
        """Test bytes after the declared body are rejected."""
        with pytest.raises(ProtocolError):
            decode_frame(bytes.fromhex(GOLDEN["hello"]) + b"\x00")

    def test_oversized_length(self) -> None:
        """Test a declared length over the limit is refused before reading."""
        with pytest.raises(FrameTooLarge):
            decode_header(HEADER.pack(MAGIC, MessageType.PUT, MAX_BODY + 1))

    @pytest.mark.parametrize(
        "msg_type, body",
        [
            (MessageType.HELLO, b"\x01"),
            (MessageType.CHECK, b"\x02\x00" + b"\x00" * 32),
            (MessageType.PUT, b"\x00" * 40 + b"x"),
            (MessageType.PUT_ACK, b"\x07"),
            (MessageType.GET, b"\x00" * 31),
            (MessageType.STATS_REQ, b"\x00"),
            (MessageType.ERROR, b"\x01\x00\x05\x00ab"),
            (MessageType.ERROR, b"\x01\x00\x02\x00\xff\xfe"),
        ],
    )
    def test_malformed_bodies(self, msg_type: MessageType, body: bytes) -> None:
        """Test body shape errors raise ProtocolError."""
        with pytest.raises(ProtocolError):
            decode_frame(HEADER.pack(MAGIC, msg_type, len(body)) + body)

    def test_check_resp_size_must_match(self) -> None:
        """Test a bitmap of the wrong size cannot answer a batch."""
        with pytest.raises(ProtocolError):
            CheckResp(b"\x01").flags(9)
        assert CheckResp.from_flags([]).flags(0) == []


_TEXT_CHARS = "abc XYZ-09éß€中\U0001d11e"


def _digest(rng: random.Random) -> Digest:
    return Digest(rng.randbytes(32))


def _text(rng: random.Random) -> str:
    return "".join(rng.choice(_TEXT_CHARS) for _ in range(rng.randrange(60)))


RANDOM_MESSAGES = {
    MessageType.HELLO: lambda rng: Hello(rng.randrange(0x10000)),
    MessageType.HELLO_ACK: lambda rng: HelloAck(rng.randrange(0x10000)),
    MessageType.CHECK: lambda rng: Check(
        tuple(_digest(rng) for _ in range(rng.randrange(20)))
    ),
    MessageType.CHECK_RESP: lambda rng: CheckResp.from_flags(
        [rng.random() < 0.5 for _ in range(rng.randrange(40))]
    ),
    MessageType.PUT: lambda rng: Put(_digest(rng), rng.randbytes(rng.randrange(300))),
    MessageType.PUT_ACK: lambda rng: PutAck(rng.choice(list(PutStatus))),
    MessageType.MANIFEST_COMMIT: lambda rng: ManifestCommit(
        rng.randbytes(rng.randrange(300))
    ),
    MessageType.MANIFEST_ACK: lambda rng: ManifestAck(_digest(rng).hex),
    MessageType.GET: lambda rng: Get(_digest(rng)),
    MessageType.DATA: lambda rng: Data(rng.randbytes(rng.randrange(300))),
    MessageType.GET_MANIFEST: lambda rng: GetManifest(_digest(rng).hex),
    MessageType.MANIFEST_DOC: lambda rng: ManifestDoc(
        rng.randbytes(rng.randrange(300))
    ),
    MessageType.STATS_REQ: lambda rng: StatsReq(),
    MessageType.STATS_RESP: lambda rng: StatsResp(
        *(rng.randrange(2**64) for _ in range(4))
    ),
    MessageType.ERROR: lambda rng: Error(rng.choice(list(ErrorCode)), _text(rng)),
}


def _mutations(rng: random.Random, count: int):
    """Random frames: noise, valid headers over noise, and damaged golden frames."""
    golden = [bytes.fromhex(h) for h in GOLDEN.values()]
    for _ in range(count):
        kind = rng.randrange(4)
        if kind == 0:
            yield rng.randbytes(rng.randrange(64))
        elif kind == 1:
            body = rng.randbytes(rng.randrange(120))
            yield HEADER.pack(MAGIC, rng.randrange(256), len(body)) + body
        elif kind == 2:
            frame = bytearray(rng.choice(golden))
            frame[rng.randrange(len(frame))] ^= 1 << rng.randrange(8)
            yield bytes(frame)
        else:
            frame = rng.choice(golden)
            yield frame[: rng.randrange(len(frame))]


class TestRandomFrames:
    """Test cases for seeded random frames."""

    def test_every_type_covered(self) -> None:
        """Test the generator builds every message type."""
        assert set(RANDOM_MESSAGES) == set(MessageType)

    @pytest.mark.parametrize(
        "count", [300, pytest.param(20000, marks=pytest.mark.slow)]
    )
    def test_round_trip(self, count: int) -> None:
        """Test random messages of every type decode to what was encoded."""
        rng = random.Random(7311)
        kinds = list(MessageType)
        for i in range(count):
            msg = RANDOM_MESSAGES[kinds[i % len(kinds)]](rng)
            assert decode_frame(encode_frame(msg)) == msg

    @pytest.mark.parametrize(
        "count", [2000, pytest.param(100000, marks=pytest.mark.slow)]
    )
    def test_garbage_only_raises_protocol_error(self, count: int) -> None:
        """Test random and damaged frames decode or raise ProtocolError only."""
        failures = 0
        for data in _mutations(random.Random(1), count):
            try:
                decode_frame(data)
            except ProtocolError:
                failures += 1
        assert failures > count // 2


class TestErrorMapping:
    """Test cases for exception and ERROR frame mapping."""

    @pytest.mark.parametrize(
        "exc",
        [
            UnsupportedVersion(2),
            NotFound("ab" * 32),
            DigestMismatch("aa" * 32, "bb" * 32),
            DanglingDigest(["cc" * 32, "dd" * 32]),
            InvalidManifest("bad coverage"),
            BatchTooLarge(600, 512),
            StorageError("disk full"),
            ProtocolError("nonsense"),
        ],
    )
    def test_round_trip(self, exc: Exception) -> None:
        """Test typed errors survive the trip through an ERROR frame."""
        back = remote_exception(decode_frame(encode_frame(error_frame(exc))))
        assert type(back) is type(exc)
        assert str(back) == str(exc)

    def test_unexpected_exception_is_internal(self) -> None:
        """Test other exceptions map to INTERNAL and come back as RemoteError."""
        err = error_frame(KeyError("boom"))
        assert err.code == ErrorCode.INTERNAL
        back = remote_exception(err)
        assert isinstance(back, RemoteError)
        assert back.code == ErrorCode.INTERNAL

    def test_garbled_detail(self) -> None:
        """Test unparseable error details fall back to RemoteError."""
        assert isinstance(
            remote_exception(Error(ErrorCode.BATCH_TOO_LARGE, "x")), RemoteError
        )

    def test_long_text_cut_on_character_boundary(self) -> None:
        """Test an oversized non-ASCII text is shortened to whole characters."""
        text = "€" * 30000
        back = decode_frame(encode_frame(Error(ErrorCode.STORAGE_ERROR, text)))
        assert len(back.text.encode("utf-8")) <= 0xFFFF
        assert back.text == "€" * (0xFFFF // 3)

    def test_many_dangling_digests(self) -> None:
        """Test a huge dangling list stays typed and counts what was cut."""
        missing = [f"{i:064x}" for i in range(3000)]
        err = error_frame(DanglingDigest(missing))
        assert err.text.endswith(f" +{3000 - MAX_LISTED_DIGESTS}")
        back = remote_exception(decode_frame(encode_frame(err)))
        assert isinstance(back, DanglingDigest)
        assert back.missing == missing[:MAX_LISTED_DIGESTS]
        assert back.unlisted == 3000 - MAX_LISTED_DIGESTS
        assert str(back) == str(DanglingDigest(missing))


class TestEndpoints:
    """Test cases for endpoint parsing."""

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("lab:7400", ("lab", 7400)),
            ("lab", ("lab", 7311)),
            ("10.0.0.1:1", ("10.0.0.1", 1)),
            ("[::1]:9000", ("::1", 9000)),
            ("[::1]", ("::1", 7311)),
        ],
    )
    def test_valid(self, text: str, expected) -> None:
        """Test host and port are split, defaulting the port."""
        assert parse_endpoint(text) == expected

    @pytest.mark.parametrize("text", ["", ":7311", "lab:0", "lab:70000", "lab:x"])
    def test_invalid(self, text: str) -> None:
        """Test malformed endpoints are configuration errors."""
        with pytest.raises(ConfigError):
            parse_endpoint(text)


class TestFramedConnection:
    """Test cases for framed socket I/O."""

    def test_send_and_receive(self) -> None:
        """Test frames cross a socket pair intact, byte counts included."""
        a, b = socket.socketpair()
        left, right = FramedConnection(a), FramedConnection(b)
        try:
            msg = Put(content_hash(b"x" * 5000), b"x" * 5000)
            left.send(msg)
            assert right.recv() == msg
            assert left.bytes_sent == right.bytes_received == HEADER.size + 5040
        finally:
            left.close()
            right.close()

    def test_clean_close(self) -> None:
        """Test a close between frames reads as None."""
        a, b = socket.socketpair()
        a.close()
        assert FramedConnection(b).recv() is None
        b.close()

    def test_close_mid_frame(self) -> None:
        """Test a close inside a frame raises FrameTooShort."""
        a, b = socket.socketpair()
        a.sendall(encode_frame(Data(b"x" * 100))[:50])
        a.close()
        with pytest.raises(FrameTooShort):
            FramedConnection(b).recv()
        b.close()


class TestProtocolClient:
    """Test cases for client retry behaviour."""

    def test_invalid_attempts(self) -> None:
        """Test at least one attempt is required."""
        with pytest.raises(ConfigError):
            ProtocolClient("lab:7311", attempts=0)

    @patch("src.dedupacq.tools.wire.time.sleep")
    @patch("src.dedupacq.tools.wire.socket.create_connection")
    def test_idempotent_retried(self, mock_connect, mock_sleep) -> None:
        """Test idempotent requests are retried up to the attempt budget."""
        mock_connect.side_effect = ConnectionRefusedError("refused")
        client = ProtocolClient("lab:7311", attempts=3)
        with pytest.raises(Unreachable):
            client.call(Get(content_hash(b"x")))
        assert mock_connect.call_count == 3
        assert mock_sleep.call_count == 2

    @patch("src.dedupacq.tools.wire.socket.create_connection")
    def test_commit_not_retried(self, mock_connect) -> None:
        """Test manifest commits are attempted once only."""
        mock_connect.side_effect = ConnectionRefusedError("refused")
        client = ProtocolClient("lab:7311", attempts=3)
        with pytest.raises(Unreachable):
            client.call(Mock(TYPE=MessageType.MANIFEST_COMMIT))
        assert mock_connect.call_count == 1


def _scripted_peer(sock: socket.socket, replies) -> threading.Thread:
    """Answer each received frame with the next reply, then close.

    A ``bytes`` reply is sent as is, for frames the encoder would refuse.
    """

    def run() -> None:
        conn = FramedConnection(sock)
        for reply in replies:
            if conn.recv() is None:
                break
            if isinstance(reply, bytes):
                sock.sendall(reply)
            else:
                conn.send(reply)
        conn.close()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread


class TestClientCall:
    """Test cases for single request/response exchanges."""

    @patch("src.dedupacq.tools.wire.socket.create_connection")
    def test_handshake_then_reply(self, mock_connect) -> None:
        """Test the reply to the request is returned after the handshake."""
        a, b = socket.socketpair()
        mock_connect.return_value = a
        peer = _scripted_peer(b, [HelloAck(1), StatsResp(3, 500, 300, 2)])

        assert client_call("lab:7311", StatsReq()) == StatsResp(3, 500, 300, 2)
        peer.join(timeout=5)
        mock_connect.assert_called_once_with(("lab", 7311), timeout=30.0)

    @patch("src.dedupacq.tools.wire.socket.create_connection")
    def test_rejected_handshake(self, mock_connect) -> None:
        """Test a version rejection surfaces as UnsupportedVersion."""
        a, b = socket.socketpair()
        mock_connect.return_value = a
        rejection = error_frame(UnsupportedVersion(1))
        peer = _scripted_peer(b, [rejection])

        with pytest.raises(UnsupportedVersion):
            client_call("lab:7311", StatsReq())
        peer.join(timeout=5)

    @patch("src.dedupacq.tools.wire.socket.create_connection")
    def test_bad_reply_drops_connection(self, mock_connect) -> None:
        """Test an undecodable reply closes the connection before the next call."""
        first, first_peer = socket.socketpair()
        second, second_peer = socket.socketpair()
        mock_connect.side_effect = [first, second]
        junk = HEADER.pack(b"JUNK", MessageType.DATA, 0)
        peers = [
            _scripted_peer(first_peer, [HelloAck(1), junk]),
            _scripted_peer(second_peer, [HelloAck(1), StatsResp(1, 2, 3, 4)]),
        ]

        with ProtocolClient("lab:7311") as client:
            with pytest.raises(ProtocolError, match="magic"):
                client.call(StatsReq())
            assert client._conn is None
            assert client.call(StatsReq()) == StatsResp(1, 2, 3, 4)
        assert mock_connect.call_count == 2
        for peer in peers:
            peer.join(timeout=5)
