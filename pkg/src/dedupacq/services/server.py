"""Evidence store server: one protocol session per TCP connection."""

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

from ..errors import (
    ConfigError,
    DigestMismatch,
    ProtocolError,
    StoreError,
    UnsupportedVersion,
)
from ..tools.wire import (
    DEFAULT_PORT,
    PROTOCOL_VERSION,
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
    Message,
    Put,
    PutAck,
    PutStatus,
    StatsReq,
    StatsResp,
    error_frame,
    parse_endpoint,
)
from .store import MAX_CHECK_BATCH, EvidenceStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    root: Path
    listen: str = f"0.0.0.0:{DEFAULT_PORT}"
    max_check_batch: int = MAX_CHECK_BATCH

    def __post_init__(self) -> None:
        parse_endpoint(self.listen)
        if not self.root:
            raise ConfigError("A store root is required")


@dataclass
class SessionSummary:
    peer: str
    requests: int = 0
    errors: int = 0
    stored: int = 0
    already_present: int = 0
    commits: List[str] = field(default_factory=list)
    bytes_received: int = 0
    bytes_sent: int = 0
    outcome: str = "closed"


class _Violation(Exception):
    """A request that ends the session after its ERROR reply."""

    def __init__(self, reply: Error):
        super().__init__(reply.text)
        self.reply = reply


def _dispatch(msg: Message, store: EvidenceStore, summary: SessionSummary) -> Message:
    if isinstance(msg, Check):
        return CheckResp.from_flags(store.has_digests(list(msg.digests)))
    if isinstance(msg, Put):
        try:
            status = store.put_artifact(msg.digest, msg.payload)
        except DigestMismatch as e:
            logger.warning("%s: rejected upload: %s", summary.peer, e)
            return PutAck(PutStatus.DIGEST_MISMATCH)
        if status is PutStatus.STORED:
            summary.stored += 1
        else:
            summary.already_present += 1
        return PutAck(status)
    if isinstance(msg, ManifestCommit):
        manifest_id = store.commit_manifest_bytes(msg.document)
        summary.commits.append(manifest_id)
        return ManifestAck(manifest_id)
    if isinstance(msg, Get):
        return Data(store.get_artifact(msg.digest))
    if isinstance(msg, GetManifest):
        return ManifestDoc(store.get_manifest_bytes(msg.manifest_id))
    if isinstance(msg, StatsReq):
        stats = store.store_stats()
        return StatsResp(
            stats.unique_artifacts,
            stats.logical_bytes,
            stats.physical_bytes,
            stats.manifest_count,
        )
    raise _Violation(
        Error(ErrorCode.UNEXPECTED_MESSAGE, f"{msg.TYPE.name} is not a request")
    )


def run_session(
    conn: FramedConnection, store: EvidenceStore, peer: str = "-"
) -> SessionSummary:
    """Serve one connection until the client closes it.

    Every request gets exactly one reply. Store errors are reported and the
    session continues; protocol violations are reported and end it.
    """
    summary = SessionSummary(peer)
    try:
        first = conn.recv()
        if first is None:
            return summary
        if not isinstance(first, Hello):
            raise _Violation(Error(ErrorCode.UNEXPECTED_MESSAGE, "expected HELLO"))
        if first.version != PROTOCOL_VERSION:
            raise _Violation(error_frame(UnsupportedVersion(first.version)))
        conn.send(HelloAck(PROTOCOL_VERSION))
        logger.info("%s: session open", peer)

        while True:
            try:
                msg = conn.recv()
            except ProtocolError as e:
                raise _Violation(error_frame(e)) from e
            if msg is None:
                return summary
            summary.requests += 1
            try:
                reply = _dispatch(msg, store, summary)
            except StoreError as e:
                summary.errors += 1
                reply = error_frame(e)
            except (_Violation, OSError):
                raise
            except Exception as e:
                logger.exception("%s: %s failed", peer, msg.TYPE.name)
                summary.errors += 1
                reply = error_frame(e)
            conn.send(reply)
    except _Violation as v:
        summary.errors += 1
        summary.outcome = "protocol_error"
        logger.warning("%s: closing session: %s", peer, v.reply.text)
        try:
            conn.send(v.reply)
        except OSError:
            pass
        return summary
    except OSError as e:
        summary.outcome = "dropped"
        logger.info("%s: connection lost: %s", peer, e)
        return summary
    finally:
        summary.bytes_received = conn.bytes_received
        summary.bytes_sent = conn.bytes_sent
        conn.close()
        logger.info(
            "%s: session %s after %d requests (%d stored, %d errors)",
            peer,
            summary.outcome,
            summary.requests,
            summary.stored,
            summary.errors,
        )


class _SessionHandler(socketserver.BaseRequestHandler):
    server: "EvidenceServer"

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peer = "%s:%d" % self.client_address[:2]
        run_session(FramedConnection(sock), self.server.store, peer)


class EvidenceServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server; every connection runs its own session."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: Tuple[str, int], store: EvidenceStore):
        super().__init__(address, _SessionHandler)
        self.store = store

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def start_server(
    store: EvidenceStore, host: str = "127.0.0.1", port: int = 0
) -> Tuple[EvidenceServer, threading.Thread]:
    """Serve from a background thread; port 0 picks a free port."""
    server = EvidenceServer((host, port), store)
    thread = threading.Thread(
        target=server.serve_forever, name="evidence-server", daemon=True
    )
    thread.start()
    logger.info("Serving %s on %s", store.root, server.endpoint)
    return server, thread


def stop_server(
    server: EvidenceServer, thread: Optional[threading.Thread] = None
) -> None:
    server.shutdown()
    server.server_close()
    if thread is not None:
        thread.join(timeout=5)


def serve(
    root: Union[str, Path],
    listen: str = f"0.0.0.0:{DEFAULT_PORT}",
    max_check_batch: int = MAX_CHECK_BATCH,
) -> None:
    """Run the server in the foreground until interrupted."""
    config = ServerConfig(Path(root), listen, max_check_batch)
    store = EvidenceStore(config.root, config.max_check_batch)
    with EvidenceServer(parse_endpoint(config.listen), store) as server:
        logger.info("Serving %s on %s", store.root, server.endpoint)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            logger.info("Interrupted; shutting down")
