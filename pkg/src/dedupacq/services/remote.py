"""Store access over the wire protocol."""

import logging
import queue
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import (
    Iterable,
    Iterator,
    List,
    Optional,
    Protocol,
    Sequence,
    Type,
    TypeVar,
    Union,
)

from ..errors import ConfigError, NotFound, ProtocolError
from ..models import Digest, Manifest, StoreStats, manifest_from_bytes
from ..models.image import manifest_canonical_bytes
from ..tools.wire import (
    DEFAULT_ATTEMPTS,
    DEFAULT_TIMEOUT,
    Check,
    CheckResp,
    Data,
    Get,
    GetManifest,
    ManifestAck,
    ManifestCommit,
    ManifestDoc,
    Message,
    ProtocolClient,
    Put,
    PutAck,
    PutStatus,
    StatsReq,
    StatsResp,
    parse_endpoint,
)
from .store import MAX_CHECK_BATCH, EvidenceStore

logger = logging.getLogger(__name__)

Payload = Union[bytes, Iterable[bytes]]
R = TypeVar("R")


class StoreBackend(Protocol):
    """What acquisition and reconstruction need from a store, local or remote."""

    @property
    def max_check_batch(self) -> int: ...

    def has_digests(self, batch: Sequence[Digest]) -> List[bool]: ...

    def put_artifact(self, digest: Digest, payload: Payload) -> PutStatus: ...

    def get_artifact(self, digest: Digest) -> bytes: ...

    def commit_manifest(self, m: Manifest) -> str: ...

    def get_manifest(self, manifest_id: str) -> Manifest: ...

    def store_stats(self) -> StoreStats: ...


class LinkThrottle:
    """Caps payload throughput at ``mbit`` megabits per second across threads."""

    def __init__(self, mbit: float):
        if mbit <= 0:
            raise ConfigError(f"link_mbit must be positive, got {mbit}")
        self.bytes_per_second = mbit * 1_000_000 / 8
        self._lock = threading.Lock()
        self._free_at = time.monotonic()

    def consume(self, size: int) -> None:
        with self._lock:
            now = time.monotonic()
            start = max(now, self._free_at)
            self._free_at = start + size / self.bytes_per_second
            wait = self._free_at - now
        if wait > 0:
            time.sleep(wait)


class RemoteStore:
    """The store interface over a pool of protocol connections.

    Connections are opened lazily and reused; each request borrows one
    connection for its round trip, so up to ``connections`` requests run in
    parallel.
    """

    def __init__(
        self,
        endpoint: str,
        connections: int = 4,
        timeout: float = DEFAULT_TIMEOUT,
        attempts: int = DEFAULT_ATTEMPTS,
        link_mbit: Optional[float] = None,
        max_check_batch: int = MAX_CHECK_BATCH,
    ):
        if connections < 1:
            raise ConfigError("connections must be >= 1")
        self.endpoint = parse_endpoint(endpoint)
        self.timeout = timeout
        self.attempts = attempts
        self._max_check_batch = max_check_batch
        self.throttle = LinkThrottle(link_mbit) if link_mbit else None
        self._pool: "queue.LifoQueue[ProtocolClient]" = queue.LifoQueue()
        for _ in range(connections):
            self._pool.put(ProtocolClient(self.endpoint, timeout, attempts))
        self._clients = list(self._pool.queue)

    @property
    def max_check_batch(self) -> int:
        return self._max_check_batch

    @contextmanager
    def _client(self) -> Iterator[ProtocolClient]:
        client = self._pool.get()
        try:
            yield client
        finally:
            self._pool.put(client)

    def _request(self, msg: Message, kind: Type[R]) -> R:
        with self._client() as client:
            reply = client.call(msg)
        if not isinstance(reply, kind):
            raise ProtocolError(
                f"{msg.TYPE.name} answered with {type(reply).__name__}, "
                f"expected {kind.__name__}"
            )
        return reply

    def has_digests(self, batch: Sequence[Digest]) -> List[bool]:
        reply = self._request(Check(tuple(batch)), CheckResp)
        return reply.flags(len(batch))

    def put_artifact(self, digest: Digest, payload: Payload) -> PutStatus:
        data = payload if isinstance(payload, bytes) else b"".join(payload)
        if self.throttle is not None:
            self.throttle.consume(len(data))
        reply = self._request(Put(digest, data), PutAck)
        return reply.status

    def get_artifact(self, digest: Digest) -> bytes:
        reply = self._request(Get(digest), Data)
        if self.throttle is not None:
            self.throttle.consume(len(reply.payload))
        return reply.payload

    def commit_manifest(self, m: Manifest) -> str:
        reply = self._request(ManifestCommit(manifest_canonical_bytes(m)), ManifestAck)
        return reply.manifest_id

    def get_manifest_bytes(self, manifest_id: str) -> bytes:
        try:
            Digest.from_hex(manifest_id)
        except ValueError as e:
            raise NotFound(f"manifest {manifest_id}") from e
        reply = self._request(GetManifest(manifest_id.lower()), ManifestDoc)
        return reply.document

    def get_manifest(self, manifest_id: str) -> Manifest:
        return manifest_from_bytes(
            self.get_manifest_bytes(manifest_id), manifest_id=manifest_id.lower()
        )

    def store_stats(self) -> StoreStats:
        reply = self._request(StatsReq(), StatsResp)
        return StoreStats(
            unique_artifacts=reply.unique_artifacts,
            logical_bytes=reply.logical_bytes,
            physical_bytes=reply.physical_bytes,
            manifest_count=reply.manifest_count,
        )

    def close(self) -> None:
        for client in self._clients:
            client.close()
        logger.debug(
            "Closed %d connections to %s:%d", len(self._clients), *self.endpoint
        )

    def __enter__(self) -> "RemoteStore":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


@contextmanager
def open_store(
    endpoint: Optional[str] = None,
    root: Optional[Union[str, Path]] = None,
    connections: int = 4,
    link_mbit: Optional[float] = None,
) -> Iterator[StoreBackend]:
    """A remote store for ``endpoint`` or a local one at ``root``; never both."""
    if (endpoint is None) == (root is None):
        raise ConfigError("Give exactly one of a server endpoint or a store root")
    if root is not None:
        if link_mbit:
            raise ConfigError("A link throttle only applies to a server endpoint")
        yield EvidenceStore(Path(root))
        return
    assert endpoint is not None
    with RemoteStore(endpoint, connections, link_mbit=link_mbit) as remote:
        yield remote
