"""Readable byte sources: raw image files and in-memory buffers."""

import os
import threading
from pathlib import Path
from typing import BinaryIO, Optional, Protocol, Union

from ..errors import ExtentOutOfBounds


class ByteSource(Protocol):
    """Random-access, read-only view of an image."""

    @property
    def size(self) -> int: ...

    def read_at(self, offset: int, length: int) -> bytes: ...


class ImageSource:
    """A raw image file opened read-only.

    Reads are positional and safe to issue from several threads. Every byte
    returned is added to ``bytes_read``.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fp: Optional[BinaryIO] = open(self.path, "rb")
        self._size = os.fstat(self._fp.fileno()).st_size
        self._lock = threading.Lock()
        self.bytes_read = 0

    @property
    def size(self) -> int:
        return self._size

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > self._size:
            raise ExtentOutOfBounds(offset, length, self._size)
        if self._fp is None:
            raise ValueError(f"{self.path} is closed")
        data = os.pread(self._fp.fileno(), length, offset)
        # pread may return short reads on some platforms
        while len(data) < length:
            more = os.pread(self._fp.fileno(), length - len(data), offset + len(data))
            if not more:
                raise ExtentOutOfBounds(offset, length, self._size)
            data += more
        with self._lock:
            self.bytes_read += len(data)
        return data

    def close(self) -> None:
        if self._fp is not None:
            self._fp.close()
            self._fp = None

    def __enter__(self) -> "ImageSource":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


class BytesSource:
    """An in-memory image."""

    def __init__(self, data: bytes):
        self._data = bytes(data)
        self.bytes_read = 0

    @property
    def size(self) -> int:
        return len(self._data)

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0 or offset + length > len(self._data):
            raise ExtentOutOfBounds(offset, length, len(self._data))
        self.bytes_read += length
        return self._data[offset : offset + length]
