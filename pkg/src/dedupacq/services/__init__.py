"""Services module for dedup-acq."""

from .acquisition import AcquisitionConfig, acquire, benchmark, inspect
from .reconstruction import (
    ReconstructionConfig,
    extract_artifact,
    reconstruct,
    verify_image,
)
from .remote import RemoteStore, StoreBackend, open_store
from .server import EvidenceServer, ServerConfig, run_session, serve
from .store import EvidenceStore, StoreConfig

__all__ = [
    "AcquisitionConfig",
    "EvidenceServer",
    "EvidenceStore",
    "ReconstructionConfig",
    "RemoteStore",
    "ServerConfig",
    "StoreBackend",
    "StoreConfig",
    "acquire",
    "benchmark",
    "extract_artifact",
    "inspect",
    "open_store",
    "reconstruct",
    "run_session",
    "serve",
    "verify_image",
]
