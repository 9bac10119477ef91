"""dedup-acq: deduplicated forensic acquisition and reconstruction of disk images."""

__version__ = "0.1.0"
