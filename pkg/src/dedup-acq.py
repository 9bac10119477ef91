#!/usr/bin/env python3
"""Entry point for the dedup-acq application."""

import sys

from dedupacq.core import main

if __name__ == "__main__":
    sys.exit(main())
