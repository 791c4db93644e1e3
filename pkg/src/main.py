#!/usr/bin/env python3
"""Command-line entry point for seqplace."""

import logging
import os
import sys

from src.cli import run


def main():
    """Configure logging from SEQPLACE_LOG and run the requested subcommand."""
    level = os.environ.get("SEQPLACE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
