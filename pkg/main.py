"""Command-line entry point."""

import sys

from planevio.cli.app import main

if __name__ == "__main__":
    sys.exit(main())
