"""Module entry point: python3 -m sparse_stgcn <command> ..."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
