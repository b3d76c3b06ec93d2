#!/usr/bin/env python3

# stdlib
import sys

# project
from bias_rescore.cli import main


if __name__ == "__main__":
    sys.exit(main())
