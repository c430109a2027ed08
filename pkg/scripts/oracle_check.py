"""Run every oracle cross-check and exit non-zero on a mismatch."""
import sys

from constrained_defer.cli import main

if __name__ == "__main__":
    sys.exit(main(["oracle-check", *sys.argv[1:]]))
