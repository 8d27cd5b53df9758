#!/usr/bin/env python3
"""Run every finite-difference gradient suite (ops, both blocks, tiny model)."""

import sys

from irdet.cli import main


if __name__ == "__main__":
    status = 0
    for scope in ("ops", "dse", "lasea", "model"):
        print(f"== scope {scope} ==")
        status |= main(["gradcheck", "--scope", scope])
    sys.exit(status)
