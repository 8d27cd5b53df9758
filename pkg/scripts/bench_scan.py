#!/usr/bin/env python3
"""Benchmark the selective-scan kernel and report the log-log runtime slope.

A slope near 1.0 confirms linear complexity in the sequence length.
"""

import argparse
import sys

from irdet.cli import main


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lengths", default="1024,2048,4096,8192,16384,32768,65536")
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--out-csv", default="bench_scan.csv")
    args = parser.parse_args()
    sys.exit(
        main(
            [
                "bench",
                "--lengths", args.lengths,
                "--repeats", str(args.repeats),
                "--out-csv", args.out_csv,
            ]
        )
    )
